#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmtr/affinity.hpp"
#include "gmtr/frontend.hpp"

namespace gmtr {

enum class PairLayout { Independent, Same, Rotated };

PairLayout layout_from_string(const std::string& s);
std::string to_string(PairLayout l);

struct PairGenConfig {
  int image_size = 64;
  int channels = 1;
  int patch_size = 16;
  int n = 5;
  double noise = 0.0;  // pixel noise std applied to image B
  PairLayout layout = PairLayout::Independent;
  double rotation = 0.0;           // radians, Rotated layout
  double jitter = 0.0;             // pixel jitter of B keypoints, Same layout
  bool duplicate_patterns = false; // render patterns in appearance-identical pairs
};

struct SyntheticPair {
  ImageGrid a, b;
  KeypointSet kps_a, kps_b;
  Mat x_gt;  // n x n permutation; keypoint i of A marks the same pattern as X_gt(i) of B
  std::uint64_t seed = 0;
};

// Renders n value-distinct stamps at non-overlapping positions in A and
// re-places them in B per the layout, with the list order permuted.
// Deterministic per seed; throws if placement fails after 1000 tries.
SyntheticPair gen_pattern_pair(std::uint64_t seed, const PairGenConfig& cfg);

// Wraparound translation of pixel content by (dx, dy).
ImageGrid roll_image(const ImageGrid& img, int dx, int dy);

// Separability certificate: Hungarian on L2 distances between raw pixel
// crops; 1.0 at zero noise by construction.
double crop_match_accuracy(const SyntheticPair& pair);

struct QapGenConfig {
  int n = 5;
  double signal = 1.0;       // planted node-affinity boost
  double noise = 0.25;       // node-affinity noise scale (uniform [0, noise])
  double edge_signal = 0.6;  // planted edge-pair boost
  double edge_noise = 0.15;
  double jitter = 0.03;      // coordinate jitter between the two graphs
  int max_attempts = 64;
};

struct PlantedQap {
  AffinityInstance inst;
  std::vector<int> planted;  // row -> col, the verified brute-force optimum
  int attempts = 1;
};

// Samples instances with a planted assignment and keeps only those whose
// planted permutation is the verified unique brute-force optimum; throws
// with advice once max_attempts consecutive samples fail.
PlantedQap gen_qap_instance(std::uint64_t seed, const QapGenConfig& cfg);

// ---- datasets on disk -------------------------------------------------------
// A dataset directory holds one file set per instance plus index.json
// (generator parameters and per-instance seeds/splits), so the whole
// dataset can be regenerated from the index alone.

struct PairDataset {
  PairGenConfig cfg;
  std::vector<SyntheticPair> train, eval;
};

struct QapDataset {
  QapGenConfig cfg;
  std::vector<PlantedQap> train, eval;
};

void write_pair_dataset(const std::string& dir, std::uint64_t base_seed, int train_count,
                        int eval_count, const PairGenConfig& cfg);
PairDataset load_pair_dataset(const std::string& dir);

void write_qap_dataset(const std::string& dir, std::uint64_t base_seed, int train_count,
                       int eval_count, const QapGenConfig& cfg);
QapDataset load_qap_dataset(const std::string& dir);

// Generate in memory (used by tests and the acceptance suite).
PairDataset gen_pair_dataset(std::uint64_t base_seed, int train_count, int eval_count,
                             const PairGenConfig& cfg);
QapDataset gen_qap_dataset(std::uint64_t base_seed, int train_count, int eval_count,
                           const QapGenConfig& cfg);

std::string dataset_kind(const std::string& dir);  // "pairs" | "qap" from index.json

}  // namespace gmtr
