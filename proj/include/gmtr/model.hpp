#pragma once

#include <memory>

#include "gmtr/frontend.hpp"
#include "gmtr/solver.hpp"
#include "gmtr/syndata.hpp"

namespace gmtr {

enum class TrainMode { EndToEnd, BackendOnly };

TrainMode mode_from_string(const std::string& s);
std::string to_string(TrainMode m);

struct ModelConfig {
  TrainMode mode = TrainMode::EndToEnd;
  FrontendConfig frontend;
  SolverConfig solver;
  GraphPolicy graph_policy = GraphPolicy::Delaunay;
  int image_size = 64;
  int channels = 1;
  int patch_size = 16;

  int raw_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  int patch_len() const { return channels * patch_size * patch_size; }
};

// The assembled pipeline: QueryTrans frontend, affinity construction and
// the graph-transformer solver, sharing one parameter store.
class GmtrModel {
 public:
  ModelConfig cfg;
  ParamStore store;
  FrontendParams frontend;  // unset in backend-only mode
  AffinityParams affinity;  // metrics unset in backend-only mode
  SolverParams solver;

  static std::unique_ptr<GmtrModel> build(const ModelConfig& cfg, std::uint64_t seed);

  GmtrModel(const GmtrModel&) = delete;
  GmtrModel& operator=(const GmtrModel&) = delete;

  bool has_frontend() const { return cfg.mode == TrainMode::EndToEnd; }

  // Soft matching of a synthetic pair, end to end on the tape.
  ad::Var pair_soft(Graph& g, const SyntheticPair& pair) const;
  // Backend pass over a stored affinity instance.
  ad::Var instance_soft(Graph& g, const AffinityInstance& inst) const;

  // No-grad convenience wrappers with Hungarian discretization.
  MatchingResult match_pair(const SyntheticPair& pair) const;
  MatchingResult solve_instance(const AffinityInstance& inst) const;

  // Frozen affinity instance of a pair (for QAP-objective reporting).
  AffinityInstance pair_affinity(const SyntheticPair& pair) const;

 private:
  GmtrModel() = default;
};

Mat adjacency_from_support(int nodes, const std::vector<std::pair<int, int>>& support);

}  // namespace gmtr
