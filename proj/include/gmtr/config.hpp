#pragma once

#include <cstdint>
#include <string>

#include "gmtr/model.hpp"
#include "gmtr/syndata.hpp"
#include "gmtr/training.hpp"

namespace gmtr {

// Flat key=value experiment configuration. Unknown keys are rejected;
// serialize() emits every key in a fixed order so resolved configs are
// byte-reproducible.
struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::string mode = "end_to_end";  // end_to_end | backend_only
  std::string backend = "transformer";
  std::string graph = "delaunay";  // delaunay | complete

  int image_size = 64, channels = 1, patch_size = 16;
  int frontend_dim = 32, frontend_layers = 2, mlp_ratio = 4;
  bool positional = true, filter = true, cls_visible = true;
  int cross_layers = 1, bilinear_layers = 1;

  int solver_dim = 16, solver_layers = 3, edge_dim = 8;
  std::string heads = "1,1,2";
  std::string sinkhorn_channel = "auto";  // auto | true | false (auto: on for gcn)
  int sinkhorn_iters = 50;
  double sinkhorn_tau = 0.05;

  double lr_frontend = 1e-4, lr_solver = 1e-3;
  int epochs = 80, batch_size = 4, patience = 50, threads = 1;
  double clamp_eps = 1e-12;

  std::string kind = "pairs";  // pairs | qap
  int n = 5, count = 200, eval_count = 50;
  double noise = 0.0;
  std::string layout = "independent";
  double rotation = 0.0, jitter = 0.0;
  bool duplicates = false;
  double signal = 1.0, qap_noise = 0.25, edge_signal = 0.6, edge_noise = 0.15;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  std::string serialize() const;
  void load_file(const std::string& path);
  void save_file(const std::string& path) const;

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  PairGenConfig pair_config() const;
  QapGenConfig qap_config() const;
};

}  // namespace gmtr
