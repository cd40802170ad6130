#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "gmtr/gradcheck.hpp"
#include "gmtr/model.hpp"

namespace gmtr {

// Permutation binary cross-entropy, averaged over all n1*n2 cells; m is
// clamped to [eps, 1-eps]. The per-cell terms are accumulated in sorted
// order, so the value is invariant under transposing both arguments.
// Throws when X_gt has entries other than 0/1.
double bce_permutation_loss(const Mat& m, const Mat& x_gt, double eps = 1e-12);

// Tape-side counterpart used for training.
ad::Var bce_permutation_loss(Graph& g, ad::Var m, const Mat& x_gt, double eps = 1e-12);

struct TrainConfig {
  double lr_frontend = 1e-4;
  double lr_solver = 1e-3;
  int epochs = 80;
  int batch_size = 4;
  std::uint64_t seed = 7;
  double clamp_eps = 1e-12;
  int early_stop_patience = 50;  // epochs without eval-accuracy improvement
  int threads = 1;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double eval_acc = 0.0;
  long wall_ms = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> log;
  double final_eval_acc = 0.0;
  double best_eval_acc = 0.0;
  int best_epoch = -1;
};

// One JSON object per epoch: {"epoch":..,"train_loss":..,"eval_acc":..,"wall_ms":..}.
std::string metrics_jsonl(const std::vector<EpochMetrics>& log);
// The same log with the (non-reproducible) wall_ms field dropped; this is
// what determinism comparisons hash.
std::string metrics_jsonl_canonical(const std::vector<EpochMetrics>& log);

using Dataset = std::variant<PairDataset, QapDataset>;

// Adam (beta1 0.9, beta2 0.999, eps 1e-8) over the two learning-rate
// groups; batches averaged; deterministic given cfg.seed. Divergence
// (non-finite loss) raises DivergenceError with epoch and batch index.
TrainResult train(GmtrModel& model, const Dataset& data, const TrainConfig& cfg,
                  std::ostream* metrics_out = nullptr);

struct EvalResult {
  std::vector<double> per_instance_acc;
  std::vector<double> objective_ratio;  // QAP objective vs brute force (n1 <= 8 only)
  double mean_acc = 0.0;
  double mean_objective_ratio = 0.0;  // over instances where defined
};

EvalResult evaluate(const GmtrModel& model, const Dataset& data, bool eval_split = true,
                    int threads = 1);

// Finite-difference audit of the full loss on one instance; per-group
// maxima come from GradCheckReport. Frozen groups are reported skipped.
GradCheckReport grad_audit(GmtrModel& model, const Dataset& data, double h = 1e-6);

}  // namespace gmtr
