#pragma once

#include <string>
#include <vector>

#include "gmtr/affinity.hpp"

namespace gmtr {

enum class BackendKind { Transformer, Gcn, None };

BackendKind backend_from_string(const std::string& s);
std::string to_string(BackendKind k);

struct SolverConfig {
  BackendKind backend = BackendKind::Transformer;
  int dim = 16;  // node-lift width d0
  int layers = 3;
  std::vector<int> heads = {1, 1, 2};  // last entry: final multi-head layer
  int edge_dim = 8;
  bool sinkhorn_channel = false;  // append Sinkhorn(K_p) as one extra channel
  int sinkhorn_iters = 50;
  double sinkhorn_tau = 0.05;

  int width() const { return dim + (sinkhorn_channel ? 1 : 0); }
  int final_width() const;  // width of z^final, and of W_proj
  void validate() const;
};

struct SolverLayerParams {
  Param *w_q = nullptr, *w_k = nullptr, *w_v = nullptr;  // w x w
  Param* w_e = nullptr;                                  // d_e x w
  Param *ln_g = nullptr, *ln_b = nullptr;                // 1 x w
  int heads = 1;
};

struct SolverParams {
  std::vector<SolverLayerParams> layers;  // transformer backend
  std::vector<Param*> gcn_w;              // gcn backend, w x w each
  Param* w_proj = nullptr;                // final_width x 1
};

SolverParams make_solver_params(ParamStore& store, const std::string& group,
                                const SolverConfig& cfg, Rng& rng);

// Differentiable Sinkhorn on raw scores: exp(scores / tau) followed by
// `iters` rounds of row normalization then column normalization (column
// target n1/n2; 1 when square). Deviations, when requested, record the
// L1 distance of both marginals from their targets after each round.
// Throws on non-finite scores.
ad::Var sinkhorn(Graph& g, ad::Var scores, int iters, double tau,
                 std::vector<double>* deviations = nullptr);
Mat sinkhorn_value(const Mat& scores, int iters, double tau,
                   std::vector<double>* deviations = nullptr);

// One association-graph attention layer: softmax over the masked
// neighborhood (self-loops included) of q_i (k_j + e_ij)^T / sqrt(d),
// aggregation of v_j + e_ij, then LayerNorm + ReLU unless this is the
// final layer. Multi-head (final layer only): the computation runs on
// d/h column slices and the head outputs are averaged.
ad::Var transformer_conv_layer(Graph& g, ad::Var z, ad::Var edge_scal, const Mat& adj_self,
                               const SolverLayerParams& lp, const AffinityParams& ap,
                               bool final_layer);

ad::Var project_scores(Graph& g, ad::Var z_final, Param& w_proj, int n1, int n2);

// Full backend pass: association node features -> backend layers ->
// FC projection -> Sinkhorn. Returns the soft matching, n1 x n2.
ad::Var solver_forward(Graph& g, ad::Var kp, ad::Var off, const Mat& adj_self,
                       const SolverConfig& cfg, const SolverParams& sp, const AffinityParams& ap);

struct MatchingResult {
  Mat soft;  // n1 x n2, rows sum to 1
  Mat hard;  // binary partial permutation
  std::vector<int> assignment;
  int sinkhorn_iters = 0;
  double objective = 0.0;  // vec(X)^T K vec(X) of the hard assignment
};

// Hungarian on -log(soft + 1e-12).
MatchingResult discretize_soft(const Mat& soft, const AffinityInstance& inst);

MatchingResult solve(const AffinityInstance& inst, const SolverConfig& cfg, SolverParams& sp,
                     AffinityParams& ap);

// Model-free reference path: scores = K_p directly into Sinkhorn.
MatchingResult solve_passthrough(const AffinityInstance& inst, int iters, double tau);

}  // namespace gmtr
