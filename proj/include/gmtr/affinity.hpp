#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gmtr/params.hpp"

namespace gmtr {

enum class GraphPolicy { Delaunay, Complete };

struct KeypointGraph {
  Mat coords;                               // n x 2
  std::vector<std::pair<int, int>> edges;   // undirected, i < j, sorted
  int n() const { return static_cast<int>(coords.rows()); }
};

// Delaunay triangulation (Bowyer-Watson) with a complete-graph fallback
// for n < 3 or collinear input. Duplicate coordinates are rejected.
KeypointGraph build_graph(const Mat& coords, GraphPolicy policy);

struct CooEntry {
  int r, c;  // r < c; the mirrored entry is implied
  double v;
};

// Lawler association matrix in compact form: dense node-affinity block
// K_p plus off-diagonal entries as symmetric COO. vec() is row-major:
// candidate match (i, j) sits at index i * n2 + j, project-wide.
struct AffinityInstance {
  int n1 = 0, n2 = 0;
  Mat kp;                     // n1 x n2
  std::vector<CooEntry> off;  // sorted by (r, c)

  int nodes() const { return n1 * n2; }
  Mat dense() const;      // full (n1 n2)^2 matrix, diagonal = vec(K_p)
  Mat off_dense() const;  // off-diagonal part only
};

void save_affinity(const std::string& path, const AffinityInstance& inst);
AffinityInstance load_affinity(const std::string& path);

// Learnable pieces of the affinity construction. The metric matrices
// parameterize PSD bilinear forms Lambda = A A^T (identity at init); the
// lifts expand scalar affinities into solver feature channels.
struct AffinityParams {
  Param* metric_node = nullptr;  // d_f x d_f
  Param* metric_edge = nullptr;  // 2 d_f x 2 d_f
  Param* node_lift = nullptr;    // 1 x d0
  Param* edge_lift = nullptr;    // 1 x d_e
  Param* self_edge = nullptr;    // 1 x d_e, learned self-loop attribute
};

AffinityParams make_affinity_params(ParamStore& store, const std::string& group, int feat_dim,
                                    int node_dim, int edge_dim, Rng& rng);

// Tape-side affinity construction (differentiable end to end).
struct AffinityVars {
  int n1 = 0, n2 = 0;
  ad::Var kp;   // n1 x n2
  ad::Var off;  // (n1 n2) x (n1 n2), structural zeros off the support
  std::vector<std::pair<int, int>> support;  // r < c
};

ad::Var node_affinity(Graph& g, ad::Var f1, ad::Var f2, Param& metric_node);

AffinityVars build_affinity(Graph& g, ad::Var f1, ad::Var f2, const KeypointGraph& g1,
                            const KeypointGraph& g2, const AffinityParams& par);

// Values-only snapshot of a tape-side build (for serialization/oracles).
AffinityInstance freeze(const AffinityVars& av);

// Association-graph structure: one node per candidate match, edges at the
// Lawler off-diagonal support, plus self-loops for the solver's softmax.
struct AssociationGraph {
  int nodes = 0;
  std::vector<std::pair<int, int>> edges;  // r < c
  Mat adjacency_self;                      // nodes x nodes binary, diagonal set
  Mat edge_scalars;                        // nodes x nodes, diagonal zero
};

AssociationGraph to_association_graph(const AffinityInstance& inst);

// d0-dim lift of vec(K_p); optionally appends a Sinkhorn-normalized copy
// of vec(K_p) as one extra channel (the "16 + Sinkhorn" convention).
ad::Var association_node_features(Graph& g, ad::Var kp, Param& node_lift,
                                  std::optional<ad::Var> sinkhorn_channel);

}  // namespace gmtr
