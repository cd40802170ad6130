#include "gmtr/model.hpp"

namespace gmtr {

TrainMode mode_from_string(const std::string& s) {
  if (s == "end_to_end") return TrainMode::EndToEnd;
  if (s == "backend_only") return TrainMode::BackendOnly;
  throw ConfigError("unknown mode '" + s + "' (expected end_to_end|backend_only)");
}

std::string to_string(TrainMode m) {
  return m == TrainMode::EndToEnd ? "end_to_end" : "backend_only";
}

Mat adjacency_from_support(int nodes, const std::vector<std::pair<int, int>>& support) {
  Mat adj = Mat::Identity(nodes, nodes);
  for (const auto& [r, c] : support) {
    adj(r, c) = 1.0;
    adj(c, r) = 1.0;
  }
  return adj;
}

std::unique_ptr<GmtrModel> GmtrModel::build(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.solver.validate();
  auto model = std::unique_ptr<GmtrModel>(new GmtrModel());
  model->cfg = cfg;
  Rng rng(seed);
  if (cfg.mode == TrainMode::EndToEnd) {
    if (cfg.image_size % cfg.patch_size != 0) {
      throw ConfigError("model: image size not divisible by patch size");
    }
    model->frontend = make_frontend_params(model->store, cfg.frontend, cfg.patch_len(),
                                           cfg.raw_patches(), rng);
    model->affinity = make_affinity_params(model->store, "solver", feature_dim(cfg.frontend),
                                           cfg.solver.dim, cfg.solver.edge_dim, rng);
  } else {
    // Backend-only: the lifts are the only affinity-side parameters.
    AffinityParams ap;
    ap.node_lift = &model->store.add("affinity.node_lift", "solver",
                                     init_trunc_normal(rng, 1, cfg.solver.dim, 0.1));
    ap.edge_lift = &model->store.add("affinity.edge_lift", "solver",
                                     init_trunc_normal(rng, 1, cfg.solver.edge_dim, 0.1));
    ap.self_edge = &model->store.add("affinity.self_edge", "solver",
                                     init_trunc_normal(rng, 1, cfg.solver.edge_dim, 0.1));
    model->affinity = ap;
  }
  model->solver = make_solver_params(model->store, "solver", cfg.solver, rng);
  return model;
}

ad::Var GmtrModel::pair_soft(Graph& g, const SyntheticPair& pair) const {
  if (!has_frontend()) throw std::logic_error("pair_soft: backend-only model");
  ad::Var fa = extract_features(g, pair.a, pair.kps_a, frontend, cfg.frontend);
  ad::Var fb = extract_features(g, pair.b, pair.kps_b, frontend, cfg.frontend);

  auto coords = [](const KeypointSet& kps) {
    Mat c(static_cast<Eigen::Index>(kps.size()), 2);
    for (std::size_t i = 0; i < kps.size(); ++i) {
      c(static_cast<Eigen::Index>(i), 0) = kps[i].u;
      c(static_cast<Eigen::Index>(i), 1) = kps[i].v;
    }
    return c;
  };
  KeypointGraph g1 = build_graph(coords(pair.kps_a), cfg.graph_policy);
  KeypointGraph g2 = build_graph(coords(pair.kps_b), cfg.graph_policy);

  AffinityVars av = build_affinity(g, fa, fb, g1, g2, affinity);
  Mat adj = adjacency_from_support(av.n1 * av.n2, av.support);
  return solver_forward(g, av.kp, av.off, adj, cfg.solver, solver, affinity);
}

ad::Var GmtrModel::instance_soft(Graph& g, const AffinityInstance& inst) const {
  AssociationGraph assoc = to_association_graph(inst);
  ad::Var kp = g.constant(inst.kp);
  ad::Var off = g.constant(assoc.edge_scalars);
  return solver_forward(g, kp, off, assoc.adjacency_self, cfg.solver, solver, affinity);
}

MatchingResult GmtrModel::match_pair(const SyntheticPair& pair) const {
  AffinityInstance inst = pair_affinity(pair);
  Graph g(false);
  ad::Var soft = pair_soft(g, pair);
  MatchingResult res = discretize_soft(soft.value(), inst);
  res.sinkhorn_iters = cfg.solver.sinkhorn_iters;
  return res;
}

MatchingResult GmtrModel::solve_instance(const AffinityInstance& inst) const {
  Graph g(false);
  ad::Var soft = instance_soft(g, inst);
  MatchingResult res = discretize_soft(soft.value(), inst);
  res.sinkhorn_iters = cfg.solver.sinkhorn_iters;
  return res;
}

AffinityInstance GmtrModel::pair_affinity(const SyntheticPair& pair) const {
  if (!has_frontend()) throw std::logic_error("pair_affinity: backend-only model");
  Graph g(false);
  ad::Var fa = extract_features(g, pair.a, pair.kps_a, frontend, cfg.frontend);
  ad::Var fb = extract_features(g, pair.b, pair.kps_b, frontend, cfg.frontend);
  auto coords = [](const KeypointSet& kps) {
    Mat c(static_cast<Eigen::Index>(kps.size()), 2);
    for (std::size_t i = 0; i < kps.size(); ++i) {
      c(static_cast<Eigen::Index>(i), 0) = kps[i].u;
      c(static_cast<Eigen::Index>(i), 1) = kps[i].v;
    }
    return c;
  };
  KeypointGraph g1 = build_graph(coords(pair.kps_a), cfg.graph_policy);
  KeypointGraph g2 = build_graph(coords(pair.kps_b), cfg.graph_policy);
  AffinityVars av = build_affinity(g, fa, fb, g1, g2, affinity);
  return freeze(av);
}

}  // namespace gmtr
