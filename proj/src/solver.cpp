#include "gmtr/solver.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "gmtr/discretize.hpp"

namespace gmtr {

BackendKind backend_from_string(const std::string& s) {
  if (s == "transformer") return BackendKind::Transformer;
  if (s == "gcn") return BackendKind::Gcn;
  if (s == "none") return BackendKind::None;
  throw ConfigError("unknown backend '" + s + "' (expected transformer|gcn|none)");
}

std::string to_string(BackendKind k) {
  switch (k) {
    case BackendKind::Transformer: return "transformer";
    case BackendKind::Gcn: return "gcn";
    case BackendKind::None: return "none";
  }
  return "?";
}

int SolverConfig::final_width() const {
  if (backend == BackendKind::Transformer) return width() / heads.back();
  return width();
}

void SolverConfig::validate() const {
  if (dim < 1 || layers < 1 || edge_dim < 1) throw ConfigError("solver: non-positive dimensions");
  if (sinkhorn_iters < 1 || sinkhorn_tau <= 0.0) throw ConfigError("solver: bad sinkhorn settings");
  if (backend == BackendKind::Transformer) {
    if (static_cast<int>(heads.size()) != layers) {
      throw ConfigError("solver: heads list must have one entry per layer");
    }
    for (std::size_t i = 0; i + 1 < heads.size(); ++i) {
      if (heads[i] != 1) throw ConfigError("solver: only the final layer may be multi-head");
    }
    if (width() % heads.back() != 0) {
      throw ConfigError("solver: feature width " + std::to_string(width()) +
                        " not divisible by head count " + std::to_string(heads.back()));
    }
  }
}

SolverParams make_solver_params(ParamStore& store, const std::string& group,
                                const SolverConfig& cfg, Rng& rng) {
  cfg.validate();
  const int w = cfg.width();
  SolverParams sp;
  if (cfg.backend == BackendKind::Transformer) {
    for (int l = 0; l < cfg.layers; ++l) {
      const std::string pre = "solver.layer" + std::to_string(l) + ".";
      SolverLayerParams lp;
      lp.heads = cfg.heads[static_cast<std::size_t>(l)];
      lp.w_q = &store.add(pre + "w_q", group, init_trunc_normal(rng, w, w));
      lp.w_k = &store.add(pre + "w_k", group, init_trunc_normal(rng, w, w));
      lp.w_v = &store.add(pre + "w_v", group, init_trunc_normal(rng, w, w));
      lp.w_e = &store.add(pre + "w_e", group, init_trunc_normal(rng, cfg.edge_dim, w));
      lp.ln_g = &store.add(pre + "ln_g", group, init_ones(1, w));
      lp.ln_b = &store.add(pre + "ln_b", group, init_zeros(1, w));
      sp.layers.push_back(lp);
    }
  } else if (cfg.backend == BackendKind::Gcn) {
    for (int l = 0; l < cfg.layers; ++l) {
      sp.gcn_w.push_back(&store.add("solver.gcn" + std::to_string(l) + ".w", group,
                                    init_trunc_normal(rng, w, w)));
    }
  }
  sp.w_proj = &store.add("solver.w_proj", group, init_trunc_normal(rng, cfg.final_width(), 1));
  return sp;
}

// ---- Sinkhorn --------------------------------------------------------------

namespace {

struct SinkhornTrace {
  std::vector<Mat> states;          // matrix after every half-step, 2*iters entries
  std::vector<Eigen::VectorXd> sums;  // the row/col sums used at each half-step
  Mat initial;                      // exp((scores - c) / tau)
  double tau = 1.0;
};

double marginal_deviation(const Mat& x, double col_target) {
  double dev = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) dev += std::abs(x.row(i).sum() - 1.0);
  for (Eigen::Index j = 0; j < x.cols(); ++j) dev += std::abs(x.col(j).sum() - col_target);
  return dev;
}

Mat sinkhorn_forward(const Mat& scores, int iters, double tau, std::vector<double>* deviations,
                     SinkhornTrace* trace) {
  if (!all_finite(scores)) throw std::runtime_error("sinkhorn: non-finite scores");
  if (iters < 1 || tau <= 0.0) throw std::invalid_argument("sinkhorn: iters >= 1 and tau > 0 required");
  const Eigen::Index n1 = scores.rows(), n2 = scores.cols();
  const double col_target = static_cast<double>(n1) / static_cast<double>(n2);

  // Sinkhorn output is invariant to a global shift of the scores, so the
  // max is subtracted (as a constant) to keep exp() in range.
  const double c = scores.maxCoeff();
  Mat x = ((scores.array() - c) / tau).exp().matrix();
  if (trace) {
    trace->initial = x;
    trace->tau = tau;
  }
  for (int t = 0; t < iters; ++t) {
    Eigen::VectorXd rs = x.rowwise().sum();
    if ((rs.array() == 0.0).any()) throw std::runtime_error("sinkhorn: zero row sum");
    x = (x.array().colwise() / rs.array()).matrix();
    if (trace) {
      trace->states.push_back(x);
      trace->sums.push_back(rs);
    }
    Eigen::RowVectorXd cs = x.colwise().sum();
    if ((cs.array() == 0.0).any()) throw std::runtime_error("sinkhorn: zero column sum");
    x = (x.array().rowwise() / cs.array() * col_target).matrix();
    if (trace) {
      trace->states.push_back(x);
      trace->sums.push_back(cs.transpose());
    }
    if (deviations) deviations->push_back(marginal_deviation(x, col_target));
  }
  return x;
}

}  // namespace

Mat sinkhorn_value(const Mat& scores, int iters, double tau, std::vector<double>* deviations) {
  return sinkhorn_forward(scores, iters, tau, deviations, nullptr);
}

ad::Var sinkhorn(Graph& g, ad::Var scores, int iters, double tau,
                 std::vector<double>* deviations) {
  auto trace = std::make_shared<SinkhornTrace>();
  Mat out = sinkhorn_forward(scores.value(), iters, tau, deviations,
                             g.tape.grad_enabled() ? trace.get() : nullptr);
  const int si = scores.id;
  const double col_target =
      static_cast<double>(scores.rows()) / static_cast<double>(scores.cols());
  return g.tape.record(std::move(out), {si}, [si, trace, col_target](ad::Tape& t, int self) {
    Mat grad = t.grad_of(self);
    // Walk the normalization half-steps backwards. For y = x / s with s
    // the row (or column) sums: dx = (g - rowsum(g .* y)) / s.
    for (int step = static_cast<int>(trace->states.size()) - 1; step >= 0; --step) {
      const Mat& y = trace->states[static_cast<std::size_t>(step)];
      const Eigen::VectorXd& s = trace->sums[static_cast<std::size_t>(step)];
      if (step % 2 == 0) {  // row normalization
        Eigen::VectorXd dot = grad.cwiseProduct(y).rowwise().sum();
        grad = ((grad.array().colwise() - dot.array()).colwise() / s.array()).matrix();
      } else {  // column normalization, y = x * col_target / s
        Eigen::RowVectorXd dot =
            (grad.cwiseProduct(y).colwise().sum().array() / col_target).matrix();
        grad = ((grad.array().rowwise() - dot.array()).rowwise() / s.transpose().array() *
                col_target)
                   .matrix();
      }
    }
    t.grad_of(si) += grad.cwiseProduct(trace->initial) / trace->tau;
  });
}

// ---- TransformerConv layer ---------------------------------------------------

namespace {

// Head slice helper: columns [c*wh, (c+1)*wh).
ad::Var head_slice(ad::Var m, int c, int wh) {
  return ad::block(m, 0, c * wh, static_cast<int>(m.rows()), wh);
}

ad::Var head_slice_row(ad::Var m, int c, int wh) { return ad::block(m, 0, c * wh, 1, wh); }

}  // namespace

ad::Var transformer_conv_layer(Graph& g, ad::Var z, ad::Var edge_scal, const Mat& adj_self,
                               const SolverLayerParams& lp, const AffinityParams& ap,
                               bool final_layer) {
  const int n = static_cast<int>(z.rows());
  const int w = static_cast<int>(z.cols());
  const int h = final_layer ? lp.heads : 1;
  const int wh = w / h;

  ad::Var q_full = ad::oi_matmul(z, g.use(*lp.w_q));
  ad::Var k_full = ad::oi_matmul(z, g.use(*lp.w_k));
  ad::Var v_full = ad::oi_matmul(z, g.use(*lp.w_v));
  // Edge attributes are scalar lifts, so their per-layer projection
  // collapses to one direction vector: e_ij = K_ij * u (self-loops: s).
  ad::Var u_full = ad::matmul(g.use(*ap.edge_lift), g.use(*lp.w_e));
  ad::Var s_full = ad::matmul(g.use(*ap.self_edge), g.use(*lp.w_e));

  Mat eye = Mat::Identity(n, n);
  ad::Var eye_v = g.constant(eye);

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(wh));
  std::optional<ad::Var> acc;
  for (int c = 0; c < h; ++c) {
    ad::Var q = h == 1 ? q_full : head_slice(q_full, c, wh);
    ad::Var k = h == 1 ? k_full : head_slice(k_full, c, wh);
    ad::Var v = h == 1 ? v_full : head_slice(v_full, c, wh);
    ad::Var u = h == 1 ? u_full : head_slice_row(u_full, c, wh);
    ad::Var s = h == 1 ? s_full : head_slice_row(s_full, c, wh);

    ad::Var qu = ad::oi_matmul(q, ad::transpose(u));  // n x 1, q_i . u
    ad::Var qs = ad::oi_matmul(q, ad::transpose(s));
    ad::Var logits = ad::oi_matmul(q, ad::transpose(k)) +
                     ad::cmul(ad::rep_cols(qu, n), edge_scal) +
                     ad::cmul(ad::rep_cols(qs, n), eye_v);
    ad::Var attn = ad::oi_softmax_rows(ad::scale(logits, inv_sqrt), adj_self);

    ad::Var agg = ad::oi_matmul(attn, v) +
                  ad::matmul(ad::oi_row_sums(ad::cmul(attn, edge_scal)), u) +
                  ad::matmul(ad::row_sums(ad::cmul(attn, eye_v)), s);
    acc = acc ? *acc + agg : agg;
  }
  ad::Var out = h == 1 ? *acc : ad::scale(*acc, 1.0 / static_cast<double>(h));
  if (final_layer) return out;
  return ad::relu(ad::layer_norm_rows(out, g.use(*lp.ln_g), g.use(*lp.ln_b)));
}

ad::Var project_scores(Graph& g, ad::Var z_final, Param& w_proj, int n1, int n2) {
  ad::Var scores = ad::oi_matmul(z_final, g.use(w_proj));
  return ad::reshape(scores, n1, n2);
}

namespace {

Mat gcn_norm_adjacency(const Mat& adj_self) {
  Eigen::VectorXd deg = adj_self.rowwise().sum();
  Eigen::VectorXd inv_sqrt = deg.array().sqrt().inverse();
  return ((adj_self.array().colwise() * inv_sqrt.array()).rowwise() *
          inv_sqrt.transpose().array())
      .matrix();
}

}  // namespace

ad::Var solver_forward(Graph& g, ad::Var kp, ad::Var off, const Mat& adj_self,
                       const SolverConfig& cfg, const SolverParams& sp, const AffinityParams& ap) {
  cfg.validate();
  const int n1 = static_cast<int>(kp.rows());
  const int n2 = static_cast<int>(kp.cols());

  std::optional<ad::Var> channel;
  if (cfg.sinkhorn_channel) {
    channel = sinkhorn(g, kp, cfg.sinkhorn_iters, cfg.sinkhorn_tau);
  }
  ad::Var z = association_node_features(g, kp, *ap.node_lift, channel);

  if (cfg.backend == BackendKind::Transformer) {
    for (int l = 0; l < cfg.layers; ++l) {
      z = transformer_conv_layer(g, z, off, adj_self, sp.layers[static_cast<std::size_t>(l)], ap,
                                 /*final_layer=*/l + 1 == cfg.layers);
    }
  } else if (cfg.backend == BackendKind::Gcn) {
    ad::Var ahat = g.constant(gcn_norm_adjacency(adj_self));
    for (int l = 0; l < cfg.layers; ++l) {
      z = ad::oi_matmul(ad::oi_matmul(ahat, z), g.use(*sp.gcn_w[static_cast<std::size_t>(l)]));
      if (l + 1 < cfg.layers) z = ad::relu(z);
    }
  }
  // BackendKind::None: node features go straight to the projection.

  ad::Var scores = project_scores(g, z, *sp.w_proj, n1, n2);
  return sinkhorn(g, scores, cfg.sinkhorn_iters, cfg.sinkhorn_tau);
}

MatchingResult discretize_soft(const Mat& soft, const AffinityInstance& inst) {
  MatchingResult res;
  res.soft = soft;
  Mat cost = (-(soft.array() + 1e-12).log()).matrix();
  Assignment a = hungarian({cost, Sense::Minimize});
  res.assignment = a.row_to_col;
  res.hard = a.matrix();
  res.objective = qap_objective(inst, res.assignment);
  return res;
}

MatchingResult solve(const AffinityInstance& inst, const SolverConfig& cfg, SolverParams& sp,
                     AffinityParams& ap) {
  Graph g(false);
  AssociationGraph assoc = to_association_graph(inst);
  ad::Var kp = g.constant(inst.kp);
  ad::Var off = g.constant(assoc.edge_scalars);
  ad::Var soft = solver_forward(g, kp, off, assoc.adjacency_self, cfg, sp, ap);
  MatchingResult res = discretize_soft(soft.value(), inst);
  res.sinkhorn_iters = cfg.sinkhorn_iters;
  return res;
}

MatchingResult solve_passthrough(const AffinityInstance& inst, int iters, double tau) {
  MatchingResult res = discretize_soft(sinkhorn_value(inst.kp, iters, tau), inst);
  res.sinkhorn_iters = iters;
  return res;
}

}  // namespace gmtr
