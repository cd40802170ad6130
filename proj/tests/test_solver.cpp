#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gmtr/discretize.hpp"
#include "gmtr/gradcheck.hpp"
#include "gmtr/model.hpp"
#include "gmtr/solver.hpp"
#include "gmtr/syndata.hpp"

using namespace gmtr;

namespace {

Mat random_mat(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) *(m.data() + i) = rng.uniform(lo, hi);
  return m;
}

// Sinkhorn fixed-point oracle in long double.
Mat sinkhorn_oracle(const Mat& scores, int iters, double tau) {
  using LMat = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
  LMat x(scores.rows(), scores.cols());
  const long double c = static_cast<long double>(scores.maxCoeff());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      x(i, j) = std::exp((static_cast<long double>(scores(i, j)) - c) / tau);
    }
  }
  const long double col_target =
      static_cast<long double>(scores.rows()) / static_cast<long double>(scores.cols());
  for (int t = 0; t < iters; ++t) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) /= x.row(i).sum();
    for (Eigen::Index j = 0; j < x.cols(); ++j) x.col(j) *= col_target / x.col(j).sum();
  }
  Mat out(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    *(out.data() + i) = static_cast<double>(*(x.data() + i));
  }
  return out;
}

}  // namespace

TEST_CASE("sinkhorn: zero scores give the uniform matrix") {
  Mat got = sinkhorn_value(Mat::Zero(2, 2), 5, 0.05);
  for (Eigen::Index i = 0; i < 4; ++i) CHECK(*(got.data() + i) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("sinkhorn: dominant diagonal converges to identity") {
  Mat scores = Mat::Zero(3, 3);
  scores.diagonal().setConstant(10.0);
  Mat got = sinkhorn_value(scores, 20, 1.0);
  CHECK((got - Mat::Identity(3, 3)).cwiseAbs().maxCoeff() <= 1e-3);
  Mat oracle = sinkhorn_oracle(scores, 20, 1.0);
  CHECK((got - oracle).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("sinkhorn: marginals within 1e-6 after 50 iterations") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Mat scores = random_mat(rng, 10, 10, -10.0, 10.0);
    std::vector<double> dev;
    Mat m = sinkhorn_value(scores, 50, 0.05, &dev);
    for (int i = 0; i < 10; ++i) CHECK(std::abs(m.row(i).sum() - 1.0) <= 1e-6);
    for (int j = 0; j < 10; ++j) CHECK(std::abs(m.col(j).sum() - 1.0) <= 1e-6);
    for (std::size_t t = 1; t < dev.size(); ++t) CHECK(dev[t] <= dev[t - 1]);
    CHECK((m.array() >= 0.0).all());
    CHECK((m.array() <= 1.0).all());
  }
}

TEST_CASE("sinkhorn: rectangular column target n1/n2") {
  Rng rng(2);
  Mat scores = random_mat(rng, 3, 5, -2.0, 2.0);
  Mat m = sinkhorn_value(scores, 50, 0.1);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(m.row(i).sum() - 1.0) <= 1e-6);
  for (int j = 0; j < 5; ++j) CHECK(std::abs(m.col(j).sum() - 0.6) <= 1e-6);
}

TEST_CASE("sinkhorn rejects non-finite scores") {
  Mat s = Mat::Zero(2, 2);
  s(1, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(sinkhorn_value(s, 5, 0.1), std::runtime_error);
}

TEST_CASE("sinkhorn matches long-double oracle on random input") {
  Rng rng(3);
  Mat scores = random_mat(rng, 6, 6, -3.0, 3.0);
  Mat got = sinkhorn_value(scores, 30, 0.2);
  Mat want = sinkhorn_oracle(scores, 30, 0.2);
  CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-10);
}

// The fused tape op against the same pipeline composed from primitives.
TEST_CASE("sinkhorn fused op agrees with the primitive composition, values and gradients") {
  Rng rng(4);
  ParamStore store;
  Param& w = store.add("w", "solver", random_mat(rng, 4, 4));
  const int iters = 12;
  const double tau = 0.3;

  auto composed = [&](Graph& g) {
    ad::Var s = g.use(w);
    const double c = s.value().maxCoeff();
    ad::Var x = ad::exp(ad::scale(ad::add_scalar(s, -c), 1.0 / tau));
    for (int t = 0; t < iters; ++t) {
      x = ad::cdiv(x, ad::rep_cols(ad::row_sums(x), 4));
      x = ad::cdiv(x, ad::rep_rows(ad::col_sums(x), 4));
    }
    return x;
  };
  Graph g1, g2;
  ad::Var fused = sinkhorn(g1, g1.use(w), iters, tau);
  ad::Var comp = composed(g2);
  CHECK((fused.value() - comp.value()).cwiseAbs().maxCoeff() <= 1e-14);

  Mat probe = random_mat(rng, 4, 4);
  ad::Var l1 = ad::sum_all(ad::cmul(fused, g1.constant(probe)));
  ad::Var l2 = ad::sum_all(ad::cmul(comp, g2.constant(probe)));
  g1.tape.backward(l1);
  g2.tape.backward(l2);
  CHECK((g1.tape.grad(g1.bound[0].second) - g2.tape.grad(g2.bound[0].second))
            .cwiseAbs()
            .maxCoeff() <= 1e-12);
}

TEST_CASE("sinkhorn gradient passes the finite-difference check") {
  Rng rng(5);
  ParamStore store;
  Param& w = store.add("w", "solver", random_mat(rng, 4, 4));
  Mat probe = random_mat(rng, 4, 4);
  LossBuilder lb = [&](Graph& g) {
    ad::Var m = sinkhorn(g, g.use(w), 25, 0.2);
    return ad::sum_all(ad::cmul(m, g.constant(probe)));
  };
  GradCheckReport rep = finite_diff_check(store, lb, 1e-6);
  CHECK(rep.max_rel() <= 1e-6);
}

namespace {

struct SolverFixture {
  ParamStore store;
  AffinityParams ap;
  SolverParams sp;
  SolverConfig cfg;

  SolverFixture(SolverConfig c, std::uint64_t seed) : cfg(c) {
    Rng rng(seed);
    ap.node_lift = &store.add("affinity.node_lift", "solver",
                              init_trunc_normal(rng, 1, cfg.dim, 0.1));
    ap.edge_lift = &store.add("affinity.edge_lift", "solver",
                              init_trunc_normal(rng, 1, cfg.edge_dim, 0.1));
    ap.self_edge = &store.add("affinity.self_edge", "solver",
                              init_trunc_normal(rng, 1, cfg.edge_dim, 0.1));
    sp = make_solver_params(store, "solver", cfg, rng);
  }
};

}  // namespace

TEST_CASE("transformer_conv: single node with only a self-loop") {
  SolverConfig cfg;
  cfg.dim = 6;
  cfg.layers = 1;
  cfg.heads = {1};
  SolverFixture fx(cfg, 6);
  Graph g;
  Rng rng(7);
  ad::Var z = g.constant(random_mat(rng, 1, 6));
  ad::Var off = g.constant(Mat::Zero(1, 1));
  Mat adj = Mat::Identity(1, 1);

  ad::Var out = transformer_conv_layer(g, z, off, adj, fx.sp.layers[0], fx.ap, false);

  // attn = 1, so the aggregation is v_self + e_self before LayerNorm+ReLU.
  Mat v = z.value() * fx.sp.layers[0].w_v->value;
  Mat e = fx.ap.self_edge->value * fx.sp.layers[0].w_e->value;
  Mat pre = v + e;
  const double mu = pre.row(0).mean();
  const double var = (pre.row(0).array() - mu).square().mean();
  Mat want =
      ((((pre.row(0).array() - mu) / std::sqrt(var + 1e-5)) * fx.sp.layers[0].ln_g->value.row(0).array() +
        fx.sp.layers[0].ln_b->value.row(0).array())
           .max(0.0))
          .matrix();
  CHECK((out.value().row(0) - want).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("transformer_conv: two symmetric nodes produce identical outputs") {
  SolverConfig cfg;
  cfg.dim = 4;
  cfg.layers = 1;
  cfg.heads = {1};
  SolverFixture fx(cfg, 8);
  Graph g;
  Mat zf(2, 4);
  zf << 0.3, -0.2, 0.5, 0.1, 0.3, -0.2, 0.5, 0.1;  // identical features
  ad::Var z = g.constant(zf);
  Mat offm(2, 2);
  offm << 0.0, 0.7, 0.7, 0.0;
  ad::Var off = g.constant(offm);
  Mat adj = Mat::Ones(2, 2);
  ad::Var out = transformer_conv_layer(g, z, off, adj, fx.sp.layers[0], fx.ap, false);
  CHECK((out.value().row(0) - out.value().row(1)).cwiseAbs().maxCoeff() == 0.0);
}

// Scripted Eq.-by-Eq. oracle on the 4-node association graph of a 2x2
// instance.
TEST_CASE("transformer_conv matches the scripted oracle on a 2x2 instance") {
  SolverConfig cfg;
  cfg.dim = 5;
  cfg.layers = 1;
  cfg.heads = {1};
  cfg.edge_dim = 3;
  SolverFixture fx(cfg, 9);

  AffinityInstance inst;
  inst.n1 = inst.n2 = 2;
  Rng rng(10);
  inst.kp = random_mat(rng, 2, 2, 0.0, 1.0);
  inst.off.push_back({0, 3, 0.8});
  inst.off.push_back({1, 2, 0.4});
  AssociationGraph assoc = to_association_graph(inst);

  Graph g;
  ad::Var kp = g.constant(inst.kp);
  ad::Var z0 = association_node_features(g, kp, *fx.ap.node_lift, std::nullopt);
  ad::Var off = g.constant(assoc.edge_scalars);
  ad::Var out =
      transformer_conv_layer(g, z0, off, assoc.adjacency_self, fx.sp.layers[0], fx.ap, false);

  // Oracle: per-node loops straight from the update equations.
  const Mat z = z0.value();
  const Mat q = z * fx.sp.layers[0].w_q->value;
  const Mat k = z * fx.sp.layers[0].w_k->value;
  const Mat v = z * fx.sp.layers[0].w_v->value;
  const Mat u = fx.ap.edge_lift->value * fx.sp.layers[0].w_e->value;   // 1 x d
  const Mat s = fx.ap.self_edge->value * fx.sp.layers[0].w_e->value;  // 1 x d
  Mat want(4, 5);
  for (int i = 0; i < 4; ++i) {
    std::vector<int> nbrs;
    for (int j = 0; j < 4; ++j) {
      if (assoc.adjacency_self(i, j) != 0.0) nbrs.push_back(j);
    }
    std::vector<double> logits;
    for (int j : nbrs) {
      Mat e_ij = i == j ? s : Mat(assoc.edge_scalars(i, j) * u);
      logits.push_back((q.row(i) * (k.row(j) + e_ij.row(0)).transpose())(0, 0) / std::sqrt(5.0));
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      denom += l;
    }
    Mat agg = Mat::Zero(1, 5);
    for (std::size_t t = 0; t < nbrs.size(); ++t) {
      const int j = nbrs[t];
      Mat e_ij = i == j ? s : Mat(assoc.edge_scalars(i, j) * u);
      agg += (logits[t] / denom) * (v.row(j) + e_ij.row(0));
    }
    const double mu = agg.row(0).mean();
    const double var = (agg.row(0).array() - mu).square().mean();
    want.row(i) = ((((agg.row(0).array() - mu) / std::sqrt(var + 1e-5)) *
                        fx.sp.layers[0].ln_g->value.row(0).array() +
                    fx.sp.layers[0].ln_b->value.row(0).array())
                       .max(0.0))
                      .matrix();
  }
  CHECK((out.value() - want).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("final layer: h=1 equals transformer_conv without ReLU/LayerNorm") {
  SolverConfig cfg;
  cfg.dim = 6;
  cfg.layers = 1;
  cfg.heads = {1};
  SolverFixture fx(cfg, 11);
  Graph g;
  Rng rng(12);
  ad::Var z = g.constant(random_mat(rng, 4, 6));
  Mat offm = Mat::Zero(4, 4);
  offm(0, 1) = offm(1, 0) = 0.5;
  offm(2, 3) = offm(3, 2) = -0.3;
  ad::Var off = g.constant(offm);
  Mat adj = Mat::Identity(4, 4);
  adj(0, 1) = adj(1, 0) = adj(2, 3) = adj(3, 2) = 1.0;

  ad::Var with_act = transformer_conv_layer(g, z, off, adj, fx.sp.layers[0], fx.ap, false);
  ad::Var final_out = transformer_conv_layer(g, z, off, adj, fx.sp.layers[0], fx.ap, true);
  // Applying the abandoned ReLU/LayerNorm on top of the final-layer output
  // must reproduce the standard layer.
  ad::Var renormed = ad::relu(ad::layer_norm_rows(final_out, g.use(*fx.sp.layers[0].ln_g),
                                                  g.use(*fx.sp.layers[0].ln_b)));
  CHECK((renormed.value() - with_act.value()).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("final layer: tied head slices average to any single head") {
  SolverConfig cfg;
  cfg.dim = 8;
  cfg.layers = 1;
  cfg.heads = {2};
  SolverFixture fx(cfg, 13);
  // Tie the two head slices of every projection and of the edge vectors.
  for (Param* w : {fx.sp.layers[0].w_q, fx.sp.layers[0].w_k, fx.sp.layers[0].w_v}) {
    w->value.rightCols(4) = w->value.leftCols(4);
  }
  fx.sp.layers[0].w_e->value.rightCols(4) = fx.sp.layers[0].w_e->value.leftCols(4);

  Graph g;
  Rng rng(14);
  Mat zf = random_mat(rng, 3, 8);
  Mat offm = Mat::Zero(3, 3);
  offm(0, 1) = offm(1, 0) = 0.9;
  Mat adj = Mat::Identity(3, 3);
  adj(0, 1) = adj(1, 0) = 1.0;
  ad::Var out = transformer_conv_layer(g, g.constant(zf), g.constant(offm), adj, fx.sp.layers[0],
                                       fx.ap, true);
  REQUIRE(out.value().cols() == 4);

  // Scripted head-0 computation; with identical slices the 1/H average
  // must reproduce it.
  const Mat q = zf * fx.sp.layers[0].w_q->value.leftCols(4);
  const Mat k = zf * fx.sp.layers[0].w_k->value.leftCols(4);
  const Mat v = zf * fx.sp.layers[0].w_v->value.leftCols(4);
  const Mat u = fx.ap.edge_lift->value * fx.sp.layers[0].w_e->value.leftCols(4);
  const Mat s = fx.ap.self_edge->value * fx.sp.layers[0].w_e->value.leftCols(4);
  Mat want = Mat::Zero(3, 4);
  for (int i = 0; i < 3; ++i) {
    std::vector<int> nbrs;
    for (int j = 0; j < 3; ++j) {
      if (adj(i, j) != 0.0) nbrs.push_back(j);
    }
    std::vector<double> logits;
    for (int j : nbrs) {
      Mat e = i == j ? s : Mat(offm(i, j) * u);
      logits.push_back((q.row(i) * (k.row(j) + e.row(0)).transpose())(0, 0) / 2.0);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      denom += l;
    }
    for (std::size_t t = 0; t < nbrs.size(); ++t) {
      Mat e = i == nbrs[t] ? s : Mat(offm(i, nbrs[t]) * u);
      want.row(i) += (logits[t] / denom) * (v.row(nbrs[t]) + e.row(0));
    }
  }
  CHECK((out.value() - want).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("final layer: h=2 matches a per-head scripted oracle") {
  SolverConfig cfg;
  cfg.dim = 16;
  cfg.layers = 1;
  cfg.heads = {2};
  cfg.edge_dim = 4;
  SolverFixture fx(cfg, 17);
  Rng rng(18);
  const int n = 5;
  Mat zf = random_mat(rng, n, 16);
  Mat offm = Mat::Zero(n, n);
  Mat adj = Mat::Identity(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (rng.uniform() < 0.5) {
        offm(i, j) = offm(j, i) = rng.uniform(-1.0, 1.0);
        adj(i, j) = adj(j, i) = 1.0;
      }
    }
  }
  Graph g;
  ad::Var out = transformer_conv_layer(g, g.constant(zf), g.constant(offm), adj, fx.sp.layers[0],
                                       fx.ap, true);
  REQUIRE(out.value().rows() == n);
  REQUIRE(out.value().cols() == 8);

  const Mat q = zf * fx.sp.layers[0].w_q->value;
  const Mat k = zf * fx.sp.layers[0].w_k->value;
  const Mat v = zf * fx.sp.layers[0].w_v->value;
  const Mat u = fx.ap.edge_lift->value * fx.sp.layers[0].w_e->value;
  const Mat s = fx.ap.self_edge->value * fx.sp.layers[0].w_e->value;
  Mat want = Mat::Zero(n, 8);
  for (int head = 0; head < 2; ++head) {
    const int off0 = head * 8;
    for (int i = 0; i < n; ++i) {
      std::vector<int> nbrs;
      for (int j = 0; j < n; ++j) {
        if (adj(i, j) != 0.0) nbrs.push_back(j);
      }
      std::vector<double> logits;
      for (int j : nbrs) {
        Mat e = i == j ? s.middleCols(off0, 8) : Mat(offm(i, j) * u.middleCols(off0, 8));
        logits.push_back((q.row(i).middleCols(off0, 8) *
                          (k.row(j).middleCols(off0, 8) + e.row(0)).transpose())(0, 0) /
                         std::sqrt(8.0));
      }
      const double mx = *std::max_element(logits.begin(), logits.end());
      double denom = 0.0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        denom += l;
      }
      for (std::size_t t = 0; t < nbrs.size(); ++t) {
        const int j = nbrs[t];
        Mat e = i == j ? s.middleCols(off0, 8) : Mat(offm(i, j) * u.middleCols(off0, 8));
        want.row(i) += 0.5 * (logits[t] / denom) * (v.row(j).middleCols(off0, 8) + e.row(0));
      }
    }
  }
  CHECK((out.value() - want).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("project_scores basics") {
  ParamStore store;
  Rng rng(19);
  Param& w = store.add("w", "solver", init_zeros(4, 1));
  Graph g;
  ad::Var z = g.constant(random_mat(rng, 6, 4));
  CHECK(project_scores(g, z, w, 2, 3).value() == Mat::Zero(2, 3));

  w.value(0, 0) = 1.0;  // e_1: picks the first feature column
  Graph g2;
  ad::Var z2 = g2.constant(z.value());
  Mat got = project_scores(g2, z2, w, 2, 3).value();
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) CHECK(got(i, j) == z.value()(i * 3 + j, 0));
  }

  Param& wr = store.add("wr", "solver", random_mat(rng, 4, 1));
  Graph g3;
  ad::Var z3 = g3.constant(z.value());
  Mat got3 = project_scores(g3, z3, wr, 6, 1).value();
  Mat want = z.value() * wr.value;
  CHECK((got3 - want).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("solve: passthrough recovers the argmax permutation of a dominant K_p") {
  Rng rng(20);
  AffinityInstance inst;
  inst.n1 = inst.n2 = 4;
  inst.kp = random_mat(rng, 4, 4, 0.0, 0.2);
  std::vector<int> perm = rng.permutation(4);
  for (int i = 0; i < 4; ++i) inst.kp(i, perm[static_cast<std::size_t>(i)]) += 5.0;

  MatchingResult res = solve_passthrough(inst, 50, 0.05);
  Assignment want = hungarian({inst.kp, Sense::Maximize});
  CHECK(res.assignment == want.row_to_col);
  CHECK(res.assignment == perm);
}

TEST_CASE("solve: 1x1 instance always matches") {
  AffinityInstance inst;
  inst.n1 = inst.n2 = 1;
  inst.kp = Mat::Constant(1, 1, -0.3);
  SolverConfig cfg;
  cfg.dim = 4;
  cfg.layers = 2;
  cfg.heads = {1, 2};
  SolverFixture fx(cfg, 21);
  MatchingResult res = solve(inst, cfg, fx.sp, fx.ap);
  CHECK(res.hard == Mat::Ones(1, 1));
  CHECK(res.soft(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("neighborhood locality: removing an edge changes only its endpoints") {
  SolverConfig cfg;
  cfg.dim = 6;
  cfg.layers = 1;
  cfg.heads = {1};
  SolverFixture fx(cfg, 22);
  Rng rng(23);
  const int n = 6;
  Mat zf = random_mat(rng, n, 6);
  Mat offm = Mat::Zero(n, n);
  Mat adj = Mat::Identity(n, n);
  auto link = [&](int i, int j, double v) {
    offm(i, j) = offm(j, i) = v;
    adj(i, j) = adj(j, i) = 1.0;
  };
  link(0, 1, 0.4);
  link(1, 2, -0.2);
  link(3, 4, 0.7);
  link(4, 5, 0.1);
  link(2, 3, 0.5);

  Graph g1;
  ad::Var out1 = transformer_conv_layer(g1, g1.constant(zf), g1.constant(offm), adj,
                                        fx.sp.layers[0], fx.ap, false);
  // Remove edge (3, 4).
  Mat offm2 = offm, adj2 = adj;
  offm2(3, 4) = offm2(4, 3) = 0.0;
  adj2(3, 4) = adj2(4, 3) = 0.0;
  Graph g2;
  ad::Var out2 = transformer_conv_layer(g2, g2.constant(zf), g2.constant(offm2), adj2,
                                        fx.sp.layers[0], fx.ap, false);
  for (int i = 0; i < n; ++i) {
    if (i == 3 || i == 4) {
      CHECK((out1.value().row(i) - out2.value().row(i)).cwiseAbs().maxCoeff() > 0.0);
    } else {
      CHECK(out1.value().row(i) == out2.value().row(i));
    }
  }
}

TEST_CASE("conjugation equivariance: permuting node order permutes z^final exactly") {
  SolverConfig cfg;
  cfg.dim = 7;
  cfg.layers = 2;
  cfg.heads = {1, 1};
  SolverFixture fx(cfg, 24);
  Rng rng(25);
  const int n = 9;
  Mat zf = random_mat(rng, n, 7);
  Mat offm = Mat::Zero(n, n);
  Mat adj = Mat::Identity(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (rng.uniform() < 0.4) {
        offm(i, j) = offm(j, i) = rng.uniform(-1.0, 1.0);
        adj(i, j) = adj(j, i) = 1.0;
      }
    }
  }
  std::vector<int> perm = rng.permutation(n);
  Mat zp(n, 7), offp = Mat::Zero(n, n), adjp = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    zp.row(perm[static_cast<std::size_t>(i)]) = zf.row(i);
    for (int j = 0; j < n; ++j) {
      offp(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]) = offm(i, j);
      adjp(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]) = adj(i, j);
    }
  }

  auto run = [&](const Mat& z0, const Mat& off0, const Mat& adj0) {
    Graph g;
    ad::Var z = g.constant(z0);
    ad::Var off = g.constant(off0);
    ad::Var h = transformer_conv_layer(g, z, off, adj0, fx.sp.layers[0], fx.ap, false);
    return transformer_conv_layer(g, h, off, adj0, fx.sp.layers[1], fx.ap, true).value();
  };
  Mat base = run(zf, offm, adj);
  Mat conj = run(zp, offp, adjp);
  for (int i = 0; i < n; ++i) {
    CHECK(conj.row(perm[static_cast<std::size_t>(i)]) == base.row(i));
  }
}

TEST_CASE("solver gradients pass the finite-difference check on a 3x3 instance") {
  PlantedQap q = gen_qap_instance(77, {.n = 3});
  SolverConfig cfg;  // default 16-dim, 3 layers, heads 1,1,2
  SolverFixture fx(cfg, 26);
  Mat x_gt = Mat::Zero(3, 3);
  for (int i = 0; i < 3; ++i) x_gt(i, q.planted[static_cast<std::size_t>(i)]) = 1.0;
  AssociationGraph assoc = to_association_graph(q.inst);

  LossBuilder lb = [&](Graph& g) {
    ad::Var kp = g.constant(q.inst.kp);
    ad::Var off = g.constant(assoc.edge_scalars);
    ad::Var soft = solver_forward(g, kp, off, assoc.adjacency_self, cfg, fx.sp, fx.ap);
    ad::Var mc = ad::clamp(soft, 1e-12, 1.0 - 1e-12);
    ad::Var pos = ad::cmul(g.constant(x_gt), ad::log(mc));
    ad::Var neg = ad::cmul(g.constant((1.0 - x_gt.array()).matrix()),
                           ad::log(ad::add_scalar(ad::scale(mc, -1.0), 1.0)));
    return ad::scale(ad::sum_all(pos + neg), -1.0 / 9.0);
  };
  GradCheckReport rep = finite_diff_check(fx.store, lb, 1e-6);
  CHECK(rep.max_rel() <= 1e-4);
}

TEST_CASE("gcn and no-backend variants run and emit doubly-stochastic output") {
  PlantedQap q = gen_qap_instance(78, {.n = 4});
  for (BackendKind kind : {BackendKind::Gcn, BackendKind::None}) {
    SolverConfig cfg;
    cfg.backend = kind;
    cfg.dim = 16;
    cfg.sinkhorn_channel = kind == BackendKind::Gcn;
    SolverFixture fx(cfg, 27);
    MatchingResult res = solve(q.inst, cfg, fx.sp, fx.ap);
    for (int i = 0; i < 4; ++i) CHECK(std::abs(res.soft.row(i).sum() - 1.0) <= 1e-6);
    CHECK(cfg.width() == (kind == BackendKind::Gcn ? 17 : 16));
  }
}
