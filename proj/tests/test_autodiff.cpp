#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gmtr/autodiff.hpp"
#include "gmtr/gradcheck.hpp"
#include "gmtr/params.hpp"

using namespace gmtr;

namespace {

Mat random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) *(m.data() + i) = scale * rng.normal();
  return m;
}

// Independent triple-loop product in long double.
Mat matmul_oracle(const Mat& a, const Mat& b) {
  Mat c = Mat::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      long double acc = 0.0L;
      for (Eigen::Index k = 0; k < a.cols(); ++k) {
        acc += static_cast<long double>(a(i, k)) * static_cast<long double>(b(k, j));
      }
      c(i, j) = static_cast<double>(acc);
    }
  }
  return c;
}

}  // namespace

TEST_CASE("matmul identity and hand cases") {
  Rng rng(1);
  ad::Tape t;
  Mat x = random_mat(rng, 2, 2);
  ad::Var vi = t.input(Mat::Identity(2, 2));
  ad::Var vx = t.input(x);
  CHECK(ad::matmul(vi, vx).value() == x);

  Mat a(2, 2);
  a << 1, 2, 3, 4;
  Mat b(2, 1);
  b << 0, 1;
  Mat expected(2, 1);
  expected << 2, 4;
  CHECK(ad::matmul(t.input(a), t.input(b)).value() == expected);
}

TEST_CASE("matmul random against triple-loop oracle") {
  Rng rng(2);
  ad::Tape t;
  Mat a = random_mat(rng, 3, 4);
  Mat b = random_mat(rng, 4, 2);
  Mat got = ad::matmul(t.input(a), t.input(b)).value();
  Mat want = matmul_oracle(a, b);
  CHECK((got - want).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("matmul shape error names both shapes") {
  ad::Tape t;
  ad::Var a = t.input(Mat::Zero(2, 3));
  ad::Var b = t.input(Mat::Zero(4, 5));
  CHECK_THROWS_WITH_AS(ad::matmul(a, b), doctest::Contains("2x3"), std::invalid_argument);
  try {
    ad::matmul(a, b);
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("4x5") != std::string::npos);
  }
}

TEST_CASE("softmax trivial cases") {
  ad::Tape t;
  Mat z = Mat::Zero(1, 3);
  Mat got = ad::softmax_rows(t.input(z)).value();
  for (int j = 0; j < 3; ++j) CHECK(got(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-14));

  Mat five(1, 2);
  five << 5, 5;
  Mat mask(1, 2);
  mask << 1, 0;
  Mat m = ad::softmax_rows(t.input(five), mask).value();
  CHECK(m(0, 0) == 1.0);
  CHECK(m(0, 1) == 0.0);  // masked entries exactly zero
}

TEST_CASE("softmax against extended-precision oracle") {
  ad::Tape t;
  Mat x(1, 3);
  x << 1, 2, 3;
  Mat got = ad::softmax_rows(t.input(x)).value();
  long double denom = 0.0L;
  for (int j = 0; j < 3; ++j) denom += std::exp(static_cast<long double>(x(0, j)));
  double sum = 0.0;
  for (int j = 0; j < 3; ++j) {
    const double want = static_cast<double>(std::exp(static_cast<long double>(x(0, j))) / denom);
    CHECK(std::abs(got(0, j) - want) <= 1e-12);
    sum += got(0, j);
  }
  CHECK(std::abs(sum - 1.0) <= 1e-12);
}

TEST_CASE("softmax row sums and stabilization") {
  Rng rng(3);
  ad::Tape t;
  Mat x = random_mat(rng, 5, 7, 1e4);  // would overflow exp without max-subtraction
  Mat got = ad::softmax_rows(t.input(x)).value();
  CHECK(all_finite(got));
  for (int i = 0; i < 5; ++i) CHECK(std::abs(got.row(i).sum() - 1.0) <= 1e-12);
}

TEST_CASE("softmax empty support throws") {
  ad::Tape t;
  Mat x = Mat::Zero(2, 3);
  Mat mask = Mat::Ones(2, 3);
  mask.row(1).setZero();
  CHECK_THROWS_WITH_AS(ad::softmax_rows(t.input(x), mask),
                       doctest::Contains("empty attention support"), std::invalid_argument);
}

TEST_CASE("layer_norm trivial cases") {
  ad::Tape t;
  ad::Var gamma = t.input(Mat::Ones(1, 4));
  ad::Var beta = t.input(Mat::Zero(1, 4));

  Mat constant = Mat::Constant(1, 4, 3.7);
  Mat got = ad::layer_norm_rows(t.input(constant), gamma, beta).value();
  CHECK(got.cwiseAbs().maxCoeff() == 0.0);  // zero variance handled by eps

  ad::Var g2 = t.input(Mat::Ones(1, 2));
  ad::Var b2 = t.input(Mat::Zero(1, 2));
  Mat pm(1, 2);
  pm << 1, -1;
  Mat got2 = ad::layer_norm_rows(t.input(pm), g2, b2).value();
  CHECK(got2(0, 0) == doctest::Approx(1.0).epsilon(1e-4));  // off by the eps correction only
  CHECK(got2(0, 1) == doctest::Approx(-1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm random row statistics") {
  Rng rng(4);
  ad::Tape t;
  Mat x = random_mat(rng, 1, 64, 2.0);
  ad::Var gamma = t.input(Mat::Ones(1, 64));
  ad::Var beta = t.input(Mat::Zero(1, 64));
  Mat got = ad::layer_norm_rows(t.input(x), gamma, beta).value();
  CHECK(std::abs(got.row(0).mean()) <= 1e-9);
  const double var = got.row(0).array().square().mean();
  CHECK(std::abs(var - 1.0) <= 1e-4);
}

TEST_CASE("backward: sum gives all-ones, product rule for scalars") {
  ad::Tape t;
  ad::Var x = t.leaf(Mat::Constant(3, 2, 0.5), true);
  ad::Var loss = ad::sum_all(x);
  t.backward(loss);
  CHECK(t.grad(x) == Mat::Ones(3, 2));

  ad::Tape t2;
  ad::Var a = t2.leaf(Mat::Constant(1, 1, 3.0), true);
  ad::Var b = t2.leaf(Mat::Constant(1, 1, -2.0), true);
  ad::Var prod = ad::cmul(a, b);
  t2.backward(prod);
  CHECK(t2.grad(a)(0, 0) == -2.0);
  CHECK(t2.grad(b)(0, 0) == 3.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  ad::Tape t;
  ad::Var x = t.leaf(Mat::Zero(3, 4), true);
  CHECK_THROWS_WITH_AS(t.backward(x), doctest::Contains("3x4"), std::invalid_argument);
}

TEST_CASE("backward repeatable after zero_grad") {
  Rng rng(5);
  ad::Tape t;
  ad::Var x = t.leaf(random_mat(rng, 4, 4), true);
  ad::Var loss = ad::sum_all(ad::cmul(ad::softmax_rows(x), x));
  t.backward(loss);
  Mat g1 = t.grad(x);
  t.zero_grad();
  t.backward(loss);
  CHECK(t.grad(x) == g1);  // bit-identical
}

TEST_CASE("softmax gradient of row-sum is zero") {
  Rng rng(6);
  ad::Tape t;
  ad::Var x = t.leaf(random_mat(rng, 4, 6), true);
  ad::Var loss = ad::sum_all(ad::softmax_rows(x));
  t.backward(loss);
  CHECK(t.grad(x).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("composed graphs stay finite with N(0, 0.02^2) parameters") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    ad::Tape t;
    ad::Var x = t.input(random_mat(rng, 6, 8));
    ad::Var w1 = t.leaf(init_trunc_normal(rng, 8, 8), true);
    ad::Var w2 = t.leaf(init_trunc_normal(rng, 8, 8), true);
    ad::Var gamma = t.input(Mat::Ones(1, 8));
    ad::Var beta = t.input(Mat::Zero(1, 8));
    ad::Var h = ad::gelu(ad::matmul(x, w1));
    h = ad::layer_norm_rows(h, gamma, beta);
    h = ad::softmax_rows(ad::matmul(h, w2));
    h = ad::cdiv(ad::exp(h), ad::add_scalar(ad::abs(h), 1.0));
    CHECK(all_finite(ad::sum_all(h).value()));
  }
}

// Every differentiable primitive, finite-difference checked in isolation.
TEST_CASE("per-primitive gradient check at 1e-6") {
  Rng rng(7);
  ParamStore store;
  Param& a = store.add("a", "g", random_mat(rng, 3, 4));
  Param& b = store.add("b", "g", random_mat(rng, 3, 4));
  Param& w = store.add("w", "g", random_mat(rng, 4, 3));
  Param& gamma = store.add("gamma", "g", random_mat(rng, 1, 4, 0.3));
  Param& beta = store.add("beta", "g", random_mat(rng, 1, 4, 0.3));
  Mat probe = random_mat(rng, 3, 4);
  Mat probe_rows = random_mat(rng, 3, 14);
  Mat mask(3, 4);
  mask << 1, 0, 1, 1, 1, 1, 0, 1, 0, 1, 1, 1;

  auto check = [&](const char* name, const LossBuilder& lb) {
    GradCheckReport rep = finite_diff_check(store, lb, 1e-6);
    INFO(name);
    CHECK(rep.max_rel() <= 1e-6);
  };

  auto head = [&](Graph& g, ad::Var v) {  // random linear functional -> scalar
    return ad::sum_all(ad::cmul(v, g.constant(Mat::Ones(v.rows(), v.cols()) * 0.37)));
  };

  check("matmul", [&](Graph& g) { return head(g, ad::matmul(g.use(a), g.use(w))); });
  check("oi_matmul", [&](Graph& g) { return head(g, ad::oi_matmul(g.use(a), g.use(w))); });
  check("add", [&](Graph& g) { return head(g, g.use(a) + g.use(b)); });
  check("sub", [&](Graph& g) { return head(g, g.use(a) - g.use(b)); });
  check("cmul", [&](Graph& g) { return head(g, ad::cmul(g.use(a), g.use(b))); });
  check("cdiv", [&](Graph& g) {
    return head(g, ad::cdiv(g.use(a), ad::add_scalar(ad::abs(g.use(b)), 1.0)));
  });
  check("transpose", [&](Graph& g) { return head(g, ad::transpose(g.use(a))); });
  check("scale", [&](Graph& g) { return head(g, ad::scale(g.use(a), -1.7)); });
  check("exp", [&](Graph& g) { return head(g, ad::exp(g.use(a))); });
  check("log", [&](Graph& g) {
    return head(g, ad::log(ad::add_scalar(ad::abs(g.use(a)), 0.5)));
  });
  check("sqrt", [&](Graph& g) {
    return head(g, ad::sqrt(ad::add_scalar(ad::abs(g.use(a)), 0.5)));
  });
  check("gelu", [&](Graph& g) { return head(g, ad::gelu(g.use(a))); });
  check("softmax", [&](Graph& g) { return head(g, ad::softmax_rows(g.use(a))); });
  check("softmax_masked", [&](Graph& g) { return head(g, ad::softmax_rows(g.use(a), mask)); });
  check("oi_softmax", [&](Graph& g) { return head(g, ad::oi_softmax_rows(g.use(a), mask)); });
  check("layer_norm", [&](Graph& g) {
    return head(g, ad::layer_norm_rows(g.use(a), g.use(gamma), g.use(beta)));
  });
  check("row_sums", [&](Graph& g) { return head(g, ad::row_sums(g.use(a))); });
  check("oi_row_sums", [&](Graph& g) { return head(g, ad::oi_row_sums(g.use(a))); });
  check("col_sums", [&](Graph& g) { return head(g, ad::col_sums(g.use(a))); });
  check("rep_cols", [&](Graph& g) {
    return head(g, ad::rep_cols(ad::row_sums(g.use(a)), 5));
  });
  check("rep_rows", [&](Graph& g) {
    return head(g, ad::rep_rows(ad::col_sums(g.use(a)), 5));
  });
  check("reshape", [&](Graph& g) { return head(g, ad::reshape(g.use(a), 4, 3)); });
  check("concat_rows", [&](Graph& g) { return head(g, ad::concat_rows(g.use(a), g.use(b))); });
  check("concat_cols", [&](Graph& g) { return head(g, ad::concat_cols(g.use(a), g.use(b))); });
  check("block", [&](Graph& g) { return head(g, ad::block(g.use(a), 1, 1, 2, 3)); });
  check("select_rows", [&](Graph& g) {
    return head(g, ad::select_rows(g.use(a), {2, 0, 0, 1}));
  });
  check("scatter_entries", [&](Graph& g) {
    std::vector<ad::ScatterEntry> map{{0, 0, 1, 1}, {0, 1, 2, 2}, {2, 3, 0, 0}, {1, 1, 1, 1}};
    return head(g, ad::scatter_entries(g.use(a), map, 3, 3));
  });
  (void)probe;
  (void)probe_rows;
}

TEST_CASE("finite_diff_check: linear layer with squared loss") {
  Rng rng(8);
  ParamStore store;
  Param& w = store.add("w", "g", random_mat(rng, 4, 3));
  Mat x = random_mat(rng, 5, 4);
  Mat target = random_mat(rng, 5, 3);
  LossBuilder lb = [&](Graph& g) {
    ad::Var err = ad::matmul(g.constant(x), g.use(w)) - g.constant(target);
    return ad::sum_all(ad::cmul(err, err));
  };
  GradCheckReport rep = finite_diff_check(store, lb, 1e-6);
  CHECK(rep.max_rel() <= 1e-8);
}

TEST_CASE("finite_diff_check: softmax + BCE chain") {
  Rng rng(9);
  ParamStore store;
  Param& w = store.add("w", "g", random_mat(rng, 4, 4));
  Mat x = random_mat(rng, 3, 4);
  Mat gt = Mat::Zero(3, 4);
  gt(0, 1) = gt(1, 2) = gt(2, 0) = 1.0;
  LossBuilder lb = [&](Graph& g) {
    ad::Var p = ad::softmax_rows(ad::matmul(g.constant(x), g.use(w)));
    ad::Var pc = ad::clamp(p, 1e-12, 1.0 - 1e-12);
    ad::Var pos = ad::cmul(g.constant(gt), ad::log(pc));
    ad::Var neg = ad::cmul(g.constant((1.0 - gt.array()).matrix()),
                           ad::log(ad::add_scalar(ad::scale(pc, -1.0), 1.0)));
    return ad::scale(ad::sum_all(pos + neg), -1.0 / 12.0);
  };
  GradCheckReport rep = finite_diff_check(store, lb, 1e-6);
  CHECK(rep.max_rel() <= 1e-6);
}

TEST_CASE("finite_diff_check: unused parameter reported as near-zero") {
  Rng rng(10);
  ParamStore store;
  Param& w = store.add("w", "g", random_mat(rng, 2, 2));
  Param& unused = store.add("unused", "g", random_mat(rng, 2, 2));
  (void)unused;
  LossBuilder lb = [&](Graph& g) { return ad::sum_all(ad::cmul(g.use(w), g.use(w))); };
  GradCheckReport rep = finite_diff_check(store, lb, 1e-6);
  bool found = false;
  for (const auto& e : rep.entries) {
    if (e.name == "unused") {
      found = true;
      CHECK(e.checked == 0);
      CHECK(e.skipped_small == 4);
      CHECK(e.max_abs_small <= 1e-9);
    }
  }
  CHECK(found);
}

TEST_CASE("frozen parameters are skipped by the checker") {
  Rng rng(11);
  ParamStore store;
  Param& w = store.add("w", "g", random_mat(rng, 2, 2));
  Param& frozen = store.add("frozen", "g", random_mat(rng, 2, 2));
  frozen.trainable = false;
  LossBuilder lb = [&](Graph& g) {
    return ad::sum_all(ad::cmul(g.use(w), g.use(frozen)));
  };
  GradCheckReport rep = finite_diff_check(store, lb, 1e-6);
  for (const auto& e : rep.entries) {
    if (e.name == "frozen") CHECK(e.frozen);
  }
}
