#include "gmtr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace gmtr {

double order_invariant_sum(std::vector<double>& buf) {
  std::sort(buf.begin(), buf.end());
  double s = 0.0;
  for (double v : buf) s += v;
  return s;
}

}  // namespace gmtr

namespace gmtr::ad {

namespace {

void check_same_shape(const char* op, const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch: " + shape_str(a) + " vs " +
                                shape_str(b));
  }
}

constexpr double kMaskOff = -1e30;
constexpr double kLayerNormEps = 1e-5;

Mat softmax_forward(const Mat& a, const Mat* mask) {
  Mat logits = a;
  if (mask) {
    check_same_shape("softmax mask", a, *mask);
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      if ((mask->row(i).array() != 0.0).count() == 0) {
        throw std::invalid_argument("softmax: empty attention support in row " + std::to_string(i));
      }
      for (Eigen::Index j = 0; j < a.cols(); ++j) {
        if ((*mask)(i, j) == 0.0) logits(i, j) += kMaskOff;
      }
    }
  }
  Mat out(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    double denom = 0.0;
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      // std::exp underflows to an exact zero on masked logits; Eigen's
      // vectorized exp would clamp the argument instead.
      out(i, j) = std::exp(logits(i, j) - m);
      denom += out(i, j);
    }
    out.row(i) /= denom;
  }
  return out;
}

Mat oi_softmax_forward(const Mat& a, const Mat& mask) {
  Mat logits = a;
  check_same_shape("softmax mask", a, mask);
  Mat out(a.rows(), a.cols());
  std::vector<double> buf;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if ((mask.row(i).array() != 0.0).count() == 0) {
      throw std::invalid_argument("softmax: empty attention support in row " + std::to_string(i));
    }
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (mask(i, j) == 0.0) logits(i, j) += kMaskOff;
    }
    const double m = logits.row(i).maxCoeff();
    buf.clear();
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      out(i, j) = std::exp(logits(i, j) - m);
      buf.push_back(out(i, j));
    }
    const double denom = order_invariant_sum(buf);
    out.row(i) /= denom;
  }
  return out;
}

// Shared backward for both softmax flavors: dx = y .* (g - rowsum(g .* y)).
void softmax_pull(Tape& t, int self, int parent) {
  const Mat& y = t.value_of(self);
  const Mat& g = t.grad_of(self);
  Mat gy = g.cwiseProduct(y);
  Eigen::VectorXd s = gy.rowwise().sum();
  Mat dx = y.cwiseProduct(g - s.replicate(1, y.cols()));
  t.grad_of(parent) += dx;
}

}  // namespace

const Mat& Var::value() const { return tape->value_of(id); }

double Var::scalar() const {
  const Mat& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw std::invalid_argument("scalar(): value is " + shape_str(v) + ", expected 1x1");
  }
  return v(0, 0);
}

Var Tape::input(Mat value) { return leaf(std::move(value), false); }

Var Tape::leaf(Mat value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Mat value, std::vector<int> parents, PullFn pull) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (int p : parents) {
      if (nodes_[p].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) {
      n.parents = std::move(parents);
      n.pull = std::move(pull);
    }
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Mat& Tape::grad_of(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

const Mat& Tape::grad(Var v) { return grad_of(v.id); }

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    if (n.grad.size() != 0) n.grad.setZero();
  }
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss lives on a different tape");
  const Mat& lv = nodes_[loss.id].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw std::invalid_argument("backward: loss must be a 1x1 tensor, got " + shape_str(lv));
  }
  if (!grad_enabled_) throw std::invalid_argument("backward: tape was created without gradients");
  grad_of(loss.id)(0, 0) += 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.pull) continue;
    if (n.grad.size() == 0) continue;  // never reached from the loss
    n.pull(*this, i);
  }
}

// ---- ops -------------------------------------------------------------------

namespace {

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands live on different tapes");
  return *a.tape;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(av) + " * " +
                                shape_str(bv));
  }
  Mat out = av * bv;
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (t.requires_grad(ai)) t.grad_of(ai) += g * t.value_of(bi).transpose();
    if (t.requires_grad(bi)) t.grad_of(bi) += t.value_of(ai).transpose() * g;
  });
}

Var operator+(Var a, Var b) {
  Tape& t = tape_of(a, b);
  check_same_shape("add", a.value(), b.value());
  const int ai = a.id, bi = b.id;
  return t.record(a.value() + b.value(), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (t.requires_grad(ai)) t.grad_of(ai) += g;
    if (t.requires_grad(bi)) t.grad_of(bi) += g;
  });
}

Var operator-(Var a, Var b) {
  Tape& t = tape_of(a, b);
  check_same_shape("sub", a.value(), b.value());
  const int ai = a.id, bi = b.id;
  return t.record(a.value() - b.value(), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (t.requires_grad(ai)) t.grad_of(ai) += g;
    if (t.requires_grad(bi)) t.grad_of(bi) -= g;
  });
}

Var cmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  check_same_shape("cmul", a.value(), b.value());
  const int ai = a.id, bi = b.id;
  return t.record(a.value().cwiseProduct(b.value()), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (t.requires_grad(ai)) t.grad_of(ai) += g.cwiseProduct(t.value_of(bi));
    if (t.requires_grad(bi)) t.grad_of(bi) += g.cwiseProduct(t.value_of(ai));
  });
}

Var cdiv(Var a, Var b) {
  Tape& t = tape_of(a, b);
  check_same_shape("cdiv", a.value(), b.value());
  const int ai = a.id, bi = b.id;
  return t.record(a.value().cwiseQuotient(b.value()), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    const Mat& bv = t.value_of(bi);
    if (t.requires_grad(ai)) t.grad_of(ai) += g.cwiseQuotient(bv);
    if (t.requires_grad(bi)) {
      t.grad_of(bi) -= g.cwiseProduct(t.value_of(self)).cwiseQuotient(bv);
    }
  });
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record(a.value().transpose(), {ai}, [ai](Tape& t, int self) {
    t.grad_of(ai) += t.grad_of(self).transpose();
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record(a.value() * s, {ai}, [ai, s](Tape& t, int self) {
    t.grad_of(ai) += t.grad_of(self) * s;
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record((a.value().array() + s).matrix(), {ai}, [ai](Tape& t, int self) {
    t.grad_of(ai) += t.grad_of(self);
  });
}

Var exp(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record(a.value().array().exp().matrix(), {ai}, [ai](Tape& t, int self) {
    t.grad_of(ai) += t.grad_of(self).cwiseProduct(t.value_of(self));
  });
}

Var log(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record(a.value().array().log().matrix(), {ai}, [ai](Tape& t, int self) {
    t.grad_of(ai) += t.grad_of(self).cwiseQuotient(t.value_of(ai));
  });
}

Var sqrt(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record(a.value().array().sqrt().matrix(), {ai}, [ai](Tape& t, int self) {
    t.grad_of(ai) += (t.grad_of(self).array() * 0.5 / t.value_of(self).array()).matrix();
  });
}

Var abs(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record(a.value().array().abs().matrix(), {ai}, [ai](Tape& t, int self) {
    const Mat& x = t.value_of(ai);
    Mat sign = x.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    t.grad_of(ai) += t.grad_of(self).cwiseProduct(sign);
  });
}

Var relu(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record(a.value().cwiseMax(0.0), {ai}, [ai](Tape& t, int self) {
    const Mat& x = t.value_of(ai);
    Mat on = x.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
    t.grad_of(ai) += t.grad_of(self).cwiseProduct(on);
  });
}

Var gelu(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  Mat out = a.value().unaryExpr(
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); });
  return t.record(std::move(out), {ai}, [ai](Tape& t, int self) {
    const Mat& x = t.value_of(ai);
    Mat d = x.unaryExpr([](double v) {
      const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
      return cdf + v * pdf;
    });
    t.grad_of(ai) += t.grad_of(self).cwiseProduct(d);
  });
}

Var clamp(Var a, double lo, double hi) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record(a.value().cwiseMax(lo).cwiseMin(hi), {ai}, [ai, lo, hi](Tape& t, int self) {
    const Mat& x = t.value_of(ai);
    Mat in = x.unaryExpr([lo, hi](double v) { return (v > lo && v < hi) ? 1.0 : 0.0; });
    t.grad_of(ai) += t.grad_of(self).cwiseProduct(in);
  });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record(softmax_forward(a.value(), nullptr), {ai},
                  [ai](Tape& t, int self) { softmax_pull(t, self, ai); });
}

Var softmax_rows(Var a, const Mat& mask) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record(softmax_forward(a.value(), &mask), {ai},
                  [ai](Tape& t, int self) { softmax_pull(t, self, ai); });
}

Var oi_softmax_rows(Var a, const Mat& mask) {
  Tape& t = *a.tape;
  const int ai = a.id;
  return t.record(oi_softmax_forward(a.value(), mask), {ai},
                  [ai](Tape& t, int self) { softmax_pull(t, self, ai); });
}

Var layer_norm_rows(Var x, Var gamma, Var beta) {
  Tape& t = *x.tape;
  const Mat& xv = x.value();
  const Eigen::Index d = xv.cols();
  if (gamma.value().rows() != 1 || gamma.value().cols() != d || beta.value().rows() != 1 ||
      beta.value().cols() != d) {
    throw std::invalid_argument("layer_norm: gamma/beta must be 1x" + std::to_string(d) +
                                ", got " + shape_str(gamma.value()) + " and " +
                                shape_str(beta.value()));
  }
  Eigen::VectorXd mu = xv.rowwise().mean();
  Mat centered = xv - mu.replicate(1, d);
  Eigen::VectorXd var = centered.array().square().matrix().rowwise().mean();
  Eigen::VectorXd inv = (var.array() + kLayerNormEps).sqrt().inverse();
  Mat xhat = (centered.array().colwise() * inv.array()).matrix();
  Mat out = ((xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
             beta.value().row(0).array())
                .matrix();
  const int xi = x.id, gi = gamma.id, bi = beta.id;
  // xhat and inv are cheap to keep; the pull closure owns copies.
  auto xhat_p = std::make_shared<Mat>(std::move(xhat));
  auto inv_p = std::make_shared<Eigen::VectorXd>(std::move(inv));
  return t.record(std::move(out), {xi, gi, bi}, [xi, gi, bi, xhat_p, inv_p](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    const Mat& xh = *xhat_p;
    const Eigen::Index d = xh.cols();
    if (t.requires_grad(bi)) t.grad_of(bi) += g.colwise().sum();
    if (t.requires_grad(gi)) t.grad_of(gi) += g.cwiseProduct(xh).colwise().sum();
    if (t.requires_grad(xi)) {
      Mat gs = (g.array().rowwise() * t.value_of(gi).row(0).array()).matrix();
      Eigen::VectorXd m1 = gs.rowwise().mean();
      Eigen::VectorXd m2 = gs.cwiseProduct(xh).rowwise().mean();
      Mat corr = (xh.array().colwise() * m2.array()).matrix();
      Mat dx = gs - m1.replicate(1, d) - corr;
      t.grad_of(xi) += (dx.array().colwise() * inv_p->array()).matrix();
    }
  });
}

Var sum_all(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {ai}, [ai](Tape& t, int self) {
    const double g = t.grad_of(self)(0, 0);
    t.grad_of(ai).array() += g;
  });
}

Var row_sums(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  Mat out = a.value().rowwise().sum();
  return t.record(std::move(out), {ai}, [ai](Tape& t, int self) {
    t.grad_of(ai) += t.grad_of(self).replicate(1, t.value_of(ai).cols());
  });
}

Var col_sums(Var a) {
  Tape& t = *a.tape;
  const int ai = a.id;
  Mat out = a.value().colwise().sum();
  return t.record(std::move(out), {ai}, [ai](Tape& t, int self) {
    t.grad_of(ai) += t.grad_of(self).replicate(t.value_of(ai).rows(), 1);
  });
}

Var rep_cols(Var v, int n) {
  Tape& t = *v.tape;
  if (v.cols() != 1) throw std::invalid_argument("rep_cols: expected mx1, got " + shape_str(v.value()));
  const int vi = v.id;
  return t.record(v.value().replicate(1, n), {vi}, [vi](Tape& t, int self) {
    t.grad_of(vi) += t.grad_of(self).rowwise().sum();
  });
}

Var rep_rows(Var v, int m) {
  Tape& t = *v.tape;
  if (v.rows() != 1) throw std::invalid_argument("rep_rows: expected 1xn, got " + shape_str(v.value()));
  const int vi = v.id;
  return t.record(v.value().replicate(m, 1), {vi}, [vi](Tape& t, int self) {
    t.grad_of(vi) += t.grad_of(self).colwise().sum();
  });
}

Var reshape(Var a, int r, int c) {
  Tape& t = *a.tape;
  const Mat& av = a.value();
  if (av.size() != static_cast<Eigen::Index>(r) * c) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(av) + " as " +
                                std::to_string(r) + "x" + std::to_string(c));
  }
  Mat out = Eigen::Map<const Mat>(av.data(), r, c);
  const int ai = a.id;
  return t.record(std::move(out), {ai}, [ai](Tape& t, int self) {
    const Mat& av = t.value_of(ai);
    const Mat& g = t.grad_of(self);
    t.grad_of(ai) += Eigen::Map<const Mat>(g.data(), av.rows(), av.cols());
  });
}

Var concat_rows(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("concat_rows: column mismatch: " + shape_str(a.value()) + " vs " +
                                shape_str(b.value()));
  }
  Mat out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a.value();
  out.bottomRows(b.rows()) = b.value();
  const int ai = a.id, bi = b.id;
  const Eigen::Index ar = a.rows();
  return t.record(std::move(out), {ai, bi}, [ai, bi, ar](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (t.requires_grad(ai)) t.grad_of(ai) += g.topRows(ar);
    if (t.requires_grad(bi)) t.grad_of(bi) += g.bottomRows(g.rows() - ar);
  });
}

Var concat_cols(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("concat_cols: row mismatch: " + shape_str(a.value()) + " vs " +
                                shape_str(b.value()));
  }
  Mat out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a.value();
  out.rightCols(b.cols()) = b.value();
  const int ai = a.id, bi = b.id;
  const Eigen::Index ac = a.cols();
  return t.record(std::move(out), {ai, bi}, [ai, bi, ac](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (t.requires_grad(ai)) t.grad_of(ai) += g.leftCols(ac);
    if (t.requires_grad(bi)) t.grad_of(bi) += g.rightCols(g.cols() - ac);
  });
}

Var block(Var a, int i, int j, int p, int q) {
  Tape& t = *a.tape;
  const Mat& av = a.value();
  if (i < 0 || j < 0 || i + p > av.rows() || j + q > av.cols()) {
    throw std::invalid_argument("block: " + std::to_string(p) + "x" + std::to_string(q) + " at (" +
                                std::to_string(i) + "," + std::to_string(j) +
                                ") out of range for " + shape_str(av));
  }
  const int ai = a.id;
  return t.record(av.block(i, j, p, q), {ai}, [ai, i, j, p, q](Tape& t, int self) {
    t.grad_of(ai).block(i, j, p, q) += t.grad_of(self);
  });
}

Var select_rows(Var a, std::vector<int> idx) {
  Tape& t = *a.tape;
  const Mat& av = a.value();
  Mat out(static_cast<Eigen::Index>(idx.size()), av.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= av.rows()) {
      throw std::invalid_argument("select_rows: index " + std::to_string(idx[k]) +
                                  " out of range for " + shape_str(av));
    }
    out.row(static_cast<Eigen::Index>(k)) = av.row(idx[k]);
  }
  const int ai = a.id;
  auto idx_p = std::make_shared<std::vector<int>>(std::move(idx));
  return t.record(std::move(out), {ai}, [ai, idx_p](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    Mat& ga = t.grad_of(ai);
    for (std::size_t k = 0; k < idx_p->size(); ++k) {
      ga.row((*idx_p)[k]) += g.row(static_cast<Eigen::Index>(k));
    }
  });
}

Var scatter_entries(Var src, std::vector<ScatterEntry> map, int r, int c) {
  Tape& t = *src.tape;
  const Mat& sv = src.value();
  Mat out = Mat::Zero(r, c);
  for (const ScatterEntry& e : map) {
    if (e.src_r < 0 || e.src_r >= sv.rows() || e.src_c < 0 || e.src_c >= sv.cols() || e.dst_r < 0 ||
        e.dst_r >= r || e.dst_c < 0 || e.dst_c >= c) {
      throw std::invalid_argument("scatter_entries: entry out of range");
    }
    out(e.dst_r, e.dst_c) += sv(e.src_r, e.src_c);
  }
  const int si = src.id;
  auto map_p = std::make_shared<std::vector<ScatterEntry>>(std::move(map));
  return t.record(std::move(out), {si}, [si, map_p](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    Mat& gs = t.grad_of(si);
    for (const ScatterEntry& e : *map_p) gs(e.src_r, e.src_c) += g(e.dst_r, e.dst_c);
  });
}

Var oi_matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Mat& av = a.value();
  const Mat& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(av) + " * " +
                                shape_str(bv));
  }
  Mat out(av.rows(), bv.cols());
  std::vector<double> buf(static_cast<std::size_t>(av.cols()));
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    for (Eigen::Index j = 0; j < bv.cols(); ++j) {
      for (Eigen::Index k = 0; k < av.cols(); ++k) {
        buf[static_cast<std::size_t>(k)] = av(i, k) * bv(k, j);
      }
      out(i, j) = order_invariant_sum(buf);
    }
  }
  const int ai = a.id, bi = b.id;
  return t.record(std::move(out), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Mat& g = t.grad_of(self);
    if (t.requires_grad(ai)) t.grad_of(ai) += g * t.value_of(bi).transpose();
    if (t.requires_grad(bi)) t.grad_of(bi) += t.value_of(ai).transpose() * g;
  });
}

Var oi_row_sums(Var a) {
  Tape& t = *a.tape;
  const Mat& av = a.value();
  Mat out(av.rows(), 1);
  std::vector<double> buf(static_cast<std::size_t>(av.cols()));
  for (Eigen::Index i = 0; i < av.rows(); ++i) {
    for (Eigen::Index j = 0; j < av.cols(); ++j) buf[static_cast<std::size_t>(j)] = av(i, j);
    out(i, 0) = order_invariant_sum(buf);
  }
  const int ai = a.id;
  return t.record(std::move(out), {ai}, [ai](Tape& t, int self) {
    t.grad_of(ai) += t.grad_of(self).replicate(1, t.value_of(ai).cols());
  });
}

}  // namespace gmtr::ad
