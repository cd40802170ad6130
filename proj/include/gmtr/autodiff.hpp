#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "gmtr/types.hpp"

namespace gmtr::ad {

class Tape;

// Handle to a node on a tape. Cheap to copy; values are immutable once
// created, gradients live on the tape and are filled by backward().
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr; }
  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;  // requires 1x1
};

// Reverse-mode tape over dense matrices. Nodes are recorded in creation
// order, which is a topological order by construction; backward() walks
// it once in reverse.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  Var input(Mat value);  // constant leaf
  Var leaf(Mat value, bool requires_grad);

  // Gradient of the last backward() pass; zeros if the node was never
  // reached. Shape always matches the node value.
  const Mat& grad(Var v);
  void zero_grad();
  void backward(Var loss);

  // --- internal, used by the op constructors ---
  using PullFn = std::function<void(Tape&, int self)>;
  Var record(Mat value, std::vector<int> parents, PullFn pull);
  const Mat& value_of(int id) const { return nodes_[id].value; }
  Mat& grad_of(int id);  // allocates zeros on first touch
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Mat value;
    Mat grad;  // empty until touched
    std::vector<int> parents;
    PullFn pull;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_;
};

struct ScatterEntry {
  int src_r, src_c;  // index into the source value
  int dst_r, dst_c;  // index into the output
};

// ---- primitive operations -------------------------------------------------
// Shapes are checked eagerly; mismatches throw std::invalid_argument with
// both shapes in the message.

Var matmul(Var a, Var b);
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var cmul(Var a, Var b);  // elementwise product
Var cdiv(Var a, Var b);  // elementwise quotient
Var transpose(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var abs(Var a);
Var relu(Var a);
Var gelu(Var a);
Var clamp(Var a, double lo, double hi);

// Row-wise softmax, numerically stabilized by per-row max subtraction.
// The masked form takes a binary matrix of the same shape; masked-out
// logits receive an additive -1e30 so they normalize to exactly zero.
// A fully masked row throws ("empty attention support").
Var softmax_rows(Var a);
Var softmax_rows(Var a, const Mat& mask);

// Per-row normalization over the last dimension, eps = 1e-5, then affine
// with gamma/beta of shape 1 x d.
Var layer_norm_rows(Var x, Var gamma, Var beta);

Var sum_all(Var a);    // 1x1
Var row_sums(Var a);   // m x 1
Var col_sums(Var a);   // 1 x n
Var rep_cols(Var v, int n);  // m x 1 -> m x n
Var rep_rows(Var v, int m);  // 1 x n -> m x n

Var reshape(Var a, int r, int c);  // row-major reinterpretation
Var concat_rows(Var a, Var b);
Var concat_cols(Var a, Var b);
Var block(Var a, int i, int j, int p, int q);
Var select_rows(Var a, std::vector<int> idx);
// Builds an r x c matrix by accumulating src entries at the mapped
// positions; positions not mentioned stay structurally zero.
Var scatter_entries(Var src, std::vector<ScatterEntry> map, int r, int c);

// ---- order-invariant variants ----------------------------------------------
// Same math as their plain counterparts but every reduction accumulates in
// value-sorted order, so permuting rows/columns of the inputs permutes the
// output bit-exactly. The backend solver uses these on the association
// graph, where node order is arbitrary.

Var oi_matmul(Var a, Var b);
Var oi_row_sums(Var a);
Var oi_softmax_rows(Var a, const Mat& mask);

}  // namespace gmtr::ad
