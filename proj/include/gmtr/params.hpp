#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gmtr/autodiff.hpp"
#include "gmtr/types.hpp"

namespace gmtr {

// A named, trainable matrix plus its Adam state. Parameters belong to one
// of two learning-rate groups ("frontend" or "solver").
struct Param {
  std::string name;
  std::string group;
  Mat value;
  Mat m_state;  // Adam first moment, sized lazily
  Mat v_state;  // Adam second moment
  bool trainable = true;
  int index = -1;
};

class ParamStore {
 public:
  Param& add(std::string name, std::string group, Mat init);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  Param* find(const std::string& name);

  std::size_t size() const { return items_.size(); }
  Param& operator[](std::size_t i) { return *items_[i]; }
  const Param& operator[](std::size_t i) const { return *items_[i]; }

  std::vector<std::string> groups() const;
  long scalar_count() const;

 private:
  std::vector<std::unique_ptr<Param>> items_;  // registration order, stable
};

// One forward pass: a tape plus the parameters bound onto it. use() binds
// each parameter once so gradients can be read back per parameter after
// backward().
struct Graph {
  ad::Tape tape;
  std::vector<std::pair<Param*, ad::Var>> bound;

  explicit Graph(bool grads = true) : tape(grads) {}

  ad::Var use(Param& p) {
    for (auto& [q, v] : bound) {
      if (q == &p) return v;
    }
    ad::Var v = tape.leaf(p.value, p.trainable);
    bound.emplace_back(&p, v);
    return v;
  }

  ad::Var constant(Mat m) { return tape.input(std::move(m)); }
};

// Standard initializers (projection weights: truncated normal, std 0.02).
Mat init_trunc_normal(Rng& rng, int r, int c, double stddev = 0.02);
Mat init_zeros(int r, int c);
Mat init_ones(int r, int c);
Mat init_identity(int n);

}  // namespace gmtr
