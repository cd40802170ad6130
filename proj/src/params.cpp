#include "gmtr/params.hpp"

#include <algorithm>
#include <stdexcept>

namespace gmtr {

Param& ParamStore::add(std::string name, std::string group, Mat init) {
  if (find(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  auto p = std::make_unique<Param>();
  p->name = std::move(name);
  p->group = std::move(group);
  p->value = std::move(init);
  p->index = static_cast<int>(items_.size());
  items_.push_back(std::move(p));
  return *items_.back();
}

Param* ParamStore::find(const std::string& name) {
  for (auto& p : items_) {
    if (p->name == name) return p.get();
  }
  return nullptr;
}

Param& ParamStore::at(const std::string& name) {
  Param* p = find(name);
  if (!p) throw std::invalid_argument("ParamStore: no parameter '" + name + "'");
  return *p;
}

const Param& ParamStore::at(const std::string& name) const {
  return const_cast<ParamStore*>(this)->at(name);
}

std::vector<std::string> ParamStore::groups() const {
  std::vector<std::string> g;
  for (const auto& p : items_) {
    if (std::find(g.begin(), g.end(), p->group) == g.end()) g.push_back(p->group);
  }
  return g;
}

long ParamStore::scalar_count() const {
  long n = 0;
  for (const auto& p : items_) n += static_cast<long>(p->value.size());
  return n;
}

Mat init_trunc_normal(Rng& rng, int r, int c, double stddev) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.trunc_normal(stddev);
  }
  return m;
}

Mat init_zeros(int r, int c) { return Mat::Zero(r, c); }
Mat init_ones(int r, int c) { return Mat::Ones(r, c); }
Mat init_identity(int n) { return Mat::Identity(n, n); }

}  // namespace gmtr
