#include "gmtr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gmtr {

double GradCheckReport::max_rel() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel);
  return m;
}

double GradCheckReport::max_rel_for_group(const std::string& group) const {
  double m = 0.0;
  for (const auto& e : entries) {
    if (e.group == group) m = std::max(m, e.max_rel);
  }
  return m;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  for (const auto& e : entries) {
    os << e.group << "/" << e.name;
    if (e.frozen) {
      os << ": frozen, skipped\n";
      continue;
    }
    os << ": max_rel=" << e.max_rel << " mean_rel=" << e.mean_rel << " checked=" << e.checked
       << " near_zero=" << e.skipped_small << " (worst abs " << e.max_abs_small << ")\n";
  }
  return os.str();
}

GradCheckReport finite_diff_check(ParamStore& store, const LossBuilder& loss, double h,
                                  double small) {
  GradCheckReport report;
  report.h = h;

  // One recorded pass for all analytic gradients.
  Graph g(true);
  ad::Var l = loss(g);
  g.tape.backward(l);
  std::vector<Mat> analytic(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    analytic[i] = Mat::Zero(store[i].value.rows(), store[i].value.cols());
  }
  for (auto& [p, v] : g.bound) {
    if (p->trainable) analytic[static_cast<std::size_t>(p->index)] = g.tape.grad(v);
  }

  auto value_at = [&]() {
    Graph gv(false);
    return loss(gv).scalar();
  };

  for (std::size_t i = 0; i < store.size(); ++i) {
    Param& p = store[i];
    GradCheckEntry e;
    e.name = p.name;
    e.group = p.group;
    if (!p.trainable) {
      e.frozen = true;
      report.entries.push_back(e);
      continue;
    }
    double rel_sum = 0.0;
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      double* slot = p.value.data() + k;
      const double orig = *slot;
      *slot = orig + h;
      const double lp = value_at();
      *slot = orig - h;
      const double lm = value_at();
      *slot = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = analytic[i](k / p.value.cols(), k % p.value.cols());
      const double mag = std::max(std::abs(fd), std::abs(an));
      if (mag < small) {
        e.skipped_small += 1;
        e.max_abs_small = std::max(e.max_abs_small, std::abs(fd - an));
      } else {
        const double rel = std::abs(fd - an) / mag;
        e.checked += 1;
        rel_sum += rel;
        e.max_rel = std::max(e.max_rel, rel);
      }
    }
    if (e.checked > 0) e.mean_rel = rel_sum / static_cast<double>(e.checked);
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace gmtr
