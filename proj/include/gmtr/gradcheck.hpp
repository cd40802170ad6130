#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gmtr/params.hpp"

namespace gmtr {

// Builds the scalar loss on the supplied graph. Must be deterministic: the
// checker calls it repeatedly with perturbed parameter values.
using LossBuilder = std::function<ad::Var(Graph&)>;

struct GradCheckEntry {
  std::string name;
  std::string group;
  long checked = 0;        // scalars with a meaningful relative error
  long skipped_small = 0;  // scalars where both gradients were ~0
  double max_rel = 0.0;
  double mean_rel = 0.0;
  double max_abs_small = 0.0;  // worst |analytic - fd| among the skipped ones
  bool frozen = false;         // parameter was not trainable
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double h = 0.0;

  double max_rel() const;
  double max_rel_for_group(const std::string& group) const;
  std::string summary() const;
};

// Central finite differences, (L(theta+h) - L(theta-h)) / 2h, against the
// tape gradient for every scalar of every trainable parameter. When both
// the analytic and numeric gradient are below `small`, the scalar is
// reported by absolute difference instead of a relative error.
GradCheckReport finite_diff_check(ParamStore& store, const LossBuilder& loss, double h = 1e-6,
                                  double small = 1e-6);

}  // namespace gmtr
