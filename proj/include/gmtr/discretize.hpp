#pragma once

#include <vector>

#include "gmtr/types.hpp"

namespace gmtr {

enum class Sense { Maximize, Minimize };

struct AssignmentProblem {
  Mat scores;  // n1 x n2
  Sense sense = Sense::Maximize;
};

struct Assignment {
  std::vector<int> row_to_col;  // size n1; -1 marks unassignable rows (n1 > n2)
  int n2 = 0;
  double objective = 0.0;  // in the problem's own sense
  Mat matrix() const;      // binary n1 x n2
};

// Optimal linear assignment, O(n^3) shortest augmenting paths. Ties are
// broken lexicographically (smallest column for row 0, then row 1, ...),
// resolved by exact re-solves of the reduced problems.
Assignment hungarian(const AssignmentProblem& prob);

struct QapSolution {
  std::vector<int> assignment;  // row -> col, lexicographically smallest optimum
  double objective = 0.0;       // vec(X)^T K vec(X)
  bool tie = false;             // another assignment reaches the same objective
};

class AffinityInstance;  // affinity.hpp

// Exhaustive maximization of vec(X)^T K vec(X) over injective row->col
// assignments. Guarded: n1 <= 8 and n2!/(n2-n1)! <= 40320.
QapSolution brute_force_qap(const AffinityInstance& inst);

// QAP objective of a specific assignment (-1 entries mean unassigned rows).
double qap_objective(const AffinityInstance& inst, const std::vector<int>& assignment);

// Fraction of rows whose predicted column matches the ground truth.
double matching_accuracy(const Mat& predicted, const Mat& ground_truth);

}  // namespace gmtr
