#include "gmtr/discretize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "gmtr/affinity.hpp"

namespace gmtr {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Shortest-augmenting-path LAP, minimization, requires n1 <= n2.
std::vector<int> lap_min(const Mat& a) {
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(a.cols());
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = -1;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  }
  return row_to_col;
}

// Objective summed in row order, so equal assignments produce bit-equal
// values on every code path.
double row_ordered_sum(const Mat& a, const std::vector<int>& row_to_col) {
  double s = 0.0;
  for (std::size_t r = 0; r < row_to_col.size(); ++r) {
    if (row_to_col[r] >= 0) s += a(static_cast<Eigen::Index>(r), row_to_col[r]);
  }
  return s;
}

// Lexicographically smallest among the exactly-optimal assignments: fix
// rows in order, accepting the smallest column whose completion still
// reaches the incumbent objective bit-exactly.
std::vector<int> lap_min_lex(const Mat& a) {
  const int n = static_cast<int>(a.rows());
  const int m = static_cast<int>(a.cols());
  std::vector<int> best = lap_min(a);
  const double target = row_ordered_sum(a, best);

  std::vector<int> fixed(n, -1);
  std::vector<char> col_used(m, 0);
  for (int r = 0; r < n; ++r) {
    bool found = false;
    for (int c = 0; c < m && !found; ++c) {
      if (col_used[c]) continue;
      std::vector<int> candidate(fixed.begin(), fixed.begin() + r);
      candidate.push_back(c);
      if (r + 1 < n) {
        // Solve the remainder with the fixed rows/columns removed.
        std::vector<int> cols_left;
        for (int cc = 0; cc < m; ++cc) {
          if (!col_used[cc] && cc != c) cols_left.push_back(cc);
        }
        Mat sub(n - r - 1, static_cast<Eigen::Index>(cols_left.size()));
        for (int rr = r + 1; rr < n; ++rr) {
          for (std::size_t k = 0; k < cols_left.size(); ++k) {
            sub(rr - r - 1, static_cast<Eigen::Index>(k)) = a(rr, cols_left[k]);
          }
        }
        std::vector<int> tail = lap_min(sub);
        for (int t : tail) candidate.push_back(cols_left[static_cast<std::size_t>(t)]);
      }
      if (row_ordered_sum(a, candidate) == target) {
        fixed[r] = c;
        col_used[c] = 1;
        found = true;
      }
    }
    if (!found) return best;  // fp prevented an exact completion; keep the optimum
  }
  return fixed;
}

}  // namespace

Mat Assignment::matrix() const {
  Mat x = Mat::Zero(static_cast<Eigen::Index>(row_to_col.size()), n2);
  for (std::size_t r = 0; r < row_to_col.size(); ++r) {
    if (row_to_col[r] >= 0) x(static_cast<Eigen::Index>(r), row_to_col[r]) = 1.0;
  }
  return x;
}

Assignment hungarian(const AssignmentProblem& prob) {
  const Mat& s = prob.scores;
  if (!all_finite(s)) throw std::invalid_argument("hungarian: non-finite entries");
  if (s.rows() == 0 || s.cols() == 0) throw std::invalid_argument("hungarian: empty matrix");

  const bool transposed = s.rows() > s.cols();
  Mat work = transposed ? Mat(s.transpose()) : s;
  if (prob.sense == Sense::Maximize) work = -work;

  std::vector<int> rc = lap_min_lex(work);

  Assignment out;
  out.n2 = static_cast<int>(s.cols());
  if (transposed) {
    out.row_to_col.assign(static_cast<std::size_t>(s.rows()), -1);
    for (std::size_t r = 0; r < rc.size(); ++r) {
      if (rc[r] >= 0) out.row_to_col[static_cast<std::size_t>(rc[r])] = static_cast<int>(r);
    }
  } else {
    out.row_to_col = std::move(rc);
  }
  out.objective = row_ordered_sum(s, out.row_to_col);
  return out;
}

namespace {

void enumerate_assignments(const Mat& K, int n1, int n2, int row, std::vector<int>& cols,
                           std::vector<char>& used, QapSolution& best, bool& have_best) {
  if (row == n1) {
    double obj = 0.0;
    for (int r = 0; r < n1; ++r) {
      const int pr = r * n2 + cols[static_cast<std::size_t>(r)];
      for (int s = 0; s < n1; ++s) {
        const int ps = s * n2 + cols[static_cast<std::size_t>(s)];
        obj += K(pr, ps);
      }
    }
    if (!have_best || obj > best.objective) {
      best.assignment = cols;
      best.objective = obj;
      best.tie = false;
      have_best = true;
    } else if (obj == best.objective) {
      best.tie = true;
    }
    return;
  }
  for (int c = 0; c < n2; ++c) {
    if (used[c]) continue;
    used[c] = 1;
    cols.push_back(c);
    enumerate_assignments(K, n1, n2, row + 1, cols, used, best, have_best);
    cols.pop_back();
    used[c] = 0;
  }
}

}  // namespace

QapSolution brute_force_qap(const AffinityInstance& inst) {
  const int n1 = inst.n1, n2 = inst.n2;
  if (n1 > n2) throw std::invalid_argument("brute_force_qap: requires n1 <= n2");
  long arrangements = 1;
  for (int k = 0; k < n1; ++k) arrangements *= (n2 - k);
  if (n1 > 8 || arrangements > 40320) {
    throw std::invalid_argument("brute_force_qap: size guard exceeded: n1 = " +
                                std::to_string(n1) + ", n2!/(n2-n1)! = " +
                                std::to_string(arrangements) + " > 40320");
  }
  Mat K = inst.dense();
  QapSolution best;
  bool have_best = false;
  std::vector<int> cols;
  std::vector<char> used(static_cast<std::size_t>(n2), 0);
  enumerate_assignments(K, n1, n2, 0, cols, used, best, have_best);
  return best;
}

double qap_objective(const AffinityInstance& inst, const std::vector<int>& assignment) {
  Mat K = inst.dense();
  double obj = 0.0;
  for (int r = 0; r < inst.n1; ++r) {
    if (assignment[static_cast<std::size_t>(r)] < 0) continue;
    const int pr = r * inst.n2 + assignment[static_cast<std::size_t>(r)];
    for (int s = 0; s < inst.n1; ++s) {
      if (assignment[static_cast<std::size_t>(s)] < 0) continue;
      const int ps = s * inst.n2 + assignment[static_cast<std::size_t>(s)];
      obj += K(pr, ps);
    }
  }
  return obj;
}

double matching_accuracy(const Mat& predicted, const Mat& ground_truth) {
  if (predicted.rows() != ground_truth.rows() || predicted.cols() != ground_truth.cols()) {
    throw std::invalid_argument("matching_accuracy: shape mismatch: " + shape_str(predicted) +
                                " vs " + shape_str(ground_truth));
  }
  const Eigen::Index n1 = predicted.rows();
  int hits = 0;
  for (Eigen::Index r = 0; r < n1; ++r) {
    int pc = -1, gc = -1;
    for (Eigen::Index c = 0; c < predicted.cols(); ++c) {
      if (predicted(r, c) == 1.0) pc = static_cast<int>(c);
      if (ground_truth(r, c) == 1.0) gc = static_cast<int>(c);
    }
    if (pc >= 0 && pc == gc) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n1);
}

}  // namespace gmtr
