// Test-only oracles: central finite differences and small brute-force
// recomputations, independent of the implementation paths they check.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <string>

#include "painmeter/nn.hpp"
#include "painmeter/rng.hpp"

namespace painmeter::testing {

struct FdReport {
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  bool ok(double tol) const { return max_rel_error < tol; }
};

/// Central finite differences of a scalar function against an analytic
/// gradient, elementwise. Relative error uses max(|a|,|fd|) as scale; entries
/// where both are tiny are compared absolutely.
inline FdReport check_gradient(
    const Eigen::VectorXd& theta, const Eigen::VectorXd& analytic,
    const std::function<double(const Eigen::VectorXd&)>& f,
    double h = 1e-5, double abs_floor = 1e-8) {
  FdReport report;
  Eigen::VectorXd x = theta;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    x[i] = theta[i] + h;
    const double up = f(x);
    x[i] = theta[i] - h;
    const double down = f(x);
    x[i] = theta[i];
    const double fd = (up - down) / (2.0 * h);
    const double scale = std::max(std::abs(fd), std::abs(analytic[i]));
    const double err = std::abs(fd - analytic[i]);
    const double rel = scale > abs_floor ? err / scale : err / abs_floor;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = i;
    }
  }
  return report;
}

/// Brute-force maximum scan (row-major order, strict improvement).
inline double scan_max(const Grid2D& g, Eigen::Index* row = nullptr,
                       Eigen::Index* col = nullptr) {
  double best = g(0, 0);
  Eigen::Index br = 0, bc = 0;
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
      if (g(r, c) > best) {
        best = g(r, c);
        br = r;
        bc = c;
      }
    }
  }
  if (row) *row = br;
  if (col) *col = bc;
  return best;
}

/// Random grid with entries uniform in [-1, 1].
inline Grid2D random_grid(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Grid2D g(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) g(r, c) = rng.uniform(-1.0, 1.0);
  }
  return g;
}

}  // namespace painmeter::testing
