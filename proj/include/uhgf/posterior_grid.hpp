// SPDX-License-Identifier: Apache-2.0
#pragma once

// Brute-force normalization of a log-density on a uniform grid, plus moments
// and KL divergence against a Gaussian. This is the reference the update
// approximations are judged against, so it deliberately shares no code with
// them: plain trapezoid sums in log space with refinement by grid doubling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "uhgf/canonical.hpp"
#include "uhgf/gaussian.hpp"
#include "uhgf/special_functions.hpp"

namespace uhgf {

struct QuadratureSpec {
  double lo = -12.0;
  double hi = 12.0;
  int n_points = 64;          // raised to at least 64 internally
  double refine_tol = 1e-9;   // on log_z between successive doublings
  int max_doublings = 12;
};

struct DensityTable {
  std::vector<double> grid;
  std::vector<double> log_density;  // normalized: trapezoid integral of exp is 1
  double log_z = 0.0;
  double step = 0.0;
};

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

class QuadratureError : public std::runtime_error {
 public:
  QuadratureError(const std::string& what, double achieved)
      : std::runtime_error(what), achieved_tol(achieved) {}
  double achieved_tol;
};

namespace detail {

// log of the trapezoid integral of exp(values) with spacing h.
inline double log_trapezoid_exp(const std::vector<double>& values, double h) {
  const double m = *std::max_element(values.begin(), values.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double w = (i == 0 || i + 1 == values.size()) ? 0.5 : 1.0;
    sum += w * std::exp(values[i] - m);
  }
  return m + std::log(sum) + std::log(h);
}

}  // namespace detail

// Tabulates energy(x) - log_z on [lo, hi], doubling the grid until log_z
// moves by at most refine_tol. Throws QuadratureError if that never happens.
template <class Energy>
DensityTable normalize_posterior(Energy&& energy, const QuadratureSpec& spec) {
  if (!(spec.lo < spec.hi) || !std::isfinite(spec.lo) || !std::isfinite(spec.hi))
    throw std::domain_error("normalize_posterior: window must satisfy lo < hi");
  if (!(spec.refine_tol > 0.0))
    throw std::domain_error("normalize_posterior: refine_tol must be positive");

  int n = std::max(spec.n_points, 64);
  std::vector<double> values;
  double log_z_prev = std::numeric_limits<double>::quiet_NaN();
  double achieved = std::numeric_limits<double>::infinity();
  for (int round = 0; round <= spec.max_doublings; ++round) {
    const double h = (spec.hi - spec.lo) / (n - 1);
    values.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) values[static_cast<std::size_t>(i)] = energy(spec.lo + h * i);
    const double log_z = detail::log_trapezoid_exp(values, h);
    if (!std::isnan(log_z_prev)) {
      achieved = std::abs(log_z - log_z_prev);
      if (achieved <= spec.refine_tol) {
        DensityTable table;
        table.grid.resize(values.size());
        for (int i = 0; i < n; ++i) table.grid[static_cast<std::size_t>(i)] = spec.lo + h * i;
        table.log_density = std::move(values);
        for (double& v : table.log_density) v -= log_z;
        table.log_z = log_z;
        table.step = h;
        return table;
      }
    }
    log_z_prev = log_z;
    n = 2 * n - 1;  // nested refinement
  }
  throw QuadratureError("normalize_posterior: log_z did not settle", achieved);
}

inline Moments posterior_moments(const DensityTable& table) {
  if (table.grid.size() < 2)
    throw std::domain_error("posterior_moments: empty table");
  const std::size_t n = table.grid.size();
  auto wt = [n](std::size_t i) { return (i == 0 || i + 1 == n) ? 0.5 : 1.0; };
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    mean += wt(i) * table.grid[i] * std::exp(table.log_density[i]);
  mean *= table.step;
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = table.grid[i] - mean;
    var += wt(i) * d * d * std::exp(table.log_density[i]);
  }
  var *= table.step;
  return {mean, var};
}

// KL(p || q) where p is the table and q a Gaussian. Grid points whose density
// underflows contribute exactly zero. May come out a hair negative from
// quadrature error; callers wanting the clamped value use kl_divergence.
inline double kl_divergence_raw(const DensityTable& table, const Gaussian& q) {
  if (!q.valid()) throw std::domain_error("kl_divergence: invalid Gaussian");
  if (table.grid.size() < 2) throw std::domain_error("kl_divergence: empty table");
  const std::size_t n = table.grid.size();
  const double log_norm = 0.5 * std::log(q.precision / (2.0 * M_PI));
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lp = table.log_density[i];
    if (lp <= -745.0) continue;  // exp(lp) == 0 in double
    const double d = table.grid[i] - q.mean;
    const double lq = log_norm - 0.5 * q.precision * d * d;
    const double w = (i == 0 || i + 1 == n) ? 0.5 : 1.0;
    acc += w * std::exp(lp) * (lp - lq);
  }
  return acc * table.step;
}

inline double kl_divergence(const DensityTable& table, const Gaussian& q) {
  return std::max(kl_divergence_raw(table, q), 0.0);
}

// Window wide enough to hold essentially all posterior mass for canonical
// parameters: 12 units beyond both candidate modes, at a step of 0.01.
inline QuadratureSpec auto_window(const CanonicalParams& p) {
  detail::require_params(p, "auto_window");
  const double ell = (std::log(p.beta) + 1.0) - p.gamma;
  const double xs = (p.gamma - 1.0) + lambert_w0_of_exp(ell);
  QuadratureSpec spec;
  spec.lo = std::min(p.gamma, xs) - 12.0;
  spec.hi = std::max(p.gamma, xs) + 12.0;
  spec.n_points = std::max(64, static_cast<int>(std::ceil((spec.hi - spec.lo) / 0.01)) + 1);
  spec.refine_tol = 1e-9;
  return spec;
}

}  // namespace uhgf
