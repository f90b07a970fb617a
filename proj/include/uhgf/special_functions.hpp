// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>

namespace uhgf {

namespace detail {

// Solves w * e^w = e^ell for the principal branch, i.e. w + log w = ell.
// Working from the log-space residual keeps the iteration overflow-free for
// |ell| far beyond what exp() can represent. Halley steps from a
// regime-dependent seed converge in <= 5 iterations over the whole range.
inline double w0_from_log(double ell) {
  if (ell < -36.7) return std::exp(ell);  // W0(z) = z to full double precision
  double w;
  if (ell > 2.0) {
    w = ell - std::log(ell);
  } else {
    const double z = std::exp(ell);
    w = (z < 0.5) ? z * (1.0 - z) : std::log1p(z);
  }
  for (int it = 0; it < 20; ++it) {
    const double g = w + std::log(w) - ell;    // residual
    const double gp = (w + 1.0) / w;           // g'
    const double step = 2.0 * g * gp / (2.0 * gp * gp + g / (w * w));
    double next = w - step;
    if (next <= 0.0) next = 0.5 * w;           // keep the iterate in-domain
    w = next;
    if (std::abs(step) <= 1e-15 * (1.0 + std::abs(w))) break;
  }
  return w;
}

}  // namespace detail

// Principal branch W0 of the Lambert W function: w * e^w = z, z >= 0.
inline double lambert_w0(double z) {
  if (std::isnan(z) || z < 0.0)
    throw std::domain_error("lambert_w0: argument must be >= 0");
  if (z == 0.0) return 0.0;
  if (std::isinf(z)) return z;
  return detail::w0_from_log(std::log(z));
}

// W0(exp(ell)) without forming exp(ell); safe for ell up to about +-700.
inline double lambert_w0_of_exp(double ell) {
  if (!std::isfinite(ell))
    throw std::domain_error("lambert_w0_of_exp: log-argument must be finite");
  return detail::w0_from_log(ell);
}

// Logistic function 1/(1 + e^-d) evaluated without overflow for any d.
inline double stable_sigmoid(double d) {
  if (std::isnan(d)) throw std::domain_error("stable_sigmoid: NaN argument");
  if (d >= 0.0) return 1.0 / (1.0 + std::exp(-d));
  const double e = std::exp(d);
  return e / (1.0 + e);
}

}  // namespace uhgf
