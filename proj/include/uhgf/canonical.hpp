// SPDX-License-Identifier: Apache-2.0
#pragma once

// One-dimensional variational energy of a log-volatility state with a single
// volatility child, reduced to canonical form:
//
//   J(x) = -1/2 log(alpha + e^x) - 1/2 beta / (alpha + e^x) - 1/4 (x - gamma)^2
//
// alpha is the child's previous variance, beta its posterior variance plus
// squared prediction error, gamma the prior mean of x. K = J without the
// error term's contribution to curvature; K is concave everywhere, J is not.

#include <cmath>
#include <stdexcept>
#include <string>

namespace uhgf {

struct CanonicalParams {
  double alpha;
  double beta;
  double gamma;
};

inline bool valid(const CanonicalParams& p) {
  return std::isfinite(p.alpha) && p.alpha > 0.0 && std::isfinite(p.beta) &&
         p.beta > 0.0 && std::isfinite(p.gamma);
}

// J split into its log, error, and prior terms (in that order).
struct EnergyComponents {
  double log_term;
  double error_term;
  double prior_term;
};

namespace detail {

// log(alpha + e^x) without overflow; beyond x = 700 the direct sum would
// overflow, so switch to x + log1p(alpha * e^-x).
inline double log_alpha_plus_exp(double alpha, double x) {
  if (x > 700.0) return x + std::log1p(alpha * std::exp(-x));
  return std::log(alpha + std::exp(x));
}

inline void require_finite(double x, const char* who) {
  if (!std::isfinite(x)) throw std::domain_error(std::string(who) + ": non-finite evaluation point");
}

inline void require_params(const CanonicalParams& p, const char* who) {
  if (!valid(p)) throw std::domain_error(std::string(who) + ": invalid parameters");
}

// w and delta derived from one shared evaluation of log(alpha + e^x), so the
// algebraic identities between J's derivatives hold bitwise.
struct CanonicalTerms {
  double log_denom;  // log(alpha + e^x)
  double w;          // e^x / (alpha + e^x), in (0, 1)
  double delta;      // beta / (alpha + e^x) - 1, in (-1, inf)
};

inline CanonicalTerms canonical_terms(double x, double alpha, double beta) {
  const double log_denom = log_alpha_plus_exp(alpha, x);
  return {log_denom, std::exp(x - log_denom), std::expm1(std::log(beta) - log_denom)};
}

}  // namespace detail

// Volatility weight w(x) = e^x / (alpha + e^x).
inline double weight_w(double x, double alpha) {
  detail::require_finite(x, "weight_w");
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw std::domain_error("weight_w: alpha must be positive and finite");
  const double log_denom = detail::log_alpha_plus_exp(alpha, x);
  return std::exp(x - log_denom);
}

// Volatility prediction error delta(x) = beta / (alpha + e^x) - 1.
inline double vape_delta(double x, double alpha, double beta) {
  detail::require_finite(x, "vape_delta");
  if (!(alpha > 0.0) || !(beta > 0.0) || !std::isfinite(alpha) || !std::isfinite(beta))
    throw std::domain_error("vape_delta: alpha and beta must be positive and finite");
  const double log_denom = detail::log_alpha_plus_exp(alpha, x);
  return std::expm1(std::log(beta) - log_denom);
}

inline EnergyComponents energy_components(double x, const CanonicalParams& p) {
  detail::require_finite(x, "energy_components");
  detail::require_params(p, "energy_components");
  const double log_denom = detail::log_alpha_plus_exp(p.alpha, x);
  const double dx = x - p.gamma;
  return {-0.5 * log_denom, -0.5 * std::exp(std::log(p.beta) - log_denom), -0.25 * (dx * dx)};
}

inline double energy_J(double x, const CanonicalParams& p) {
  const EnergyComponents c = energy_components(x, p);
  return (c.log_term + c.error_term) + c.prior_term;
}

inline double grad_J(double x, const CanonicalParams& p) {
  detail::require_finite(x, "grad_J");
  detail::require_params(p, "grad_J");
  const auto t = detail::canonical_terms(x, p.alpha, p.beta);
  return 0.5 * t.w * t.delta - 0.5 * (x - p.gamma);
}

inline double hess_J(double x, const CanonicalParams& p) {
  detail::require_finite(x, "hess_J");
  detail::require_params(p, "hess_J");
  const auto t = detail::canonical_terms(x, p.alpha, p.beta);
  return -0.5 * t.w * (t.w + (2.0 * t.w - 1.0) * t.delta) - 0.5;
}

// Concave companion energy: J with the error term dropped.
inline double energy_K(double x, const CanonicalParams& p) {
  const EnergyComponents c = energy_components(x, p);
  return c.log_term + c.prior_term;
}

inline double grad_K(double x, const CanonicalParams& p) {
  detail::require_finite(x, "grad_K");
  detail::require_params(p, "grad_K");
  const double w = weight_w(x, p.alpha);
  return -0.5 * w - 0.5 * (x - p.gamma);
}

// K'' lies in [-5/8, -1/2] for all x; this bound is what makes the fallback
// curvature strictly negative.
inline double hess_K(double x, const CanonicalParams& p) {
  detail::require_finite(x, "hess_K");
  detail::require_params(p, "hess_K");
  const double w = weight_w(x, p.alpha);
  return -0.5 * w * (1.0 - w) - 0.5;
}

}  // namespace uhgf
