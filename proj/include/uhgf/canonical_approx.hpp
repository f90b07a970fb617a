// SPDX-License-Identifier: Apache-2.0
#pragma once

// Gaussian approximations to the canonical volatility posterior p(x) ~ e^J.
//
// The classic update expands J at the prior mean gamma and can produce a
// negative precision when J is convex there. The unbounded update builds two
// quadratic expansions -- one from the concave envelope K at gamma, one at
// the Lambert-W stationary point of J -- and moment-matches their softmax
// blend. Its precision is positive by construction.

#include <cmath>
#include <limits>

#include "uhgf/canonical.hpp"
#include "uhgf/gaussian.hpp"
#include "uhgf/special_functions.hpp"

namespace uhgf {

// One quadratic expansion of the energy: a Gaussian with its expansion point.
struct Expansion {
  double mean = 0.0;
  double precision = 0.0;
  double point = 0.0;          // where the energy was expanded
  bool used_fallback = false;  // curvature taken from K because J'' >= 0
};

// Outcome of the classic update. `raw_precision` is -J''(gamma) as computed;
// when it is not strictly positive the update has no usable posterior and
// `ok` is false. This is a recoverable condition, not an exception.
struct ClassicUpdate {
  bool ok = false;
  Gaussian posterior{std::numeric_limits<double>::quiet_NaN(),
                     std::numeric_limits<double>::quiet_NaN()};
  double raw_precision = 0.0;
};

struct UpdateDiagnostics {
  Expansion l1;
  Expansion l2;
  double blend = 0.0;              // weight of the l2 component
  double mode = 0.0;               // Lambert-W stationary point x*
  double classic_precision = 0.0;  // -J''(gamma), for comparison
  bool classic_failed = false;
};

struct BlendedUpdate {
  Gaussian posterior;
  UpdateDiagnostics diag;
};

inline ClassicUpdate classic_update(const CanonicalParams& p) {
  detail::require_params(p, "classic_update");
  const double raw = -hess_J(p.gamma, p);
  ClassicUpdate out;
  out.raw_precision = raw;
  out.ok = raw > 0.0;
  if (out.ok) {
    const double w = weight_w(p.gamma, p.alpha);
    const double delta = vape_delta(p.gamma, p.alpha, p.beta);
    out.posterior = {p.gamma + 0.5 * w * delta / raw, raw};
  }
  return out;
}

// First expansion: curvature from the concave K at gamma, mean moved by the
// same gradient step as the classic update. Precision >= 1/2 always.
inline Expansion expansion_l1(const CanonicalParams& p) {
  detail::require_params(p, "expansion_l1");
  const double pi = -hess_K(p.gamma, p);
  const double w = weight_w(p.gamma, p.alpha);
  const double delta = vape_delta(p.gamma, p.alpha, p.beta);
  return {p.gamma + 0.5 * w * delta / pi, pi, p.gamma, false};
}

// Stationary point of J in the small-alpha limit: the unique solution of
// beta * e^-x = 1 + x - gamma, expressed through W0.
inline double canonical_mode(double beta, double gamma) {
  if (!(beta > 0.0) || !std::isfinite(beta) || !std::isfinite(gamma))
    throw std::domain_error("canonical_mode: beta must be positive, gamma finite");
  const double ell = (std::log(beta) + 1.0) - gamma;
  return (gamma - 1.0) + lambert_w0_of_exp(ell);
}

// Second expansion: at the Lambert-W mode, with one Newton correction of the
// mean. If J is convex there (the mode formula ignores alpha, so it can land
// in the convex region), fall back to the strictly negative K'' curvature.
inline Expansion expansion_l2(const CanonicalParams& p) {
  detail::require_params(p, "expansion_l2");
  const double xs = canonical_mode(p.beta, p.gamma);
  double pi = -hess_J(xs, p);
  bool fallback = false;
  if (!(pi > 0.0)) {
    pi = -hess_K(xs, p);
    fallback = true;
  }
  const auto t = detail::canonical_terms(xs, p.alpha, p.beta);
  const double mean = xs + (0.5 * t.w * t.delta - 0.5 * (xs - p.gamma)) / pi;
  return {mean, pi, xs, fallback};
}

// Softmax weight of e2 against e1, from the exact energy at the two means.
inline double blend_weight(const CanonicalParams& p, const Expansion& e1,
                           const Expansion& e2) {
  return stable_sigmoid(energy_J(e2.mean, p) - energy_J(e1.mean, p));
}

// Mean and variance of the two-component mixture (1-b) N1 + b N2.
inline Gaussian moment_match(const Expansion& e1, const Expansion& e2, double b) {
  if (!(b >= 0.0 && b <= 1.0))
    throw std::domain_error("moment_match: blend weight outside [0, 1]");
  const double mean = (1.0 - b) * e1.mean + b * e2.mean;
  const double dm = e1.mean - e2.mean;
  const double var =
      (1.0 - b) / e1.precision + b / e2.precision + b * (1.0 - b) * (dm * dm);
  return {mean, 1.0 / var};
}

// The full unbounded update. Both expansions are always computed; the blend
// takes care of selecting between them smoothly.
inline BlendedUpdate uhgf_update(const CanonicalParams& p) {
  detail::require_params(p, "uhgf_update");
  BlendedUpdate out;
  out.diag.l1 = expansion_l1(p);
  out.diag.l2 = expansion_l2(p);
  out.diag.mode = out.diag.l2.point;
  out.diag.blend = blend_weight(p, out.diag.l1, out.diag.l2);
  out.diag.classic_precision = -hess_J(p.gamma, p);
  out.diag.classic_failed = !(out.diag.classic_precision > 0.0);
  out.posterior = moment_match(out.diag.l1, out.diag.l2, out.diag.blend);
  return out;
}

}  // namespace uhgf
