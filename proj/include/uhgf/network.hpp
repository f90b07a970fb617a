// SPDX-License-Identifier: Apache-2.0
#pragma once

// Filtering network: state nodes joined by value and volatility couplings,
// continuous input nodes at the bottom. One filter step is
//   predict everything -> absorb observations -> sweep updates child-to-parent
// with value evidence handled before volatility evidence at each node.
//
// The volatility updates here are the general form of the canonical ones in
// canonical_approx.hpp: time step t, coupling kappa, effective tonic offset
// omega_eff and an arbitrary prior precision replace the fixed canonical
// constants. With t = 1, kappa = 1, omega_eff = 0 and prior precision 1/2
// they reduce to the canonical expressions bit for bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uhgf/canonical.hpp"
#include "uhgf/canonical_approx.hpp"
#include "uhgf/gaussian.hpp"
#include "uhgf/special_functions.hpp"

namespace uhgf {

enum class CouplingKind { value, volatility };
enum class UpdateMode { classic, unbounded };

struct Edge {
  int parent = -1;
  int child = -1;
  CouplingKind kind = CouplingKind::value;
  double strength = 1.0;  // alpha for value, kappa for volatility
};

struct NodeParams {
  double tonic_volatility = 0.0;
  double tonic_drift = 0.0;
  double autoconnection = 1.0;
};

struct NodeState {
  double mean = 0.0;
  double precision = 1.0;
  double predicted_mean = 0.0;
  double predicted_precision = 1.0;
};

struct StateNode {
  std::string name;
  NodeParams params;
  NodeState state;
};

struct InputNode {
  std::string name;
  int parent = -1;
  double variance = 1.0;
};

struct Observation {
  double value = 0.0;
  double t = 1.0;
};

// Exponent bound for predicted volatilities. Updates themselves work in log
// space and need no clamp; only the prediction's exp() does.
inline constexpr double kExpClamp = 700.0;

namespace trajectory_flag {
inline constexpr unsigned fallback = 1u;            // L2 curvature came from K
inline constexpr unsigned clamped = 2u;             // volatility exponent clamped
inline constexpr unsigned negative_precision = 4u;  // classic update failed here
}  // namespace trajectory_flag

struct NodeRecord {
  double predicted_mean = std::numeric_limits<double>::quiet_NaN();
  double predicted_precision = std::numeric_limits<double>::quiet_NaN();
  double mean = std::numeric_limits<double>::quiet_NaN();
  double precision = std::numeric_limits<double>::quiet_NaN();
  double blend = std::numeric_limits<double>::quiet_NaN();
  double mode = std::numeric_limits<double>::quiet_NaN();
  double classic_precision = std::numeric_limits<double>::quiet_NaN();
  unsigned flags = 0;
};

struct StepRecord {
  std::vector<NodeRecord> nodes;
};

struct FilterFailure {
  int step = -1;
  int node = -1;
  double precision = std::numeric_limits<double>::quiet_NaN();
};

struct Trajectory {
  std::vector<std::string> node_names;
  std::vector<StepRecord> steps;  // completed steps only
  std::optional<FilterFailure> failure;
};

struct Network {
  std::vector<StateNode> nodes;
  std::vector<InputNode> inputs;
  std::vector<Edge> edges;

  // Adjacency and update order, derived by validate().
  struct Derived {
    std::vector<std::vector<std::pair<int, double>>> value_parents, vol_parents;
    std::vector<std::vector<std::pair<int, double>>> value_children, vol_children;
    std::vector<int> update_order;  // children before parents
    bool built = false;
  } derived;

  int find_node(std::string_view name) const {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (nodes[i].name == name) return static_cast<int>(i);
    return -1;
  }

  int add_node(std::string name, NodeParams params = {}, Gaussian init = {0.0, 1.0}) {
    nodes.push_back({std::move(name), params, {init.mean, init.precision, init.mean, init.precision}});
    return static_cast<int>(nodes.size()) - 1;
  }

  void add_edge(int parent, int child, CouplingKind kind, double strength) {
    edges.push_back({parent, child, kind, strength});
    derived.built = false;
  }

  int add_input(std::string name, int parent, double variance) {
    inputs.push_back({std::move(name), parent, variance});
    return static_cast<int>(inputs.size()) - 1;
  }

  // Checks structure and rebuilds adjacency: indices in range, no self
  // coupling, positive volatility strengths, acyclic graph.
  void validate() {
    const int n = static_cast<int>(nodes.size());
    if (n == 0) throw std::invalid_argument("network: no state nodes");
    derived = Derived{};
    derived.value_parents.resize(nodes.size());
    derived.vol_parents.resize(nodes.size());
    derived.value_children.resize(nodes.size());
    derived.vol_children.resize(nodes.size());
    for (const Edge& e : edges) {
      if (e.parent < 0 || e.parent >= n || e.child < 0 || e.child >= n)
        throw std::invalid_argument("network: edge endpoint out of range");
      if (e.parent == e.child)
        throw std::invalid_argument("network: self coupling not allowed");
      if (!std::isfinite(e.strength))
        throw std::invalid_argument("network: non-finite coupling strength");
      if (e.kind == CouplingKind::volatility && !(e.strength > 0.0))
        throw std::invalid_argument("network: volatility coupling must be positive");
      if (e.kind == CouplingKind::value) {
        derived.value_parents[static_cast<std::size_t>(e.child)].emplace_back(e.parent, e.strength);
        derived.value_children[static_cast<std::size_t>(e.parent)].emplace_back(e.child, e.strength);
      } else {
        derived.vol_parents[static_cast<std::size_t>(e.child)].emplace_back(e.parent, e.strength);
        derived.vol_children[static_cast<std::size_t>(e.parent)].emplace_back(e.child, e.strength);
      }
    }
    for (const InputNode& in : inputs) {
      if (in.parent < 0 || in.parent >= n)
        throw std::invalid_argument("network: input parent out of range");
      if (!(in.variance > 0.0) || !std::isfinite(in.variance))
        throw std::invalid_argument("network: input variance must be positive");
    }
    for (const StateNode& s : nodes) {
      if (!std::isfinite(s.params.tonic_volatility) || !std::isfinite(s.params.tonic_drift) ||
          !std::isfinite(s.params.autoconnection))
        throw std::invalid_argument("network: non-finite node parameter");
      if (!std::isfinite(s.state.mean) || !(s.state.precision > 0.0))
        throw std::invalid_argument("network: invalid initial state");
    }

    // Rank by longest chain of children below; parents update after children.
    std::vector<int> pending(nodes.size(), 0);  // children not yet ranked
    std::vector<int> rank(nodes.size(), 0);
    std::vector<int> ready;
    for (int i = 0; i < n; ++i) {
      const auto iu = static_cast<std::size_t>(i);
      pending[iu] = static_cast<int>(derived.value_children[iu].size() + derived.vol_children[iu].size());
      if (pending[iu] == 0) ready.push_back(i);
    }
    std::vector<int> order;
    for (std::size_t head = 0; head < ready.size(); ++head) {
      const int c = ready[head];
      order.push_back(c);
      const auto cu = static_cast<std::size_t>(c);
      auto relax = [&](const std::vector<std::pair<int, double>>& parents) {
        for (const auto& [p, s] : parents) {
          (void)s;
          const auto pu = static_cast<std::size_t>(p);
          rank[pu] = std::max(rank[pu], rank[cu] + 1);
          if (--pending[pu] == 0) ready.push_back(p);
        }
      };
      relax(derived.value_parents[cu]);
      relax(derived.vol_parents[cu]);
    }
    if (static_cast<int>(order.size()) != n)
      throw std::invalid_argument("network: coupling graph has a cycle");
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return std::pair(rank[static_cast<std::size_t>(a)], a) <
                                         std::pair(rank[static_cast<std::size_t>(b)], b); });
    derived.update_order = std::move(order);
    derived.built = true;
  }
};

// Drift part of the prediction: t * (rho + sum of value-parent contributions).
inline double predicted_drift(const Network& net, int node, double t) {
  const auto nu = static_cast<std::size_t>(node);
  double acc = net.nodes[nu].params.tonic_drift;
  for (const auto& [p, alpha] : net.derived.value_parents[nu])
    acc += alpha * net.nodes[static_cast<std::size_t>(p)].state.mean;
  return t * acc;
}

// Process variance added over the step: t * exp(omega + volatility-parent
// contributions), exponent clamped to +-700.
inline double predicted_volatility(const Network& net, int node, double t, bool* clamped = nullptr) {
  const auto nu = static_cast<std::size_t>(node);
  double ex = net.nodes[nu].params.tonic_volatility;
  for (const auto& [p, kappa] : net.derived.vol_parents[nu])
    ex += kappa * net.nodes[static_cast<std::size_t>(p)].state.mean;
  if (ex > kExpClamp || ex < -kExpClamp) {
    ex = std::clamp(ex, -kExpClamp, kExpClamp);
    if (clamped) *clamped = true;
  }
  return t * std::exp(ex);
}

// Fills the node's predicted mean and precision from current posteriors.
inline void predict_node(Network& net, int node, double t, bool* clamped = nullptr) {
  const auto nu = static_cast<std::size_t>(node);
  NodeState& s = net.nodes[nu].state;
  s.predicted_mean = net.nodes[nu].params.autoconnection * s.mean + predicted_drift(net, node, t);
  s.predicted_precision = 1.0 / (1.0 / s.precision + predicted_volatility(net, node, t, clamped));
}

// Observation with variance alpha_u absorbed into the node's belief.
inline Gaussian input_update(const Gaussian& belief, double u, double alpha_u) {
  if (!std::isfinite(u)) throw std::domain_error("input_update: non-finite observation");
  if (!(alpha_u > 0.0) || !std::isfinite(alpha_u))
    throw std::domain_error("input_update: input variance must be positive");
  const double pi = belief.precision + 1.0 / alpha_u;
  const double mu = belief.mean + (1.0 / alpha_u) / pi * (u - belief.mean);
  return {mu, pi};
}

// Linear value-child evidence: precision grows by alpha^2 * child predicted
// precision, mean moves along the child's prediction error.
inline Gaussian value_parent_update(const Gaussian& belief, double alpha,
                                    double child_predicted_precision, double child_vape) {
  const double pi = belief.precision + alpha * alpha * child_predicted_precision;
  const double mu = belief.mean + alpha * child_predicted_precision / pi * child_vape;
  return {mu, pi};
}

// One value child's quadratic contribution, reduced to (precision, strength,
// location): the child pulls the parent toward x = c.
struct ValueChildTerm {
  double predicted_precision = 1.0;
  double strength = 1.0;  // alpha
  double c = 0.0;
};

// Folds value-child evidence into an effective prior before a volatility
// update at the same node.
inline Gaussian absorb_value_children(double mu_hat, double pi_hat, double t,
                                      std::span<const ValueChildTerm> children) {
  double pi = pi_hat;
  double weighted = pi_hat * mu_hat;
  for (const ValueChildTerm& v : children) {
    const double w = v.predicted_precision * (v.strength * v.strength) * (t * t);
    pi += w;
    weighted += w * v.c;
  }
  return {weighted / pi, pi};
}

// Everything a volatility update needs about one (parent, child) pair plus
// the parent's prediction. Field meanings follow the generative model: the
// child gained variance t * exp(kappa * x + omega_eff) over the step.
struct VolatilityUpdateInput {
  double t = 1.0;
  double sigma_child_prev = 1.0;  // child posterior variance before the step
  double kappa = 1.0;             // volatility coupling, > 0
  double omega_eff = 0.0;         // child tonic volatility + frozen co-parent terms
  double beta = 1.0;              // child variance + squared prediction error
  double mu_hat = 0.0;            // parent prediction
  double pi_hat = 1.0;
};

namespace detail {

inline void require_vol_input(const VolatilityUpdateInput& in) {
  if (!(in.t > 0.0) || !std::isfinite(in.t) || !(in.kappa > 0.0) || !std::isfinite(in.kappa) ||
      !(in.sigma_child_prev > 0.0) || !std::isfinite(in.sigma_child_prev) ||
      !(in.beta > 0.0) || !std::isfinite(in.beta) || !std::isfinite(in.omega_eff) ||
      !std::isfinite(in.mu_hat) || !(in.pi_hat > 0.0) || !std::isfinite(in.pi_hat))
    throw std::domain_error("volatility update: invalid input");
}

struct VolTerms {
  double w;
  double delta;
};

// w and delta of one child at parent value x, sharing one log-denominator.
inline VolTerms vol_terms(const VolatilityUpdateInput& in, double x) {
  const double y = (std::log(in.t) + in.kappa * x) + in.omega_eff;
  const double log_denom = log_alpha_plus_exp(in.sigma_child_prev, y);
  return {std::exp(y - log_denom), std::expm1(std::log(in.beta) - log_denom)};
}

// Exact variational energy of the parent given its volatility children.
inline double vol_energy(std::span<const VolatilityUpdateInput> children, double mu_hat,
                         double pi_hat, double x) {
  double acc = 0.0;
  for (const VolatilityUpdateInput& in : children) {
    const double y = (std::log(in.t) + in.kappa * x) + in.omega_eff;
    const double log_denom = log_alpha_plus_exp(in.sigma_child_prev, y);
    acc += (-0.5 * log_denom) + (-0.5 * std::exp(std::log(in.beta) - log_denom));
  }
  const double dx = x - mu_hat;
  return acc + (-0.5 * pi_hat) * (dx * dx);
}

// Stationary point of the single-child energy in the small-sigma limit,
// solved in the child's log-volatility coordinate.
inline double vol_mode(const VolatilityUpdateInput& in) {
  const double log_t = std::log(in.t);
  const double gamma_c = (log_t + in.kappa * in.mu_hat) + in.omega_eff;
  const double pi_y = in.pi_hat / (in.kappa * in.kappa);
  const double two_pi_y = 2.0 * pi_y;
  const double inv_two_pi_y = 1.0 / two_pi_y;
  const double ell = ((std::log(in.beta) - std::log(two_pi_y)) + inv_two_pi_y) - gamma_c;
  const double ys = (gamma_c - inv_two_pi_y) + lambert_w0_of_exp(ell);
  return ((ys - log_t) - in.omega_eff) / in.kappa;
}

}  // namespace detail

// Classic volatility update over one or more children; fails (ok = false)
// when the summed curvature is not positive.
inline ClassicUpdate volatility_update_classic(std::span<const VolatilityUpdateInput> children) {
  if (children.empty()) throw std::domain_error("volatility update: no children");
  for (const auto& in : children) detail::require_vol_input(in);
  const double mu_hat = children[0].mu_hat;
  const double pi_hat = children[0].pi_hat;
  double pi = pi_hat;
  double grad = 0.0;
  for (const VolatilityUpdateInput& in : children) {
    const auto tm = detail::vol_terms(in, mu_hat);
    pi += (0.5 * in.kappa * in.kappa) * tm.w * (tm.w + (2.0 * tm.w - 1.0) * tm.delta);
    grad += 0.5 * in.kappa * tm.w * tm.delta;
  }
  ClassicUpdate out;
  out.raw_precision = pi;
  out.ok = pi > 0.0;
  if (out.ok) out.posterior = {mu_hat + grad / pi, pi};
  return out;
}

inline ClassicUpdate volatility_update_classic(const VolatilityUpdateInput& in) {
  return volatility_update_classic(std::span<const VolatilityUpdateInput>(&in, 1));
}

// Unbounded single-child update; the generalized form of uhgf_update.
inline BlendedUpdate volatility_update_uhgf(const VolatilityUpdateInput& in) {
  detail::require_vol_input(in);
  const std::span<const VolatilityUpdateInput> self(&in, 1);
  const double halfk2 = 0.5 * in.kappa * in.kappa;
  const auto t0 = detail::vol_terms(in, in.mu_hat);

  BlendedUpdate out;
  Expansion& l1 = out.diag.l1;
  l1.precision = in.pi_hat + halfk2 * t0.w * (1.0 - t0.w);
  l1.mean = in.mu_hat + 0.5 * in.kappa * t0.w * t0.delta / l1.precision;
  l1.point = in.mu_hat;

  const double xs = detail::vol_mode(in);
  const auto ts = detail::vol_terms(in, xs);
  Expansion& l2 = out.diag.l2;
  l2.point = xs;
  l2.precision = in.pi_hat + halfk2 * ts.w * (ts.w + (2.0 * ts.w - 1.0) * ts.delta);
  if (!(l2.precision > 0.0)) {
    l2.precision = in.pi_hat + halfk2 * ts.w * (1.0 - ts.w);
    l2.used_fallback = true;
  }
  l2.mean = xs + (0.5 * in.kappa * ts.w * ts.delta - in.pi_hat * (xs - in.mu_hat)) / l2.precision;

  out.diag.mode = xs;
  out.diag.blend = stable_sigmoid(detail::vol_energy(self, in.mu_hat, in.pi_hat, l2.mean) -
                                  detail::vol_energy(self, in.mu_hat, in.pi_hat, l1.mean));
  out.diag.classic_precision =
      in.pi_hat + halfk2 * t0.w * (t0.w + (2.0 * t0.w - 1.0) * t0.delta);
  out.diag.classic_failed = !(out.diag.classic_precision > 0.0);
  out.posterior = moment_match(l1, l2, out.diag.blend);
  return out;
}

// Unbounded update with n volatility children: one concave expansion at the
// prediction plus one expansion per child mode, blended by softmax over the
// exact energy and moment-matched.
inline BlendedUpdate volatility_update_multi(std::span<const VolatilityUpdateInput> children) {
  if (children.empty()) throw std::domain_error("volatility update: no children");
  for (const auto& in : children) {
    detail::require_vol_input(in);
    if (in.t != children[0].t || in.mu_hat != children[0].mu_hat || in.pi_hat != children[0].pi_hat)
      throw std::domain_error("volatility update: children disagree on parent prediction");
  }
  const double mu_hat = children[0].mu_hat;
  const double pi_hat = children[0].pi_hat;
  const std::size_t n = children.size();

  double pi1 = pi_hat;
  double grad1 = 0.0;
  for (const VolatilityUpdateInput& in : children) {
    const auto tm = detail::vol_terms(in, mu_hat);
    pi1 += (0.5 * in.kappa * in.kappa) * tm.w * (1.0 - tm.w);
    grad1 += 0.5 * in.kappa * tm.w * tm.delta;
  }
  const double mu1 = mu_hat + grad1 / pi1;

  std::vector<Expansion> exps(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double xs = detail::vol_mode(children[i]);
    double pi2 = pi_hat;
    double grad2 = 0.0;
    for (const VolatilityUpdateInput& in : children) {
      const auto tm = detail::vol_terms(in, xs);
      pi2 += (0.5 * in.kappa * in.kappa) * tm.w * (tm.w + (2.0 * tm.w - 1.0) * tm.delta);
      grad2 += 0.5 * in.kappa * tm.w * tm.delta;
    }
    bool fallback = false;
    if (!(pi2 > 0.0)) {
      pi2 = pi_hat;
      for (const VolatilityUpdateInput& in : children) {
        const auto tm = detail::vol_terms(in, xs);
        pi2 += (0.5 * in.kappa * in.kappa) * tm.w * (1.0 - tm.w);
      }
      fallback = true;
    }
    exps[i] = {xs + (grad2 - pi_hat * (xs - mu_hat)) / pi2, pi2, xs, fallback};
  }

  // Softmax over the exact energy at each candidate mean; index 0 is L1.
  std::vector<double> energies(n + 1);
  energies[0] = detail::vol_energy(children, mu_hat, pi_hat, mu1);
  for (std::size_t i = 0; i < n; ++i)
    energies[i + 1] = detail::vol_energy(children, mu_hat, pi_hat, exps[i].mean);
  const double m = *std::max_element(energies.begin(), energies.end());
  double denom = 0.0;
  for (const double e : energies) denom += std::exp(e - m);
  std::vector<double> b(n);
  double b_rest = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    b[i] = std::exp(energies[i + 1] - m) / denom;
    b_rest += b[i];
  }
  const double b0 = 1.0 - b_rest;

  double mean = b0 * mu1;
  for (std::size_t i = 0; i < n; ++i)
    if (b[i] != 0.0) mean += b[i] * exps[i].mean;
  double var = 0.0;
  if (b0 != 0.0) {
    const double d = mu1 - mean;
    var += b0 * (1.0 / pi1 + d * d);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (b[i] == 0.0) continue;
    const double d = exps[i].mean - mean;
    var += b[i] * (1.0 / exps[i].precision + d * d);
  }

  BlendedUpdate out;
  out.posterior = {mean, 1.0 / var};
  out.diag.l1 = {mu1, pi1, mu_hat, false};
  std::size_t top = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (b[i] > b[top]) top = i;
  out.diag.l2 = exps[top];
  out.diag.mode = exps[top].point;
  out.diag.blend = b_rest;
  {
    ClassicUpdate classic = volatility_update_classic(children);
    out.diag.classic_precision = classic.raw_precision;
    out.diag.classic_failed = !classic.ok;
  }
  return out;
}

// Runs the filter over a sequence of observations. The network is taken by
// value: the caller's configured instance is the reusable template, the copy
// carries the evolving state. In classic mode a non-positive precision stops
// the run; the trajectory then holds exactly the completed steps and the
// failure record.
inline Trajectory filter_sequence(Network net, std::span<const Observation> observations,
                                  UpdateMode mode) {
  net.validate();
  if (net.inputs.empty())
    throw std::invalid_argument("filter_sequence: network has no input nodes");
  if (net.nodes.size() < 2)
    throw std::invalid_argument("filter_sequence: need at least two state nodes");

  const std::size_t n = net.nodes.size();
  Trajectory traj;
  traj.node_names.reserve(n);
  for (const StateNode& s : net.nodes) traj.node_names.push_back(s.name);

  std::vector<double> prev_mean(n), prev_var(n);
  std::vector<VolatilityUpdateInput> kids;
  std::vector<ValueChildTerm> value_terms;

  for (std::size_t step = 0; step < observations.size(); ++step) {
    const Observation& obs = observations[step];
    if (!std::isfinite(obs.value) || !(obs.t > 0.0) || !std::isfinite(obs.t))
      throw std::domain_error("filter_sequence: invalid observation");
    const double t = obs.t;

    for (std::size_t i = 0; i < n; ++i) {
      prev_mean[i] = net.nodes[i].state.mean;
      prev_var[i] = 1.0 / net.nodes[i].state.precision;
    }

    StepRecord rec;
    rec.nodes.resize(n);

    // Predictions read only previous posteriors; commit afterwards.
    for (std::size_t i = 0; i < n; ++i) {
      bool clamped = false;
      predict_node(net, static_cast<int>(i), t, &clamped);
      if (clamped) rec.nodes[i].flags |= trajectory_flag::clamped;
    }
    for (std::size_t i = 0; i < n; ++i) {
      NodeState& s = net.nodes[i].state;
      s.mean = s.predicted_mean;
      s.precision = s.predicted_precision;
    }

    for (const InputNode& in : net.inputs) {
      NodeState& s = net.nodes[static_cast<std::size_t>(in.parent)].state;
      const Gaussian g = input_update({s.mean, s.precision}, obs.value, in.variance);
      s.mean = g.mean;
      s.precision = g.precision;
    }

    bool failed = false;
    for (const int a : net.derived.update_order) {
      const auto au = static_cast<std::size_t>(a);
      const auto& vchildren = net.derived.value_children[au];
      const auto& wchildren = net.derived.vol_children[au];
      if (vchildren.empty() && wchildren.empty()) continue;
      NodeState& s = net.nodes[au].state;

      double mu_base = s.predicted_mean;
      double pi_base = s.predicted_precision;
      if (!vchildren.empty()) {
        if (wchildren.empty()) {
          // Pure value parent: fold children in sequentially.
          Gaussian g{s.predicted_mean, s.predicted_precision};
          for (const auto& [c, alpha] : vchildren) {
            const NodeState& cs = net.nodes[static_cast<std::size_t>(c)].state;
            g = value_parent_update(g, alpha, cs.predicted_precision, cs.mean - cs.predicted_mean);
          }
          s.mean = g.mean;
          s.precision = g.precision;
          continue;
        }
        // Mixed: absorb value evidence into the prior of the volatility update.
        value_terms.clear();
        for (const auto& [c, alpha] : vchildren) {
          const NodeState& cs = net.nodes[static_cast<std::size_t>(c)].state;
          value_terms.push_back({cs.predicted_precision, alpha,
                                 prev_mean[au] + (cs.mean - cs.predicted_mean) / (t * alpha)});
        }
        const Gaussian eff = absorb_value_children(s.predicted_mean, s.predicted_precision, t,
                                                   value_terms);
        mu_base = eff.mean;
        pi_base = eff.precision;
      }

      kids.clear();
      for (const auto& [c, kappa] : wchildren) {
        const auto cu = static_cast<std::size_t>(c);
        const NodeState& cs = net.nodes[cu].state;
        double omega_eff = net.nodes[cu].params.tonic_volatility;
        for (const auto& [p, k2] : net.derived.vol_parents[cu])
          if (p != a) omega_eff += k2 * prev_mean[static_cast<std::size_t>(p)];
        const double vape = cs.mean - cs.predicted_mean;
        kids.push_back({t, prev_var[cu], kappa, omega_eff, 1.0 / cs.precision + vape * vape,
                        mu_base, pi_base});
      }

      NodeRecord& nr = rec.nodes[au];
      if (mode == UpdateMode::classic) {
        const ClassicUpdate up = volatility_update_classic(kids);
        nr.classic_precision = up.raw_precision;
        if (!up.ok) {
          traj.failure = FilterFailure{static_cast<int>(step), a, up.raw_precision};
          failed = true;
          break;
        }
        s.mean = up.posterior.mean;
        s.precision = up.posterior.precision;
      } else {
        const BlendedUpdate up = kids.size() == 1 ? volatility_update_uhgf(kids[0])
                                                  : volatility_update_multi(kids);
        s.mean = up.posterior.mean;
        s.precision = up.posterior.precision;
        nr.blend = up.diag.blend;
        nr.mode = up.diag.mode;
        nr.classic_precision = up.diag.classic_precision;
        if (up.diag.l2.used_fallback) nr.flags |= trajectory_flag::fallback;
      }
    }
    if (failed) break;

    // A state that left the reals also ends the run, recorded like a failure.
    for (std::size_t i = 0; i < n; ++i) {
      const NodeState& s = net.nodes[i].state;
      if (!std::isfinite(s.mean) || !(s.precision > 0.0) || !std::isfinite(s.precision)) {
        traj.failure = FilterFailure{static_cast<int>(step), static_cast<int>(i), s.precision};
        failed = true;
        break;
      }
    }
    if (failed) break;

    for (std::size_t i = 0; i < n; ++i) {
      const NodeState& s = net.nodes[i].state;
      NodeRecord& nr = rec.nodes[i];
      nr.predicted_mean = s.predicted_mean;
      nr.predicted_precision = s.predicted_precision;
      nr.mean = s.mean;
      nr.precision = s.precision;
    }
    traj.steps.push_back(std::move(rec));
  }
  return traj;
}

}  // namespace uhgf
