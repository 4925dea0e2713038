#pragma once

// Block-size optimisation: interpolate the model's queue delay over a few
// block sizes, then minimise the resulting closed-form latency estimate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <fmt/format.h>

#include "bclat/error.hpp"
#include "bclat/latency.hpp"
#include "bclat/parallel.hpp"
#include "bclat/queue_model.hpp"
#include "bclat/scenario.hpp"
#include "bclat/simulator.hpp"

namespace bclat::opt {

/// Interpolating polynomial through (x_j, y_j), evaluated in barycentric form.
class Polynomial {
 public:
  Polynomial() = default;

  /// Unique interpolant of degree N through N+1 points with distinct abscissae.
  static Polynomial fit(std::span<const std::pair<double, double>> points) {
    if (points.size() < 2)
      throw Error(ErrorCode::InsufficientNodes, fmt::format("need >= 2 points, got {}", points.size()));
    Polynomial poly;
    for (const auto& [x, y] : points) {
      if (std::find(poly.xs_.begin(), poly.xs_.end(), x) != poly.xs_.end())
        throw Error(ErrorCode::DuplicateNode, fmt::format("abscissa {} appears twice", x));
      poly.xs_.push_back(x);
      poly.ys_.push_back(y);
    }
    const std::size_t n = poly.xs_.size();
    poly.weights_.assign(n, 1.0);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k)
        if (k != j) poly.weights_[j] /= poly.xs_[j] - poly.xs_[k];
    return poly;
  }

  double operator()(double x) const {
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < xs_.size(); ++j) {
      const double d = x - xs_[j];
      if (d == 0.0) return ys_[j];
      const double t = weights_[j] / d;
      num += t * ys_[j];
      den += t;
    }
    return num / den;
  }

  std::span<const double> nodes() const { return xs_; }
  std::span<const double> values() const { return ys_; }
  int degree() const { return static_cast<int>(xs_.size()) - 1; }

 private:
  std::vector<double> xs_, ys_, weights_;
};

inline Polynomial lagrange_fit(std::span<const std::pair<double, double>> points) {
  return Polynomial::fit(points);
}

/// Golden-section search for the minimiser of a unimodal f on [lo, hi],
/// stopping once the bracket is narrower than `tol`.
template <typename F>
double golden_section_minimize(F&& f, double lo, double hi, double tol = 1e-4) {
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > tol) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  return (a + b) / 2.0;
}

/// How the closed-form estimate converts a block size into a propagation time:
/// physical bits (h + b t) / C, or the bare transaction count b / C.
enum class PropagationConvention { BlockBits, RawCount };

constexpr std::string_view to_string(PropagationConvention c) {
  return c == PropagationConvention::BlockBits ? "block-bits" : "raw-count";
}
inline PropagationConvention parse_propagation_convention(std::string_view s) {
  if (s == "block-bits") return PropagationConvention::BlockBits;
  if (s == "raw-count") return PropagationConvention::RawCount;
  throw Error(ErrorCode::InvalidParameter, fmt::format("unknown propagation convention '{}'", s));
}

inline double approx_propagation(double b, const ScenarioParams& p, PropagationConvention conv) {
  return conv == PropagationConvention::BlockBits ? block_bits(b, p) / p.capacity_bps : b / p.capacity_bps;
}

/// (T_q_hat(b) + 1/(M lambda) + t_bp(b)) / exp(-lambda (M-1) t_bp(b)).
inline double approx_confirmation_latency(const Polynomial& poly, double b, const ScenarioParams& p,
                                          PropagationConvention conv = PropagationConvention::BlockBits,
                                          bool forks_enabled = true) {
  const double t_bp = approx_propagation(b, p, conv);
  const double survive = forks_enabled ? std::exp(-p.lambda * (p.miners - 1) * t_bp) : 1.0;
  return (poly(b) + mining_delay(p.miners, p.lambda) + t_bp) / survive;
}

struct OptimizerOptions {
  int node_budget = 5;
  int b_max = 0;  // 0 selects queue_size
  double tolerance = 1e-4;
  PropagationConvention propagation = PropagationConvention::BlockBits;
  queue::ModelOptions model{};  // timer_disabled is forced on for node evaluation
};

struct CandidateRow {
  int b;
  double t_bc_hat;
};

struct OptimizationResult {
  double b_star_continuous = 0.0;
  int b_star = 0;
  double t_bc_hat = 0.0;
  std::vector<CandidateRow> table;  // every integer 1..b_max
  std::vector<std::pair<double, double>> nodes;
  std::vector<std::string> diagnostics;
  bool post_check_corrected = false;
  Polynomial polynomial;
};

struct BlockSizeChoice {
  double continuous = 0.0;
  int b = 0;
  double value = 0.0;
  bool corrected = false;
  std::vector<CandidateRow> table;  // f at every integer 1..b_max
};

/// Integer minimiser of f on [1, b_max]: golden-section search for the
/// continuous minimiser, then the best of its floor, ceil and the node
/// abscissae (smaller b wins ties), then a full integer scan as a backstop.
template <typename F>
BlockSizeChoice choose_block_size(F&& f, std::span<const int> nodes, int b_max, double tol = 1e-4) {
  BlockSizeChoice c;
  c.continuous = b_max == 1 ? 1.0 : golden_section_minimize(f, 1.0, double(b_max), tol);
  std::vector<int> candidates{static_cast<int>(std::floor(c.continuous)), static_cast<int>(std::ceil(c.continuous))};
  candidates.insert(candidates.end(), nodes.begin(), nodes.end());
  std::sort(candidates.begin(), candidates.end());
  c.b = -1;
  for (int b : candidates) {
    if (b < 1 || b > b_max) continue;
    const double v = f(double(b));
    if (c.b < 0 || v < c.value) {  // ascending scan keeps the smaller b on ties
      c.b = b;
      c.value = v;
    }
  }
  // The search assumes a convex estimate; a full integer scan backs it up.
  for (int b = 1; b <= b_max; ++b) {
    const double v = f(double(b));
    c.table.push_back({b, v});
    if (v < c.value) {
      c.b = b;
      c.value = v;
      c.corrected = true;
    }
  }
  return c;
}

/// Evenly spaced integer block sizes in [1, b_max], both ends included.
inline std::vector<int> node_positions(int node_budget, int b_max) {
  std::vector<int> xs;
  for (int k = 0; k < node_budget; ++k) {
    const double v = 1.0 + k * double(b_max - 1) / double(node_budget - 1);
    const int x = static_cast<int>(std::floor(v + 0.5));
    if (xs.empty() || xs.back() != x) xs.push_back(x);
  }
  return xs;
}

inline OptimizationResult optimize_block_size(const ScenarioParams& scenario, const OptimizerOptions& o = {}) {
  const auto p = validate_params(scenario);
  const int b_max = o.b_max == 0 ? p.queue_size : o.b_max;
  if (o.node_budget < 3)
    throw Error(ErrorCode::InvalidParameter, fmt::format("node_budget must be >= 3 (got {})", o.node_budget));
  if (b_max < 1 || b_max > p.queue_size)
    throw Error(ErrorCode::InvalidParameter,
                fmt::format("b_max must lie in [1, {}] (got {})", p.queue_size, b_max));
  if (o.node_budget > b_max)
    throw Error(ErrorCode::InvalidParameter,
                fmt::format("node_budget {} exceeds the {} distinct block sizes available", o.node_budget, b_max));

  queue::ModelOptions model = o.model;
  model.timer_disabled = true;

  OptimizationResult res;
  for (int b : node_positions(o.node_budget, b_max)) {
    ScenarioParams pb = p;
    pb.block_size_tx = b;
    try {
      res.nodes.emplace_back(b, confirmation_latency(pb, model).t_q);
    } catch (const Error& e) {
      res.diagnostics.push_back(fmt::format("node b={} dropped: {}", b, e.what()));
    }
  }
  if (res.nodes.size() < 3)
    throw Error(ErrorCode::InsufficientNodes,
                fmt::format("only {} interpolation nodes survived (need 3)", res.nodes.size()));
  res.polynomial = lagrange_fit(res.nodes);

  auto estimate = [&](double b) {
    return approx_confirmation_latency(res.polynomial, b, p, o.propagation, model.forks_enabled);
  };
  std::vector<int> node_xs;
  for (const auto& [x, y] : res.nodes) node_xs.push_back(static_cast<int>(x));
  auto choice = choose_block_size(estimate, node_xs, b_max, o.tolerance);
  res.b_star_continuous = choice.continuous;
  res.b_star = choice.b;
  res.t_bc_hat = choice.value;
  res.table = std::move(choice.table);
  res.post_check_corrected = choice.corrected;
  if (res.post_check_corrected)
    res.diagnostics.push_back(fmt::format("integer scan moved b* to {}", res.b_star));
  return res;
}

enum class Backend { Model, Simulator };

constexpr std::string_view to_string(Backend b) { return b == Backend::Model ? "model" : "simulator"; }

struct BruteForceOptions {
  queue::ModelOptions model{};
  sim::SimConfig sim{};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  unsigned jobs = 1;
};

struct BruteForceRow {
  int b;
  std::optional<double> t_bc;
  double ci_half_width = std::numeric_limits<double>::quiet_NaN();
  std::string error;
};

struct BruteForceResult {
  int b_opt = -1;
  std::vector<BruteForceRow> table;
};

/// Evaluates T_BC at every integer b in [b_lo, b_hi] with the chosen backend.
/// Rows that fail keep their error text and are skipped by the argmin.
inline BruteForceResult brute_force_block_size(const ScenarioParams& scenario, int b_lo, int b_hi,
                                               Backend backend, const BruteForceOptions& o = {}) {
  if (b_lo < 1 || b_hi > scenario.queue_size || b_lo > b_hi)
    throw Error(ErrorCode::InvalidParameter,
                fmt::format("block-size range [{}, {}] must lie within [1, {}]", b_lo, b_hi, scenario.queue_size));
  if (backend == Backend::Simulator && o.seeds.size() < 5)
    throw Error(ErrorCode::InvalidParameter, "simulator brute force averages at least 5 seeds");

  BruteForceResult res;
  res.table.resize(b_hi - b_lo + 1);
  parallel_for(res.table.size(), o.jobs, [&](std::size_t k) {
    auto& row = res.table[k];
    row.b = b_lo + static_cast<int>(k);
    ScenarioParams pb = scenario;
    pb.block_size_tx = row.b;
    try {
      if (backend == Backend::Model) {
        row.t_bc = confirmation_latency(pb, o.model).t_bc;
      } else {
        sim::SimConfig cfg = o.sim;
        cfg.scenario = pb;
        const auto rep = sim::run_replications(cfg, o.seeds);
        if (rep.confirmation_latency.count > 0) {
          row.t_bc = rep.confirmation_latency.mean;
          row.ci_half_width = rep.confirmation_latency.half_width;
        } else {
          row.error = "no committed transactions";
        }
      }
    } catch (const Error& e) {
      row.error = e.what();
    }
  });
  for (const auto& row : res.table) {
    if (!row.t_bc) continue;
    if (res.b_opt < 0 || *row.t_bc < *res.table[res.b_opt - b_lo].t_bc) res.b_opt = row.b;
  }
  return res;
}

}  // namespace bclat::opt
