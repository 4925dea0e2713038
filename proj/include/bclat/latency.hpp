#pragma once

#include <cmath>

#include <fmt/format.h>

#include "bclat/error.hpp"
#include "bclat/queue_model.hpp"
#include "bclat/scenario.hpp"

namespace bclat {

/// Time to push a block of b transactions through the P2P capacity.
inline double propagation_delay(double b, const ScenarioParams& p) {
  return block_bits(b, p) / p.capacity_bps;
}

/// Expected time until the first of M miners finds a block.
inline double mining_delay(int miners, double lambda) { return 1.0 / (miners * lambda); }

/// Probability that another miner finishes while the winner's block is still
/// propagating: 1 - exp(-lambda (M - 1) t_bp).
inline double fork_probability(double lambda, int miners, double t_bp) {
  return -std::expm1(-lambda * (miners - 1) * t_bp);
}

struct LatencyBreakdown {
  double t_q = 0.0;
  double t_bg = 0.0;
  double t_bp = 0.0;
  double p_fork = 0.0;
  double t_bc = 0.0;
  queue::QueueSolution queue;
};

inline constexpr double kForkSaturation = 1.0 - 1e-12;

/// End-to-end confirmation latency (T_q + T_bg + T_bp) / (1 - p_fork).
/// p_fork depends on lambda, M and t_bp only, so it is computed first and
/// handed to the queue model, which uses it for the served count.
inline LatencyBreakdown confirmation_latency(const ScenarioParams& scenario,
                                             const queue::ModelOptions& opt = {}) {
  const auto p = validate_params(scenario);
  LatencyBreakdown out;
  out.t_bp = propagation_delay(p.block_size_tx, p);
  out.t_bg = mining_delay(p.miners, p.lambda);
  out.p_fork = opt.forks_enabled ? fork_probability(p.lambda, p.miners, out.t_bp) : 0.0;
  if (out.p_fork >= kForkSaturation)
    throw Error(ErrorCode::ForkSaturated, fmt::format("p_fork = {} leaves no accepted blocks", out.p_fork));
  out.queue = queue::solve_queue(p, out.p_fork, opt);
  out.t_q = out.queue.t_q;
  out.t_bc = (out.t_q + out.t_bg + out.t_bp) / (1.0 - out.p_fork);
  return out;
}

}  // namespace bclat
