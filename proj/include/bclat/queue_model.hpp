#pragma once

// Finite batch-service queue M/M^s/1/K for the transaction pool.
//
// The chain is observed at block departures (mining completions). State i is
// the pool occupancy left behind by a departure. Transactions stay in the pool
// while their block is mined, so occupancy counts them until the departure.
// A cycle from state i has two phases:
//   formation  - wait until the pool holds b transactions or the timer fires;
//   mining     - exponential with rate lambda_s; arrivals keep joining until
//                the pool holds K transactions.
// At the departure s transactions leave; s is the fork-adjusted served count.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>
#include <fmt/format.h>

#include "bclat/error.hpp"
#include "bclat/scenario.hpp"

namespace bclat::queue {

/// How the departure chain accounts for block formation.
///   FormationAware: a row mixes over the pool occupancy at which the block
///     is formed (full block, timer expiry at a partial occupancy). Exact for
///     a single miner without forks.
///   Literal: row i serves s(i) straight from departure state i, and the
///     steady-state conversion uses the two-branch timer formula term by term.
enum class ChainConstruction { FormationAware, Literal };

/// Which count the served function receives after a timer expiry that
/// reached occupancy j from departure state i: j itself, or the j - i
/// transactions that arrived inside the timer window.
enum class ServedReading { Occupancy, ArrivalCount };

/// What happens when the timer fires on an empty pool.
///   EmptyBlock: an empty block (s = 0) is mined.
///   Rearm: nothing is mined; the timer restarts at the next arrival.
enum class EmptyTimerPolicy { EmptyBlock, Rearm };

struct ModelOptions {
  bool timer_disabled = false;  // batch always equals b (arbitrarily large timer)
  bool forks_enabled = true;
  ChainConstruction chain = ChainConstruction::FormationAware;
  ServedReading served_reading = ServedReading::Occupancy;
  EmptyTimerPolicy empty_timer = EmptyTimerPolicy::EmptyBlock;
};

constexpr std::string_view to_string(ChainConstruction c) {
  return c == ChainConstruction::FormationAware ? "formation-aware" : "literal";
}
constexpr std::string_view to_string(ServedReading r) {
  return r == ServedReading::Occupancy ? "occupancy" : "arrival-count";
}
constexpr std::string_view to_string(EmptyTimerPolicy p) {
  return p == EmptyTimerPolicy::EmptyBlock ? "empty-block" : "rearm";
}

inline ChainConstruction parse_chain_construction(std::string_view s) {
  if (s == "formation-aware") return ChainConstruction::FormationAware;
  if (s == "literal") return ChainConstruction::Literal;
  throw Error(ErrorCode::InvalidParameter, fmt::format("unknown chain construction '{}'", s));
}
inline ServedReading parse_served_reading(std::string_view s) {
  if (s == "occupancy") return ServedReading::Occupancy;
  if (s == "arrival-count") return ServedReading::ArrivalCount;
  throw Error(ErrorCode::InvalidParameter, fmt::format("unknown served reading '{}'", s));
}
inline EmptyTimerPolicy parse_empty_timer_policy(std::string_view s) {
  if (s == "empty-block") return EmptyTimerPolicy::EmptyBlock;
  if (s == "rearm") return EmptyTimerPolicy::Rearm;
  throw Error(ErrorCode::InvalidParameter, fmt::format("unknown empty-timer policy '{}'", s));
}

// Thresholds for the steady-state sanity rules.
inline constexpr double kNegativeMassTolerance = 1e-6;
inline constexpr double kRoundingFloor = 1e-12;  // smaller negatives are cancellation noise, not model error
inline constexpr double kSaturationBlocking = 0.05;

// ---------------------------------------------------------------------------
// Scalar building blocks

/// Poisson pmf e^{-mean} mean^n / n!, evaluated in log space.
inline double poisson_pmf(int n, double mean) {
  if (n < 0) return 0.0;
  if (mean == 0.0) return n == 0 ? 1.0 : 0.0;
  if (std::isinf(mean)) return 0.0;
  return std::exp(-mean + n * std::log(mean) - std::lgamma(n + 1.0));
}

/// Probability that fewer than b - i transactions arrive within the timer,
/// i.e. the timer fires before the block fills. Zero once i >= b.
inline double timer_expiry_prob(int i, int b, double mu, double tau) {
  if (i >= b) return 0.0;
  if (std::isinf(tau)) return 0.0;
  const double mean = mu * tau;
  double sum = 0.0;
  for (int n = 0; n < b - i; ++n) sum += poisson_pmf(n, mean);
  return std::min(sum, 1.0);
}

/// E[min(Erlang(b - i, mu), tau)]: mean time until the block is formed.
/// Integrating P(N(s) <= b-i-1) over [0, tau] gives
/// (1/mu) * sum_{n=1}^{b-i} P(Gamma(n, 1) <= mu * tau).
inline double expected_formation_time(int i, int b, double mu, double tau) {
  if (i >= b) return 0.0;
  const int missing = b - i;
  if (std::isinf(tau)) return missing / mu;
  const double x = mu * tau;
  double sum = 0.0;
  for (int n = 1; n <= missing; ++n) sum += boost::math::gamma_p(static_cast<double>(n), x);
  return sum / mu;
}

/// Fork-adjusted expected number of transactions a departure from occupancy
/// i removes: (1 - p) min(i, b) + p |T_f|.
inline double expected_served(int i, const ScenarioParams& p, double p_fork) {
  return (1.0 - p_fork) * std::min(i, p.block_size_tx) + p_fork * p.fork_valid_tx;
}

/// Integer served count used for state bookkeeping: nearest integer with ties
/// rounded up, never more than the block actually holds.
inline int served_count(int i, const ScenarioParams& p, double p_fork) {
  const double real = expected_served(i, p, p_fork);
  const int rounded = static_cast<int>(std::floor(real + 0.5));
  return std::clamp(rounded, 0, std::min(i, p.block_size_tx));
}

// ---------------------------------------------------------------------------
// Departure chain

/// One way a cycle can form its block: with probability `weight` the block is
/// formed at pool occupancy `occupancy` and the departure removes `served`.
struct FormationOutcome {
  double weight;
  int occupancy;
  int served;
};

namespace detail {

inline double effective_fork(double p_fork, const ModelOptions& opt) {
  return opt.forks_enabled ? p_fork : 0.0;
}

/// Outcomes of the formation phase from departure state i (FormationAware).
inline std::vector<FormationOutcome> formation_outcomes(int i, const ScenarioParams& p,
                                                        double p_fork, const ModelOptions& opt) {
  const int b = p.block_size_tx;
  auto s = [&](int occ) { return served_count(occ, p, p_fork); };
  if (i >= b) return {{1.0, i, s(i)}};
  if (opt.timer_disabled || std::isinf(p.timer)) return {{1.0, b, s(b)}};

  const double mean = p.mu * p.timer;
  std::vector<FormationOutcome> out;
  double expiry = 0.0;
  for (int n = 0; n < b - i; ++n) {
    const double w = poisson_pmf(n, mean);
    expiry += w;
    const int occ = i + n;
    if (occ == 0 && opt.empty_timer == EmptyTimerPolicy::Rearm) {
      // Timer restarts when the next transaction arrives: continue as a fresh
      // cycle from occupancy 1.
      for (auto o : formation_outcomes(1, p, p_fork, opt)) {
        o.weight *= w;
        out.push_back(o);
      }
      continue;
    }
    const int served = opt.served_reading == ServedReading::Occupancy ? s(occ) : s(n);
    out.push_back({w, occ, served});
  }
  out.push_back({std::max(0.0, 1.0 - expiry), b, s(b)});
  return out;
}

/// Mean formation time from departure state i under the chosen options.
inline double formation_time(int i, const ScenarioParams& p, const ModelOptions& opt) {
  const int b = p.block_size_tx;
  const double tau = opt.timer_disabled ? kInfiniteTimer : p.timer;
  double t = expected_formation_time(i, b, p.mu, tau);
  if (i == 0 && b > 0 && std::isfinite(tau) && opt.chain == ChainConstruction::FormationAware &&
      opt.empty_timer == EmptyTimerPolicy::Rearm) {
    t += poisson_pmf(0, p.mu * tau) * (1.0 / p.mu + expected_formation_time(1, b, p.mu, tau));
  }
  return t;
}

/// Adds weight * (mining-phase distribution of the next departure state) to
/// `row`. Mining starts at occupancy `occ`; arrivals are geometric and the
/// pool saturates at K; afterwards `served` leave.
inline void add_mining_row(Eigen::MatrixXd& P, int row, double weight, int occ, int served,
                           int K, double lambda_s, double mu) {
  const double accept = lambda_s / (lambda_s + mu);
  const double q = mu / (lambda_s + mu);
  const int start = occ - served;
  const int cap = K - served;
  double mass = 0.0;
  double term = accept;
  for (int j = start; j < cap; ++j) {
    P(row, j) += weight * term;
    mass += term;
    term *= q;
  }
  // Boundary column: complement of the interior entries.
  P(row, cap) += weight * (1.0 - mass);
}

/// P(peak occupancy reached in the cycle > k) for a block formed at `occ`.
inline double peak_exceeds(int k, int occ, double lambda_s, double mu) {
  if (occ > k) return 1.0;
  const double q = mu / (lambda_s + mu);
  return std::pow(q, k - occ + 1);
}

}  // namespace detail

/// Row-stochastic (K+1)x(K+1) departure-chain matrix plus the per-state
/// served counts (real value for reporting, integer value for indexing).
struct TransitionMatrix {
  Eigen::MatrixXd entries;
  std::vector<double> served;
  std::vector<int> served_int;

  int states() const { return static_cast<int>(entries.rows()); }
};

inline TransitionMatrix build_transition_matrix(const ScenarioParams& p, double p_fork,
                                                const ModelOptions& opt = {}) {
  const int K = p.queue_size;
  const double pf = detail::effective_fork(p_fork, opt);
  const double ls = service_rate(p);
  TransitionMatrix tm;
  tm.entries = Eigen::MatrixXd::Zero(K + 1, K + 1);
  tm.served.resize(K + 1);
  tm.served_int.resize(K + 1);
  for (int i = 0; i <= K; ++i) {
    tm.served[i] = expected_served(i, p, pf);
    tm.served_int[i] = served_count(i, p, pf);
    auto row = tm.entries.row(i);
    if (opt.chain == ChainConstruction::Literal) {
      detail::add_mining_row(tm.entries, i, 1.0, i, tm.served_int[i], K, ls, p.mu);
    } else {
      for (const auto& o : detail::formation_outcomes(i, p, pf, opt))
        detail::add_mining_row(tm.entries, i, o.weight, o.occupancy, o.served, K, ls, p.mu);
    }
    for (int j = 0; j <= K; ++j) {
      if (!std::isfinite(row(j)) || row(j) < -1e-12)
        throw Error(ErrorCode::DegenerateChain,
                    fmt::format("row {} has invalid entry p[{}][{}] = {}", i, i, j, row(j)));
      row(j) = std::max(row(j), 0.0);
    }
    if (row.sum() <= 0.0)
      throw Error(ErrorCode::DegenerateChain, fmt::format("row {} carries no mass", i));
  }
  return tm;
}

/// Stationary distribution of a row-stochastic matrix: solves pi (P - I) = 0
/// with one balance equation replaced by sum(pi) = 1.
inline std::vector<double> solve_embedded_chain(const Eigen::MatrixXd& P) {
  const Eigen::Index n = P.rows();
  if (n == 0 || P.cols() != n)
    throw Error(ErrorCode::SingularSystem, "transition matrix must be square and non-empty");
  Eigen::MatrixXd A = P.transpose() - Eigen::MatrixXd::Identity(n, n);
  A.row(n - 1).setOnes();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
  rhs(n - 1) = 1.0;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(A);
  lu.setThreshold(1e-12);
  if (!lu.isInvertible())
    throw Error(ErrorCode::SingularSystem,
                fmt::format("balance equations have rank {} < {} (reducible chain)", lu.rank(), n));
  Eigen::VectorXd pi = lu.solve(rhs);
  for (auto& v : pi) v = std::max(v, 0.0);
  pi /= pi.sum();
  const double residual = (pi.transpose() * P - pi.transpose()).cwiseAbs().maxCoeff();
  if (!(residual <= 1e-9))
    throw Error(ErrorCode::SingularSystem, fmt::format("fixed-point residual {} > 1e-9", residual));
  return {pi.data(), pi.data() + n};
}

inline std::vector<double> solve_embedded_chain(const TransitionMatrix& tm) {
  return solve_embedded_chain(tm.entries);
}

struct Diagnostics {
  bool negative_mass_clamped = false;
  bool saturated = false;
};

struct QueueSolution {
  std::vector<double> pi_departure;  // over occupancies 0..K at departures
  std::vector<double> pi_steady;     // time-average occupancy 0..K
  double t_d = 0.0;                  // expected inter-departure time (s)
  double t_q = 0.0;                  // expected pool delay (s)
  std::vector<double> served;        // fork-adjusted expected served count per state
  Diagnostics diagnostics;

  double blocking() const { return pi_steady.back(); }
};

/// Time-average occupancy distribution from the departure distribution via a
/// level-crossing balance: an arrival that finds k (< K) transactions lifts
/// the pool past level k, which happens once in a cycle starting at i <= k
/// exactly when the cycle's peak occupancy exceeds k. Poisson arrivals see
/// time averages, so mu pi^k = (1 / T_d) sum_i pi^d_i P(i <= k < peak).
/// The full-pool probability is the complement. Fills pi_steady, t_d and the
/// diagnostics; t_q is left for mean_queue_delay.
inline QueueSolution steady_state(const ScenarioParams& p, const TransitionMatrix& tm,
                                  const std::vector<double>& pi_d, double p_fork,
                                  const ModelOptions& opt = {}) {
  const int K = p.queue_size;
  const int b = p.block_size_tx;
  const double pf = detail::effective_fork(p_fork, opt);
  const double ls = service_rate(p);
  const double mu = p.mu;

  QueueSolution sol;
  sol.pi_departure = pi_d;
  sol.served = tm.served;

  double t_d = 0.0;
  for (int i = 0; i <= K; ++i) t_d += pi_d[i] * (detail::formation_time(i, p, opt) + 1.0 / ls);
  sol.t_d = t_d;

  std::vector<double> pi(K + 1, 0.0);
  if (opt.chain == ChainConstruction::FormationAware) {
    std::vector<std::vector<FormationOutcome>> outcomes(K + 1);
    for (int i = 0; i <= K; ++i) outcomes[i] = detail::formation_outcomes(i, p, pf, opt);
    for (int k = 0; k < K; ++k) {
      double acc = 0.0;
      for (int i = 0; i <= k; ++i) {
        double up = 0.0;
        for (const auto& o : outcomes[i]) up += o.weight * detail::peak_exceeds(k, o.occupancy, ls, mu);
        acc += pi_d[i] * up;
      }
      pi[k] = acc / (mu * t_d);
    }
  } else {
    // Term-by-term two-branch formula on the literal matrix.
    const auto& P = tm.entries;
    const auto& s = tm.served_int;
    const double tau = opt.timer_disabled ? kInfiniteTimer : p.timer;
    auto window = [&](int row, int k, int served) {
      double acc = 0.0;
      for (int l = std::max(0, k - served + 1); l <= std::min(K, K - served); ++l) acc += P(row, l);
      return acc;
    };
    auto served_at = [&](int occ) { return served_count(occ, p, pf); };
    for (int k = 0; k < K; ++k) {
      double acc = 0.0;
      for (int i = 0; i <= k; ++i) {
        const double expiry = timer_expiry_prob(i, b, mu, tau);
        double term = (1.0 - expiry) * window(i, k, s[i]);
        if (expiry > 0.0) {
          double inner = 0.0;
          for (int j = i; j <= b - 1 && j <= K; ++j) {
            const int x = opt.served_reading == ServedReading::Occupancy ? j : j - i;
            inner += poisson_pmf(j - i, mu * tau) * window(j, k, served_at(x));
          }
          term += expiry * inner;
        }
        acc += pi_d[i] * term;
      }
      pi[k] = acc / (mu * t_d);
    }
  }

  double below = 0.0;
  for (int k = 0; k < K; ++k) below += pi[k];
  pi[K] = 1.0 - below;

  for (int k = 0; k <= K; ++k) {
    if (pi[k] < 0.0 && pi[k] > -kRoundingFloor) pi[k] = 0.0;
    if (!std::isfinite(pi[k]))
      throw Error(ErrorCode::ModelUnstable, fmt::format("pi[{}] is not finite", k));
    if (pi[k] < -kNegativeMassTolerance)
      throw Error(ErrorCode::ModelUnstable,
                  fmt::format("steady-state mass pi[{}] = {:.3g} is negative beyond tolerance", k, pi[k]));
  }
  if (std::any_of(pi.begin(), pi.end(), [](double v) { return v < 0.0; })) {
    for (auto& v : pi) v = std::max(v, 0.0);
    double total = 0.0;
    for (double v : pi) total += v;
    for (auto& v : pi) v /= total;
    sol.diagnostics.negative_mass_clamped = true;
  }
  sol.pi_steady = std::move(pi);
  sol.diagnostics.saturated = sol.pi_steady[K] >= kSaturationBlocking;
  return sol;
}

/// Little's law over the accepted stream:
/// T_q = sum_k k pi^k / (mu (1 - pi^K)).
inline double mean_queue_delay(const QueueSolution& sol, double mu) {
  const double accepted = 1.0 - sol.pi_steady.back();
  if (accepted <= 1e-12)
    throw Error(ErrorCode::DivisionDegenerate, "pool is always full (pi^K = 1)");
  double mean_occupancy = 0.0;
  for (std::size_t k = 0; k < sol.pi_steady.size(); ++k) mean_occupancy += k * sol.pi_steady[k];
  return mean_occupancy / (mu * accepted);
}

/// Full pipeline: matrix, departure distribution, steady state, delay.
inline QueueSolution solve_queue(const ScenarioParams& p, double p_fork, const ModelOptions& opt = {}) {
  const auto tm = build_transition_matrix(p, p_fork, opt);
  const auto pi_d = solve_embedded_chain(tm);
  auto sol = steady_state(p, tm, pi_d, p_fork, opt);
  sol.t_q = mean_queue_delay(sol, p.mu);
  return sol;
}

}  // namespace bclat::queue
