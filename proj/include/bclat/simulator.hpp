#pragma once

// Discrete-event simulation of a PoW pool: Poisson arrivals into a shared
// pool of capacity K, block formation when the pool reaches b or the timer
// fires, M miners racing on exponential clocks, propagation at capacity C,
// and forks when another miner finishes before the winner's block has
// propagated.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <queue>
#include <random>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <fmt/format.h>

#include "bclat/error.hpp"
#include "bclat/parallel.hpp"
#include "bclat/queue_model.hpp"
#include "bclat/scenario.hpp"
#include "bclat/stats.hpp"

namespace bclat::sim {

/// What happens to the winner's transactions that also sit in a losing block.
///   ReturnToPoolFront: they go back to the head of the pool and are re-mined.
///   Discard: the losing blocks are dropped and the winner commits in full.
enum class LoserTxPolicy { ReturnToPoolFront, Discard };

/// How miners pick their candidate block from the pool.
///   Shared: every miner mines the first min(n, b) pooled transactions.
///   Independent: each miner draws its own uniform subset of size min(n, b).
enum class CandidatePolicy { Shared, Independent };

constexpr std::string_view to_string(LoserTxPolicy p) {
  return p == LoserTxPolicy::ReturnToPoolFront ? "return-to-pool-front" : "discard";
}
constexpr std::string_view to_string(CandidatePolicy p) {
  return p == CandidatePolicy::Shared ? "shared" : "independent";
}
inline LoserTxPolicy parse_loser_tx_policy(std::string_view s) {
  if (s == "return-to-pool-front") return LoserTxPolicy::ReturnToPoolFront;
  if (s == "discard") return LoserTxPolicy::Discard;
  throw Error(ErrorCode::InvalidParameter, fmt::format("unknown loser policy '{}'", s));
}
inline CandidatePolicy parse_candidate_policy(std::string_view s) {
  if (s == "shared") return CandidatePolicy::Shared;
  if (s == "independent") return CandidatePolicy::Independent;
  throw Error(ErrorCode::InvalidParameter, fmt::format("unknown candidate policy '{}'", s));
}

enum class EventType { TxArrival, TxDropped, TimerExpired, BlockFormed, MiningDone, ForkMined, PropagationDone };

constexpr std::string_view to_string(EventType t) {
  switch (t) {
    case EventType::TxArrival: return "TX_ARRIVAL";
    case EventType::TxDropped: return "TX_DROPPED";
    case EventType::TimerExpired: return "TIMER_EXPIRED";
    case EventType::BlockFormed: return "BLOCK_FORMED";
    case EventType::MiningDone: return "MINING_DONE";
    case EventType::ForkMined: return "FORK_MINED";
    case EventType::PropagationDone: return "PROPAGATION_DONE";
  }
  return "?";
}

/// One line of the event trace. miner and block are -1 when not applicable;
/// occupancy is the pool size after the event was applied.
struct TraceRecord {
  double time;
  EventType type;
  int miner;
  std::size_t occupancy;
  std::int64_t block;
};

/// Tab-separated: time, event type, miner id, pool occupancy, block id.
inline void write_trace_record(std::ostream& os, const TraceRecord& r) {
  os << fmt::format("{:.17g}\t{}\t{}\t{}\t{}\n", r.time, to_string(r.type), r.miner, r.occupancy, r.block);
}

struct SimConfig {
  ScenarioParams scenario;
  double sim_time = 100000.0;
  std::uint64_t seed = 1;
  bool forks_enabled = true;
  std::optional<double> warmup;  // defaults to 5% of sim_time
  LoserTxPolicy loser_tx_policy = LoserTxPolicy::ReturnToPoolFront;
  CandidatePolicy candidates = CandidatePolicy::Shared;
  queue::EmptyTimerPolicy empty_timer = queue::EmptyTimerPolicy::Rearm;
  bool timer_disabled = false;
  std::function<void(const TraceRecord&)> trace;

  double effective_warmup() const { return warmup.value_or(0.05 * sim_time); }
};

/// Metrics cover transactions arriving and blocks mined after the warmup.
/// The *_total counters cover the whole run and satisfy
/// arrivals_accepted_total = committed_total + pool_residual + in_flight.
struct SimResult {
  std::optional<double> mean_pool_delay;            // arrival -> mining completion of committing block
  std::optional<double> mean_confirmation_latency;  // arrival -> commit (propagation of committing block)
  double ci_half_width = std::numeric_limits<double>::quiet_NaN();  // 95%, batch means, pool delay
  double fork_rate = 0.0;                           // forks per committed block
  std::uint64_t drop_count = 0;
  std::uint64_t blocks_mined = 0;                   // winning mining completions
  std::uint64_t forks = 0;
  std::uint64_t blocks_committed = 0;
  std::vector<std::uint64_t> block_size_histogram;  // index = transactions in block, 0..b
  std::uint64_t transactions_committed = 0;
  std::optional<double> mean_mining_time;           // block formed -> winner done
  std::optional<double> mean_propagation_delay;
  std::optional<double> mean_observed_tf;           // winner txs absent from all losing blocks
  std::uint64_t arrivals_accepted_total = 0;
  std::uint64_t committed_total = 0;
  std::uint64_t pool_residual = 0;
  std::uint64_t in_flight = 0;
  std::uint64_t events = 0;
};

namespace detail {

struct Tx {
  std::uint64_t id;
  double arrival;
};

struct Event {
  double time;
  std::uint64_t seq;
  EventType type;
  int miner;
  std::int64_t block;
  std::uint64_t generation;

  bool operator>(const Event& o) const { return time != o.time ? time > o.time : seq > o.seq; }
};

struct MiningBlock {
  std::int64_t id = -1;
  double formed_at = 0.0;
  int winner = -1;
  std::vector<std::uint64_t> winner_txs;
  std::vector<std::pair<int, std::vector<std::uint64_t>>> contenders;  // would-be fork losers
};

struct InFlightBlock {
  double mined_at = 0.0;
  std::vector<Tx> txs;
  std::vector<std::pair<int, std::vector<std::uint64_t>>> contenders;
  std::vector<std::size_t> losers;  // indices into contenders
  bool forked = false;
};

class Simulation {
 public:
  explicit Simulation(const SimConfig& cfg)
      : cfg_(cfg),
        p_(validate_params(cfg.scenario)),
        warmup_(cfg.effective_warmup()),
        arrival_rng_(seed_stream(cfg.seed, 1)),
        mining_rng_(seed_stream(cfg.seed, 2)) {
    if (!(cfg.sim_time > warmup_ && warmup_ >= 0.0))
      throw Error(ErrorCode::InvalidParameter,
                  fmt::format("sim_time ({}) must exceed warmup ({}) >= 0", cfg.sim_time, warmup_));
    result_.block_size_histogram.assign(p_.block_size_tx + 1, 0);
  }

  SimResult run() {
    schedule(exp_sample(arrival_rng_, p_.mu), EventType::TxArrival);
    start_cycle(0.0);
    while (!events_.empty()) {
      const Event ev = events_.top();
      if (ev.time > cfg_.sim_time) break;
      events_.pop();
      ++result_.events;
      now_ = ev.time;
      dispatch(ev);
    }
    finish();
    return std::move(result_);
  }

 private:
  enum class Phase { Forming, WaitingRearm, Mining };

  static std::mt19937_64 seed_stream(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    return std::mt19937_64(seq);
  }

  static double exp_sample(std::mt19937_64& rng, double rate) {
    return std::exponential_distribution<double>(rate)(rng);
  }

  bool timer_active() const { return !cfg_.timer_disabled && std::isfinite(p_.timer); }

  void schedule(double t, EventType type, int miner = -1, std::int64_t block = -1, std::uint64_t gen = 0) {
    events_.push({t, seq_++, type, miner, block, gen});
  }

  void trace(EventType type, int miner = -1, std::int64_t block = -1) {
    if (cfg_.trace) cfg_.trace({now_, type, miner, pool_.size(), block});
  }

  void dispatch(const Event& ev) {
    switch (ev.type) {
      case EventType::TxArrival: on_arrival(); break;
      case EventType::TimerExpired: on_timer(ev.generation); break;
      case EventType::MiningDone: on_mining_done(ev.block); break;
      case EventType::ForkMined: on_fork_mined(ev.miner, ev.block); break;
      case EventType::PropagationDone: on_propagation_done(ev.block); break;
      default: break;
    }
  }

  void arm_timer(double from) {
    phase_ = Phase::Forming;
    ++timer_gen_;
    if (timer_active()) schedule(from + p_.timer, EventType::TimerExpired, -1, -1, timer_gen_);
  }

  // A block cycle begins at time 0 and at every winning mining completion.
  void start_cycle(double t) {
    if (pool_.size() >= static_cast<std::size_t>(p_.block_size_tx)) {
      form_block();
      return;
    }
    arm_timer(t);
  }

  void on_arrival() {
    schedule(now_ + exp_sample(arrival_rng_, p_.mu), EventType::TxArrival);
    if (pool_.size() >= static_cast<std::size_t>(p_.queue_size)) {
      if (now_ >= warmup_) ++result_.drop_count;
      trace(EventType::TxDropped);
      return;
    }
    pool_.push_back({next_tx_++, now_});
    ++result_.arrivals_accepted_total;
    trace(EventType::TxArrival);
    pool_grew();
  }

  // Shared by arrivals and returned fork transactions.
  void pool_grew() {
    if (phase_ == Phase::Mining) return;
    if (pool_.size() >= static_cast<std::size_t>(p_.block_size_tx)) {
      form_block();
    } else if (phase_ == Phase::WaitingRearm) {
      arm_timer(now_);
    }
  }

  void on_timer(std::uint64_t gen) {
    if (gen != timer_gen_ || phase_ != Phase::Forming) return;
    trace(EventType::TimerExpired);
    if (!pool_.empty() || cfg_.empty_timer == queue::EmptyTimerPolicy::EmptyBlock) {
      form_block();
    } else {
      phase_ = Phase::WaitingRearm;
    }
  }

  std::vector<std::uint64_t> pick_candidate(std::size_t n) {
    std::vector<std::uint64_t> ids;
    ids.reserve(n);
    if (cfg_.candidates == CandidatePolicy::Shared || n == pool_.size()) {
      for (std::size_t k = 0; k < n; ++k) ids.push_back(pool_[k].id);
    } else {
      std::vector<std::uint64_t> all;
      all.reserve(pool_.size());
      for (const auto& tx : pool_) all.push_back(tx.id);
      std::sample(all.begin(), all.end(), std::back_inserter(ids), n, mining_rng_);
    }
    return ids;
  }

  void form_block() {
    phase_ = Phase::Mining;
    ++timer_gen_;
    const std::size_t n = std::min(pool_.size(), static_cast<std::size_t>(p_.block_size_tx));
    mining_ = MiningBlock{};
    mining_.id = next_block_++;
    mining_.formed_at = now_;

    std::vector<double> finish(p_.miners);
    for (auto& f : finish) f = now_ + exp_sample(mining_rng_, p_.lambda);
    mining_.winner = static_cast<int>(std::min_element(finish.begin(), finish.end()) - finish.begin());
    const double t_win = finish[mining_.winner];
    mining_.winner_txs = pick_candidate(n);
    schedule(t_win, EventType::MiningDone, mining_.winner, mining_.id);

    // Miners that would finish before the winner's block reaches them fork;
    // everyone else abandons at propagation and never fires.
    if (cfg_.forks_enabled) {
      const double t_bp = block_bits(static_cast<double>(n), p_) / p_.capacity_bps;
      for (int m = 0; m < p_.miners; ++m) {
        if (m == mining_.winner || !(finish[m] < t_win + t_bp)) continue;
        mining_.contenders.emplace_back(m, pick_candidate(n));
        schedule(finish[m], EventType::ForkMined, m, mining_.id);
      }
    }
    trace(EventType::BlockFormed, -1, mining_.id);
  }

  void on_mining_done(std::int64_t block) {
    if (phase_ != Phase::Mining || block != mining_.id) return;
    InFlightBlock fl;
    fl.mined_at = now_;
    fl.contenders = std::move(mining_.contenders);
    for (auto id : mining_.winner_txs) {
      auto it = std::find_if(pool_.begin(), pool_.end(), [id](const Tx& tx) { return tx.id == id; });
      fl.txs.push_back(*it);
      pool_.erase(it);
    }
    const std::size_t n = fl.txs.size();
    if (now_ >= warmup_) {
      ++result_.blocks_mined;
      ++result_.block_size_histogram[n];
      mining_time_sum_ += now_ - mining_.formed_at;
    }
    const double t_bp = block_bits(static_cast<double>(n), p_) / p_.capacity_bps;
    schedule(now_ + t_bp, EventType::PropagationDone, mining_.winner, block);
    trace(EventType::MiningDone, mining_.winner, block);
    in_flight_.emplace(block, std::move(fl));
    phase_ = Phase::Forming;
    start_cycle(now_);
  }

  void on_fork_mined(int miner, std::int64_t block) {
    auto it = in_flight_.find(block);
    if (it == in_flight_.end()) return;
    auto& fl = it->second;
    for (std::size_t k = 0; k < fl.contenders.size(); ++k)
      if (fl.contenders[k].first == miner) fl.losers.push_back(k);
    fl.forked = true;
    trace(EventType::ForkMined, miner, block);
  }

  void commit(const Tx& tx, double mined_at) {
    ++result_.committed_total;
    if (tx.arrival < warmup_) return;
    ++result_.transactions_committed;
    pool_delays_.push_back(mined_at - tx.arrival);
    pool_delay_arrivals_.push_back(tx.arrival);
    confirmation_sum_ += now_ - tx.arrival;
  }

  void on_propagation_done(std::int64_t block) {
    auto it = in_flight_.find(block);
    InFlightBlock fl = std::move(it->second);
    in_flight_.erase(it);
    const bool counted = fl.mined_at >= warmup_;

    if (fl.forked) {
      std::vector<Tx> survivors, returned;
      for (const auto& tx : fl.txs) {
        const bool contested = std::any_of(fl.losers.begin(), fl.losers.end(), [&](std::size_t k) {
          const auto& loser = fl.contenders[k].second;
          return std::find(loser.begin(), loser.end(), tx.id) != loser.end();
        });
        (contested ? returned : survivors).push_back(tx);
      }
      if (counted) {
        ++result_.forks;
        tf_sum_ += static_cast<double>(survivors.size());
      }
      if (cfg_.loser_tx_policy == LoserTxPolicy::ReturnToPoolFront) {
        for (const auto& tx : survivors) commit(tx, fl.mined_at);
        pool_.insert(pool_.begin(), returned.begin(), returned.end());
        trace(EventType::PropagationDone, -1, block);
        if (!returned.empty()) pool_grew();
        return;
      }
    }
    for (const auto& tx : fl.txs) commit(tx, fl.mined_at);
    if (counted) {
      ++result_.blocks_committed;
      propagation_sum_ += now_ - fl.mined_at;
    }
    trace(EventType::PropagationDone, -1, block);
  }

  void finish() {
    result_.pool_residual = pool_.size();
    for (const auto& [id, fl] : in_flight_) result_.in_flight += fl.txs.size();
    if (!pool_delays_.empty()) {
      result_.mean_pool_delay = stats::mean(pool_delays_);
      result_.mean_confirmation_latency = confirmation_sum_ / static_cast<double>(pool_delays_.size());
      result_.ci_half_width = batch_means_half_width();
    }
    if (result_.blocks_mined > 0) result_.mean_mining_time = mining_time_sum_ / double(result_.blocks_mined);
    if (result_.blocks_committed > 0) {
      result_.mean_propagation_delay = propagation_sum_ / double(result_.blocks_committed);
      result_.fork_rate = double(result_.forks) / double(result_.blocks_committed);
    }
    if (result_.forks > 0) result_.mean_observed_tf = tf_sum_ / double(result_.forks);
  }

  // 95% half-width from 20 batches of the measurement window, split by
  // arrival time.
  double batch_means_half_width() const {
    constexpr int kBatches = 20;
    const double span = cfg_.sim_time - warmup_;
    std::vector<double> sums(kBatches, 0.0), counts(kBatches, 0.0);
    for (std::size_t k = 0; k < pool_delays_.size(); ++k) {
      int idx = static_cast<int>((pool_delay_arrivals_[k] - warmup_) / span * kBatches);
      idx = std::clamp(idx, 0, kBatches - 1);
      sums[idx] += pool_delays_[k];
      counts[idx] += 1.0;
    }
    std::vector<double> batch_means;
    for (int k = 0; k < kBatches; ++k)
      if (counts[k] > 0) batch_means.push_back(sums[k] / counts[k]);
    return stats::confidence_interval(batch_means).half_width;
  }

  const SimConfig& cfg_;
  ScenarioParams p_;
  double warmup_;
  std::mt19937_64 arrival_rng_;
  std::mt19937_64 mining_rng_;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> events_;
  std::uint64_t seq_ = 0;
  double now_ = 0.0;

  Phase phase_ = Phase::Forming;
  std::uint64_t timer_gen_ = 0;
  std::deque<Tx> pool_;
  std::uint64_t next_tx_ = 0;
  std::int64_t next_block_ = 0;
  MiningBlock mining_;
  std::unordered_map<std::int64_t, InFlightBlock> in_flight_;

  SimResult result_;
  std::vector<double> pool_delays_;
  std::vector<double> pool_delay_arrivals_;
  double confirmation_sum_ = 0.0;
  double mining_time_sum_ = 0.0;
  double propagation_sum_ = 0.0;
  double tf_sum_ = 0.0;
};

}  // namespace detail

inline SimResult run_simulation(const SimConfig& config) { return detail::Simulation(config).run(); }

/// Replication means with 95% t-intervals across independent seeds.
struct ReplicatedResult {
  std::vector<SimResult> runs;
  stats::Interval pool_delay;
  stats::Interval confirmation_latency;
  stats::Interval fork_rate;
  stats::Interval drop_count;
  stats::Interval blocks_mined;
  stats::Interval mining_time;
  stats::Interval propagation_delay;
};

inline ReplicatedResult run_replications(const SimConfig& config, std::span<const std::uint64_t> seeds,
                                         unsigned jobs = 1) {
  if (seeds.size() < 2) throw Error(ErrorCode::InvalidParameter, "replications need at least 2 seeds");
  ReplicatedResult out;
  out.runs.resize(seeds.size());
  parallel_for(seeds.size(), jobs, [&](std::size_t k) {
    SimConfig c = config;
    c.seed = seeds[k];
    c.trace = nullptr;
    out.runs[k] = run_simulation(c);
  });
  auto collect = [&](auto&& get) {
    std::vector<double> xs;
    for (const auto& r : out.runs) {
      const std::optional<double> v = get(r);
      if (v) xs.push_back(*v);
    }
    return stats::confidence_interval(xs);
  };
  out.pool_delay = collect([](const SimResult& r) { return r.mean_pool_delay; });
  out.confirmation_latency = collect([](const SimResult& r) { return r.mean_confirmation_latency; });
  out.fork_rate = collect([](const SimResult& r) { return std::optional<double>(r.fork_rate); });
  out.drop_count = collect([](const SimResult& r) { return std::optional<double>(double(r.drop_count)); });
  out.blocks_mined = collect([](const SimResult& r) { return std::optional<double>(double(r.blocks_mined)); });
  out.mining_time = collect([](const SimResult& r) { return r.mean_mining_time; });
  out.propagation_delay = collect([](const SimResult& r) { return r.mean_propagation_delay; });
  return out;
}

}  // namespace bclat::sim
