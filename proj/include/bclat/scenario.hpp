#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "bclat/error.hpp"

namespace bclat {

/// Which rate drives block completions in the queue model: a single miner's
/// rate, or the rate of the first of M identical miners.
enum class ServiceRateMode { PerMiner, Aggregate };

constexpr std::string_view to_string(ServiceRateMode m) {
  return m == ServiceRateMode::PerMiner ? "per-miner" : "aggregate";
}

inline ServiceRateMode parse_service_rate_mode(std::string_view s) {
  if (s == "per-miner") return ServiceRateMode::PerMiner;
  if (s == "aggregate") return ServiceRateMode::Aggregate;
  throw Error(ErrorCode::InvalidParameter,
              fmt::format("service_rate_mode must be 'per-miner' or 'aggregate', got '{}'", s));
}

inline constexpr double kInfiniteTimer = std::numeric_limits<double>::infinity();

/// Inputs shared by the analytical model, the optimizer and the simulator.
/// All quantities are SI: rates in 1/s, times in s, sizes in bits.
struct ScenarioParams {
  double mu = 0.1;            // transaction arrival rate (tx/s)
  double lambda = 0.25;       // per-miner mining rate (Hz)
  int miners = 1;             // M
  int queue_size = 10;        // K, pool capacity in transactions
  int block_size_tx = 1;      // b, transactions per block
  double timer = 100.0;       // tau (s), may be +inf
  double header_bits = 20e3;  // h
  double tx_bits = 5e3;       // t
  double capacity_bps = 5e6;  // C
  int fork_valid_tx = 0;      // |T_f|
  ServiceRateMode service_rate_mode = ServiceRateMode::Aggregate;

  bool operator==(const ScenarioParams&) const = default;
};

/// Physical block size in bits for a block carrying `b` transactions.
constexpr double block_bits(double b, double header_bits, double tx_bits) {
  return header_bits + b * tx_bits;
}

inline double block_bits(double b, const ScenarioParams& p) {
  return block_bits(b, p.header_bits, p.tx_bits);
}

/// Rate of block completions seen by the pool.
inline double service_rate(const ScenarioParams& p) {
  return p.service_rate_mode == ServiceRateMode::Aggregate ? p.miners * p.lambda : p.lambda;
}

/// Returns the parameters unchanged when every invariant holds; otherwise throws
/// InvalidParameter listing every violated bound.
inline ScenarioParams validate_params(const ScenarioParams& raw) {
  std::vector<std::string> violations;
  auto positive = [&](double v, std::string_view name) {
    if (!(v > 0.0)) violations.push_back(fmt::format("{} must be > 0 (got {})", name, v));
  };
  auto finite = [&](double v, std::string_view name) {
    if (!std::isfinite(v)) violations.push_back(fmt::format("{} must be finite (got {})", name, v));
  };
  positive(raw.mu, "mu");
  finite(raw.mu, "mu");
  positive(raw.lambda, "lambda");
  finite(raw.lambda, "lambda");
  positive(raw.capacity_bps, "capacity_bps");
  finite(raw.capacity_bps, "capacity_bps");
  positive(raw.timer, "timer");
  if (raw.miners < 1) violations.push_back(fmt::format("miners must be >= 1 (got {})", raw.miners));
  if (raw.queue_size < 1)
    violations.push_back(fmt::format("queue_size must be >= 1 (got {})", raw.queue_size));
  if (raw.block_size_tx < 1)
    violations.push_back(fmt::format("block_size_tx must be >= 1 (got {})", raw.block_size_tx));
  if (raw.block_size_tx > raw.queue_size)
    violations.push_back(fmt::format("block_size_tx must be <= queue_size (got {} > {})",
                                     raw.block_size_tx, raw.queue_size));
  if (!(raw.header_bits >= 0.0) || !std::isfinite(raw.header_bits))
    violations.push_back(fmt::format("header_bits must be >= 0 (got {})", raw.header_bits));
  if (!(raw.tx_bits >= 0.0) || !std::isfinite(raw.tx_bits))
    violations.push_back(fmt::format("tx_bits must be >= 0 (got {})", raw.tx_bits));
  if (raw.fork_valid_tx < 0)
    violations.push_back(fmt::format("fork_valid_tx must be >= 0 (got {})", raw.fork_valid_tx));
  if (raw.fork_valid_tx > raw.block_size_tx)
    violations.push_back(fmt::format("fork_valid_tx must be <= block_size_tx (got {} > {})",
                                     raw.fork_valid_tx, raw.block_size_tx));
  if (!violations.empty()) {
    std::string msg;
    for (std::size_t i = 0; i < violations.size(); ++i) {
      if (i) msg += "; ";
      msg += violations[i];
    }
    throw Error(ErrorCode::InvalidParameter, msg);
  }
  return raw;
}

// JSON scenario files are flat objects keyed by the field names above. Sizes
// may alternatively be given as header_kbits / tx_kbits / capacity_mbps.

namespace detail {

inline double timer_from_json(const nlohmann::json& v) {
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf" || s == "infinity") return kInfiniteTimer;
    throw Error(ErrorCode::InvalidParameter, fmt::format("timer: unrecognised value '{}'", s));
  }
  return v.get<double>();
}

}  // namespace detail

/// Overlays the keys present in `j` onto `base`. Unknown keys are rejected.
inline ScenarioParams scenario_from_json(const nlohmann::json& j, ScenarioParams base = {}) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidParameter, "scenario must be a JSON object");
  auto conflict = [&](const char* a, const char* b) {
    if (j.contains(a) && j.contains(b))
      throw Error(ErrorCode::InvalidParameter, fmt::format("both '{}' and '{}' given", a, b));
  };
  conflict("header_bits", "header_kbits");
  conflict("tx_bits", "tx_kbits");
  conflict("capacity_bps", "capacity_mbps");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "mu") base.mu = v.get<double>();
      else if (key == "lambda") base.lambda = v.get<double>();
      else if (key == "miners") base.miners = v.get<int>();
      else if (key == "queue_size") base.queue_size = v.get<int>();
      else if (key == "block_size_tx" || key == "block_size") base.block_size_tx = v.get<int>();
      else if (key == "timer") base.timer = detail::timer_from_json(v);
      else if (key == "header_bits") base.header_bits = v.get<double>();
      else if (key == "header_kbits") base.header_bits = v.get<double>() * 1e3;
      else if (key == "tx_bits") base.tx_bits = v.get<double>();
      else if (key == "tx_kbits") base.tx_bits = v.get<double>() * 1e3;
      else if (key == "capacity_bps") base.capacity_bps = v.get<double>();
      else if (key == "capacity_mbps") base.capacity_bps = v.get<double>() * 1e6;
      else if (key == "fork_valid_tx") base.fork_valid_tx = v.get<int>();
      else if (key == "service_rate_mode")
        base.service_rate_mode = parse_service_rate_mode(v.get<std::string>());
      else
        throw Error(ErrorCode::InvalidParameter, fmt::format("unknown scenario key '{}'", key));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidParameter, e.what());
  }
  return base;
}

inline nlohmann::json scenario_to_json(const ScenarioParams& p) {
  nlohmann::json j;
  j["mu"] = p.mu;
  j["lambda"] = p.lambda;
  j["miners"] = p.miners;
  j["queue_size"] = p.queue_size;
  j["block_size_tx"] = p.block_size_tx;
  if (std::isinf(p.timer)) j["timer"] = "inf";
  else j["timer"] = p.timer;
  j["header_bits"] = p.header_bits;
  j["tx_bits"] = p.tx_bits;
  j["capacity_bps"] = p.capacity_bps;
  j["fork_valid_tx"] = p.fork_valid_tx;
  j["service_rate_mode"] = std::string(to_string(p.service_rate_mode));
  return j;
}

}  // namespace bclat
