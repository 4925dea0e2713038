#pragma once

// Experiment harness: parameter sweeps over both backends, model-vs-simulator
// comparison reports and the figure presets, with CSV / JSON-lines output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "bclat/error.hpp"
#include "bclat/latency.hpp"
#include "bclat/optimizer.hpp"
#include "bclat/parallel.hpp"
#include "bclat/queue_model.hpp"
#include "bclat/scenario.hpp"
#include "bclat/simulator.hpp"
#include "bclat/stats.hpp"

namespace bclat::harness {

enum class OutputFormat { Csv, Jsonl };

inline OutputFormat parse_output_format(std::string_view s) {
  if (s == "csv") return OutputFormat::Csv;
  if (s == "jsonl") return OutputFormat::Jsonl;
  throw Error(ErrorCode::InvalidParameter, fmt::format("format must be 'csv' or 'jsonl', got '{}'", s));
}

inline opt::Backend parse_backend(std::string_view s) {
  if (s == "model") return opt::Backend::Model;
  if (s == "simulator") return opt::Backend::Simulator;
  throw Error(ErrorCode::InvalidParameter, fmt::format("unknown backend '{}'", s));
}

// ---------------------------------------------------------------- formatting

/// Round-trippable number: 17 significant digits, "inf" for infinity.
inline std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  return fmt::format("{:.17g}", v);
}

inline std::string num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        fields.back() += '"';
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back() += c;
    }
  }
  return fields;
}

/// JSON value for a number that may be missing or infinite.
inline nlohmann::json json_num(const std::optional<double>& v) {
  if (!v) return nullptr;
  if (!std::isfinite(*v)) return num(*v);
  return *v;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    if (k) out += sep;
    out += parts[k];
  }
  return out;
}

inline std::string model_diag(const queue::Diagnostics& d) {
  std::vector<std::string> flags;
  if (d.negative_mass_clamped) flags.push_back("negative-mass-clamped");
  if (d.saturated) flags.push_back("saturated");
  return join(flags, "|");
}

// --------------------------------------------------------------------- sweep

inline constexpr std::size_t kDefaultRowCap = 1'000'000;

/// Options shared by every cell of a sweep or preset.
struct Backends {
  queue::ModelOptions model{};
  sim::SimConfig sim{};
  std::vector<std::uint64_t> seeds{1};
};

struct SweepSpec {
  ScenarioParams base;
  // Axis name -> values. Only mu, lambda, miners, block_size and timer vary.
  std::vector<std::pair<std::string, std::vector<double>>> axes;
  std::vector<opt::Backend> backends{opt::Backend::Model};
  Backends settings;
  std::string output;
  OutputFormat format = OutputFormat::Csv;
  std::size_t cap = kDefaultRowCap;
};

namespace detail {

inline constexpr std::string_view kAxisOrder[] = {"mu", "lambda", "miners", "block_size", "timer"};

inline std::string canonical_axis(std::string_view name) {
  if (name == "block_size_tx" || name == "b") return "block_size";
  if (name == "M") return "miners";
  if (name == "tau") return "timer";
  for (auto a : kAxisOrder)
    if (a == name) return std::string(a);
  throw Error(ErrorCode::InvalidParameter,
              fmt::format("unknown sweep axis '{}' (expected mu, lambda, miners, block_size, timer)", name));
}

inline void apply_axis(ScenarioParams& p, std::string_view axis, double v) {
  auto as_int = [&](double x) {
    if (x != std::floor(x) || !std::isfinite(x))
      throw Error(ErrorCode::InvalidParameter, fmt::format("axis {} needs integer values (got {})", axis, x));
    return static_cast<int>(x);
  };
  if (axis == "mu") p.mu = v;
  else if (axis == "lambda") p.lambda = v;
  else if (axis == "miners") p.miners = as_int(v);
  else if (axis == "block_size") p.block_size_tx = as_int(v);
  else p.timer = v;
}

inline std::vector<std::uint64_t> seeds_from_json(const nlohmann::json& j) {
  std::vector<std::uint64_t> seeds;
  if (j.is_number_unsigned()) {
    seeds.push_back(j.get<std::uint64_t>());
  } else {
    for (const auto& s : j) seeds.push_back(s.get<std::uint64_t>());
  }
  if (seeds.empty()) throw Error(ErrorCode::InvalidParameter, "seeds must not be empty");
  return seeds;
}

}  // namespace detail

/// Keys: base, axes, backends, seeds, output, plus optional format, sim_time,
/// cap, forks, assumption1, chain, served_reading, empty_timer.
inline SweepSpec sweep_spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidParameter, "sweep spec must be a JSON object");
  SweepSpec spec;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "base") {
        spec.base = scenario_from_json(v);
      } else if (key == "axes") {
        std::map<std::string, std::vector<double>> axes;
        for (const auto& [name, values] : v.items()) {
          const auto axis = detail::canonical_axis(name);
          if (axes.contains(axis)) throw Error(ErrorCode::InvalidParameter, fmt::format("axis {} repeated", axis));
          std::vector<double> xs;
          for (const auto& x : values) xs.push_back(axis == "timer" ? bclat::detail::timer_from_json(x) : x.get<double>());
          if (xs.empty()) throw Error(ErrorCode::InvalidParameter, fmt::format("axis {} has no values", axis));
          axes[axis] = std::move(xs);
        }
        for (auto a : detail::kAxisOrder)
          if (auto it = axes.find(std::string(a)); it != axes.end()) spec.axes.emplace_back(it->first, it->second);
      } else if (key == "backends") {
        spec.backends.clear();
        for (const auto& b : v) {
          const auto s = b.get<std::string>();
          if (s == "both") {
            spec.backends.push_back(opt::Backend::Model);
            spec.backends.push_back(opt::Backend::Simulator);
          } else {
            spec.backends.push_back(parse_backend(s));
          }
        }
        std::sort(spec.backends.begin(), spec.backends.end());
        spec.backends.erase(std::unique(spec.backends.begin(), spec.backends.end()), spec.backends.end());
        if (spec.backends.empty()) throw Error(ErrorCode::InvalidParameter, "backends must not be empty");
      } else if (key == "seeds") {
        spec.settings.seeds = detail::seeds_from_json(v);
      } else if (key == "output") {
        spec.output = v.get<std::string>();
      } else if (key == "format") {
        spec.format = parse_output_format(v.get<std::string>());
      } else if (key == "sim_time") {
        spec.settings.sim.sim_time = v.get<double>();
      } else if (key == "cap") {
        spec.cap = v.get<std::size_t>();
      } else if (key == "forks") {
        spec.settings.model.forks_enabled = spec.settings.sim.forks_enabled = v.get<bool>();
      } else if (key == "assumption1") {
        spec.settings.model.timer_disabled = v.get<bool>();
      } else if (key == "chain") {
        spec.settings.model.chain = queue::parse_chain_construction(v.get<std::string>());
      } else if (key == "served_reading") {
        spec.settings.model.served_reading = queue::parse_served_reading(v.get<std::string>());
      } else if (key == "empty_timer") {
        spec.settings.model.empty_timer = spec.settings.sim.empty_timer =
            queue::parse_empty_timer_policy(v.get<std::string>());
      } else {
        throw Error(ErrorCode::InvalidParameter, fmt::format("unknown sweep spec key '{}'", key));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidParameter, e.what());
  }
  return spec;
}

/// Cartesian product of the axes over the base scenario, first axis slowest.
inline std::vector<ScenarioParams> expand_cells(const SweepSpec& spec) {
  double rows = static_cast<double>(spec.backends.size());
  for (const auto& [name, values] : spec.axes) rows *= static_cast<double>(values.size());
  if (rows > static_cast<double>(spec.cap))
    throw Error(ErrorCode::CapExceeded, fmt::format("sweep would produce {} rows (cap {})", rows, spec.cap));

  std::vector<ScenarioParams> cells{spec.base};
  for (const auto& [name, values] : spec.axes) {
    std::vector<ScenarioParams> next;
    next.reserve(cells.size() * values.size());
    for (const auto& c : cells)
      for (double v : values) {
        ScenarioParams p = c;
        detail::apply_axis(p, name, v);
        next.push_back(p);
      }
    cells = std::move(next);
  }
  return cells;
}

struct SweepRow {
  ScenarioParams scenario;
  opt::Backend backend = opt::Backend::Model;
  std::size_t seed_count = 0;
  std::optional<double> t_q, t_bg, t_bp, p_fork, t_bc, fork_rate, drop_count;
  std::string diag;
};

inline SweepRow model_row(const ScenarioParams& p, const queue::ModelOptions& opt) {
  SweepRow row;
  row.scenario = p;
  row.backend = opt::Backend::Model;
  try {
    const auto r = confirmation_latency(p, opt);
    row.t_q = r.t_q;
    row.t_bg = r.t_bg;
    row.t_bp = r.t_bp;
    row.p_fork = r.p_fork;
    row.t_bc = r.t_bc;
    row.fork_rate = r.p_fork / (1.0 - r.p_fork);  // expected forks per accepted block
    row.diag = model_diag(r.queue.diagnostics);
  } catch (const Error& e) {
    row.diag = std::string(to_string(e.code()));
  }
  return row;
}

/// Mean over seeds; a single seed is reported as-is.
inline SweepRow simulator_row(const ScenarioParams& p, const sim::SimConfig& base,
                              std::span<const std::uint64_t> seeds) {
  SweepRow row;
  row.scenario = p;
  row.backend = opt::Backend::Simulator;
  row.seed_count = seeds.size();
  try {
    sim::SimConfig cfg = base;
    cfg.scenario = p;
    cfg.trace = nullptr;
    std::vector<sim::SimResult> runs;
    for (auto s : seeds) {
      cfg.seed = s;
      runs.push_back(sim::run_simulation(cfg));
    }
    auto avg = [&](auto&& get) -> std::optional<double> {
      std::vector<double> xs;
      for (const auto& r : runs)
        if (const std::optional<double> v = get(r)) xs.push_back(*v);
      if (xs.empty()) return std::nullopt;
      return stats::mean(xs);
    };
    row.t_q = avg([](const sim::SimResult& r) { return r.mean_pool_delay; });
    row.t_bg = avg([](const sim::SimResult& r) { return r.mean_mining_time; });
    row.t_bp = avg([](const sim::SimResult& r) { return r.mean_propagation_delay; });
    row.p_fork = avg([](const sim::SimResult& r) -> std::optional<double> {
      if (r.blocks_mined == 0) return std::nullopt;
      return double(r.forks) / double(r.blocks_mined);
    });
    row.t_bc = avg([](const sim::SimResult& r) { return r.mean_confirmation_latency; });
    row.fork_rate = avg([](const sim::SimResult& r) { return std::optional<double>(r.fork_rate); });
    row.drop_count = avg([](const sim::SimResult& r) { return std::optional<double>(double(r.drop_count)); });
    if (!row.t_q) row.diag = "no-commits";
  } catch (const Error& e) {
    row.diag = std::string(to_string(e.code()));
  }
  return row;
}

/// Rows in cell order, backends model-then-simulator within a cell. Cells run
/// concurrently up to `jobs`; the output order does not depend on it.
inline std::vector<SweepRow> run_sweep(const SweepSpec& spec, unsigned jobs = 1) {
  const auto cells = expand_cells(spec);
  const std::size_t nb = spec.backends.size();
  std::vector<SweepRow> rows(cells.size() * nb);
  parallel_for(rows.size(), jobs, [&](std::size_t k) {
    const auto& cell = cells[k / nb];
    rows[k] = spec.backends[k % nb] == opt::Backend::Model
                  ? model_row(cell, spec.settings.model)
                  : simulator_row(cell, spec.settings.sim, spec.settings.seeds);
  });
  return rows;
}

inline constexpr std::string_view kSweepColumns =
    "mu,lambda,miners,queue_size,block_size,timer,backend,seed_count,t_q,t_bg,t_bp,p_fork,t_bc,fork_rate,"
    "drop_count,diag";

inline void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows) {
  os << kSweepColumns << '\n';
  for (const auto& r : rows) {
    const auto& p = r.scenario;
    os << fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", num(p.mu), num(p.lambda), p.miners,
                      p.queue_size, p.block_size_tx, num(p.timer), opt::to_string(r.backend), r.seed_count,
                      num(r.t_q), num(r.t_bg), num(r.t_bp), num(r.p_fork), num(r.t_bc), num(r.fork_rate),
                      num(r.drop_count), csv_field(r.diag));
  }
}

inline nlohmann::ordered_json sweep_row_json(const SweepRow& r) {
  const auto& p = r.scenario;
  nlohmann::ordered_json j;
  j["mu"] = p.mu;
  j["lambda"] = p.lambda;
  j["miners"] = p.miners;
  j["queue_size"] = p.queue_size;
  j["block_size"] = p.block_size_tx;
  j["timer"] = json_num(p.timer);
  j["backend"] = std::string(opt::to_string(r.backend));
  j["seed_count"] = r.seed_count;
  j["t_q"] = json_num(r.t_q);
  j["t_bg"] = json_num(r.t_bg);
  j["t_bp"] = json_num(r.t_bp);
  j["p_fork"] = json_num(r.p_fork);
  j["t_bc"] = json_num(r.t_bc);
  j["fork_rate"] = json_num(r.fork_rate);
  j["drop_count"] = json_num(r.drop_count);
  j["diag"] = r.diag;
  return j;
}

inline void write_sweep_jsonl(std::ostream& os, std::span<const SweepRow> rows) {
  for (const auto& r : rows) os << sweep_row_json(r).dump() << '\n';
}

inline void write_sweep(std::ostream& os, std::span<const SweepRow> rows, OutputFormat f) {
  f == OutputFormat::Csv ? write_sweep_csv(os, rows) : write_sweep_jsonl(os, rows);
}

/// Parses a file produced by write_sweep_csv. Only the columns it emits are
/// restored; other scenario fields keep their defaults.
inline std::vector<SweepRow> read_sweep_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kSweepColumns)
    throw Error(ErrorCode::Io, "sweep CSV header does not match the expected columns");
  auto opt_num = [](const std::string& s) -> std::optional<double> {
    if (s.empty()) return std::nullopt;
    return std::stod(s);
  };
  std::vector<SweepRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 16) throw Error(ErrorCode::Io, fmt::format("expected 16 fields, got {}", f.size()));
    SweepRow r;
    r.scenario.mu = std::stod(f[0]);
    r.scenario.lambda = std::stod(f[1]);
    r.scenario.miners = std::stoi(f[2]);
    r.scenario.queue_size = std::stoi(f[3]);
    r.scenario.block_size_tx = std::stoi(f[4]);
    r.scenario.timer = std::stod(f[5]);
    r.backend = parse_backend(f[6]);
    r.seed_count = std::stoul(f[7]);
    r.t_q = opt_num(f[8]);
    r.t_bg = opt_num(f[9]);
    r.t_bp = opt_num(f[10]);
    r.p_fork = opt_num(f[11]);
    r.t_bc = opt_num(f[12]);
    r.fork_rate = opt_num(f[13]);
    r.drop_count = opt_num(f[14]);
    r.diag = f[15];
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------- validation report

struct ComparisonRow {
  ScenarioParams scenario;
  bool forks_enabled = true;
  std::optional<double> model_t_q, model_t_bc;
  std::string model_diag;
  bool saturated = false;
  std::optional<double> sim_t_q, sim_t_q_ci, sim_t_bc, sim_t_bc_ci, sim_fork_rate;
  std::optional<double> abs_err_t_q, rel_err_t_q, abs_err_t_bc, rel_err_t_bc;
  // Confirmation latency without the separate mining term: the queue delay
  // already runs until the committing block is mined.
  std::optional<double> model_t_bc_no_mining_term;
  std::optional<double> t_q_rearm, t_q_literal_occupancy, t_q_literal_arrival_count;
  bool fork_timer_divergence = false;
  std::string sim_diag;
};

struct SummaryRow {
  double timer = 0.0;
  int miners = 0;
  std::size_t cells = 0;
  std::size_t evaluated = 0;  // cells with both a model and a simulator value
  std::size_t saturated = 0;
  std::optional<double> mean, mean_non_saturated, median, p90, max, mean_t_bc;
};

/// Block-size choice for one (mu, lambda, tau, M) group.
struct OptimizerRow {
  double mu = 0.0, lambda = 0.0, timer = 0.0;
  int miners = 0;
  bool forks_enabled = true;
  std::optional<int> b_star;
  std::optional<double> b_star_continuous;
  std::optional<int> b_opt_model, b_opt_model_assumption1, b_opt_sim;
  std::optional<double> sim_t_bc_at_b_star, sim_t_bc_at_b_opt, gap;  // gap = relative excess latency
  std::string diag;
};

struct ComparisonReport {
  std::string preset;
  std::vector<ComparisonRow> rows;
  std::vector<SummaryRow> summary;
  std::vector<OptimizerRow> optimizer;
};

/// A preset grid: cells, and whether forks are modelled in both backends.
struct Preset {
  std::string name;
  std::vector<ScenarioParams> cells;
  bool forks_enabled = true;
  bool optimizer_table = false;
};

namespace detail {

inline std::vector<ScenarioParams> grid(std::initializer_list<double> mus, std::initializer_list<double> lambdas,
                                        std::initializer_list<double> timers, std::initializer_list<int> miners) {
  std::vector<ScenarioParams> cells;
  for (double mu : mus)
    for (double lambda : lambdas)
      for (double timer : timers)
        for (int m : miners)
          for (int b = 1; b <= 10; ++b) {
            ScenarioParams p;  // default sizes, K = 10
            p.mu = mu;
            p.lambda = lambda;
            p.timer = timer;
            p.miners = m;
            p.block_size_tx = b;
            cells.push_back(p);
          }
  return cells;
}

inline std::optional<double> quantile(std::vector<double> xs, double q) {
  if (xs.empty()) return std::nullopt;
  std::sort(xs.begin(), xs.end());
  const double pos = q * double(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (pos - double(lo)) * (xs[hi] - xs[lo]);
}

inline std::optional<double> mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return std::nullopt;
  return stats::mean(xs);
}

inline std::optional<double> model_t_q(ScenarioParams p, queue::ModelOptions o) {
  try {
    return confirmation_latency(p, o).t_q;
  } catch (const Error&) {
    return std::nullopt;
  }
}

}  // namespace detail

/// fig5: mu {0.1, 0.25} x lambda {0.25, 5} x tau {1, 5, 100} x M {1, 10} x b 1..10.
/// fig3: mu {0.1, 0.25, 5} x lambda {0.1, 0.2, 0.25} x tau {1, 100}, M = 10, forks off.
/// fig4: the fig3 grid with M {1, 10} and forks on.
inline Preset make_preset(std::string_view name) {
  if (name == "fig5") return {"fig5", detail::grid({0.1, 0.25}, {0.25, 5}, {1, 5, 100}, {1, 10}), true, false};
  if (name == "fig3")
    return {"fig3", detail::grid({0.1, 0.25, 5}, {0.1, 0.2, 0.25}, {1, 100}, {10}), false, true};
  if (name == "fig4")
    return {"fig4", detail::grid({0.1, 0.25, 5}, {0.1, 0.2, 0.25}, {1, 100}, {1, 10}), true, true};
  throw Error(ErrorCode::InvalidParameter, fmt::format("unknown preset '{}' (fig3, fig4, fig5)", name));
}

inline ComparisonRow compare_cell(const ScenarioParams& p, const Backends& b, bool forks_enabled) {
  ComparisonRow row;
  row.scenario = p;
  row.forks_enabled = forks_enabled;
  queue::ModelOptions mo = b.model;
  mo.forks_enabled = forks_enabled;
  try {
    const auto r = confirmation_latency(p, mo);
    row.model_t_q = r.t_q;
    row.model_t_bc = r.t_bc;
    row.model_t_bc_no_mining_term = (r.t_q + r.t_bp) / (1.0 - r.p_fork);
    row.saturated = r.queue.diagnostics.saturated;
    row.model_diag = model_diag(r.queue.diagnostics);
  } catch (const Error& e) {
    row.model_diag = std::string(to_string(e.code()));
  }

  auto variant = mo;
  variant.empty_timer = queue::EmptyTimerPolicy::Rearm;
  row.t_q_rearm = detail::model_t_q(p, variant);
  variant = mo;
  variant.chain = queue::ChainConstruction::Literal;
  variant.served_reading = queue::ServedReading::Occupancy;
  row.t_q_literal_occupancy = detail::model_t_q(p, variant);
  variant.served_reading = queue::ServedReading::ArrivalCount;
  row.t_q_literal_arrival_count = detail::model_t_q(p, variant);

  sim::SimConfig cfg = b.sim;
  cfg.scenario = p;
  cfg.forks_enabled = forks_enabled;
  try {
    const auto rep = sim::run_replications(cfg, b.seeds);
    if (rep.pool_delay.count > 0) {
      row.sim_t_q = rep.pool_delay.mean;
      row.sim_t_bc = rep.confirmation_latency.mean;
      if (rep.pool_delay.count > 1) {
        row.sim_t_q_ci = rep.pool_delay.half_width;
        row.sim_t_bc_ci = rep.confirmation_latency.half_width;
      }
    } else {
      row.sim_diag = "no-commits";
    }
    row.sim_fork_rate = rep.fork_rate.mean;
  } catch (const Error& e) {
    row.sim_diag = std::string(to_string(e.code()));
  }

  if (row.model_t_q && row.sim_t_q) {
    row.abs_err_t_q = std::abs(*row.model_t_q - *row.sim_t_q);
    row.rel_err_t_q = *row.abs_err_t_q / *row.sim_t_q;
  }
  if (row.model_t_bc && row.sim_t_bc) {
    row.abs_err_t_bc = std::abs(*row.model_t_bc - *row.sim_t_bc);
    row.rel_err_t_bc = *row.abs_err_t_bc / *row.sim_t_bc;
  }
  // Small timers let partial blocks through, which the fixed-b fork estimate misses.
  row.fork_timer_divergence = forks_enabled && p.miners > 1 && p.timer <= 5.0;
  return row;
}

inline std::vector<SummaryRow> summarize(std::span<const ComparisonRow> rows) {
  std::map<std::pair<double, int>, std::vector<const ComparisonRow*>> groups;
  for (const auto& r : rows) groups[{r.scenario.timer, r.scenario.miners}].push_back(&r);
  std::vector<SummaryRow> out;
  for (const auto& [key, members] : groups) {
    SummaryRow s;
    s.timer = key.first;
    s.miners = key.second;
    s.cells = members.size();
    std::vector<double> all, non_sat, bc;
    for (const auto* r : members) {
      if (r->saturated) ++s.saturated;
      if (r->rel_err_t_bc) bc.push_back(*r->rel_err_t_bc);
      if (!r->rel_err_t_q) continue;
      ++s.evaluated;
      all.push_back(*r->rel_err_t_q);
      if (!r->saturated) non_sat.push_back(*r->rel_err_t_q);
    }
    s.mean = detail::mean_of(all);
    s.mean_non_saturated = detail::mean_of(non_sat);
    s.median = detail::quantile(all, 0.5);
    s.p90 = detail::quantile(all, 0.9);
    s.max = detail::quantile(all, 1.0);
    s.mean_t_bc = detail::mean_of(bc);
    out.push_back(s);
  }
  return out;
}

/// One optimizer row per (mu, lambda, tau, M) group of consecutive b = 1..10 cells.
inline std::vector<OptimizerRow> optimizer_table(std::span<const ComparisonRow> rows, const Backends& b) {
  std::vector<OptimizerRow> out;
  for (std::size_t start = 0; start < rows.size(); start += 10) {
    const auto group = rows.subspan(start, std::min<std::size_t>(10, rows.size() - start));
    const auto& p = group.front().scenario;
    OptimizerRow o;
    o.mu = p.mu;
    o.lambda = p.lambda;
    o.timer = p.timer;
    o.miners = p.miners;
    o.forks_enabled = group.front().forks_enabled;
    opt::OptimizerOptions oo;
    oo.model = b.model;
    oo.model.forks_enabled = o.forks_enabled;
    try {
      const auto r = opt::optimize_block_size(p, oo);
      o.b_star = r.b_star;
      o.b_star_continuous = r.b_star_continuous;
      o.diag = join(r.diagnostics, "; ");
    } catch (const Error& e) {
      o.diag = std::string(to_string(e.code()));
    }
    auto argmin = [&](auto&& get) -> std::optional<int> {
      std::optional<int> best;
      std::optional<double> best_v;
      for (const auto& r : group) {
        const std::optional<double> v = get(r);
        if (v && (!best_v || *v < *best_v)) {
          best_v = v;
          best = r.scenario.block_size_tx;
        }
      }
      return best;
    };
    o.b_opt_model = argmin([](const ComparisonRow& r) { return r.model_t_bc; });
    o.b_opt_sim = argmin([](const ComparisonRow& r) { return r.sim_t_bc; });
    opt::BruteForceOptions bo;
    bo.model = oo.model;
    bo.model.timer_disabled = true;
    const auto bf = opt::brute_force_block_size(p, 1, static_cast<int>(group.size()), opt::Backend::Model, bo);
    if (bf.b_opt > 0) o.b_opt_model_assumption1 = bf.b_opt;
    if (o.b_star && *o.b_star <= int(group.size())) o.sim_t_bc_at_b_star = group[*o.b_star - 1].sim_t_bc;
    if (o.b_opt_sim) o.sim_t_bc_at_b_opt = group[*o.b_opt_sim - 1].sim_t_bc;
    if (o.sim_t_bc_at_b_star && o.sim_t_bc_at_b_opt)
      o.gap = (*o.sim_t_bc_at_b_star - *o.sim_t_bc_at_b_opt) / *o.sim_t_bc_at_b_opt;
    out.push_back(o);
  }
  return out;
}

/// Runs every cell on both backends; per-cell failures land in the row.
inline ComparisonReport run_validation(const Preset& preset, const Backends& b, unsigned jobs = 1) {
  ComparisonReport rep;
  rep.preset = preset.name;
  rep.rows.resize(preset.cells.size());
  parallel_for(preset.cells.size(), jobs,
               [&](std::size_t k) { rep.rows[k] = compare_cell(preset.cells[k], b, preset.forks_enabled); });
  rep.summary = summarize(rep.rows);
  if (preset.optimizer_table) rep.optimizer = optimizer_table(rep.rows, b);
  return rep;
}

inline constexpr std::string_view kReportColumns =
    "mu,lambda,miners,queue_size,block_size,timer,header_bits,tx_bits,capacity_bps,fork_valid_tx,"
    "service_rate_mode,forks,model_t_q,model_t_bc,model_diag,sim_t_q,sim_t_q_ci,sim_t_bc,sim_t_bc_ci,"
    "sim_fork_rate,abs_err_t_q,rel_err_t_q,abs_err_t_bc,rel_err_t_bc,model_t_bc_no_mining_term,"
    "model_t_q_rearm,model_t_q_literal_occupancy,model_t_q_literal_arrival_count,fork_timer_divergence,sim_diag";

inline nlohmann::ordered_json report_row_json(const ComparisonRow& r) {
  const auto& p = r.scenario;
  nlohmann::ordered_json j;
  j["mu"] = p.mu;
  j["lambda"] = p.lambda;
  j["miners"] = p.miners;
  j["queue_size"] = p.queue_size;
  j["block_size"] = p.block_size_tx;
  j["timer"] = json_num(p.timer);
  j["header_bits"] = p.header_bits;
  j["tx_bits"] = p.tx_bits;
  j["capacity_bps"] = p.capacity_bps;
  j["fork_valid_tx"] = p.fork_valid_tx;
  j["service_rate_mode"] = std::string(to_string(p.service_rate_mode));
  j["forks"] = r.forks_enabled;
  j["model_t_q"] = json_num(r.model_t_q);
  j["model_t_bc"] = json_num(r.model_t_bc);
  j["model_diag"] = r.model_diag;
  j["sim_t_q"] = json_num(r.sim_t_q);
  j["sim_t_q_ci"] = json_num(r.sim_t_q_ci);
  j["sim_t_bc"] = json_num(r.sim_t_bc);
  j["sim_t_bc_ci"] = json_num(r.sim_t_bc_ci);
  j["sim_fork_rate"] = json_num(r.sim_fork_rate);
  j["abs_err_t_q"] = json_num(r.abs_err_t_q);
  j["rel_err_t_q"] = json_num(r.rel_err_t_q);
  j["abs_err_t_bc"] = json_num(r.abs_err_t_bc);
  j["rel_err_t_bc"] = json_num(r.rel_err_t_bc);
  j["model_t_bc_no_mining_term"] = json_num(r.model_t_bc_no_mining_term);
  j["model_t_q_rearm"] = json_num(r.t_q_rearm);
  j["model_t_q_literal_occupancy"] = json_num(r.t_q_literal_occupancy);
  j["model_t_q_literal_arrival_count"] = json_num(r.t_q_literal_arrival_count);
  j["fork_timer_divergence"] = r.fork_timer_divergence;
  j["sim_diag"] = r.sim_diag;
  return j;
}

inline void write_report(std::ostream& os, std::span<const ComparisonRow> rows, OutputFormat f) {
  if (f == OutputFormat::Jsonl) {
    for (const auto& r : rows) os << report_row_json(r).dump() << '\n';
    return;
  }
  os << kReportColumns << '\n';
  for (const auto& r : rows) {
    const auto& p = r.scenario;
    os << fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},", num(p.mu), num(p.lambda), p.miners, p.queue_size,
                      p.block_size_tx, num(p.timer), num(p.header_bits), num(p.tx_bits), num(p.capacity_bps),
                      p.fork_valid_tx, to_string(p.service_rate_mode), int(r.forks_enabled));
    os << fmt::format("{},{},{},{},{},{},{},{},", num(r.model_t_q), num(r.model_t_bc), csv_field(r.model_diag),
                      num(r.sim_t_q), num(r.sim_t_q_ci), num(r.sim_t_bc), num(r.sim_t_bc_ci),
                      num(r.sim_fork_rate));
    os << fmt::format("{},{},{},{},{},{},{},{},{},{}\n", num(r.abs_err_t_q), num(r.rel_err_t_q),
                      num(r.abs_err_t_bc), num(r.rel_err_t_bc), num(r.model_t_bc_no_mining_term),
                      num(r.t_q_rearm), num(r.t_q_literal_occupancy), num(r.t_q_literal_arrival_count),
                      int(r.fork_timer_divergence), csv_field(r.sim_diag));
  }
}

inline constexpr std::string_view kSummaryColumns =
    "timer,miners,cells,evaluated,saturated,rel_err_t_q_mean,rel_err_t_q_mean_non_saturated,rel_err_t_q_median,"
    "rel_err_t_q_p90,rel_err_t_q_max,rel_err_t_bc_mean";

inline void write_summary(std::ostream& os, std::span<const SummaryRow> rows) {
  os << kSummaryColumns << '\n';
  for (const auto& s : rows)
    os << fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", num(s.timer), s.miners, s.cells, s.evaluated,
                      s.saturated, num(s.mean), num(s.mean_non_saturated), num(s.median), num(s.p90),
                      num(s.max), num(s.mean_t_bc));
}

inline constexpr std::string_view kOptimizerColumns =
    "mu,lambda,timer,miners,forks,b_star,b_star_continuous,b_opt_model,b_opt_model_assumption1,b_opt_sim,"
    "sim_t_bc_at_b_star,sim_t_bc_at_b_opt,gap,diag";

inline void write_optimizer_table(std::ostream& os, std::span<const OptimizerRow> rows) {
  auto opt_int = [](const std::optional<int>& v) { return v ? std::to_string(*v) : std::string(); };
  os << kOptimizerColumns << '\n';
  for (const auto& o : rows)
    os << fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", num(o.mu), num(o.lambda), num(o.timer),
                      o.miners, int(o.forks_enabled), opt_int(o.b_star), num(o.b_star_continuous),
                      opt_int(o.b_opt_model), opt_int(o.b_opt_model_assumption1), opt_int(o.b_opt_sim),
                      num(o.sim_t_bc_at_b_star), num(o.sim_t_bc_at_b_opt), num(o.gap), csv_field(o.diag));
}

/// Mean relative T_q error over evaluated cells with the given tau and M.
inline std::optional<double> mean_relative_error(std::span<const ComparisonRow> rows, double timer, int miners,
                                                 bool skip_saturated = false) {
  std::vector<double> xs;
  for (const auto& r : rows)
    if (r.scenario.timer == timer && r.scenario.miners == miners && r.rel_err_t_q &&
        !(skip_saturated && r.saturated))
      xs.push_back(*r.rel_err_t_q);
  return detail::mean_of(xs);
}

}  // namespace bclat::harness
