// bclat: command-line front end for the latency model, optimizer, simulator
// and experiment harness.
//
// Exit codes: 0 success, 1 usage / invalid parameter, 2 model failure, 3 I/O.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "bclat/harness.hpp"
#include "bclat/latency.hpp"
#include "bclat/optimizer.hpp"
#include "bclat/simulator.hpp"

using namespace bclat;

namespace {

enum Exit { kOk = 0, kUsage = 1, kModel = 2, kIo = 3 };

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::ModelUnstable:
    case ErrorCode::DegenerateChain:
    case ErrorCode::SingularSystem:
    case ErrorCode::DivisionDegenerate:
    case ErrorCode::ForkSaturated: return kModel;
    case ErrorCode::Io: return kIo;
    default: return kUsage;
  }
}

double parse_timer(const std::string& s) {
  if (s == "inf" || s == "infinity") return kInfiniteTimer;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size()) throw Error(ErrorCode::InvalidParameter, fmt::format("timer: cannot parse '{}'", s));
  return v;
}

// Scenario flags are optional so a --scenario file can supply the base.
struct ScenarioFlags {
  std::string file;
  std::optional<double> mu, lambda, header_bits, tx_bits, capacity_bps;
  std::optional<int> miners, queue_size, block_size, fork_valid_tx;
  std::optional<std::string> timer, mode;

  void attach(CLI::App* app) {
    app->add_option("--scenario", file, "JSON scenario file (flags override it)");
    app->add_option("--mu", mu, "transaction arrival rate (tx/s)");
    app->add_option("--lambda", lambda, "per-miner mining rate (Hz)");
    app->add_option("--miners", miners, "number of miners M");
    app->add_option("--queue-size", queue_size, "pool capacity K (transactions)");
    app->add_option("--block-size", block_size, "block size b (transactions)");
    app->add_option("--timer", timer, "block formation timer tau (s), or 'inf'");
    app->add_option("--header-bits", header_bits, "block header size (bits)");
    app->add_option("--tx-bits", tx_bits, "transaction size (bits)");
    app->add_option("--capacity-bps", capacity_bps, "P2P capacity (bit/s)");
    app->add_option("--fork-valid-tx", fork_valid_tx, "transactions that stay valid after a fork");
    app->add_option("--service-rate-mode", mode, "per-miner | aggregate");
  }

  ScenarioParams resolve() const {
    ScenarioParams p;
    if (!file.empty()) {
      std::ifstream in(file);
      if (!in) throw Error(ErrorCode::Io, fmt::format("cannot open scenario file '{}'", file));
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidParameter, fmt::format("{}: {}", file, e.what()));
      }
      p = scenario_from_json(j);
    }
    if (mu) p.mu = *mu;
    if (lambda) p.lambda = *lambda;
    if (miners) p.miners = *miners;
    if (queue_size) p.queue_size = *queue_size;
    if (block_size) p.block_size_tx = *block_size;
    if (timer) p.timer = parse_timer(*timer);
    if (header_bits) p.header_bits = *header_bits;
    if (tx_bits) p.tx_bits = *tx_bits;
    if (capacity_bps) p.capacity_bps = *capacity_bps;
    if (fork_valid_tx) p.fork_valid_tx = *fork_valid_tx;
    if (mode) p.service_rate_mode = parse_service_rate_mode(*mode);
    return validate_params(p);
  }
};

struct ModelFlags {
  bool assumption1 = false;
  bool no_forks = false;
  std::string chain = "formation-aware";
  std::string served = "occupancy";
  std::string empty_timer = "empty-block";

  void attach(CLI::App* app) {
    app->add_flag("--assumption1", assumption1, "blocks always wait for b transactions (timer disabled)");
    app->add_flag("--no-forks", no_forks, "treat every mined block as accepted");
    app->add_option("--chain", chain, "formation-aware | literal")->capture_default_str();
    app->add_option("--served-reading", served, "occupancy | arrival-count")->capture_default_str();
    app->add_option("--empty-timer", empty_timer, "empty-block | rearm")->capture_default_str();
  }

  queue::ModelOptions resolve() const {
    queue::ModelOptions o;
    o.timer_disabled = assumption1;
    o.forks_enabled = !no_forks;
    o.chain = queue::parse_chain_construction(chain);
    o.served_reading = queue::parse_served_reading(served);
    o.empty_timer = queue::parse_empty_timer_policy(empty_timer);
    return o;
  }
};

struct OutputFlags {
  std::string format;
  std::string output;

  void attach(CLI::App* app, const std::string& allowed) {
    app->add_option("--format", format, allowed);
    app->add_option("--output", output, "write to this file instead of stdout");
  }
};

// Opens --output or falls back to stdout.
class Sink {
 public:
  explicit Sink(const std::string& path) {
    if (path.empty()) return;
    file_.open(path, std::ios::binary);
    if (!file_) throw Error(ErrorCode::Io, fmt::format("cannot open '{}' for writing", path));
  }
  std::ostream& os() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }
  void close(const std::string& path) {
    if (!file_.is_open()) return;
    file_.close();
    if (!file_) throw Error(ErrorCode::Io, fmt::format("error writing '{}'", path));
  }

 private:
  std::ofstream file_;
};

// A flat record rendered as aligned text, a one-row CSV, or one JSON line.
using Value = std::variant<std::optional<double>, std::int64_t, std::string>;
using Record = std::vector<std::pair<std::string, Value>>;

std::string text_value(const Value& v) {
  if (auto d = std::get_if<std::optional<double>>(&v)) return *d ? fmt::format("{:.10g}", **d) : "-";
  if (auto i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  const auto& s = std::get<std::string>(v);
  return s.empty() ? "-" : s;
}

std::string csv_value(const Value& v) {
  if (auto d = std::get_if<std::optional<double>>(&v)) return harness::num(*d);
  if (auto i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  return harness::csv_field(std::get<std::string>(v));
}

nlohmann::ordered_json json_value(const Record& rec) {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : rec) {
    if (auto d = std::get_if<std::optional<double>>(&v)) j[k] = harness::json_num(*d);
    else if (auto i = std::get_if<std::int64_t>(&v)) j[k] = *i;
    else j[k] = std::get<std::string>(v);
  }
  return j;
}

void emit_text(std::ostream& os, const Record& rec) {
  std::size_t w = 0;
  for (const auto& [k, v] : rec) w = std::max(w, k.size());
  for (const auto& [k, v] : rec) os << fmt::format("{:<{}}  {}\n", k, w, text_value(v));
}

void emit_csv(std::ostream& os, const std::vector<Record>& rows) {
  if (rows.empty()) return;
  std::vector<std::string> head;
  for (const auto& [k, v] : rows.front()) head.push_back(k);
  os << harness::join(head, ",") << '\n';
  for (const auto& rec : rows) {
    std::vector<std::string> cells;
    for (const auto& [k, v] : rec) cells.push_back(csv_value(v));
    os << harness::join(cells, ",") << '\n';
  }
}

void emit(std::ostream& os, const std::string& format, const Record& rec) {
  if (format == "csv") emit_csv(os, {rec});
  else if (format == "jsonl") os << json_value(rec).dump() << '\n';
  else emit_text(os, rec);
}

void check_format(const std::string& f, std::initializer_list<const char*> allowed) {
  for (auto a : allowed)
    if (f == a) return;
  throw Error(ErrorCode::InvalidParameter, fmt::format("unsupported --format '{}'", f));
}

std::vector<std::uint64_t> seed_list(std::uint64_t first, int count) {
  if (count < 1) throw Error(ErrorCode::InvalidParameter, "--replications must be >= 1");
  std::vector<std::uint64_t> seeds;
  for (int k = 0; k < count; ++k) seeds.push_back(first + static_cast<std::uint64_t>(k));
  return seeds;
}

// ------------------------------------------------------------------ commands

int cmd_model(const ScenarioFlags& sf, const ModelFlags& mf, OutputFlags out) {
  if (out.format.empty()) out.format = "text";
  check_format(out.format, {"text", "csv", "jsonl"});
  const auto p = sf.resolve();
  const auto opt = mf.resolve();
  const auto r = confirmation_latency(p, opt);
  const bool saturated = r.queue.diagnostics.saturated;
  std::string diag = harness::model_diag(r.queue.diagnostics);
  if (saturated) diag = fmt::format("model-unstable (saturated, blocking probability {:.4g})", r.queue.blocking());
  Sink sink(out.output);
  emit(sink.os(), out.format,
       {{"t_q", r.t_q}, {"t_bg", r.t_bg}, {"t_bp", r.t_bp}, {"p_fork", r.p_fork}, {"t_bc", r.t_bc},
        {"t_d", r.queue.t_d}, {"blocking", r.queue.blocking()}, {"diag", diag}});
  sink.close(out.output);
  if (saturated) {
    std::cerr << "model-unstable: queue saturated; the delay estimate is not reliable\n";
    return kModel;
  }
  return kOk;
}

struct SimFlags {
  std::uint64_t seed = 1;
  double sim_time = 100000.0;
  int replications = 1;
  std::optional<double> warmup;
  std::string loser = "return-to-pool-front";
  std::string candidates = "shared";
  std::string empty_timer = "rearm";
  bool no_forks = false;
  bool assumption1 = false;
  std::string trace;
  unsigned jobs = 1;

  void attach(CLI::App* app) {
    app->add_option("--seed", seed, "first seed; replications use consecutive seeds")->capture_default_str();
    app->add_option("--sim-time", sim_time, "simulated seconds")->capture_default_str();
    app->add_option("--replications", replications, "independent runs")->capture_default_str();
    app->add_option("--warmup", warmup, "discarded initial period (default 5% of sim time)");
    app->add_option("--loser-policy", loser, "return-to-pool-front | discard")->capture_default_str();
    app->add_option("--candidates", candidates, "shared | independent")->capture_default_str();
    app->add_option("--empty-timer", empty_timer, "rearm | empty-block")->capture_default_str();
    app->add_flag("--no-forks", no_forks, "losing miners never fork");
    app->add_flag("--assumption1", assumption1, "disable the block formation timer");
    app->add_option("--trace", trace, "write a TSV event trace (single replication only)");
    app->add_option("--jobs", jobs, "concurrent replications")->capture_default_str();
  }

  sim::SimConfig resolve(const ScenarioParams& p) const {
    sim::SimConfig c;
    c.scenario = p;
    c.seed = seed;
    c.sim_time = sim_time;
    c.warmup = warmup;
    c.loser_tx_policy = sim::parse_loser_tx_policy(loser);
    c.candidates = sim::parse_candidate_policy(candidates);
    c.empty_timer = queue::parse_empty_timer_policy(empty_timer);
    c.forks_enabled = !no_forks;
    c.timer_disabled = assumption1;
    return c;
  }
};

Record single_run_record(const sim::SimResult& r) {
  auto count = [](std::uint64_t v) { return static_cast<std::int64_t>(v); };
  std::vector<std::string> hist;
  for (auto h : r.block_size_histogram) hist.push_back(std::to_string(h));
  return {{"mean_pool_delay", r.mean_pool_delay},
          {"pool_delay_ci", std::optional<double>(r.ci_half_width)},
          {"mean_confirmation_latency", r.mean_confirmation_latency},
          {"fork_rate", std::optional<double>(r.fork_rate)},
          {"drop_count", count(r.drop_count)},
          {"blocks_mined", count(r.blocks_mined)},
          {"forks", count(r.forks)},
          {"blocks_committed", count(r.blocks_committed)},
          {"transactions_committed", count(r.transactions_committed)},
          {"mean_mining_time", r.mean_mining_time},
          {"mean_propagation_delay", r.mean_propagation_delay},
          {"mean_observed_tf", r.mean_observed_tf},
          {"block_size_histogram", harness::join(hist, " ")},
          {"events", count(r.events)}};
}

int cmd_simulate(const ScenarioFlags& sf, const SimFlags& fl, OutputFlags out) {
  if (out.format.empty()) out.format = "text";
  check_format(out.format, {"text", "csv", "jsonl"});
  const auto p = sf.resolve();
  auto cfg = fl.resolve(p);
  const auto seeds = seed_list(fl.seed, fl.replications);
  if (!fl.trace.empty() && seeds.size() > 1)
    throw Error(ErrorCode::InvalidParameter, "--trace needs a single replication");

  Sink sink(out.output);
  if (seeds.size() == 1) {
    std::ofstream trace_file;
    if (!fl.trace.empty()) {
      trace_file.open(fl.trace, std::ios::binary);
      if (!trace_file) throw Error(ErrorCode::Io, fmt::format("cannot open '{}' for writing", fl.trace));
      cfg.trace = [&](const sim::TraceRecord& r) { sim::write_trace_record(trace_file, r); };
    }
    emit(sink.os(), out.format, single_run_record(sim::run_simulation(cfg)));
    if (trace_file.is_open()) {
      trace_file.close();
      if (!trace_file) throw Error(ErrorCode::Io, fmt::format("error writing '{}'", fl.trace));
    }
  } else {
    const auto rep = sim::run_replications(cfg, seeds, fl.jobs);
    Record rec{{"replications", static_cast<std::int64_t>(seeds.size())}};
    auto add = [&](const std::string& name, const stats::Interval& ci) {
      rec.emplace_back(name, ci.count ? std::optional<double>(ci.mean) : std::nullopt);
      rec.emplace_back(name + "_ci", ci.count > 1 ? std::optional<double>(ci.half_width) : std::nullopt);
    };
    add("mean_pool_delay", rep.pool_delay);
    add("mean_confirmation_latency", rep.confirmation_latency);
    add("fork_rate", rep.fork_rate);
    add("drop_count", rep.drop_count);
    add("blocks_mined", rep.blocks_mined);
    add("mean_mining_time", rep.mining_time);
    add("mean_propagation_delay", rep.propagation_delay);
    emit(sink.os(), out.format, rec);
  }
  sink.close(out.output);
  return kOk;
}

int cmd_optimize(const ScenarioFlags& sf, const ModelFlags& mf, int nodes, int bmax, const std::string& prop,
                 bool compare, OutputFlags out) {
  if (out.format.empty()) out.format = "text";
  check_format(out.format, {"text", "csv", "jsonl"});
  const auto p = sf.resolve();
  opt::OptimizerOptions o;
  o.node_budget = nodes;
  o.b_max = bmax;
  o.propagation = opt::parse_propagation_convention(prop);
  o.model = mf.resolve();
  const auto r = opt::optimize_block_size(p, o);

  std::optional<opt::BruteForceResult> bf;
  if (compare) {
    opt::BruteForceOptions bo;
    bo.model = o.model;
    bf = opt::brute_force_block_size(p, 1, bmax == 0 ? p.queue_size : bmax, opt::Backend::Model, bo);
  }

  std::vector<Record> table;
  for (const auto& row : r.table) {
    const bool is_node = std::any_of(r.nodes.begin(), r.nodes.end(),
                                     [&](const auto& n) { return static_cast<int>(n.first) == row.b; });
    Record rec{{"b", std::int64_t{row.b}},
               {"t_q_hat", r.polynomial(row.b)},
               {"t_bc_hat", row.t_bc_hat},
               {"node", std::int64_t{is_node}},
               {"b_star", std::int64_t{row.b == r.b_star}}};
    if (bf) rec.emplace_back("t_bc_model", bf->table[row.b - 1].t_bc);
    table.push_back(std::move(rec));
  }
  std::vector<std::string> diags = r.diagnostics;
  Record summary{{"b_star", std::int64_t{r.b_star}},
                 {"b_star_continuous", r.b_star_continuous},
                 {"t_bc_hat", r.t_bc_hat}};
  if (bf) summary.emplace_back("b_opt_model", std::int64_t{bf->b_opt});
  summary.emplace_back("diag", harness::join(diags, "; "));

  Sink sink(out.output);
  auto& os = sink.os();
  if (out.format == "csv") {
    emit_csv(os, table);
  } else if (out.format == "jsonl") {
    os << json_value(summary).dump() << '\n';
    for (const auto& rec : table) os << json_value(rec).dump() << '\n';
  } else {
    emit_text(os, summary);
    os << '\n';
    os << fmt::format("{:>4}  {:>14}  {:>14}  {:>4}{}\n", "b", "t_q_hat", "t_bc_hat", "node", bf ? "  t_bc_model" : "");
    for (const auto& row : r.table) {
      const bool is_node = std::any_of(r.nodes.begin(), r.nodes.end(),
                                       [&](const auto& n) { return static_cast<int>(n.first) == row.b; });
      os << fmt::format("{:>4}  {:>14.8g}  {:>14.8g}  {:>4}", row.b, r.polynomial(row.b), row.t_bc_hat,
                        is_node ? "*" : "");
      if (bf) os << fmt::format("  {}", text_value(bf->table[row.b - 1].t_bc));
      os << (row.b == r.b_star ? "  <- b*\n" : "\n");
    }
  }
  sink.close(out.output);
  return kOk;
}

int cmd_sweep(const std::string& path, unsigned jobs, OutputFlags out) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, fmt::format("cannot open sweep spec '{}'", path));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidParameter, fmt::format("{}: {}", path, e.what()));
  }
  auto spec = harness::sweep_spec_from_json(j);
  if (!out.format.empty()) spec.format = harness::parse_output_format(out.format);
  if (!out.output.empty()) spec.output = out.output;
  const auto rows = harness::run_sweep(spec, jobs);
  Sink sink(spec.output);
  harness::write_sweep(sink.os(), rows, spec.format);
  sink.close(spec.output);
  return kOk;
}

void write_file(const std::string& path, const std::function<void(std::ostream&)>& body) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorCode::Io, fmt::format("cannot open '{}' for writing", path));
  body(f);
  f.close();
  if (!f) throw Error(ErrorCode::Io, fmt::format("error writing '{}'", path));
}

std::string stem(const std::string& path) {
  const auto dot = path.rfind('.');
  const auto slash = path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return path;
  return path.substr(0, dot);
}

int cmd_validate(const std::string& preset_name, const SimFlags& fl, const ModelFlags& mf, OutputFlags out) {
  const auto format = harness::parse_output_format(out.format.empty() ? "csv" : out.format);
  if (fl.replications < 2) throw Error(ErrorCode::InvalidParameter, "validate needs --replications >= 2");
  const auto preset = harness::make_preset(preset_name);
  harness::Backends b;
  b.model = mf.resolve();
  b.sim = fl.resolve(ScenarioParams{});
  b.seeds = seed_list(fl.seed, fl.replications);
  const auto rep = harness::run_validation(preset, b, fl.jobs);

  const std::string report = out.output.empty() ? preset.name + "_report." + (out.format == "jsonl" ? "jsonl" : "csv")
                                                : out.output;
  write_file(report, [&](std::ostream& os) { harness::write_report(os, rep.rows, format); });
  write_file(stem(report) + ".summary.csv", [&](std::ostream& os) { harness::write_summary(os, rep.summary); });
  harness::write_summary(std::cout, rep.summary);
  if (!rep.optimizer.empty()) {
    write_file(stem(report) + ".optimizer.csv",
               [&](std::ostream& os) { harness::write_optimizer_table(os, rep.optimizer); });
    std::cout << '\n';
    harness::write_optimizer_table(std::cout, rep.optimizer);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Confirmation latency of PoW blockchains: queue model, block-size optimizer, simulator"};
  app.require_subcommand(1);

  ScenarioFlags sf;
  ModelFlags mf;
  SimFlags simf;
  OutputFlags out;
  int nodes = 5, bmax = 0;
  std::string propagation = "block-bits";
  bool compare = false;
  std::string sweep_file, preset;
  unsigned jobs = 1;

  auto* model = app.add_subcommand("model", "queue delay and confirmation latency breakdown");
  sf.attach(model);
  mf.attach(model);
  out.attach(model, "text | csv | jsonl");

  auto* simulate = app.add_subcommand("simulate", "discrete-event simulation");
  sf.attach(simulate);
  simf.attach(simulate);
  out.attach(simulate, "text | csv | jsonl");

  auto* optimize = app.add_subcommand("optimize", "estimate the latency-minimising block size");
  sf.attach(optimize);
  mf.attach(optimize);
  optimize->add_option("--nodes", nodes, "interpolation nodes")->capture_default_str();
  optimize->add_option("--bmax", bmax, "largest block size considered (default K)");
  optimize->add_option("--propagation", propagation, "block-bits | raw-count")->capture_default_str();
  optimize->add_flag("--compare", compare, "also evaluate the exact model at every block size");
  out.attach(optimize, "text | csv | jsonl");

  auto* sweep = app.add_subcommand("sweep", "run a JSON sweep specification");
  sweep->add_option("spec-file", sweep_file, "sweep specification")->required();
  sweep->add_option("--jobs", jobs, "concurrent cells")->capture_default_str();
  out.attach(sweep, "csv | jsonl (overrides the spec)");

  auto* validate = app.add_subcommand("validate", "model-vs-simulator comparison for a figure preset");
  validate->add_option("preset", preset, "fig3 | fig4 | fig5")->required();
  SimFlags valf;
  valf.replications = 5;
  valf.attach(validate);
  validate->remove_option(validate->get_option("--no-forks"));
  validate->remove_option(validate->get_option("--assumption1"));
  validate->remove_option(validate->get_option("--trace"));
  validate->add_option("--chain", mf.chain, "model chain construction")->capture_default_str();
  validate->add_option("--served-reading", mf.served, "occupancy | arrival-count")->capture_default_str();
  validate->add_option("--model-empty-timer", mf.empty_timer, "empty-block | rearm")->capture_default_str();
  out.attach(validate, "csv | jsonl");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*model) return cmd_model(sf, mf, out);
    if (*simulate) return cmd_simulate(sf, simf, out);
    if (*optimize) return cmd_optimize(sf, mf, nodes, bmax, propagation, compare, out);
    if (*sweep) return cmd_sweep(sweep_file, jobs, out);
    if (*validate) return cmd_validate(preset, valf, mf, out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.code());
  }
  return kUsage;
}
