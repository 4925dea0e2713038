#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "bclat/harness.hpp"

using namespace bclat;
using namespace bclat::harness;

namespace {

struct Run {
  int status;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(BCLAT_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
  const int raw = pclose(pipe);
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, out};
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "bclat_harness_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

SweepSpec spec(const std::string& json) { return sweep_spec_from_json(nlohmann::json::parse(json)); }

}  // namespace

// -------------------------------------------------------------------- sweeps

TEST(Sweep, SevenBySevenRateGridHas49Rows) {
  const auto s = spec(R"({"axes": {"mu": [0.1, 0.25, 0.5, 1, 2.5, 5, 10],
                                    "lambda": [0.1, 0.25, 0.5, 1, 2.5, 5, 10]},
                          "backends": ["model"]})");
  EXPECT_EQ(run_sweep(s).size(), 49u);
}

TEST(Sweep, EmptyAxesGiveBaseScenario) {
  const auto s = spec(R"({"base": {"mu": 0.25, "block_size": 4}, "axes": {}, "backends": ["model"]})");
  const auto rows = run_sweep(s);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].scenario.mu, 0.25);
  EXPECT_EQ(rows[0].scenario.block_size_tx, 4);
}

TEST(Sweep, BothBackendsDoubleRows) {
  const auto s = spec(R"({"axes": {"block_size": [1, 2, 3]}, "backends": ["both"], "seeds": [1, 2],
                          "sim_time": 2000})");
  const auto rows = run_sweep(s);
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].backend, opt::Backend::Model);
  EXPECT_EQ(rows[1].backend, opt::Backend::Simulator);
  EXPECT_EQ(rows[1].seed_count, 2u);
  EXPECT_TRUE(rows[1].t_q);
}

TEST(Sweep, CartesianOrderFollowsCanonicalAxes) {
  const auto s = spec(R"({"axes": {"timer": [1, "inf"], "mu": [0.1, 0.2]}, "backends": ["model"]})");
  const auto cells = expand_cells(s);
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[0].mu, 0.1);
  EXPECT_EQ(cells[0].timer, 1.0);
  EXPECT_TRUE(std::isinf(cells[1].timer));
  EXPECT_EQ(cells[2].mu, 0.2);
}

TEST(Sweep, CapExceeded) {
  auto s = spec(R"({"axes": {"mu": [0.1, 0.2, 0.3], "lambda": [1, 2]}, "backends": ["both"], "cap": 11})");
  try {
    expand_cells(s);
    FAIL() << "expected cap-exceeded";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CapExceeded);
  }
  s.cap = 12;
  EXPECT_EQ(expand_cells(s).size(), 6u);
}

TEST(Sweep, DefaultCapIsOneMillionRows) {
  const auto s = spec(R"({"axes": {"mu": [1,2,3,4,5,6,7,8,9,10], "lambda": [1,2,3,4,5,6,7,8,9,10],
                                    "miners": [1,2,3,4,5,6,7,8,9,10], "block_size": [1,2,3,4,5,6,7,8,9,10],
                                    "timer": [1,2,3,4,5,6,7,8,9,10,11]}, "backends": ["both"],
                          "seeds": [1]})");
  // 220 000 rows stay under the cap; widening one axis tenfold goes past it
  EXPECT_EQ(expand_cells(s).size(), 110000u);
  auto big = s;
  big.axes[2].second.resize(100, 1.0);
  EXPECT_EQ(s.cap, kDefaultRowCap);
  EXPECT_THROW(expand_cells(big), Error);
}

TEST(Sweep, InvalidCellsAreRecordedNotFatal) {
  const auto s = spec(R"({"base": {"queue_size": 4}, "axes": {"block_size": [3, 5]}, "backends": ["model"]})");
  const auto rows = run_sweep(s);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_TRUE(rows[0].t_q);
  EXPECT_FALSE(rows[1].t_q);
  EXPECT_EQ(rows[1].diag, "invalid-parameter");
}

TEST(Sweep, SpecRejectsUnknownKeysAndAxes) {
  EXPECT_THROW(spec(R"({"axis": {}})"), Error);
  EXPECT_THROW(spec(R"({"axes": {"capacity": [1]}})"), Error);
  EXPECT_THROW(spec(R"({"backends": ["oracle"]})"), Error);
  EXPECT_THROW(expand_cells(spec(R"({"axes": {"miners": [1.5]}})")), Error);
}

TEST(Sweep, JobsDoNotChangeOutput) {
  const auto s = spec(R"({"axes": {"mu": [0.1, 0.25], "block_size": [1, 5]}, "backends": ["both"],
                          "seeds": [3], "sim_time": 3000})");
  std::ostringstream a, b;
  write_sweep_csv(a, run_sweep(s, 1));
  write_sweep_csv(b, run_sweep(s, 4));
  EXPECT_EQ(a.str(), b.str());
}

TEST(Sweep, CsvRoundTripIsExact) {
  const auto s = spec(R"({"axes": {"mu": [0.1, 0.25, 5], "miners": [1, 10], "timer": [1, "inf"]},
                          "backends": ["both"], "seeds": [1, 2], "sim_time": 2000})");
  const auto rows = run_sweep(s);
  std::stringstream buf;
  write_sweep_csv(buf, rows);
  const auto back = read_sweep_csv(buf);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto &a = rows[k], &b = back[k];
    EXPECT_EQ(a.scenario.mu, b.scenario.mu);
    EXPECT_EQ(a.scenario.lambda, b.scenario.lambda);
    EXPECT_EQ(a.scenario.miners, b.scenario.miners);
    EXPECT_EQ(a.scenario.queue_size, b.scenario.queue_size);
    EXPECT_EQ(a.scenario.block_size_tx, b.scenario.block_size_tx);
    EXPECT_EQ(a.scenario.timer, b.scenario.timer);
    EXPECT_EQ(a.backend, b.backend);
    EXPECT_EQ(a.seed_count, b.seed_count);
    EXPECT_EQ(a.t_q, b.t_q);
    EXPECT_EQ(a.t_bg, b.t_bg);
    EXPECT_EQ(a.t_bp, b.t_bp);
    EXPECT_EQ(a.p_fork, b.p_fork);
    EXPECT_EQ(a.t_bc, b.t_bc);
    EXPECT_EQ(a.fork_rate, b.fork_rate);
    EXPECT_EQ(a.drop_count, b.drop_count);
    EXPECT_EQ(a.diag, b.diag);
  }
}

TEST(Sweep, CsvHeaderAndJsonl) {
  const auto s = spec(R"({"axes": {"timer": ["inf"]}, "backends": ["model"]})");
  const auto rows = run_sweep(s);
  std::ostringstream csv, jsonl;
  write_sweep_csv(csv, rows);
  EXPECT_EQ(csv.str().substr(0, csv.str().find('\n')),
            "mu,lambda,miners,queue_size,block_size,timer,backend,seed_count,t_q,t_bg,t_bp,p_fork,t_bc,fork_rate,"
            "drop_count,diag");
  write_sweep_jsonl(jsonl, rows);
  const auto j = nlohmann::json::parse(jsonl.str());
  EXPECT_EQ(j["timer"], "inf");
  EXPECT_EQ(j["backend"], "model");
  EXPECT_TRUE(j["drop_count"].is_null());
}

TEST(Sweep, CsvQuoting) {
  EXPECT_EQ(csv_field("plain"), "plain");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(split_csv_line("1,\"a,\"\"b\"\"\",x"), (std::vector<std::string>{"1", "a,\"b\"", "x"}));
}

// ----------------------------------------------------------------- presets

TEST(Presets, GridSizes) {
  EXPECT_EQ(make_preset("fig5").cells.size(), 240u);
  EXPECT_EQ(make_preset("fig3").cells.size(), 180u);
  EXPECT_EQ(make_preset("fig4").cells.size(), 360u);
  EXPECT_FALSE(make_preset("fig3").forks_enabled);
  EXPECT_THROW(make_preset("fig6"), Error);
}

TEST(Presets, Fig5ParameterSets) {
  std::set<double> mus, lambdas, timers;
  std::set<int> miners, sizes;
  for (const auto& p : make_preset("fig5").cells) {
    mus.insert(p.mu);
    lambdas.insert(p.lambda);
    timers.insert(p.timer);
    miners.insert(p.miners);
    sizes.insert(p.block_size_tx);
    EXPECT_EQ(p.queue_size, 10);
    EXPECT_EQ(p.header_bits, 20000.0);
    EXPECT_EQ(p.tx_bits, 5000.0);
    EXPECT_EQ(p.capacity_bps, 5e6);
  }
  EXPECT_EQ(mus, (std::set<double>{0.1, 0.25}));
  EXPECT_EQ(lambdas, (std::set<double>{0.25, 5}));
  EXPECT_EQ(timers, (std::set<double>{1, 5, 100}));
  EXPECT_EQ(miners, (std::set<int>{1, 10}));
  EXPECT_EQ(sizes.size(), 10u);
}

TEST(Report, CompareCellCarriesEverything) {
  ScenarioParams p;
  p.miners = 10;
  p.block_size_tx = 3;
  p.timer = 1.0;
  Backends b;
  b.seeds = {1, 2, 3};
  b.sim.sim_time = 5000.0;
  const auto row = compare_cell(p, b, true);
  EXPECT_EQ(row.scenario, p);
  ASSERT_TRUE(row.model_t_q && row.sim_t_q && row.rel_err_t_q);
  EXPECT_NEAR(*row.rel_err_t_q, std::abs(*row.model_t_q - *row.sim_t_q) / *row.sim_t_q, 1e-15);
  EXPECT_TRUE(row.sim_t_q_ci);
  EXPECT_TRUE(row.t_q_rearm);
  EXPECT_TRUE(row.fork_timer_divergence);
  EXPECT_LT(*row.model_t_bc_no_mining_term, *row.model_t_bc);
}

TEST(Report, SummaryQuantiles) {
  std::vector<ComparisonRow> rows;
  for (int k = 1; k <= 5; ++k) {
    ComparisonRow r;
    r.scenario.timer = 1.0;
    r.scenario.miners = 10;
    r.rel_err_t_q = 0.1 * k;
    r.saturated = k == 5;
    rows.push_back(r);
  }
  ComparisonRow other;
  other.scenario.timer = 100.0;
  other.scenario.miners = 10;
  other.rel_err_t_q = 0.05;
  rows.push_back(other);
  const auto s = summarize(rows);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].timer, 1.0);
  EXPECT_EQ(s[0].cells, 5u);
  EXPECT_EQ(s[0].saturated, 1u);
  EXPECT_NEAR(*s[0].mean, 0.3, 1e-15);
  EXPECT_NEAR(*s[0].mean_non_saturated, 0.25, 1e-15);
  EXPECT_NEAR(*s[0].median, 0.3, 1e-15);
  EXPECT_NEAR(*s[0].p90, 0.46, 1e-12);
  EXPECT_NEAR(*s[0].max, 0.5, 1e-15);
  EXPECT_NEAR(*mean_relative_error(rows, 1.0, 10), 0.3, 1e-15);
  EXPECT_NEAR(*mean_relative_error(rows, 1.0, 10, true), 0.25, 1e-15);
}

// ---------------------------------------------------------------------- CLI

TEST(Cli, ModelForkField) {
  const auto r = cli("model --block-size 5 --miners 10 --lambda 0.25 --format jsonl");
  ASSERT_EQ(r.status, 0) << r.out;
  EXPECT_NEAR(nlohmann::json::parse(r.out)["p_fork"].get<double>(), 0.020046, 1e-6);
}

TEST(Cli, ModelSingleMinerHasNoForks) {
  const auto r = cli("model --miners 1 --format jsonl");
  ASSERT_EQ(r.status, 0);
  EXPECT_EQ(nlohmann::json::parse(r.out)["p_fork"].get<double>(), 0.0);
}

TEST(Cli, SaturatedModelExitsTwo) {
  const auto r = cli("model --mu 0.25 --lambda 0.25 --block-size 10 --timer 100");
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.out.find("model-unstable"), std::string::npos);
}

TEST(Cli, SimulateDeterministicAndForkFree) {
  const auto a = cli("simulate --seed 42 --sim-time 20000 --miners 1");
  const auto b = cli("simulate --seed 42 --sim-time 20000 --miners 1");
  ASSERT_EQ(a.status, 0);
  EXPECT_EQ(a.out, b.out);
  const auto j = nlohmann::json::parse(cli("simulate --seed 42 --sim-time 20000 --format jsonl").out);
  EXPECT_EQ(j["fork_rate"].get<double>(), 0.0);
}

TEST(Cli, SimulateDefaultsToOneRunAndTraces) {
  const auto j = nlohmann::json::parse(cli("simulate --sim-time 2000 --format jsonl").out);
  EXPECT_FALSE(j.contains("replications"));
  const auto trace = scratch("trace.tsv");
  std::filesystem::remove(trace);
  EXPECT_EQ(cli("simulate --sim-time 200 --trace " + trace.string()).status, 0);
  EXPECT_GT(std::filesystem::file_size(trace), 0u);
  EXPECT_EQ(cli("simulate --replications 2 --trace " + trace.string()).status, 1);
}

TEST(Cli, SimulateMM1K) {
  const auto r = cli("simulate --replications 5 --format jsonl");
  ASSERT_EQ(r.status, 0);
  EXPECT_NEAR(nlohmann::json::parse(r.out)["mean_pool_delay"].get<double>(), 6.66, 0.35);
}

TEST(Cli, OptimizeRejectsTwoNodes) {
  EXPECT_EQ(cli("optimize --nodes 2").status, 1);
  EXPECT_EQ(cli("optimize --nodes 5").status, 0);
}

TEST(Cli, OptimizeMatchesBruteForce) {
  const auto r = cli("optimize --mu 0.25 --lambda 0.2 --miners 10 --no-forks --assumption1 --compare --format jsonl");
  ASSERT_EQ(r.status, 0);
  const auto summary = nlohmann::json::parse(r.out.substr(0, r.out.find('\n')));
  EXPECT_EQ(summary["b_star"], summary["b_opt_model"]);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(cli("--bogus").status, 1);
  EXPECT_EQ(cli("model --block-size 0").status, 1);
  EXPECT_EQ(cli("model --mu abc").status, 1);
  EXPECT_EQ(cli("model --scenario /nonexistent/scenario.json").status, 3);
  EXPECT_EQ(cli("sweep /nonexistent/spec.json").status, 3);
  EXPECT_EQ(cli("model --output /nonexistent/dir/out.csv").status, 3);
  EXPECT_EQ(cli("validate fig9").status, 1);
}

TEST(Cli, SweepWritesFile) {
  const auto spec_path = scratch("spec.json");
  const auto out_path = scratch("sweep.csv");
  std::ofstream(spec_path) << R"({"base": {"miners": 10}, "axes": {"mu": [0.1, 0.25], "lambda": [0.25, 5]},
                                   "backends": ["model"], "seeds": [1], "output": ")"
                           << out_path.string() << R"("})";
  ASSERT_EQ(cli("sweep " + spec_path.string() + " --jobs 2").status, 0);
  std::ifstream in(out_path);
  const auto rows = read_sweep_csv(in);
  EXPECT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].scenario.miners, 10);
}

TEST(Cli, ScenarioFileWithOverrides) {
  const auto path = scratch("scenario.json");
  std::ofstream(path) << R"({"mu": 0.25, "lambda": 0.25, "block_size": 10, "timer": 100, "header_kbits": 20})";
  EXPECT_EQ(cli("model --scenario " + path.string()).status, 2);
  EXPECT_EQ(cli("model --scenario " + path.string() + " --block-size 3 --mu 0.1").status, 0);
}
