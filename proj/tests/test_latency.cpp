#include <cmath>

#include <gtest/gtest.h>

#include "bclat/latency.hpp"
#include "oracles.hpp"

using namespace bclat;

TEST(Propagation, Examples) {
  ScenarioParams p;
  EXPECT_DOUBLE_EQ(propagation_delay(5, p), 0.009);
  EXPECT_DOUBLE_EQ(propagation_delay(0, p), 0.004);
  const double base = propagation_delay(7, p);
  p.capacity_bps *= 2.0;
  EXPECT_DOUBLE_EQ(propagation_delay(7, p), base / 2.0);
}

TEST(MiningDelay, Examples) {
  EXPECT_DOUBLE_EQ(mining_delay(10, 0.25), 0.4);
  EXPECT_DOUBLE_EQ(mining_delay(1, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(mining_delay(1, 0.1), 10.0);
}

TEST(ForkProbability, Examples) {
  EXPECT_EQ(fork_probability(0.25, 1, 0.009), 0.0);
  EXPECT_EQ(fork_probability(100.0, 1, 1e3), 0.0);
  EXPECT_NEAR(fork_probability(0.25, 10, 0.009), 1.0 - std::exp(-0.02025), 1e-15);
  EXPECT_NEAR(fork_probability(0.25, 10, 0.009), 0.020046, 1e-6);
  EXPECT_EQ(fork_probability(0.25, 10, 0.0), 0.0);
}

TEST(ForkProbability, StrictlyIncreasingInEachArgument) {
  // kept below lambda (M - 1) t_bp ~ 15 so that 1 - p stays representable
  for (int k = 0; k < 100; ++k) {
    const double lambda = 0.05 + 0.05 * k, t_bp = 0.001 + 0.001 * k;
    EXPECT_LT(fork_probability(lambda, 5, t_bp), fork_probability(lambda * 1.01, 5, t_bp));
    EXPECT_LT(fork_probability(lambda, 5, t_bp), fork_probability(lambda, 5, t_bp * 1.01));
    for (int m = 2; m < 30; ++m)
      EXPECT_LT(fork_probability(lambda, m, t_bp), fork_probability(lambda, m + 1, t_bp));
  }
}

TEST(ConfirmationLatency, SingleMinerIsPlainSum) {
  for (int b = 1; b <= 10; ++b) {
    ScenarioParams p;
    p.block_size_tx = b;
    p.mu = 0.25;
    p.lambda = 0.5;
    const auto r = confirmation_latency(p);
    EXPECT_EQ(r.p_fork, 0.0);
    EXPECT_EQ(r.t_bc, r.t_q + r.t_bg + r.t_bp);
  }
}

TEST(ConfirmationLatency, MM1KScenario) {
  ScenarioParams p;  // mu 0.1, lambda 0.25, M 1, b 1, tau 100, K 10
  const auto r = confirmation_latency(p);
  const double t_q = oracle::mm1k(0.1, 0.25, 10).mean_system_time;
  EXPECT_NEAR(r.t_q, t_q, 1e-3);
  EXPECT_DOUBLE_EQ(r.t_bg, 4.0);
  EXPECT_DOUBLE_EQ(r.t_bp, 0.005);
  EXPECT_NEAR(r.t_bc, t_q + 4.0 + 0.005, 1e-3);
}

TEST(ConfirmationLatency, ForkInflation) {
  ScenarioParams p;
  p.miners = 10;
  const auto r = confirmation_latency(p);
  EXPECT_GT(r.p_fork, 0.0);
  EXPECT_NEAR(r.t_bg, 0.4, 1e-15);
  const double sum = r.t_q + r.t_bg + r.t_bp;
  EXPECT_GT(r.t_bc, sum);
  EXPECT_NEAR(r.t_bc, sum / (1.0 - r.p_fork), 1e-12 * r.t_bc);
}

TEST(ConfirmationLatency, DefaultSizesForkField) {
  ScenarioParams p;
  p.block_size_tx = 5;
  p.miners = 10;
  p.lambda = 0.25;
  EXPECT_NEAR(confirmation_latency(p).p_fork, 0.020046, 1e-6);
}

TEST(ConfirmationLatency, IncreasingInForkProbabilityAtFixedQueueDelay) {
  ScenarioParams p;
  p.miners = 10;
  p.block_size_tx = 4;
  const auto r = confirmation_latency(p);
  double previous = 0.0;
  for (double pf = 0.0; pf < 0.99; pf += 0.01) {
    const double t_bc = (r.t_q + r.t_bg + r.t_bp) / (1.0 - pf);
    EXPECT_GT(t_bc, previous);
    previous = t_bc;
  }
}

TEST(ConfirmationLatency, BreakdownInvariants) {
  for (double lambda : {0.1, 1.0, 10.0})
    for (int m : {1, 2, 10, 50})
      for (int b : {1, 5, 10}) {
        ScenarioParams p;
        p.lambda = lambda;
        p.miners = m;
        p.block_size_tx = b;
        const double pf = fork_probability(lambda, m, propagation_delay(b, p));
        if (queue::served_count(p.queue_size, p, pf) == 0) {
          // forks eat every block: nothing ever leaves the pool
          EXPECT_THROW(confirmation_latency(p), Error);
          continue;
        }
        const auto r = confirmation_latency(p);
        EXPECT_GE(r.p_fork, 0.0);
        EXPECT_LT(r.p_fork, 1.0);
        EXPECT_GE(r.t_bc, r.t_q + r.t_bg + r.t_bp);
      }
}

TEST(ConfirmationLatency, ForksDisabledDropsInflation) {
  ScenarioParams p;
  p.miners = 10;
  queue::ModelOptions o;
  o.forks_enabled = false;
  const auto r = confirmation_latency(p, o);
  EXPECT_EQ(r.p_fork, 0.0);
  EXPECT_EQ(r.t_bc, r.t_q + r.t_bg + r.t_bp);
}

TEST(ConfirmationLatency, ForkSaturation) {
  ScenarioParams p;
  p.miners = 1000;
  p.lambda = 10.0;
  p.capacity_bps = 1.0;  // seconds-long propagation
  try {
    confirmation_latency(p);
    FAIL() << "expected fork-saturated";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ForkSaturated);
  }
}
