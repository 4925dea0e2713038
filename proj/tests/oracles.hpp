#pragma once

// Independent reference computations used only by the tests.

#include <cmath>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

struct MM1K {
  std::vector<double> pi;  // time-average occupancy 0..K
  double mean_system_time;
};

/// Textbook M/M/1/K: p_n proportional to rho^n, W = L / (arrival (1 - p_K)).
inline MM1K mm1k(double arrival, double service, int K) {
  const double rho = arrival / service;
  std::vector<double> pi(K + 1);
  double norm = 0.0;
  for (int n = 0; n <= K; ++n) norm += pi[n] = std::pow(rho, n);
  double L = 0.0;
  for (int n = 0; n <= K; ++n) {
    pi[n] /= norm;
    L += n * pi[n];
  }
  return {pi, L / (arrival * (1.0 - pi[K]))};
}

/// Departure-epoch chain of M/M/1/K built by walking the occupancy during one
/// service: each step is either the next arrival (if there is room) or the
/// service completion. States 0..K; K is only reachable as a starting row.
inline Eigen::MatrixXd mm1k_embedded(double arrival, double service, int K) {
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(K + 1, K + 1);
  const double up = arrival / (arrival + service);
  for (int i = 0; i <= K; ++i) {
    std::vector<double> mass(K + 1, 0.0);
    mass[std::max(i, 1)] = 1.0;  // an empty system waits for the next arrival
    for (double left = 1.0; left > 1e-17;) {
      std::vector<double> next(K + 1, 0.0);
      for (int n = 1; n <= K; ++n) {
        if (mass[n] == 0.0) continue;
        const double a = n < K ? up : 0.0;
        P(i, n - 1) += mass[n] * (1.0 - a);
        if (n < K) next[n + 1] += mass[n] * a;
      }
      mass = next;
      left = 0.0;
      for (double m : mass) left += m;
    }
  }
  return P;
}

inline std::vector<double> power_iteration(const Eigen::MatrixXd& P, int iterations = 100000) {
  Eigen::RowVectorXd pi = Eigen::RowVectorXd::Constant(P.rows(), 1.0 / double(P.rows()));
  for (int k = 0; k < iterations; ++k) {
    Eigen::RowVectorXd next = pi * P;
    const double change = (next - pi).cwiseAbs().maxCoeff();
    pi = next;
    if (change < 1e-15) break;
  }
  return {pi.data(), pi.data() + pi.size()};
}

}  // namespace oracle
