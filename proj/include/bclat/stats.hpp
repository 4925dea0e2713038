#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <span>

#include <boost/math/distributions/students_t.hpp>

namespace bclat::stats {

struct Interval {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double half_width = std::numeric_limits<double>::quiet_NaN();
  std::size_t count = 0;

  bool contains(double x) const { return std::abs(x - mean) <= half_width; }
};

inline double mean(std::span<const double> xs) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

inline double sample_stddev(std::span<const double> xs) {
  if (xs.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double m = mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

/// Two-sided Student-t critical value, e.g. level 0.95 -> t_{0.975, dof}.
inline double t_critical(std::size_t dof, double level = 0.95) {
  boost::math::students_t dist(static_cast<double>(dof));
  return boost::math::quantile(dist, 0.5 + level / 2.0);
}

/// Mean and t-based confidence half-width of independent observations.
inline Interval confidence_interval(std::span<const double> xs, double level = 0.95) {
  Interval ci;
  ci.count = xs.size();
  ci.mean = mean(xs);
  if (xs.size() >= 2)
    ci.half_width = t_critical(xs.size() - 1, level) * sample_stddev(xs) / std::sqrt(double(xs.size()));
  return ci;
}

}  // namespace bclat::stats
