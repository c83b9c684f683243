#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "avex/autodiff.hpp"

namespace avex::testing {

/// Every tag sequence of length n over K tags, in lexicographic order.
inline std::vector<std::vector<int>> all_paths(int n, int K) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur(static_cast<std::size_t>(n), 0);
  while (true) {
    out.push_back(cur);
    int i = n - 1;
    while (i >= 0 && cur[static_cast<std::size_t>(i)] == K - 1) cur[static_cast<std::size_t>(i--)] = 0;
    if (i < 0) break;
    ++cur[static_cast<std::size_t>(i)];
  }
  return out;
}

/// Path score written out from the definition: start transition, emissions,
/// pairwise transitions and the stop transition. START is row K, STOP is column K+1.
inline double brute_score(const Matrix& T, const Matrix& E, const std::vector<int>& y) {
  const Index K = E.cols();
  double s = T(K, y[0]) + T(y.back(), K + 1);
  for (std::size_t t = 0; t < y.size(); ++t) s += E(static_cast<Index>(t), y[t]);
  for (std::size_t t = 1; t < y.size(); ++t) s += T(y[t - 1], y[t]);
  return s;
}

struct BruteForce {
  double log_z = 0;
  std::vector<int> argmax;  // lexicographically first among the best
  double best = 0;
  std::vector<double> scores;
  std::vector<std::vector<int>> paths;
};

inline BruteForce brute_force(const Matrix& T, const Matrix& E) {
  BruteForce b;
  b.paths = all_paths(static_cast<int>(E.rows()), static_cast<int>(E.cols()));
  b.best = -std::numeric_limits<double>::infinity();
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& p : b.paths) {
    const double s = brute_score(T, E, p);
    b.scores.push_back(s);
    mx = std::max(mx, s);
    if (s > b.best) {
      b.best = s;
      b.argmax = p;
    }
  }
  double acc = 0;
  for (double s : b.scores) acc += std::exp(s - mx);
  b.log_z = mx + std::log(acc);
  return b;
}

}  // namespace avex::testing
