#pragma once
// Brute-force reference computations used only by tests. They enumerate
// every alignment explicitly and share no code with the dynamic programs.

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "tss/array.hpp"
#include "tss/models.hpp"

namespace tss::oracle {

struct RnntPath {
  double log_prob = 0.0;
  std::vector<std::size_t> emit_frame;  // frame of each token emission
};

// Every monotone path through the transducer lattice, ending with the final
// blank out of (T-1, U).
inline std::vector<RnntPath> enumerate_rnnt_paths(const JointTensor& j, const std::vector<int>& y,
                                                  int blank) {
  const std::size_t frames = j.frames(), u_max = y.size();
  std::vector<RnntPath> out;
  RnntPath cur;
  std::function<void(std::size_t, std::size_t)> walk = [&](std::size_t t, std::size_t u) {
    if (t == frames - 1 && u == u_max) {
      RnntPath done = cur;
      done.log_prob += j.at(t, u, blank);
      out.push_back(done);
      return;
    }
    if (t + 1 < frames) {
      const double saved = cur.log_prob;
      cur.log_prob += j.at(t, u, blank);
      walk(t + 1, u);
      cur.log_prob = saved;
    }
    if (u < u_max) {
      const double saved = cur.log_prob;
      cur.log_prob += j.at(t, u, y[u]);
      cur.emit_frame.push_back(t);
      walk(t, u + 1);
      cur.emit_frame.pop_back();
      cur.log_prob = saved;
    }
  };
  walk(0, 0);
  return out;
}

inline double log_sum(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double rnnt_loss(const JointTensor& j, const std::vector<int>& y, int blank) {
  std::vector<double> lp;
  for (const auto& p : enumerate_rnnt_paths(j, y, blank)) lp.push_back(p.log_prob);
  return -log_sum(lp);
}

// P(token u emitted at frame t | X, Y) by summing over paths: [T x U].
inline Array emission_occupancy(const JointTensor& j, const std::vector<int>& y, int blank) {
  const auto paths = enumerate_rnnt_paths(j, y, blank);
  std::vector<double> all;
  for (const auto& p : paths) all.push_back(p.log_prob);
  const double z = log_sum(all);
  Array g({j.frames(), y.size()});
  for (const auto& p : paths) {
    for (std::size_t u = 0; u < y.size(); ++u) g.at(p.emit_frame[u], u) += std::exp(p.log_prob - z);
  }
  return g;
}

// Sum over all K^T frame labelings that collapse to y.
inline double ctc_loss(const Array& log_probs, const std::vector<int>& y, int blank) {
  const std::size_t frames = log_probs.dim(0), k = log_probs.dim(1);
  std::vector<int> path(frames, 0);
  std::vector<double> matches;
  std::function<void(std::size_t, double)> walk = [&](std::size_t t, double lp) {
    if (t == frames) {
      std::vector<int> collapsed;
      int prev = -1;
      for (int c : path) {
        if (c != prev && c != blank) collapsed.push_back(c);
        prev = c;
      }
      if (collapsed == y) matches.push_back(lp);
      return;
    }
    for (std::size_t c = 0; c < k; ++c) {
      path[t] = static_cast<int>(c);
      walk(t + 1, lp + log_probs.at(t, c));
    }
  };
  walk(0, 0.0);
  return -log_sum(matches);
}

inline Array random_log_softmax(Shape shape, std::mt19937_64& rng, double scale = 1.5) {
  std::normal_distribution<double> d(0.0, scale);
  Array a(shape);
  for (double& v : a.data()) v = d(rng);
  const std::size_t k = a.last_dim();
  for (std::size_t r = 0; r < a.outer_size(); ++r) {
    auto row = a.row(r);
    double m = row[0];
    for (double v : row) m = std::max(m, v);
    double s = 0.0;
    for (double v : row) s += std::exp(v - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < k; ++c) row[c] -= lse;
  }
  return a;
}

inline std::vector<int> random_labels(std::size_t u, int k, int blank, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, k - 1);
  std::vector<int> y;
  while (y.size() < u) {
    const int c = d(rng);
    if (c != blank) y.push_back(c);
  }
  return y;
}

}  // namespace tss::oracle
