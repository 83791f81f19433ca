#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "tss/lattice.hpp"

using namespace tss;

namespace {

constexpr int kBlank = 0;

JointTensor RandomJoint(std::size_t t, std::size_t u, std::size_t k, std::mt19937_64& rng) {
  return JointTensor{oracle::random_log_softmax({t, u + 1, k}, rng), false};
}

JointTensor Uniform(std::size_t t, std::size_t u, std::size_t k) {
  return JointTensor{Array({t, u + 1, k}, -std::log(static_cast<double>(k))), false};
}

}  // namespace

TEST_CASE("single-path lattices") {
  JointTensor j = Uniform(1, 0, 3);
  LatticeVars v = rnnt_forward_backward(j, {}, kBlank);
  CHECK(-v.log_likelihood == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  CHECK(-v.log_likelihood == doctest::Approx(1.09861).epsilon(1e-5));

  std::mt19937_64 rng(2);
  JointTensor r = RandomJoint(1, 1, 4, rng);
  const std::vector<int> y = {2};
  v = rnnt_forward_backward(r, y, kBlank);
  CHECK(-v.log_likelihood == doctest::Approx(-(r.at(0, 0, 2) + r.at(0, 1, kBlank))).epsilon(1e-14));
}

TEST_CASE("forward-backward matches path enumeration") {
  std::mt19937_64 rng(3);
  JointTensor j = RandomJoint(3, 2, 4, rng);
  const std::vector<int> y = {1, 3};
  const auto paths = oracle::enumerate_rnnt_paths(j, y, kBlank);
  CHECK(paths.size() == 6);  // C(T-1+U, U)
  LatticeVars v = rnnt_forward_backward(j, y, kBlank);
  CHECK(std::abs(-v.log_likelihood - oracle::rnnt_loss(j, y, kBlank)) < 1e-10);
  CHECK(v.log_alpha.at(0, 0) == 0.0);
  CHECK(v.log_likelihood ==
        doctest::Approx(v.log_alpha.at(2, 2) + j.at(2, 2, kBlank)).epsilon(1e-15));
}

TEST_CASE("lattice invariants on random instances") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = 1 + rng() % 4, u = rng() % 4, k = 2 + rng() % 3;
    JointTensor j = RandomJoint(t, u, k, rng);
    auto y = oracle::random_labels(u, static_cast<int>(k), kBlank, rng);
    LatticeVars v = rnnt_forward_backward(j, y, kBlank);
    CHECK(std::abs(-v.log_likelihood - oracle::rnnt_loss(j, y, kBlank)) < 1e-10);
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t ui = 0; ui <= u; ++ui)
        CHECK(v.log_alpha.at(ti, ui) + v.log_beta.at(ti, ui) <= v.log_likelihood + 1e-8);
    // Every anti-diagonal t+u = n is a cut that each path crosses once.
    for (std::size_t n = 0; n + 1 <= t + u; ++n) {
      std::vector<double> cut;
      for (std::size_t ti = 0; ti < t; ++ti) {
        if (n >= ti && n - ti <= u) cut.push_back(v.log_alpha.at(ti, n - ti) + v.log_beta.at(ti, n - ti));
      }
      CHECK(std::abs(oracle::log_sum(cut) - v.log_likelihood) < 1e-8);
    }
    Array gamma = emission_occupancy(v, j, y);
    Array want = oracle::emission_occupancy(j, y, kBlank);
    for (std::size_t i = 0; i < gamma.size(); ++i) CHECK(std::abs(gamma[i] - want[i]) < 1e-10);
    for (std::size_t ui = 0; ui < u; ++ui) {
      double s = 0.0;
      for (std::size_t ti = 0; ti < t; ++ti) s += gamma.at(ti, ui);
      CHECK(std::abs(s - 1.0) < 1e-8);
    }
  }
}

TEST_CASE("loss is invariant to per-node logit shifts") {
  std::mt19937_64 rng(5);
  Array logits = testing::random_array({3, 3, 4}, rng);
  const std::vector<int> y = {2, 1};
  const double base =
      rnnt_forward_backward(JointTensor{log_softmax(logits), false}, y, kBlank).log_likelihood;
  for (std::size_t node = 0; node < 9; ++node) {
    for (std::size_t c = 0; c < 4; ++c) logits[node * 4 + c] += 3.7 * (node + 1);
  }
  const double shifted =
      rnnt_forward_backward(JointTensor{log_softmax(logits), false}, y, kBlank).log_likelihood;
  CHECK(std::abs(base - shifted) < 1e-12);
}

TEST_CASE("rnnt gradient") {
  SUBCASE("single node is p - onehot(blank)") {
    std::mt19937_64 rng(6);
    JointTensor j = RandomJoint(1, 0, 4, rng);
    Array g = rnnt_loss_grad(j, {}, kBlank);
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(g[c] == doctest::Approx(std::exp(j.log_probs[c]) - (c == 0 ? 1.0 : 0.0)).epsilon(1e-14));
    }
  }
  SUBCASE("sums to zero over classes and matches finite differences") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 10; ++trial) {
      Array logits = testing::random_array({3, 3, 4}, rng);
      const auto y = oracle::random_labels(2, 4, kBlank, rng);
      Array g = rnnt_loss_grad(JointTensor{log_softmax(logits), false}, y, kBlank);
      for (std::size_t node = 0; node < 9; ++node) {
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) s += g[node * 4 + c];
        CHECK(std::abs(s) < 1e-12);
      }
      auto loss = [&](const Array& x) {
        return -rnnt_forward_backward(JointTensor{log_softmax(x), false}, y, kBlank).log_likelihood;
      };
      auto coords = testing::all_coords(logits);
      CHECK(testing::relative_error(testing::gather(g, coords),
                                    testing::finite_difference(loss, logits, coords)) < 1e-6);
    }
  }
  SUBCASE("tape op backpropagates the same gradient") {
    std::mt19937_64 rng(8);
    Parameter p("logits", testing::random_array({3, 2, 4}, rng));
    Tape t;
    Var loss = transducer_loss(t, t.param(p), {3}, kBlank);
    t.backward(loss, 2.0);
    Array want = rnnt_loss_grad(JointTensor{log_softmax(p.value), false}, {3}, kBlank);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(p.grad[i] == doctest::Approx(2.0 * want[i]));
  }
}

TEST_CASE("contract errors") {
  JointTensor j = Uniform(2, 1, 3);
  CHECK_THROWS_AS(rnnt_forward_backward(j, {1, 2}, kBlank), ContractError);
  CHECK_THROWS_AS(rnnt_forward_backward(j, {0}, kBlank), ContractError);
  LatticeVars v = rnnt_forward_backward(j, {1}, kBlank);
  CHECK_THROWS_AS(emission_occupancy(v, Uniform(3, 1, 3), {1}), ContractError);
  CHECK_THROWS_AS(gather_rnnt_sampling_matrix(j, AlignmentIndices{{5}}), ContractError);
}

TEST_CASE("occupancy with a single frame is a forced alignment") {
  std::mt19937_64 rng(9);
  JointTensor j = RandomJoint(1, 3, 4, rng);
  const std::vector<int> y = {1, 2, 3};
  Array gamma = emission_occupancy(rnnt_forward_backward(j, y, kBlank), j, y);
  for (std::size_t u = 0; u < 3; ++u) CHECK(gamma.at(0, u) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("time index extraction") {
  CHECK(extract_time_indices(Array::matrix({{0.8}, {0.2}})).t_u == std::vector<std::size_t>{0});
  Array uniform({4, 3}, 0.25);
  CHECK(extract_time_indices(uniform).t_u == std::vector<std::size_t>{0, 0, 0});
  // Raw argmaxes 2, 0, 3 are clamped to 2, 2, 3.
  Array g = Array::matrix({{0.1, 0.5, 0.1}, {0.2, 0.3, 0.2}, {0.6, 0.1, 0.3}, {0.1, 0.1, 0.4}});
  CHECK(extract_time_indices(g).t_u == std::vector<std::size_t>{2, 2, 3});

  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    Array r = testing::random_array({4, 3}, rng);
    std::vector<std::size_t> want;
    for (std::size_t u = 0; u < 3; ++u) {
      std::size_t best = 0;
      for (std::size_t t = 0; t < 4; ++t) if (r.at(t, u) > r.at(best, u)) best = t;
      if (!want.empty()) best = std::max(best, want.back());
      want.push_back(best);
    }
    const auto got = extract_time_indices(r);
    CHECK(got.t_u == want);
    CHECK(extract_time_indices(r).t_u == got.t_u);
  }
}

TEST_CASE("rnnt sampling matrix") {
  std::mt19937_64 rng(11);
  SUBCASE("single frame gathers columns 0..U-1") {
    JointTensor j = RandomJoint(1, 2, 4, rng);
    SamplingMatrix m = rnnt_sampling_matrix(j, {1, 2}, kBlank, AlignmentPath::kOccupancy);
    CHECK(m.log_probs.shape() == Shape{2, 4});
    CHECK(m.source == SamplingSource::kRnnt);
    for (std::size_t u = 0; u < 2; ++u)
      for (std::size_t c = 0; c < 4; ++c) CHECK(m.log_probs.at(u, c) == j.log_probs.at(0, u, c));
  }
  SUBCASE("peaked lattice follows the dominant path") {
    // Path: token 1 at t=1, token 2 at t=3, over T=4.
    const std::vector<int> y = {1, 2};
    const std::vector<std::size_t> emit = {1, 3};
    Array logits({4, 3, 3}, 0.0);
    for (std::size_t t = 0; t < 4; ++t) {
      for (std::size_t u = 0; u < 3; ++u) {
        const bool emit_here = u < 2 && emit[u] == t;
        const int best = emit_here ? y[u] : kBlank;
        logits.at(t, u, static_cast<std::size_t>(best)) = 12.0;
      }
    }
    JointTensor j{log_softmax(logits), false};
    for (AlignmentPath path : {AlignmentPath::kOccupancy, AlignmentPath::kViterbi}) {
      CHECK(viterbi_time_indices(j, y, kBlank).t_u == emit);
      SamplingMatrix m = rnnt_sampling_matrix(j, y, kBlank, path);
      CHECK(m.rows() == 2);
      for (std::size_t u = 0; u < 2; ++u)
        for (std::size_t c = 0; c < 3; ++c) CHECK(m.log_probs.at(u, c) == j.log_probs.at(emit[u], u, c));
    }
  }
  SUBCASE("rows are normalized") {
    JointTensor j = RandomJoint(5, 3, 6, rng);
    SamplingMatrix m = rnnt_sampling_matrix(j, {3, 3, 5}, kBlank, AlignmentPath::kOccupancy);
    for (std::size_t u = 0; u < 3; ++u) {
      double s = 0.0;
      for (double v : m.log_probs.row(u)) s += std::exp(v);
      CHECK(std::abs(s - 1.0) < 1e-10);
    }
  }
}

TEST_CASE("viterbi indices are monotone and maximize path score") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    JointTensor j = RandomJoint(4, 3, 4, rng);
    auto y = oracle::random_labels(3, 4, kBlank, rng);
    auto paths = oracle::enumerate_rnnt_paths(j, y, kBlank);
    const oracle::RnntPath* best = &paths[0];
    for (const auto& p : paths) if (p.log_prob > best->log_prob) best = &p;
    CHECK(viterbi_time_indices(j, y, kBlank).t_u == best->emit_frame);
  }
}

TEST_CASE("ctc loss") {
  std::mt19937_64 rng(13);
  SUBCASE("single paths") {
    Array lp = oracle::random_log_softmax({1, 3}, rng);
    CHECK(ctc_loss(lp, {2}, kBlank).loss == doctest::Approx(-lp.at(0, 2)).epsilon(1e-14));
    Array lp2 = oracle::random_log_softmax({2, 3}, rng);
    CHECK(ctc_loss(lp2, {}, kBlank).loss ==
          doctest::Approx(-(lp2.at(0, 0) + lp2.at(1, 0))).epsilon(1e-14));
  }
  SUBCASE("enumeration oracle") {
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t t = 1 + rng() % 4, k = 2 + rng() % 3;
      std::size_t u = rng() % 3;
      auto y = oracle::random_labels(u, static_cast<int>(k), kBlank, rng);
      Array lp = oracle::random_log_softmax({t, k}, rng);
      if (ctc_min_frames(y) > t) {
        CHECK_THROWS_AS(ctc_loss(lp, y, kBlank), CtcInfeasible);
        continue;
      }
      CHECK(std::abs(ctc_loss(lp, y, kBlank).loss - oracle::ctc_loss(lp, y, kBlank)) < 1e-10);
    }
    Array lp = oracle::random_log_softmax({4, 3}, rng);
    const std::vector<int> y = {1, 2};
    CHECK(std::abs(ctc_loss(lp, y, kBlank).loss - oracle::ctc_loss(lp, y, kBlank)) < 1e-10);
  }
  SUBCASE("gradient matches finite differences") {
    for (int trial = 0; trial < 10; ++trial) {
      Array logits = testing::random_array({4, 3}, rng);
      const std::vector<int> y = {1, 1};
      CtcResult r = ctc_loss(log_softmax(logits), y, kBlank);
      auto f = [&](const Array& x) { return ctc_loss(log_softmax(x), y, kBlank).loss; };
      auto coords = testing::all_coords(logits);
      CHECK(testing::relative_error(testing::gather(r.grad, coords),
                                    testing::finite_difference(f, logits, coords)) < 1e-6);
    }
  }
  SUBCASE("repeats need separating blanks") {
    CHECK(ctc_min_frames({1, 1, 2}) == 4);
    Array lp = oracle::random_log_softmax({3, 3}, rng);
    CHECK_THROWS_AS(ctc_loss(lp, {1, 1, 2}, kBlank), CtcInfeasible);
  }
}
