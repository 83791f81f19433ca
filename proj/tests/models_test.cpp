#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "tss/errors.hpp"
#include "tss/models.hpp"

using namespace tss;

namespace {

ModelConfig Small() {
  ModelConfig c;
  c.feat_dim = 4;
  c.conv_channels = 6;
  c.enc_hidden = 5;
  c.pred_embed = 4;
  c.pred_hidden = 5;
  c.pred_dim = 3;
  c.joint_hidden = 6;
  c.elm_embed = 4;
  c.elm_hidden = 5;
  return c;
}

AcousticSequence RandomFrames(std::size_t n, std::size_t f, std::mt19937_64& rng) {
  return AcousticSequence{testing::random_array({n, f}, rng), {}};
}

void ZeroAll(std::vector<Parameter*> params) {
  for (Parameter* p : params) p->value.fill(0.0);
}

}  // namespace

TEST_CASE("vocabulary") {
  Vocabulary v = Vocabulary::synthetic(20);
  CHECK(v.size() == 22);
  CHECK(v.blank_id() == 0);
  CHECK(v.encode("a c t") == TokenSequence{2, 4, 21});
  CHECK(v.decode({2, 4}) == "a c");
  CHECK_THROWS_AS(v.validate({2, 0}), ContractError);
  CHECK_THROWS_AS(Vocabulary({"x", "x"}, 0, 1, 1), ContractError);
  CHECK_THROWS_AS(v.id("zz"), ContractError);
}

TEST_CASE("encoder shapes and determinism") {
  std::mt19937_64 rng(1);
  RnntModel m = RnntModel::create(Small(), Vocabulary::synthetic(3), 7);
  AcousticSequence x = RandomFrames(8, 4, rng);
  Array h = encode(x, m.encoder);
  CHECK(h.shape() == Shape{4, 5});
  CHECK(encode(x, m.encoder) == h);
  CHECK(encode(RandomFrames(7, 4, rng), m.encoder).dim(0) == 4);
  CHECK_THROWS_AS(encode(AcousticSequence{Array({0, 4}), {}}, m.encoder), ContractError);
  CHECK_THROWS_AS(encode(RandomFrames(1, 4, rng), m.encoder), ContractError);

  ZeroAll(m.parameters());
  Array z = encode(AcousticSequence{Array({8, 4}), {}}, m.encoder);
  CHECK(z == Array({4, 5}));
}

TEST_CASE("prediction network causality") {
  RnntModel m = RnntModel::create(Small(), Vocabulary::synthetic(4), 3);
  CHECK(predict_states({}, m.prediction).shape() == Shape{1, 3});
  const TokenSequence y = {2, 3, 5, 4};
  Array full = predict_states(y, m.prediction);
  CHECK(full.shape() == Shape{5, 3});
  for (std::size_t u = 0; u <= y.size(); ++u) {
    Array prefix = predict_states(TokenSequence(y.begin(), y.begin() + u), m.prediction);
    for (std::size_t i = 0; i < prefix.size(); ++i) CHECK(prefix[i] == full[i]);
  }
  TokenSequence y2 = y;
  y2.back() = 2;
  Array other = predict_states(y2, m.prediction);
  for (std::size_t i = 0; i < 4 * 3; ++i) CHECK(other[i] == full[i]);
  CHECK_THROWS_AS(predict_states({2, 0}, m.prediction), ContractError);

  // Incremental stepping reproduces the batched rows bit for bit.
  RecurrentState s = prediction_start(m.prediction);
  for (std::size_t u = 0; u <= y.size(); ++u) {
    for (std::size_t d = 0; d < 3; ++d) CHECK(s.output[d] == full.at(u, d));
    if (u < y.size()) s = prediction_step(s, y[u], m.prediction);
  }
}

TEST_CASE("joint tensor") {
  std::mt19937_64 rng(2);
  RnntModel m = RnntModel::create(Small(), Vocabulary::synthetic(3), 5);
  Array h_enc = testing::random_array({3, 5}, rng);
  Array h_pred = predict_states({2, 4}, m.prediction);
  JointTensor j = joint(h_enc, h_pred, m.joint, 1.0);
  CHECK(j.log_probs.shape() == Shape{3, 3, 5});
  for (std::size_t r = 0; r < 9; ++r) {
    double s = 0.0;
    for (double v : j.log_probs.row(r)) {
      CHECK(std::isfinite(v));
      s += std::exp(v);
    }
    CHECK(std::abs(s - 1.0) < 1e-10);
  }
  CHECK_THROWS_AS(joint(h_enc, h_pred, m.joint, 0.0), ParameterError);

  // Node-wise evaluation used by search agrees exactly.
  Array e = joint_encoder_projection(h_enc, m.joint);
  for (std::size_t u = 0; u < 3; ++u) {
    Array row({1, 3});
    for (std::size_t d = 0; d < 3; ++d) row[d] = h_pred.at(u, d);
    Array q = joint_prediction_projection(row, m.joint);
    for (std::size_t t = 0; t < 3; ++t) {
      auto lp = joint_node_log_probs(e.row(t), q.row(0), m.joint, 1.0);
      for (std::size_t c = 0; c < 5; ++c) CHECK(lp[c] == j.log_probs.at(t, u, c));
    }
  }

  ZeroAll(m.parameters());
  JointTensor u = joint(h_enc, h_pred, m.joint, 1.6);
  for (double v : u.log_probs.data()) CHECK(v == doctest::Approx(-std::log(5.0)).epsilon(1e-14));
}

TEST_CASE("joint column u ignores later tokens") {
  std::mt19937_64 rng(3);
  RnntModel m = RnntModel::create(Small(), Vocabulary::synthetic(4), 9);
  AcousticSequence x = RandomFrames(6, 4, rng);
  Array h = encode(x, m.encoder);
  JointTensor a = joint(h, predict_states({2, 3, 4}, m.prediction), m.joint, 1.0);
  JointTensor b = joint(h, predict_states({2, 5, 5}, m.prediction), m.joint, 1.0);
  for (std::size_t t = 0; t < a.frames(); ++t)
    for (std::size_t c = 0; c < a.classes(); ++c) CHECK(a.log_probs.at(t, 1, c) == b.log_probs.at(t, 1, c));
}

TEST_CASE("ilm rows") {
  RnntModel m = RnntModel::create(Small(), Vocabulary::synthetic(4), 11);
  const TokenSequence y = {3, 2, 5};
  Array rows = ilm_forward(y, m.prediction, m.joint);
  CHECK(rows.shape() == Shape{3, 6});
  // Direct recomputation through the joint with a zero acoustic row.
  JointTensor j = joint(Array({1, 5}), predict_states(y, m.prediction), m.joint, 1.0);
  for (std::size_t u = 0; u < 3; ++u)
    for (std::size_t c = 0; c < 6; ++c) CHECK(rows.at(u, c) == j.log_probs.at(0, u, c));

  ZeroAll(m.parameters());
  const Array zeroed = ilm_forward(y, m.prediction, m.joint);
  for (double v : zeroed.data())
    CHECK(v == doctest::Approx(-std::log(6.0)).epsilon(1e-14));
}

TEST_CASE("elm rows") {
  ElmModel e = ElmModel::create(Small(), Vocabulary::synthetic(4), 13);
  Array one = elm_forward({3}, e.params);
  CHECK(one.shape() == Shape{1, 6});
  Array rows = elm_forward({3, 2, 5}, e.params);
  CHECK(rows.shape() == Shape{3, 6});
  for (std::size_t c = 0; c < 6; ++c) CHECK(rows.at(0, c) == one.at(0, c));
  RecurrentState s = elm_start(e.params);
  for (std::size_t c = 0; c < 6; ++c) CHECK(s.output[c] == rows.at(0, c));
  s = elm_step(s, 3, e.params);
  for (std::size_t c = 0; c < 6; ++c) CHECK(s.output[c] == rows.at(1, c));

  ZeroAll(e.parameters());
  const Array zeroed = elm_forward({3, 2}, e.params);
  for (double v : zeroed.data())
    CHECK(v == doctest::Approx(-std::log(6.0)).epsilon(1e-14));
}

TEST_CASE("joint logits gradient through the fused op") {
  std::mt19937_64 rng(4);
  RnntModel m = RnntModel::create(Small(), Vocabulary::synthetic(3), 17);
  Array h_enc = testing::random_array({3, 5}, rng);
  Array h_pred = testing::random_array({2, 3}, rng);
  Array probe = testing::random_array({3, 2, 5}, rng);
  auto f = [&](const Array& enc) {
    Tape t(false);
    Var l = joint_logits(t, t.constant(enc), t.constant(h_pred), m.joint);
    return t.value(sum(t, mul(t, l, t.constant(probe)))).item();
  };
  Tape t;
  Parameter enc("enc", h_enc);
  Var l = joint_logits(t, t.param(enc), t.constant(h_pred), m.joint);
  t.backward(sum(t, mul(t, l, t.constant(probe))));
  auto coords = testing::all_coords(h_enc);
  CHECK(testing::relative_error(testing::gather(enc.grad, coords),
                                testing::finite_difference(f, h_enc, coords)) < 1e-6);

  // Output weights.
  Parameter& w = m.joint.w_out;
  Array w0 = w.value;
  auto g = [&](const Array& wv) {
    w.value = wv;
    return f(h_enc);
  };
  auto wc = testing::all_coords(w0);
  auto fd = testing::finite_difference(g, w0, wc);
  w.value = w0;
  CHECK(testing::relative_error(testing::gather(w.grad, wc), fd) < 1e-6);
}
