#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "tss/checkpoint.hpp"
#include "tss/errors.hpp"
#include "tss/lattice.hpp"
#include "tss/training.hpp"

using namespace tss;
namespace fs = std::filesystem;

namespace {

ModelConfig Tiny() {
  ModelConfig c;
  c.feat_dim = 4;
  c.downsample = 2;
  c.conv_kernel = 3;
  c.conv_channels = 5;
  c.enc_hidden = 4;
  c.enc_layers = 1;
  c.pred_embed = 3;
  c.pred_hidden = 4;
  c.pred_dim = 3;
  c.joint_hidden = 5;
  c.elm_embed = 3;
  c.elm_hidden = 4;
  return c;
}

ModelConfig LmSized() {
  ModelConfig c = Tiny();
  c.elm_embed = 16;
  c.elm_hidden = 32;
  return c;
}

Utterance MakeUtt(const std::string& id, std::size_t frames, TokenSequence y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Utterance{id, AcousticSequence{testing::random_array({frames, 4}, rng), {}}, std::move(y)};
}

std::vector<BatchItem> Items(const std::vector<Utterance>& utts) {
  std::vector<BatchItem> items;
  for (std::size_t i = 0; i < utts.size(); ++i) items.push_back({&utts[i], i});
  return items;
}

TrainConfig Weights(double alpha, double beta) {
  TrainConfig c;
  c.alpha = alpha;
  c.beta = beta;
  return c;
}

// -log p_RNNT(y | x) with the prediction network fed `input`, by plain forwards.
double DirectRnnt(const RnntModel& m, const Utterance& u, const TokenSequence& input) {
  const JointTensor j = joint(encode(u.features, m.encoder), predict_states(input, m.prediction),
                              m.joint, 1.0);
  return -rnnt_forward_backward(j, u.reference, m.vocab.blank_id()).log_likelihood;
}

double DirectCtc(const RnntModel& m, const Utterance& u) {
  Tape t(false);
  const Array logits = t.value(linear(t, t.constant(encode(u.features, m.encoder)), m.ctc));
  return ctc_loss(log_softmax(logits), u.reference, m.vocab.blank_id()).loss;
}

double DirectIlm(const RnntModel& m, const Utterance& u) {
  const Array rows = ilm_forward(u.reference, m.prediction, m.joint);
  double nll = 0.0;
  for (std::size_t i = 0; i < u.reference.size(); ++i) {
    nll -= rows.at(i, static_cast<std::size_t>(u.reference[i]));
  }
  return nll;
}

std::vector<double> FlatGrads(const RnntModel& m) {
  std::vector<double> g;
  for (const Parameter* p : m.parameters()) g.insert(g.end(), p->grad.data().begin(), p->grad.data().end());
  return g;
}

Dataset SmallDataset(std::size_t n, std::uint64_t seed) {
  SynthSpec s;
  s.vocab_size = 5;
  s.feat_dim = 4;
  s.utterances = n;
  s.min_tokens = 2;
  s.max_tokens = 4;
  s.seed = seed;
  return generate(s).data;
}

fs::path TempDir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("tss_training_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.warmup_steps = 400;
  c.peak_lr = 1e-3;
  CHECK(lr_schedule(400, c) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(lr_schedule(100, c) == doctest::Approx(2.5e-4).epsilon(1e-15));
  CHECK(lr_schedule(1600, c) == doctest::Approx(5e-4).epsilon(1e-15));
  CHECK(lr_schedule(399, c) < lr_schedule(400, c));
  CHECK(lr_schedule(401, c) < lr_schedule(400, c));
  CHECK(std::abs(lr_schedule(401, c) - lr_schedule(399, c)) < 1e-5);
  CHECK_THROWS_AS(lr_schedule(0, c), ContractError);
}

TEST_CASE("train config defaults and validation") {
  const TrainConfig c;
  CHECK(c.alpha == 0.5);
  CHECK(c.beta == 0.1);
  CHECK(c.warmup_steps == 500);
  CHECK(c.optimizer.grad_clip == 5.0);
  CHECK_FALSE(c.feature_mask);
  CHECK(c.policy.level == SsLevel::kOff);
  CHECK(c.policy.start_epoch == 0);
  TrainConfig bad;
  bad.alpha = -0.1;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("train.alpha"), ParameterError);
  bad = TrainConfig{};
  bad.warmup_steps = 0;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("train.warmup_steps"), ParameterError);
  bad = TrainConfig{};
  bad.policy = SamplingPolicy::make(SsLevel::kUtterance, SamplingSource::kIlm, 0.5, 1);
  bad.policy.lambda = 1.5;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("ss.lambda"), ParameterError);
}

TEST_CASE("loss terms match direct computation") {
  const RnntModel m = RnntModel::create(Tiny(), Vocabulary::synthetic(4), 3);
  const std::vector<Utterance> utts = {MakeUtt("u0", 9, {2, 3, 4}, 1), MakeUtt("u1", 7, {5, 2}, 2)};
  const auto items = Items(utts);
  double rnnt = 0.0, ctc = 0.0, ilm = 0.0;
  for (const Utterance& u : utts) {
    rnnt += DirectRnnt(m, u, u.reference) / 2.0;
    ctc += DirectCtc(m, u) / 2.0;
    ilm += DirectIlm(m, u) / 2.0;
  }
  CHECK(std::abs(combined_loss(items, m, nullptr, Weights(0, 0), 0, false).total - rnnt) < 1e-12);
  CHECK(std::abs(combined_loss(items, m, nullptr, Weights(0.5, 0), 0, false).total -
                 (rnnt + 0.5 * ctc)) < 1e-12);
  const LossParts all = combined_loss(items, m, nullptr, Weights(0.5, 0.1), 0, false);
  CHECK(std::abs(all.total - (rnnt + 0.5 * ctc + 0.1 * ilm)) < 1e-12);
  CHECK(std::abs(all.rnnt - rnnt) < 1e-12);
  CHECK(std::abs(all.ctc - ctc) < 1e-12);
  CHECK(std::abs(all.ilm - ilm) < 1e-12);
  CHECK(all.tokens == 5);
  CHECK(all.replaced == 0);
  CHECK(all.acc_values.empty());
}

TEST_CASE("combined loss gradient matches finite differences") {
  RnntModel m = RnntModel::create(Tiny(), Vocabulary::synthetic(3), 11);
  const std::vector<Utterance> utts = {MakeUtt("u0", 8, {2, 3, 4}, 5), MakeUtt("u1", 6, {4, 2}, 6)};
  const auto items = Items(utts);
  const TrainConfig cfg = Weights(0.5, 0.1);
  for (Parameter* p : m.parameters()) p->zero_grad();
  combined_loss(items, m, nullptr, cfg, 0, true);
  for (Parameter* p : m.parameters()) {
    const Array analytic = p->grad;
    const Array saved = p->value;
    const auto coords = testing::all_coords(saved);
    const auto numeric = testing::finite_difference(
        [&](const Array& v) {
          p->value = v;
          return combined_loss(items, m, nullptr, cfg, 0, false).total;
        },
        saved, coords);
    p->value = saved;
    const double err = testing::relative_error(testing::gather(analytic, coords), numeric);
    CHECK_MESSAGE(err < 1e-6, p->name << " relative error " << err);
  }
}

TEST_CASE("sampling changes only the prediction input") {
  const RnntModel m = RnntModel::create(Tiny(), Vocabulary::synthetic(6), 21);
  std::vector<Utterance> utts;
  for (int i = 0; i < 6; ++i) {
    utts.push_back(MakeUtt("u" + std::to_string(i), 10, {2 + i % 6, 3 + (i + 2) % 5, 2 + (i + 4) % 6}, 40 + i));
  }
  const auto items = Items(utts);
  TrainConfig off = Weights(0.5, 0.1);
  TrainConfig on = off;
  on.policy = SamplingPolicy::make(SsLevel::kToken, SamplingSource::kIlm, 1.0, 9);
  const auto plans_off = plan_batch(items, m, nullptr, off, 0);
  const auto plans_on = plan_batch(items, m, nullptr, on, 0);
  bool any_changed = false;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    CHECK(plans_off[i].targets == utts[i].reference);
    CHECK(plans_on[i].targets == utts[i].reference);
    CHECK(plans_off[i].prediction_input == utts[i].reference);
    CHECK(plans_on[i].acc.has_value());
    any_changed |= plans_on[i].prediction_input != utts[i].reference;
  }
  REQUIRE(any_changed);

  // The transducer term scores the reference while the prediction net reads Y'.
  double expected = 0.0;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    expected += DirectRnnt(m, utts[i], plans_on[i].prediction_input) / 6.0;
  }
  CHECK(std::abs(combined_loss(items, m, nullptr, on, 0, false).rnnt - expected) < 1e-12);

  // Before the start epoch the policy is inert.
  on.policy.start_epoch = 2;
  for (const auto& p : plan_batch(items, m, nullptr, on, 1)) CHECK(p.replaced.empty());
}

TEST_CASE("sampling sources contribute no gradient") {
  RnntModel m = RnntModel::create(Tiny(), Vocabulary::synthetic(4), 31);
  const std::vector<Utterance> utts = {MakeUtt("u0", 9, {2, 3, 4, 5}, 7), MakeUtt("u1", 8, {3, 2, 5}, 8)};
  const auto items = Items(utts);
  TrainConfig cfg = Weights(0.5, 0.1);
  cfg.policy = SamplingPolicy::make(SsLevel::kToken, SamplingSource::kIlm, 0.7, 3);
  const auto plans = plan_batch(items, m, nullptr, cfg, 0);
  for (Parameter* p : m.parameters()) p->zero_grad();
  combined_loss(items, m, nullptr, cfg, 0, true);
  const auto with_policy = FlatGrads(m);

  // Same graph built by hand with Y' held constant.
  for (Parameter* p : m.parameters()) p->zero_grad();
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const TokenSequence& y = utts[i].reference;
    Tape t;
    const Var h_enc = encode(t, utts[i].features, m.encoder);
    const Var h_pred = predict_states(t, plans[i].prediction_input, m.prediction);
    Var total = transducer_loss(t, joint_logits(t, h_enc, h_pred, m.joint), y, 0);
    total = add(t, total, scale(t, ctc_loss(t, linear(t, h_enc, m.ctc), y, 0), 0.5));
    const Var lp = log_softmax(t, ilm_logits(t, slice_rows(t, h_pred, 0, y.size()), m.joint));
    total = add(t, total, scale(t, scale(t, sum(t, pick(t, lp, y)), -1.0), 0.1));
    t.backward(scale(t, total, 0.5));
  }
  const auto by_hand = FlatGrads(m);
  REQUIRE(with_policy.size() == by_hand.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < by_hand.size(); ++i) worst = std::max(worst, std::abs(with_policy[i] - by_hand[i]));
  CHECK(worst < 1e-12);
}

TEST_CASE("ILM sampling reads the live transducer parameters") {
  RnntModel m = RnntModel::create(Tiny(), Vocabulary::synthetic(4), 41);
  const std::vector<Utterance> utts = {MakeUtt("u0", 9, {2, 3, 4}, 9)};
  const auto items = Items(utts);
  TrainConfig cfg = Weights(0.5, 0.1);
  cfg.peak_lr = 0.05;
  cfg.warmup_steps = 1;
  const Array before = ilm_forward(utts[0].reference, m.prediction, m.joint);
  for (Parameter* p : m.parameters()) p->zero_grad();
  combined_loss(items, m, nullptr, cfg, 0, true);
  AdamState adam;
  adam_update(m.parameters(), adam, lr_schedule(1, cfg), cfg.optimizer);
  const Array after = ilm_forward(utts[0].reference, m.prediction, m.joint);
  CHECK_FALSE(before == after);
  // No ILM-only parameters exist: every ILM input is an RNNT parameter.
  std::size_t shared = 0;
  for (const Parameter* p : m.parameters()) {
    if (p->name.rfind("prediction.", 0) == 0 || p->name.rfind("joint.", 0) == 0) ++shared;
  }
  CHECK(shared > 0);
  cfg.policy = SamplingPolicy::make(SsLevel::kToken, SamplingSource::kIlm, 1.0, 1);
  const auto plan = plan_batch(items, m, nullptr, cfg, 0);
  SamplingMatrix rows{after, SamplingSource::kIlm};
  const auto ex = excluded_classes(m.vocab);
  CHECK(plan[0].prediction_input == argmax_tokens(rows, ex));
}

TEST_CASE("CTC-infeasible utterances skip the CTC term only") {
  const RnntModel m = RnntModel::create(Tiny(), Vocabulary::synthetic(4), 51);
  const std::vector<Utterance> utts = {MakeUtt("short", 2, {2, 3, 4}, 1), MakeUtt("ok", 9, {2, 3}, 2)};
  const auto items = Items(utts);
  const LossParts parts = combined_loss(items, m, nullptr, Weights(0.5, 0.0), 0, false);
  REQUIRE(parts.ctc_skipped.size() == 1);
  CHECK(parts.ctc_skipped[0] == "short");
  const double expected = (DirectRnnt(m, utts[0], utts[0].reference) +
                           DirectRnnt(m, utts[1], utts[1].reference) + 0.5 * DirectCtc(m, utts[1])) /
                          2.0;
  CHECK(std::abs(parts.total - expected) < 1e-12);
}

TEST_CASE("non-finite loss names the utterance") {
  RnntModel m = RnntModel::create(Tiny(), Vocabulary::synthetic(4), 61);
  const std::vector<Utterance> utts = {MakeUtt("fine", 8, {2, 3}, 1), MakeUtt("broken", 8, {2, 3}, 2)};
  auto items = Items(utts);
  m.joint.b_out.value[2] = NAN;
  try {
    combined_loss(items, m, nullptr, Weights(0.5, 0.1), 0, true);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.utterance_id() == "fine");
    CHECK(std::string(e.what()).find("fine") != std::string::npos);
  }
}

TEST_CASE("adam update") {
  Parameter p{"w", Array::vector({1.0, -2.0})};
  p.grad = Array::vector({3.0, -4.0});  // norm 5
  AdamConfig c;
  c.grad_clip = 2.5;
  AdamState s;
  const std::vector<Parameter*> ps{&p};
  CHECK(adam_update(ps, s, 0.1, c) == doctest::Approx(5.0).epsilon(1e-15));
  // First bias-corrected step moves each weight by lr * g / (|g| + eps).
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-9));
  CHECK(p.value[1] == doctest::Approx(-2.0 + 0.1).epsilon(1e-9));
  CHECK(p.grad[0] == 0.0);
  CHECK(s.step == 1);
  // Clipping scales the moments: m = (1 - beta1) * g * 0.5.
  CHECK(s.m[0][0] == doctest::Approx(0.1 * 1.5).epsilon(1e-12));
}

TEST_CASE("batches cover the data and are length-bucketed") {
  const Dataset d = SmallDataset(103, 2);
  const auto a = make_batches(d.train, 8, 5, 0);
  const auto b = make_batches(d.train, 8, 5, 0);
  const auto c = make_batches(d.train, 8, 5, 1);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  std::vector<int> seen(d.train.size(), 0);
  for (const auto& batch : a) {
    CHECK(batch.size() <= 8);
    for (std::size_t i : batch) seen[i]++;
  }
  for (int s : seen) CHECK(s == 1);
  // Sorted order means batch frame ranges do not interleave.
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (const auto& batch : a) {
    std::size_t lo = SIZE_MAX, hi = 0;
    for (std::size_t i : batch) {
      lo = std::min(lo, d.train[i].features.num_frames());
      hi = std::max(hi, d.train[i].features.num_frames());
    }
    ranges.emplace_back(lo, hi);
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) CHECK(ranges[i - 1].second <= ranges[i].first);
}

TEST_CASE("single-utterance overfit: loss strictly decreases") {
  Dataset d = SmallDataset(30, 4);
  d.train.resize(1);
  d.dev.clear();
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.epochs = 50;
  cfg.warmup_steps = 10;
  cfg.peak_lr = 3e-3;
  TrainOptions o;
  o.evaluate_dev = false;
  o.max_steps = 50;
  const TrainResult r = train(d, Tiny(), cfg, nullptr, o);
  REQUIRE(r.step_losses.size() == 50);
  for (std::size_t i = 1; i < 10; ++i) CHECK(r.step_losses[i] < r.step_losses[i - 1]);
  CHECK(r.step_losses.back() < r.step_losses.front());
}

TEST_CASE("training is deterministic and resumes bit-identically") {
  const Dataset d = SmallDataset(60, 8);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 3;
  cfg.warmup_steps = 20;
  cfg.feature_mask = true;
  cfg.policy = SamplingPolicy::make(SsLevel::kUtterance, SamplingSource::kIlm, 0.5, 13);
  TrainOptions o;
  const fs::path a = TempDir("a"), b = TempDir("b"), c = TempDir("c");
  o.out_dir = a;
  const TrainResult ra = train(d, Tiny(), cfg, nullptr, o);
  o.out_dir = b;
  const TrainResult rb = train(d, Tiny(), cfg, nullptr, o);
  CHECK(sha256_file(a / "last.ckpt") == sha256_file(b / "last.ckpt"));
  CHECK(sha256_file(a / "best.ckpt") == sha256_file(b / "best.ckpt"));
  CHECK(ra.step_losses == rb.step_losses);

  TrainConfig two = cfg;
  two.epochs = 2;
  o.out_dir = c;
  train(d, Tiny(), two, nullptr, o);
  o.resume = c / "last.ckpt";
  const TrainResult rc = train(d, Tiny(), cfg, nullptr, o);
  REQUIRE(rc.state.step == ra.state.step);
  const std::size_t tail = rc.step_losses.size();
  REQUIRE(tail > 0);
  for (std::size_t i = 0; i < tail; ++i) {
    CHECK(rc.step_losses[i] == ra.step_losses[ra.step_losses.size() - tail + i]);
  }
  const auto pa = ra.model.parameters();
  const auto pc = rc.model.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pc[i]->value);
  CHECK(rc.state.best_dev == ra.state.best_dev);

  // The saved transducer keeps the CTC projection but flags it.
  const Checkpoint best = read_checkpoint(a / "best.ckpt");
  CHECK(best.find("ctc.weight")->flags == kFlagDiscardable);
  CHECK(best.find("joint.w_out")->flags == 0);
  for (const fs::path& p : {a, b, c}) fs::remove_all(p);
}

TEST_CASE("external LM memorises a repeated transcript") {
  const Vocabulary v = Vocabulary::synthetic(5);
  const std::vector<TokenSequence> train(20, TokenSequence{2, 4, 3, 6});
  ElmTrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 4;
  cfg.warmup_steps = 20;
  cfg.peak_lr = 1e-2;
  const ElmTrainResult r = pretrain_elm(train, train, LmSized(), v, cfg);
  CHECK(r.dev_ce.back() < 0.05);
}

TEST_CASE("external LM on uniform random transcripts approaches log K'") {
  const Vocabulary v = Vocabulary::synthetic(6);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> tok(2, 7);
  auto make = [&](std::size_t n) {
    std::vector<TokenSequence> out(n, TokenSequence(5));
    for (auto& y : out) for (int& t : y) t = tok(rng);
    return out;
  };
  const auto train = make(600), dev = make(200);
  ElmTrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 16;
  cfg.warmup_steps = 30;
  const ElmTrainResult r = pretrain_elm(train, dev, LmSized(), v, cfg);
  // Five uniform tokens then a deterministic end: per-token entropy 5/6 log 6.
  const double floor = 5.0 / 6.0 * std::log(6.0);
  MESSAGE("dev ce " << r.dev_ce.back() << " vs entropy floor " << floor);
  CHECK(r.dev_ce.back() > floor - 0.02);
  CHECK(r.dev_ce.back() < std::log(6.0) + 0.05);
}

TEST_CASE("checkpoint round trip") {
  const RnntModel m = RnntModel::create(Tiny(), Vocabulary::synthetic(4), 77);
  const fs::path dir = TempDir("ckpt");
  fs::create_directories(dir);
  write_checkpoint(pack_model(m), dir / "m.ckpt");
  const RnntModel back = unpack_rnnt(read_checkpoint(dir / "m.ckpt"));
  CHECK(back.config == m.config);
  CHECK(back.vocab == m.vocab);
  const auto pa = m.parameters(), pb = back.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  const ElmModel lm = ElmModel::create(Tiny(), m.vocab, 3);
  write_checkpoint(pack_model(lm), dir / "lm.ckpt");
  CHECK_THROWS_AS(unpack_rnnt(read_checkpoint(dir / "lm.ckpt")), CheckpointError);
  CHECK(unpack_elm(read_checkpoint(dir / "lm.ckpt")).params.embedding.value == lm.params.embedding.value);
  // Known digest of a known byte string.
  std::ofstream(dir / "abc", std::ios::binary) << "abc";
  CHECK(sha256_file(dir / "abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  fs::remove_all(dir);
}
