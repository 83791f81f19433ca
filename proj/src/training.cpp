#include "tss/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "tss/checkpoint.hpp"
#include "tss/errors.hpp"
#include "tss/lattice.hpp"
#include "tss/numgrad.hpp"

namespace tss {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void CheckAdam(const AdamConfig& a, const std::string& section) {
  if (!(a.beta1 >= 0.0 && a.beta1 < 1.0)) throw ParameterError(section + ".adam_beta1 must be in [0, 1)");
  if (!(a.beta2 >= 0.0 && a.beta2 < 1.0)) throw ParameterError(section + ".adam_beta2 must be in [0, 1)");
  if (!(a.eps > 0.0)) throw ParameterError(section + ".adam_eps must be positive");
  if (!(a.grad_clip >= 0.0)) throw ParameterError(section + ".grad_clip must be non-negative");
}

json Nullable(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ParameterError("train.alpha must be >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ParameterError("train.beta must be >= 0");
  if (warmup_steps < 1) throw ParameterError("train.warmup_steps must be >= 1");
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw ParameterError("train.peak_lr must be positive");
  if (batch_size < 1) throw ParameterError("train.batch_size must be >= 1");
  CheckAdam(optimizer, "train");
  policy.validate();
}

void ElmTrainConfig::validate() const {
  if (warmup_steps < 1) throw ParameterError("elm.warmup_steps must be >= 1");
  if (!(peak_lr > 0.0)) throw ParameterError("elm.peak_lr must be positive");
  if (batch_size < 1) throw ParameterError("elm.batch_size must be >= 1");
  CheckAdam(optimizer, "elm");
}

double lr_schedule(std::size_t step, std::size_t warmup, double peak_lr) {
  if (step < 1) throw ContractError("lr_schedule: step must be >= 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return peak_lr * std::min(s / w, std::sqrt(w / s));
}

double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  return lr_schedule(step, cfg.warmup_steps, cfg.peak_lr);
}

json train_config_to_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},
          {"beta", c.beta},
          {"warmup_steps", c.warmup_steps},
          {"peak_lr", c.peak_lr},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"grad_clip", c.optimizer.grad_clip},
          {"adam_beta1", c.optimizer.beta1},
          {"adam_beta2", c.optimizer.beta2},
          {"adam_eps", c.optimizer.eps},
          {"feature_mask", c.feature_mask},
          {"ss",
           {{"level", level_name(c.policy.level)},
            {"source", source_name(c.policy.source)},
            {"lambda", c.policy.lambda},
            {"seed", c.policy.rng_seed},
            {"acc_scope", scope_name(c.policy.acc_scope)},
            {"rnnt_path", path_name(c.policy.rnnt_path)},
            {"start_epoch", c.policy.start_epoch}}}};
}

// ---- per-utterance pieces -------------------------------------------------------

namespace {

// Copy of the features with up to two time blocks and two feature blocks
// zeroed, drawn from a stream keyed by (seed, epoch, utterance).
AcousticSequence MaskedFeatures(const Utterance& u, const TrainConfig& cfg, std::size_t epoch,
                                std::uint64_t index) {
  if (!cfg.feature_mask) return u.features;
  AcousticSequence x = u.features;
  std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(epoch), index, std::uint64_t{0x3a5c}};
  std::mt19937_64 rng(seq);
  const std::size_t frames = x.frames.dim(0), dims = x.frames.dim(1);
  auto block = [&](std::size_t extent, std::size_t max_width, auto zero) {
    const std::size_t cap = std::min(max_width, extent / 5);
    if (cap == 0) return;
    std::uniform_int_distribution<std::size_t> width(0, cap);
    for (int b = 0; b < 2; ++b) {
      const std::size_t w = width(rng);
      if (w == 0) continue;
      std::uniform_int_distribution<std::size_t> start(0, extent - w);
      const std::size_t s = start(rng);
      for (std::size_t i = s; i < s + w; ++i) zero(i);
    }
  };
  block(frames, 10, [&](std::size_t t) {
    for (std::size_t d = 0; d < dims; ++d) x.frames.at(t, d) = 0.0;
  });
  block(dims, 4, [&](std::size_t d) {
    for (std::size_t t = 0; t < frames; ++t) x.frames.at(t, d) = 0.0;
  });
  return x;
}

SamplingMatrix SourceRows(const BatchItem& item, const AcousticSequence& x,
                          const RnntModel& model, const ElmModel* elm, const SamplingPolicy& p) {
  const TokenSequence& y = item.utterance->reference;
  switch (p.source) {
    case SamplingSource::kIlm:
      return SamplingMatrix{ilm_forward(y, model.prediction, model.joint), SamplingSource::kIlm};
    case SamplingSource::kElm:
      if (elm == nullptr) {
        throw ContractError("ss.source=elm needs a pretrained external LM");
      }
      return SamplingMatrix{elm_forward(y, elm->params), SamplingSource::kElm};
    case SamplingSource::kRnnt: {
      const JointTensor j = joint(encode(x, model.encoder), predict_states(y, model.prediction),
                                  model.joint, 1.0);
      return rnnt_sampling_matrix(j, y, model.vocab.blank_id(), p.rnnt_path);
    }
  }
  throw ContractError("unknown sampling source");
}

}  // namespace

std::vector<UtterancePlan> plan_batch(std::span<const BatchItem> batch, const RnntModel& model,
                                      const ElmModel* elm, const TrainConfig& cfg,
                                      std::size_t epoch) {
  std::vector<UtterancePlan> plans(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    plans[i].targets = batch[i].utterance->reference;
    plans[i].prediction_input = batch[i].utterance->reference;
  }
  const SamplingPolicy& p = cfg.policy;
  if (p.level == SsLevel::kOff || epoch < static_cast<std::size_t>(std::max(p.start_epoch, 0))) {
    return plans;
  }
  const std::vector<int> excluded = excluded_classes(model.vocab);
  std::vector<SamplingMatrix> rows;
  rows.reserve(batch.size());
  for (const BatchItem& item : batch) {
    rows.push_back(SourceRows(item, MaskedFeatures(*item.utterance, cfg, epoch, item.index),
                              model, elm, p));
  }
  std::optional<double> batch_acc;
  if (p.level == SsLevel::kUtterance && p.acc_scope == AccScope::kMinibatch) {
    std::size_t hits = 0, total = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const TokenSequence& y = plans[i].targets;
      const TokenSequence best = argmax_tokens(rows[i], excluded);
      for (std::size_t u = 0; u < y.size(); ++u) hits += best[u] == y[u] ? 1 : 0;
      total += y.size();
    }
    batch_acc = total == 0 ? 1.0 : static_cast<double>(hits) / static_cast<double>(total);
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    SsRng rng = SsRng::for_utterance(p.rng_seed, epoch, batch[i].index);
    const TokenSequence& y = plans[i].targets;
    SampleOutcome out;
    if (p.level == SsLevel::kToken) {
      out = token_level_ss(y, rows[i], p.lambda, rng, excluded);
      plans[i].acc = proficiency(argmax_tokens(rows[i], excluded), y);
    } else {
      out = utterance_level_ss(y, rows[i], p.lambda, rng, excluded, batch_acc);
      plans[i].acc = out.acc_value;
    }
    plans[i].prediction_input = std::move(out.y_prime);
    plans[i].replaced = std::move(out.replaced_positions);
  }
  return plans;
}

LossParts combined_loss(std::span<const BatchItem> batch, const RnntModel& model,
                        const ElmModel* elm, const TrainConfig& cfg, std::size_t epoch,
                        bool accumulate) {
  LossParts parts;
  if (batch.empty()) return parts;
  const std::vector<UtterancePlan> plans = plan_batch(batch, model, elm, cfg, epoch);
  const int blank = model.vocab.blank_id();
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Utterance& utt = *batch[i].utterance;
    const UtterancePlan& plan = plans[i];
    const TokenSequence& y = plan.targets;
    Tape t(accumulate);
    const AcousticSequence x = MaskedFeatures(utt, cfg, epoch, batch[i].index);
    const Var h_enc = encode(t, x, model.encoder);
    const Var h_pred = predict_states(t, plan.prediction_input, model.prediction);
    const Var l_rnnt = transducer_loss(t, joint_logits(t, h_enc, h_pred, model.joint), y, blank);
    Var total = l_rnnt;
    double ctc_value = 0.0, ilm_value = 0.0;
    if (cfg.alpha > 0.0) {
      if (t.value(h_enc).dim(0) < ctc_min_frames(y)) {
        parts.ctc_skipped.push_back(utt.id);
      } else {
        const Var l_ctc = ctc_loss(t, linear(t, h_enc, model.ctc), y, blank);
        ctc_value = t.value(l_ctc).item();
        total = add(t, total, scale(t, l_ctc, cfg.alpha));
      }
    }
    if (cfg.beta > 0.0) {
      const Var rows = slice_rows(t, h_pred, 0, y.size());
      const Var lp = log_softmax(t, ilm_logits(t, rows, model.joint));
      const Var l_ilm = scale(t, sum(t, pick(t, lp, y)), -1.0);
      ilm_value = t.value(l_ilm).item();
      total = add(t, total, scale(t, l_ilm, cfg.beta));
    }
    const double value = t.value(total).item();
    if (!std::isfinite(value)) {
      throw NonFiniteLoss(utt.id, "non-finite training loss on utterance " + utt.id);
    }
    if (accumulate) t.backward(scale(t, total, inv));
    parts.total += value * inv;
    parts.rnnt += t.value(l_rnnt).item() * inv;
    parts.ctc += ctc_value * inv;
    parts.ilm += ilm_value * inv;
    parts.tokens += y.size();
    parts.replaced += plan.replaced.size();
    if (plan.acc) parts.acc_values.push_back(*plan.acc);
  }
  parts.utterances = batch.size();
  return parts;
}

double adam_update(const std::vector<Parameter*>& params, AdamState& state, double lr,
                   const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const Parameter* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam_update: state/parameter mismatch");
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->grad.data()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NonFiniteLoss("", "non-finite gradient norm");
  const double factor = cfg.grad_clip > 0.0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    double* w = p.value.ptr();
    double* g = p.grad.ptr();
    double* m = state.m[i].ptr();
    double* v = state.v[i].ptr();
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double gk = g[k] * factor;
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
      g[k] = 0.0;
    }
  }
  return norm;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<Utterance>& utts,
                                                   std::size_t batch_size, std::uint64_t seed,
                                                   std::size_t epoch) {
  if (batch_size == 0) throw ParameterError("train.batch_size must be >= 1");
  std::seed_seq seq{seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0xba7c}};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(utts.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return utts[a].features.num_frames() < utts[b].features.num_frames();
  });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(i + batch_size, order.size())));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

double greedy_error_rate(const RnntModel& model, std::span<const Utterance> utts,
                         const DecodeConfig& cfg) {
  std::vector<ScoredPair> scored;
  scored.reserve(utts.size());
  for (const Utterance& u : utts) {
    scored.push_back({greedy_decode(u.features, model, cfg), u.reference});
  }
  return error_rate(scored);
}

// ---- training loop --------------------------------------------------------------

namespace {

Checkpoint StateCheckpoint(const RnntModel& model, const TrainConfig& cfg, const TrainState& s) {
  Checkpoint c = pack_model(model);
  c.meta["train_config"] = train_config_to_json(cfg);
  c.meta["train_state"] = {{"step", s.step},
                           {"epoch", s.epoch},
                           {"best_dev", Nullable(s.best_dev)},
                           {"best_epoch", s.best_epoch},
                           {"adam_step", s.adam.step}};
  const auto params = model.parameters();
  for (std::size_t i = 0; i < s.adam.m.size(); ++i) {
    c.arrays.push_back({"adam.m/" + params[i]->name, kFlagOptimizerState, s.adam.m[i]});
    c.arrays.push_back({"adam.v/" + params[i]->name, kFlagOptimizerState, s.adam.v[i]});
  }
  return c;
}

TrainState RestoreState(const Checkpoint& c, const RnntModel& model) {
  TrainState s;
  const json& st = c.meta.at("train_state");
  s.step = st.at("step");
  s.epoch = st.at("epoch");
  s.best_dev = st.at("best_dev").is_null() ? std::numeric_limits<double>::infinity()
                                           : st.at("best_dev").get<double>();
  s.best_epoch = st.at("best_epoch");
  s.adam.step = st.at("adam_step");
  if (s.adam.step > 0) {
    for (const Parameter* p : model.parameters()) {
      const NamedArray* m = c.find("adam.m/" + p->name);
      const NamedArray* v = c.find("adam.v/" + p->name);
      if (m == nullptr || v == nullptr) throw CheckpointError("optimizer state missing for " + p->name);
      s.adam.m.push_back(m->value);
      s.adam.v.push_back(v->value);
    }
  }
  return s;
}

json Histogram(const std::vector<double>& values) {
  std::vector<std::size_t> bins(10, 0);
  for (double a : values) bins[std::min<std::size_t>(9, static_cast<std::size_t>(a * 10.0))]++;
  return bins;
}

}  // namespace

TrainResult train(const Dataset& data, const ModelConfig& model_config, const TrainConfig& cfg,
                  const ElmModel* elm, const TrainOptions& options) {
  cfg.validate();
  if (data.train.empty()) throw ContractError("train: training set is empty");
  if (data.train.front().features.frames.dim(1) != model_config.feat_dim) {
    throw ContractError("train: features have " +
                        std::to_string(data.train.front().features.frames.dim(1)) +
                        " dims but model.feat_dim is " + std::to_string(model_config.feat_dim));
  }
  if (cfg.policy.level != SsLevel::kOff && cfg.policy.source == SamplingSource::kElm) {
    if (elm == nullptr) throw ContractError("ss.source=elm needs a pretrained external LM");
    if (!(elm->vocab == data.vocab)) throw ContractError("external LM vocabulary differs from the data");
  }

  TrainResult r{RnntModel::create(model_config, data.vocab, cfg.seed), {}, {}, {}, {}};
  if (options.resume) {
    const Checkpoint c = read_checkpoint(*options.resume);
    r.model = unpack_rnnt(c);
    if (!(r.model.config == model_config)) throw ContractError("resume: model config differs");
    if (!(r.model.vocab == data.vocab)) throw ContractError("resume: vocabulary differs");
    r.state = RestoreState(c, r.model);
  }
  r.best_model = r.model;
  if (options.resume && options.out_dir && fs::exists(*options.out_dir / "best.ckpt")) {
    r.best_model = unpack_rnnt(read_checkpoint(*options.out_dir / "best.ckpt"));
  }

  std::ofstream log;
  if (options.out_dir) {
    fs::create_directories(*options.out_dir);
    log.open(*options.out_dir / "metrics.jsonl", options.resume ? std::ios::app : std::ios::trunc);
    json head = {{"type", "config"},
                 {"resumed_at_epoch", r.state.epoch},
                 {"train", train_config_to_json(cfg)},
                 {"model", model_config_to_json(model_config)}};
    log << head.dump() << '\n';
  }

  const auto params = r.model.parameters();
  for (Parameter* p : params) p->zero_grad();
  bool stop = false;
  for (std::size_t epoch = r.state.epoch; epoch < cfg.epochs && !stop; ++epoch) {
    const auto batches = make_batches(data.train, cfg.batch_size, cfg.seed, epoch);
    double loss_sum = 0.0;
    std::size_t tokens = 0, replaced = 0, skipped = 0, steps = 0;
    std::vector<double> accs;
    for (const auto& idx : batches) {
      std::vector<BatchItem> items;
      items.reserve(idx.size());
      for (std::size_t i : idx) items.push_back({&data.train[i], i});
      const LossParts parts = combined_loss(items, r.model, elm, cfg, epoch, true);
      const double lr = lr_schedule(r.state.step + 1, cfg);
      const double norm = adam_update(params, r.state.adam, lr, cfg.optimizer);
      ++r.state.step;
      ++steps;
      r.step_losses.push_back(parts.total);
      loss_sum += parts.total;
      tokens += parts.tokens;
      replaced += parts.replaced;
      skipped += parts.ctc_skipped.size();
      accs.insert(accs.end(), parts.acc_values.begin(), parts.acc_values.end());
      if (log.is_open()) {
        json line = {{"type", "step"},
                     {"epoch", epoch},
                     {"step", r.state.step},
                     {"lr", lr},
                     {"loss", parts.total},
                     {"rnnt", parts.rnnt},
                     {"ctc", parts.ctc},
                     {"ilm", parts.ilm},
                     {"grad_norm", norm},
                     {"replacement_rate",
                      parts.tokens ? static_cast<double>(parts.replaced) / static_cast<double>(parts.tokens) : 0.0},
                     {"acc_hist", Histogram(parts.acc_values)},
                     {"policy", level_name(cfg.policy.level)}};
        if (!parts.acc_values.empty()) {
          line["acc_mean"] = std::accumulate(parts.acc_values.begin(), parts.acc_values.end(), 0.0) /
                             static_cast<double>(parts.acc_values.size());
        }
        for (const std::string& id : parts.ctc_skipped) {
          log << json{{"type", "warning"}, {"step", r.state.step},
                      {"message", "CTC infeasible, term skipped"}, {"utterance", id}}.dump()
              << '\n';
        }
        log << line.dump() << '\n';
      }
      if (options.max_steps > 0 && r.state.step >= options.max_steps) {
        stop = true;
        break;
      }
    }
    if (stop) break;

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(steps, 1));
    em.replacement_rate = tokens ? static_cast<double>(replaced) / static_cast<double>(tokens) : 0.0;
    if (!accs.empty()) {
      em.mean_acc = std::accumulate(accs.begin(), accs.end(), 0.0) / static_cast<double>(accs.size());
    }
    em.ctc_skipped = skipped;
    em.dev_error = options.evaluate_dev && !data.dev.empty()
                       ? greedy_error_rate(r.model, data.dev, options.dev_decode)
                       : std::numeric_limits<double>::quiet_NaN();
    r.state.epoch = epoch + 1;
    const bool improved = std::isfinite(em.dev_error) && em.dev_error < r.state.best_dev;
    if (improved) {
      r.state.best_dev = em.dev_error;
      r.state.best_epoch = epoch;
      r.best_model = r.model;
    }
    if (options.out_dir) {
      if (improved) {
        Checkpoint best = pack_model(r.best_model);
        best.meta["train_config"] = train_config_to_json(cfg);
        best.meta["dev_error"] = em.dev_error;
        best.meta["epoch"] = epoch;
        write_checkpoint(best, *options.out_dir / "best.ckpt");
      }
      write_checkpoint(StateCheckpoint(r.model, cfg, r.state), *options.out_dir / "last.ckpt");
      json line = {{"type", "epoch"},
                   {"epoch", epoch},
                   {"step", r.state.step},
                   {"train_loss", em.train_loss},
                   {"dev_error", Nullable(em.dev_error)},
                   {"replacement_rate", em.replacement_rate},
                   {"acc_mean", em.mean_acc ? json(*em.mean_acc) : json(nullptr)},
                   {"ctc_skipped", em.ctc_skipped},
                   {"best", improved}};
      log << line.dump() << '\n';
      log.flush();
    }
    if (options.progress != nullptr) {
      *options.progress << "epoch " << epoch << "  loss " << em.train_loss << "  dev_err "
                        << em.dev_error;
      if (em.mean_acc) *options.progress << "  acc " << *em.mean_acc;
      *options.progress << "  repl " << em.replacement_rate << (improved ? "  *" : "") << '\n';
    }
    r.epochs.push_back(em);
  }
  if (!std::isfinite(r.state.best_dev)) r.best_model = r.model;
  return r;
}

// ---- external LM --------------------------------------------------------------

double elm_cross_entropy(const ElmModel& lm, std::span<const TokenSequence> transcripts,
                         bool accumulate) {
  std::size_t count = 0;
  for (const TokenSequence& y : transcripts) count += y.size() + 1;
  if (count == 0) throw ContractError("elm_cross_entropy: no transcripts");
  const double inv = 1.0 / static_cast<double>(count);
  double total = 0.0;
  for (const TokenSequence& y : transcripts) {
    lm.vocab.validate(y);
    TokenSequence inputs{lm.params.start_id};
    inputs.insert(inputs.end(), y.begin(), y.end());
    TokenSequence targets = y;
    targets.push_back(lm.vocab.eos_id());
    Tape t(accumulate);
    const Var lp = log_softmax(t, elm_logits(t, inputs, lm.params));
    const Var nll = scale(t, sum(t, pick(t, lp, targets)), -inv);
    total += t.value(nll).item();
    if (accumulate) t.backward(nll);
  }
  return total;
}

ElmTrainResult pretrain_elm(std::span<const TokenSequence> train_transcripts,
                            std::span<const TokenSequence> dev_transcripts,
                            const ModelConfig& model_config, const Vocabulary& vocab,
                            const ElmTrainConfig& cfg, std::ostream* progress) {
  cfg.validate();
  if (train_transcripts.empty()) throw ContractError("pretrain_elm: no transcripts");
  ElmTrainResult r{ElmModel::create(model_config, vocab, cfg.seed), {}, {}};
  const auto params = r.model.parameters();
  for (Parameter* p : params) p->zero_grad();
  AdamState adam;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0xe1a}};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> order(train_transcripts.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double ce_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      std::vector<TokenSequence> batch;
      for (std::size_t k = i; k < std::min(i + cfg.batch_size, order.size()); ++k) {
        batch.push_back(train_transcripts[order[k]]);
      }
      ce_sum += elm_cross_entropy(r.model, batch, true);
      adam_update(params, adam, lr_schedule(adam.step + 1, cfg.warmup_steps, cfg.peak_lr),
                  cfg.optimizer);
      ++batches;
    }
    r.train_ce.push_back(ce_sum / static_cast<double>(batches));
    const double dev = dev_transcripts.empty() ? std::numeric_limits<double>::quiet_NaN()
                                               : elm_cross_entropy(r.model, dev_transcripts);
    r.dev_ce.push_back(dev);
    if (progress != nullptr) {
      *progress << "elm epoch " << epoch << "  train_ce " << r.train_ce.back() << "  dev_ce "
                << dev << "  dev_ppl " << std::exp(dev) << '\n';
    }
  }
  return r;
}

}  // namespace tss
