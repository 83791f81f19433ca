#include "tss/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "tss/errors.hpp"
#include "tss/numgrad.hpp"

namespace tss {

void DecodeConfig::validate() const {
  if (beam < 1) throw ParameterError("decode.beam must be >= 1");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ParameterError("decode.temperature must be positive");
  }
  if (!(max_len_factor >= 0.0) || !std::isfinite(max_len_factor)) {
    throw ParameterError("decode.max_len_factor must be non-negative");
  }
  if (!std::isfinite(mu1) || !std::isfinite(mu2) || !std::isfinite(mu3)) {
    throw ParameterError("decode.mu1/mu2/mu3 must be finite");
  }
}

DecodeConfig DecodeConfig::with_lm_defaults() {
  DecodeConfig c;
  c.temperature = 1.6;
  c.mu1 = 0.4;
  c.mu2 = 0.2;
  c.mu3 = 0.4;
  return c;
}

DecodeConfig DecodeConfig::no_lm_defaults() {
  DecodeConfig c;
  c.temperature = 1.6;
  c.mu3 = -0.4;
  return c;
}

double score_hypothesis(const Hypothesis& h, const DecodeConfig& cfg) {
  double s = h.score_rnnt - cfg.mu2 * h.score_ilm + cfg.mu3 * static_cast<double>(h.tokens.size());
  if (h.lm_state) s += cfg.mu1 * h.score_lm;
  return s;
}

std::size_t max_output_length(std::size_t encoded_frames, const DecodeConfig& cfg) {
  return static_cast<std::size_t>(std::floor(cfg.max_len_factor * static_cast<double>(encoded_frames)));
}

namespace {

// Search-side view of one prefix: prediction projection and ILM row cached.
struct Node {
  Hypothesis hyp;
  Array pred_proj;          // [1 x J]
  std::vector<double> ilm;  // log p_ILM(. | tokens)
  std::size_t frame_emissions = 0;
  bool stale = false;       // tokens extended, caches not yet refreshed
  bool done = false;        // took the final blank
};

// The ILM row is kept even when mu2 == 0 so every hypothesis carries all score parts.
void Refresh(Node& n, const RnntModel& m, const ElmModel* elm, std::size_t j) {
  if (n.stale) {
    const int tok = n.hyp.tokens.back();
    n.hyp.pred_state = prediction_step(n.hyp.pred_state, tok, m.prediction);
    if (n.hyp.lm_state) n.hyp.lm_state = elm_step(*n.hyp.lm_state, tok, elm->params);
    n.stale = false;
  }
  n.pred_proj = joint_prediction_projection(n.hyp.pred_state.output, m.joint);
  const std::vector<double> zeros(j, 0.0);
  n.ilm = joint_node_log_probs(zeros, n.pred_proj.data(), m.joint, 1.0);
}

bool Emittable(int k, const Vocabulary& v) { return !v.is_special(k); }

}  // namespace

TokenSequence greedy_decode(const AcousticSequence& x, const RnntModel& model,
                            const DecodeConfig& cfg) {
  cfg.validate();
  const Array enc = encode(x, model.encoder);
  const Array enc_proj = joint_encoder_projection(enc, model.joint);
  const std::size_t frames = enc.dim(0);
  const std::size_t max_len = max_output_length(frames, cfg);
  const int blank = model.vocab.blank_id();
  RecurrentState state = prediction_start(model.prediction);
  Array pred_proj = joint_prediction_projection(state.output, model.joint);
  TokenSequence out;
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t emitted = 0; emitted < cfg.max_symbols_per_frame && out.size() < max_len;
         ++emitted) {
      const auto lp = joint_node_log_probs(enc_proj.row(t), pred_proj.data(), model.joint,
                                           cfg.temperature);
      int best = blank;
      for (int k = 0; k < static_cast<int>(lp.size()); ++k) {
        if (k != blank && !Emittable(k, model.vocab)) continue;
        if (lp[static_cast<std::size_t>(k)] > lp[static_cast<std::size_t>(best)]) best = k;
      }
      if (best == blank) break;
      out.push_back(best);
      state = prediction_step(state, best, model.prediction);
      pred_proj = joint_prediction_projection(state.output, model.joint);
    }
  }
  return out;
}

std::vector<Hypothesis> beam_decode(const AcousticSequence& x, const RnntModel& model,
                                    const ElmModel* elm, const DecodeConfig& cfg) {
  cfg.validate();
  const Array enc = encode(x, model.encoder);
  const Array enc_proj = joint_encoder_projection(enc, model.joint);
  const std::size_t frames = enc.dim(0);
  const std::size_t max_len = max_output_length(frames, cfg);
  const std::size_t j = model.joint.w_out.value.dim(0);
  const int blank = model.vocab.blank_id();
  const int eos = model.vocab.eos_id();

  Node root;
  root.hyp.pred_state = prediction_start(model.prediction);
  if (elm != nullptr) root.hyp.lm_state = elm_start(elm->params);
  Refresh(root, model, elm, j);
  std::vector<Node> beam{std::move(root)};
  std::vector<Hypothesis> finished;

  struct Candidate {
    std::size_t parent;
    int token;  // blank advances the frame
    double step;
    double score;
  };

  for (std::size_t i = 0; !beam.empty() && i < frames + max_len; ++i) {
    std::vector<Candidate> cands;
    std::vector<std::vector<double>> node_lp(beam.size());
    for (std::size_t b = 0; b < beam.size(); ++b) {
      const Node& n = beam[b];
      const std::size_t t = i - n.hyp.tokens.size();
      node_lp[b] = joint_node_log_probs(enc_proj.row(t), n.pred_proj.data(), model.joint,
                                        cfg.temperature);
      const auto& lp = node_lp[b];
      const double base = score_hypothesis(n.hyp, cfg);
      cands.push_back({b, blank, lp[static_cast<std::size_t>(blank)],
                       base + lp[static_cast<std::size_t>(blank)]});
      if (n.frame_emissions >= cfg.max_symbols_per_frame || n.hyp.tokens.size() >= max_len) {
        continue;
      }
      for (int k = 0; k < static_cast<int>(lp.size()); ++k) {
        if (k == blank || !Emittable(k, model.vocab)) continue;
        const auto kk = static_cast<std::size_t>(k);
        double s = base + lp[kk] + cfg.mu3;
        s -= cfg.mu2 * n.ilm[kk];
        if (n.hyp.lm_state) s += cfg.mu1 * n.hyp.lm_state->output.data()[kk];
        cands.push_back({b, k, lp[kk], s});
      }
    }

    // Materialise extensions. A blank at the last frame finishes the
    // hypothesis, which still competes for a beam slot in this step.
    std::vector<Node> next;
    std::map<TokenSequence, std::size_t> index;
    for (const Candidate& c : cands) {
      const Node& parent = beam[c.parent];
      const std::size_t t = i - parent.hyp.tokens.size();
      if (c.token == blank && t + 1 == frames) {
        Node n;
        n.hyp = parent.hyp;
        n.hyp.score_rnnt += c.step;
        if (n.hyp.lm_state) n.hyp.score_lm += n.hyp.lm_state->output.data()[static_cast<std::size_t>(eos)];
        n.done = true;
        next.push_back(std::move(n));
        continue;
      }
      Node n;
      n.hyp.tokens = parent.hyp.tokens;
      n.hyp.score_rnnt = parent.hyp.score_rnnt + c.step;
      n.hyp.score_lm = parent.hyp.score_lm;
      n.hyp.score_ilm = parent.hyp.score_ilm;
      n.hyp.pred_state = parent.hyp.pred_state;
      n.hyp.lm_state = parent.hyp.lm_state;
      if (c.token == blank) {
        n.pred_proj = parent.pred_proj;
        n.ilm = parent.ilm;
      } else {
        const auto kk = static_cast<std::size_t>(c.token);
        n.hyp.tokens.push_back(c.token);
        n.hyp.score_ilm += parent.ilm[kk];
        if (n.hyp.lm_state) n.hyp.score_lm += n.hyp.lm_state->output.data()[kk];
        n.frame_emissions = parent.frame_emissions + 1;
        n.stale = true;
      }
      // Same tokens at the same alignment length means the same lattice node.
      auto [it, fresh] = index.emplace(n.hyp.tokens, next.size());
      if (fresh) {
        next.push_back(std::move(n));
      } else {
        Node& kept = next[it->second];
        kept.hyp.score_rnnt = log_add(kept.hyp.score_rnnt, n.hyp.score_rnnt);
        kept.frame_emissions = std::min(kept.frame_emissions, n.frame_emissions);
      }
    }

    // Rank by fused score; ties keep the earlier (blank-first, lower id) entry.
    std::vector<std::size_t> order(next.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::vector<double> fused(next.size());
    for (std::size_t k = 0; k < next.size(); ++k) fused[k] = score_hypothesis(next[k].hyp, cfg);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return fused[a] > fused[b]; });
    if (order.size() > cfg.beam) order.resize(cfg.beam);
    std::vector<Node> pruned;
    pruned.reserve(order.size());
    for (std::size_t k : order) {
      Node n = std::move(next[k]);
      if (n.done) {
        finished.push_back(std::move(n.hyp));
        continue;
      }
      if (n.stale) Refresh(n, model, elm, j);
      pruned.push_back(std::move(n));
    }
    beam = std::move(pruned);
  }

  std::vector<double> fused(finished.size());
  for (std::size_t k = 0; k < finished.size(); ++k) fused[k] = score_hypothesis(finished[k], cfg);
  std::vector<std::size_t> order(finished.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return fused[a] > fused[b]; });
  std::vector<Hypothesis> ranked;
  ranked.reserve(order.size());
  for (std::size_t k : order) ranked.push_back(std::move(finished[k]));
  return ranked;
}

}  // namespace tss
