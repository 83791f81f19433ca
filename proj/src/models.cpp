#include "tss/models.hpp"

#include <cmath>
#include <random>

#include "tss/errors.hpp"
#include "tss/kernels.hpp"

namespace tss {

namespace {

Parameter Uniform(std::string name, Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Array a(std::move(shape));
  for (double& v : a.data()) v = dist(rng);
  return Parameter(std::move(name), std::move(a));
}

Parameter Zeros(std::string name, Shape shape) {
  return Parameter(std::move(name), Array(std::move(shape)));
}

Linear MakeLinear(const std::string& name, std::size_t in, std::size_t out,
                  std::mt19937_64& rng) {
  return Linear{Uniform(name + ".weight", {in, out}, in, rng), Zeros(name + ".bias", {out})};
}

GruParams MakeGru(const std::string& name, std::size_t in, std::size_t hidden,
                  std::mt19937_64& rng) {
  return GruParams{Uniform(name + ".w_input", {in, 3 * hidden}, hidden, rng),
                   Zeros(name + ".b_input", {3 * hidden}),
                   Uniform(name + ".w_hidden", {hidden, 3 * hidden}, hidden, rng),
                   Zeros(name + ".b_hidden", {3 * hidden})};
}

void Collect(std::vector<Parameter*>& out, Linear& l) {
  out.push_back(&l.weight);
  out.push_back(&l.bias);
}

void Collect(std::vector<Parameter*>& out, GruParams& g) {
  for (Parameter* p : {&g.w_input, &g.b_input, &g.w_hidden, &g.b_hidden}) out.push_back(p);
}

// Runs a GRU over the rows of x; returns the stacked hidden states.
Var RunGru(Tape& t, Var x, const GruParams& g, Array h0 = Array()) {
  const std::size_t steps = t.shape(x).at(0);
  const std::size_t hd = g.hidden();
  Var proj = add_bias(t, matmul(t, x, t.param(g.w_input)),
                      t.param(g.b_input));
  Var w_h = t.param(g.w_hidden);
  Var b_h = t.param(g.b_hidden);
  Var h = t.constant(h0.rank() == 2 ? std::move(h0) : Array({1, hd}));
  std::vector<Var> outputs;
  outputs.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    h = gru_cell(t, slice_rows(t, proj, i, i + 1), h, w_h, b_h);
    outputs.push_back(h);
  }
  return concat_rows(t, outputs);
}

Var ParamVar(Tape& t, const Parameter& p) { return t.param(p); }

// logits = b_out + tanh(e + p) W_out, the shared per-node kernel of the joint.
void JointNode(const double* e, const double* p, const JointParams& jp, double* hidden,
               double* logits) {
  const std::size_t j = jp.w_out.value.dim(0), k = jp.w_out.value.dim(1);
  const auto& kt = kernels::active();
  kt.add(e, p, hidden, j);
  for (std::size_t i = 0; i < j; ++i) hidden[i] = std::tanh(hidden[i]);
  std::copy(jp.b_out.value.data().begin(), jp.b_out.value.data().end(), logits);
  kernels::gemm_nn(1, j, k, hidden, jp.w_out.value.ptr(), logits);
}

}  // namespace

// ---- construction -------------------------------------------------------------

RnntModel RnntModel::create(const ModelConfig& c, const Vocabulary& vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t k = vocab.size();
  RnntModel m;
  m.config = c;
  m.vocab = vocab;
  m.encoder.downsample = c.downsample;
  m.encoder.kernel = c.conv_kernel;
  m.encoder.conv = MakeLinear("encoder.conv", c.conv_kernel * c.feat_dim, c.conv_channels, rng);
  std::size_t in = c.conv_channels;
  for (std::size_t l = 0; l < c.enc_layers; ++l) {
    m.encoder.layers.push_back(
        MakeGru("encoder.gru" + std::to_string(l), in, c.enc_hidden, rng));
    in = c.enc_hidden;
  }
  m.prediction.start_id = vocab.bos_id();
  m.prediction.blank_id = vocab.blank_id();
  m.prediction.embedding = Uniform("prediction.embedding", {k, c.pred_embed}, 1, rng);
  m.prediction.gru = MakeGru("prediction.gru", c.pred_embed, c.pred_hidden, rng);
  m.prediction.proj = MakeLinear("prediction.proj", c.pred_hidden, c.pred_dim, rng);
  m.joint.w_enc = Uniform("joint.w_enc", {c.enc_hidden, c.joint_hidden}, c.enc_hidden, rng);
  m.joint.w_pred = Uniform("joint.w_pred", {c.pred_dim, c.joint_hidden}, c.pred_dim, rng);
  m.joint.bias = Zeros("joint.bias", {c.joint_hidden});
  m.joint.w_out = Uniform("joint.w_out", {c.joint_hidden, k}, c.joint_hidden, rng);
  m.joint.b_out = Zeros("joint.b_out", {k});
  m.ctc = MakeLinear("ctc", c.enc_hidden, k, rng);
  return m;
}

std::vector<Parameter*> RnntModel::parameters() {
  std::vector<Parameter*> out;
  Collect(out, encoder.conv);
  for (GruParams& g : encoder.layers) Collect(out, g);
  out.push_back(&prediction.embedding);
  Collect(out, prediction.gru);
  Collect(out, prediction.proj);
  for (Parameter* p : {&joint.w_enc, &joint.w_pred, &joint.bias, &joint.w_out, &joint.b_out}) {
    out.push_back(p);
  }
  Collect(out, ctc);
  return out;
}

std::vector<const Parameter*> RnntModel::parameters() const {
  auto mut = const_cast<RnntModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

ElmModel ElmModel::create(const ModelConfig& c, const Vocabulary& vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ElmModel m;
  m.config = c;
  m.vocab = vocab;
  m.params.start_id = vocab.bos_id();
  m.params.embedding = Uniform("elm.embedding", {vocab.size(), c.elm_embed}, 1, rng);
  m.params.gru = MakeGru("elm.gru", c.elm_embed, c.elm_hidden, rng);
  m.params.out = MakeLinear("elm.out", c.elm_hidden, vocab.size(), rng);
  return m;
}

std::vector<Parameter*> ElmModel::parameters() {
  std::vector<Parameter*> out;
  out.push_back(&params.embedding);
  Collect(out, params.gru);
  Collect(out, params.out);
  return out;
}

std::vector<const Parameter*> ElmModel::parameters() const {
  auto mut = const_cast<ElmModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

// ---- tape forwards ------------------------------------------------------------

std::size_t encoded_length(std::size_t frames, std::size_t downsample) {
  return (frames + downsample - 1) / downsample;
}

Var linear(Tape& t, Var x, const Linear& l) {
  return add_bias(t, matmul(t, x, ParamVar(t, l.weight)), ParamVar(t, l.bias));
}

Var encode(Tape& t, const AcousticSequence& x, const EncoderParams& p) {
  const std::size_t frames = x.num_frames();
  if (frames == 0 || frames < p.downsample) {
    throw ContractError("encode: need at least " + std::to_string(p.downsample) +
                        " frames, got " + std::to_string(frames));
  }
  const std::size_t f = x.frames.dim(1);
  const std::size_t in_dim = p.conv.weight.value.dim(0);
  if (in_dim != p.kernel * f) {
    throw DimensionError("encode: feature dim " + std::to_string(f) +
                         " does not match convolution input " + std::to_string(in_dim));
  }
  if (!x.frame_mask.empty() && x.frame_mask.size() != frames) {
    throw DimensionError("encode: frame mask length mismatch");
  }
  const std::size_t out_frames = encoded_length(frames, p.downsample);
  // Window t covers input frames [t*stride, t*stride + kernel), zero padded.
  Array windows({out_frames, p.kernel * f});
  for (std::size_t o = 0; o < out_frames; ++o) {
    for (std::size_t k = 0; k < p.kernel; ++k) {
      const std::size_t src = o * p.downsample + k;
      if (src >= frames) break;
      const double m = x.frame_mask.empty() ? 1.0 : x.frame_mask[src];
      for (std::size_t d = 0; d < f; ++d) {
        windows.at(o, k * f + d) = m * x.frames.at(src, d);
      }
    }
  }
  Var h = tanh(t, linear(t, t.constant(std::move(windows)), p.conv));
  for (const GruParams& g : p.layers) h = RunGru(t, h, g);
  return h;
}

Var predict_states(Tape& t, const TokenSequence& y, const PredictionParams& p) {
  std::vector<int> inputs;
  inputs.reserve(y.size() + 1);
  inputs.push_back(p.start_id);
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == p.blank_id) {
      throw ContractError("predict_states: blank at position " + std::to_string(i));
    }
    inputs.push_back(y[i]);
  }
  Var e = embedding(t, ParamVar(t, p.embedding), inputs);
  return linear(t, RunGru(t, e, p.gru), p.proj);
}

Var joint_logits(Tape& t, Var h_enc, Var h_pred, const JointParams& p) {
  Var e = matmul(t, h_enc, ParamVar(t, p.w_enc));
  Var q = add_bias(t, matmul(t, h_pred, ParamVar(t, p.w_pred)), ParamVar(t, p.bias));
  Var w_out = ParamVar(t, p.w_out);
  Var b_out = ParamVar(t, p.b_out);
  const Array& ev = t.value(e);
  const Array& qv = t.value(q);
  const std::size_t frames = ev.dim(0), cols = qv.dim(0), j = ev.dim(1);
  const std::size_t k = p.w_out.value.dim(1);
  Array hidden({frames, cols, j});
  Array logits({frames, cols, k});
  for (std::size_t ti = 0; ti < frames; ++ti) {
    for (std::size_t u = 0; u < cols; ++u) {
      JointNode(ev.ptr() + ti * j, qv.ptr() + u * j, p, hidden.ptr() + (ti * cols + u) * j,
                logits.ptr() + (ti * cols + u) * k);
    }
  }
  return t.record(
      std::move(logits), {e, q, w_out, b_out},
      [e, q, w_out, b_out, frames, cols, j, k, hidden = std::move(hidden)](Tape& tp,
                                                                          const Array& g) {
        const Array& wv = tp.value(w_out);
        const bool need_e = tp.requires_grad(e), need_q = tp.requires_grad(q);
        Array d_hidden({frames * cols, j});
        // d_hidden = g W_out^T, then through tanh.
        kernels::gemm_nt(frames * cols, j, k, g.ptr(), wv.ptr(), d_hidden.ptr());
        kernels::active().tanh_grad(hidden.ptr(), d_hidden.ptr(), d_hidden.ptr(),
                                    d_hidden.size());
        if (need_e || need_q) {
          Array* ge = need_e ? &tp.grad(e) : nullptr;
          Array* gq = need_q ? &tp.grad(q) : nullptr;
          for (std::size_t ti = 0; ti < frames; ++ti) {
            for (std::size_t u = 0; u < cols; ++u) {
              const double* src = d_hidden.ptr() + (ti * cols + u) * j;
              if (ge) kernels::active().add(ge->ptr() + ti * j, src, ge->ptr() + ti * j, j);
              if (gq) kernels::active().add(gq->ptr() + u * j, src, gq->ptr() + u * j, j);
            }
          }
        }
        if (tp.requires_grad(w_out)) {
          kernels::gemm_tn(frames * cols, j, k, hidden.ptr(), g.ptr(), tp.grad(w_out).ptr());
        }
        if (tp.requires_grad(b_out)) {
          Array& gb = tp.grad(b_out);
          for (std::size_t r = 0; r < frames * cols; ++r) {
            kernels::active().add(gb.ptr(), g.ptr() + r * k, gb.ptr(), k);
          }
        }
      });
}

Var ilm_logits(Tape& t, Var h_pred, const JointParams& p) {
  Var zero_enc = t.constant(Array({1, p.w_enc.value.dim(0)}));
  Var logits = joint_logits(t, zero_enc, h_pred, p);
  const Shape& s = t.shape(logits);
  return reshape(t, logits, {s[1], s[2]});
}

Var elm_logits(Tape& t, const TokenSequence& inputs, const ElmParams& p) {
  Var e = embedding(t, ParamVar(t, p.embedding), inputs);
  return linear(t, RunGru(t, e, p.gru), p.out);
}

// ---- plain forwards -----------------------------------------------------------

Array encode(const AcousticSequence& x, const EncoderParams& p) {
  Tape t(false);
  return t.value(encode(t, x, p));
}

Array predict_states(const TokenSequence& y, const PredictionParams& p) {
  Tape t(false);
  return t.value(predict_states(t, y, p));
}

JointTensor joint(const Array& h_enc, const Array& h_pred, const JointParams& p,
                  double temperature) {
  Tape t(false);
  Var logits = joint_logits(t, t.constant(h_enc), t.constant(h_pred), p);
  return JointTensor{log_softmax(t.value(logits), temperature), temperature != 1.0};
}

Array elm_forward(const TokenSequence& y, const ElmParams& p) {
  std::vector<int> inputs;
  inputs.push_back(p.start_id);
  if (!y.empty()) inputs.insert(inputs.end(), y.begin(), y.end() - 1);
  Tape t(false);
  Array rows = log_softmax(t.value(elm_logits(t, inputs, p)));
  if (y.empty()) return Array({0, p.out.weight.value.dim(1)});
  return rows;
}

Array ilm_forward(const TokenSequence& y, const PredictionParams& pred,
                  const JointParams& joint_params) {
  Tape t(false);
  Var h = predict_states(t, y, pred);
  Array rows = log_softmax(t.value(ilm_logits(t, h, joint_params)));
  const std::size_t k = rows.dim(1);
  std::vector<double> data(rows.data().begin(), rows.data().begin() + y.size() * k);
  return Array({y.size(), k}, std::move(data));
}

// ---- incremental --------------------------------------------------------------

namespace {

RecurrentState StepGru(const Array& hidden, int token, const Parameter& embedding_table,
                       const GruParams& g, const Linear& out) {
  Tape t(false);
  const int ids[] = {token};
  Var e = embedding(t, ParamVar(t, embedding_table), ids);
  Var proj = add_bias(t, matmul(t, e, ParamVar(t, g.w_input)), ParamVar(t, g.b_input));
  Var h = gru_cell(t, proj, t.constant(hidden), ParamVar(t, g.w_hidden),
                   ParamVar(t, g.b_hidden));
  Var o = linear(t, h, out);
  return RecurrentState{t.value(h), t.value(o)};
}

}  // namespace

RecurrentState prediction_start(const PredictionParams& p) {
  return StepGru(Array({1, p.gru.hidden()}), p.start_id, p.embedding, p.gru, p.proj);
}

RecurrentState prediction_step(const RecurrentState& s, int token, const PredictionParams& p) {
  if (token == p.blank_id) throw ContractError("prediction_step: blank token");
  return StepGru(s.hidden, token, p.embedding, p.gru, p.proj);
}

RecurrentState elm_start(const ElmParams& p) {
  RecurrentState s = StepGru(Array({1, p.gru.hidden()}), p.start_id, p.embedding, p.gru, p.out);
  s.output = log_softmax(s.output);
  return s;
}

RecurrentState elm_step(const RecurrentState& s, int token, const ElmParams& p) {
  RecurrentState n = StepGru(s.hidden, token, p.embedding, p.gru, p.out);
  n.output = log_softmax(n.output);
  return n;
}

Array joint_encoder_projection(const Array& h_enc, const JointParams& p) {
  Tape t(false);
  return t.value(matmul(t, t.constant(h_enc), ParamVar(t, p.w_enc)));
}

Array joint_prediction_projection(const Array& h_pred_row, const JointParams& p) {
  Tape t(false);
  return t.value(
      add_bias(t, matmul(t, t.constant(h_pred_row), ParamVar(t, p.w_pred)), ParamVar(t, p.bias)));
}

std::vector<double> joint_node_log_probs(std::span<const double> enc_proj,
                                         std::span<const double> pred_proj,
                                         const JointParams& p, double temperature) {
  const std::size_t j = p.w_out.value.dim(0), k = p.w_out.value.dim(1);
  std::vector<double> hidden(j);
  Array logits({k});
  JointNode(enc_proj.data(), pred_proj.data(), p, hidden.data(), logits.ptr());
  Array lp = log_softmax(logits, temperature);
  return {lp.data().begin(), lp.data().end()};
}

}  // namespace tss
