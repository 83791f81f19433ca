#pragma once
// Transducer encoder / prediction / joint networks and the two language
// models used as sampling sources.
//
//   encoder:     strided 1-D convolution + tanh, then stacked GRU layers
//   prediction:  token embedding -> GRU -> linear projection
//   joint:       W_out tanh(h_enc W_enc + h_pred W_pred + b) + b_out
//   ILM:         the joint with h_enc = 0, on the live prediction/joint params
//   ELM:         token embedding -> GRU -> linear output
//
// Every tape-level forward has a plain counterpart that runs the same ops on
// a non-recording tape, so inference and training see identical numbers.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tss/array.hpp"
#include "tss/numgrad.hpp"
#include "tss/vocabulary.hpp"

namespace tss {

struct ModelConfig {
  std::size_t feat_dim = 16;
  std::size_t downsample = 2;
  std::size_t conv_kernel = 3;
  std::size_t conv_channels = 64;
  std::size_t enc_hidden = 64;
  std::size_t enc_layers = 2;
  std::size_t pred_embed = 32;
  std::size_t pred_hidden = 64;
  std::size_t pred_dim = 48;
  // Not given by the original recipe; desk-scale choice.
  std::size_t joint_hidden = 64;
  std::size_t elm_embed = 32;
  std::size_t elm_hidden = 64;

  bool operator==(const ModelConfig&) const = default;
};

struct Linear {
  Parameter weight;  // [in x out]
  Parameter bias;    // [out]
};

struct GruParams {
  Parameter w_input;   // [in x 3H]
  Parameter b_input;   // [3H]
  Parameter w_hidden;  // [H x 3H]
  Parameter b_hidden;  // [3H]
  std::size_t hidden() const { return w_hidden.value.dim(0); }
};

struct EncoderParams {
  std::size_t downsample = 2;
  std::size_t kernel = 3;
  Linear conv;  // [kernel*F x C]
  std::vector<GruParams> layers;
};

struct PredictionParams {
  int start_id = 1;
  int blank_id = 0;
  Parameter embedding;  // [K x E]
  GruParams gru;
  Linear proj;  // [H x D_pred]
};

struct JointParams {
  Parameter w_enc;   // [D_enc x J]
  Parameter w_pred;  // [D_pred x J]
  Parameter bias;    // [J]
  Parameter w_out;   // [J x K]
  Parameter b_out;   // [K]
};

struct ElmParams {
  int start_id = 1;
  Parameter embedding;  // [K x E]
  GruParams gru;
  Linear out;  // [H x K]
};

struct RnntModel {
  ModelConfig config;
  Vocabulary vocab;
  EncoderParams encoder;
  PredictionParams prediction;
  JointParams joint;
  // Auxiliary CTC projection; only used by the training loss.
  Linear ctc;

  static RnntModel create(const ModelConfig& config, const Vocabulary& vocab,
                          std::uint64_t seed);
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
};

struct ElmModel {
  ModelConfig config;
  Vocabulary vocab;
  ElmParams params;

  static ElmModel create(const ModelConfig& config, const Vocabulary& vocab,
                         std::uint64_t seed);
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
};

struct AcousticSequence {
  Array frames;                     // [T' x F]
  std::vector<double> frame_mask;   // empty or T' multipliers
  std::size_t num_frames() const { return frames.rank() == 2 ? frames.dim(0) : 0; }
};

// Distributions over K at every lattice node, as log-probabilities.
struct JointTensor {
  Array log_probs;  // [T x (U+1) x K]
  bool temperature_applied = false;

  std::size_t frames() const { return log_probs.dim(0); }
  std::size_t columns() const { return log_probs.dim(1); }
  std::size_t classes() const { return log_probs.dim(2); }
  double at(std::size_t t, std::size_t u, int k) const {
    return log_probs.at(t, u, static_cast<std::size_t>(k));
  }
};

std::size_t encoded_length(std::size_t frames, std::size_t downsample);

// ---- tape-level forwards ----------------------------------------------------

Var encode(Tape& t, const AcousticSequence& x, const EncoderParams& p);
// Rows 0..U: row 0 follows the start symbol, row u has consumed y_1..y_u.
Var predict_states(Tape& t, const TokenSequence& y, const PredictionParams& p);
// Raw joint logits [T x (U+1) x K].
Var joint_logits(Tape& t, Var h_enc, Var h_pred, const JointParams& p);
// Joint logits with a zeroed acoustic input: [(rows of h_pred) x K].
Var ilm_logits(Tape& t, Var h_pred, const JointParams& p);
// Logits [n x K] for next-token prediction after each input position.
Var elm_logits(Tape& t, const TokenSequence& inputs, const ElmParams& p);
// Linear projection over rows.
Var linear(Tape& t, Var x, const Linear& l);

// ---- plain forwards ---------------------------------------------------------

Array encode(const AcousticSequence& x, const EncoderParams& p);
Array predict_states(const TokenSequence& y, const PredictionParams& p);
JointTensor joint(const Array& h_enc, const Array& h_pred, const JointParams& p,
                  double temperature);
// U rows of log-probabilities; row u predicts y_{u+1} from y_1..y_u.
Array elm_forward(const TokenSequence& y, const ElmParams& p);
Array ilm_forward(const TokenSequence& y, const PredictionParams& pred,
                  const JointParams& joint);

// ---- incremental evaluation for search --------------------------------------

struct RecurrentState {
  Array hidden;  // [1 x H]
  Array output;  // [1 x D]: prediction output or LM log-probabilities
};

RecurrentState prediction_start(const PredictionParams& p);
RecurrentState prediction_step(const RecurrentState& s, int token, const PredictionParams& p);

RecurrentState elm_start(const ElmParams& p);
RecurrentState elm_step(const RecurrentState& s, int token, const ElmParams& p);

// Precomputed acoustic side of the joint: h_enc W_enc, one row per frame.
Array joint_encoder_projection(const Array& h_enc, const JointParams& p);
// Prediction side: h_pred W_pred + b for one prediction output row.
Array joint_prediction_projection(const Array& h_pred_row, const JointParams& p);
// log softmax(joint / Z) at one node given both projections (rows of length J).
std::vector<double> joint_node_log_probs(std::span<const double> enc_proj,
                                         std::span<const double> pred_proj,
                                         const JointParams& p, double temperature);

}  // namespace tss
