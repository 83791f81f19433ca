#pragma once
// Greedy and alignment-length synchronous beam search with the fused score
//
//   log p_RNNT(Y|X) + mu1 log p_LM(Y) - mu2 log p_ILM(Y) + mu3 |Y|
//
// Temperature Z divides the transducer logits only; LM and ILM scores are
// plain log-softmax. The sentence-boundary symbol is never emitted.

#include <cstddef>
#include <optional>
#include <vector>

#include "tss/models.hpp"

namespace tss {

struct DecodeConfig {
  std::size_t beam = 8;
  double temperature = 1.0;
  double mu1 = 0.0;  // external LM
  double mu2 = 0.0;  // ILM subtraction
  double mu3 = 0.0;  // length reward per emitted token
  // Hypotheses hold at most floor(factor * T) tokens, so the alignment
  // length never exceeds T + factor * T.
  double max_len_factor = 1.0;
  std::size_t max_symbols_per_frame = 10;

  void validate() const;  // ParameterError naming "decode.<field>"

  // Z=1.6, mu=(0.4, 0.2, 0.4), beam 8.
  static DecodeConfig with_lm_defaults();
  // No LM: Z=1.6, mu3=-0.4, beam 8.
  static DecodeConfig no_lm_defaults();

  bool operator==(const DecodeConfig&) const = default;
};

struct Hypothesis {
  TokenSequence tokens;
  double score_rnnt = 0.0;
  double score_lm = 0.0;   // includes the end-of-sentence term once finished
  double score_ilm = 0.0;
  RecurrentState pred_state;
  std::optional<RecurrentState> lm_state;
};

double score_hypothesis(const Hypothesis& h, const DecodeConfig& cfg);

std::size_t max_output_length(std::size_t encoded_frames, const DecodeConfig& cfg);

TokenSequence greedy_decode(const AcousticSequence& x, const RnntModel& model,
                            const DecodeConfig& cfg);

// Finished hypotheses, best first. Never empty for T >= 1.
std::vector<Hypothesis> beam_decode(const AcousticSequence& x, const RnntModel& model,
                                    const ElmModel* elm, const DecodeConfig& cfg);

}  // namespace tss
