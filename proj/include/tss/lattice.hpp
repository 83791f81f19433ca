#pragma once
// Dynamic programs over the T x (U+1) transducer lattice and the CTC trellis.
//
// Node (t, u) means "u tokens emitted, at frame t". From (t, u) a blank moves
// to (t+1, u) and token y_{u+1} moves to (t, u+1); the path ends with a blank
// out of (T-1, U). All quantities are natural-log probabilities.

#include <cstddef>
#include <string>
#include <vector>

#include "tss/array.hpp"
#include "tss/errors.hpp"
#include "tss/models.hpp"
#include "tss/numgrad.hpp"
#include "tss/vocabulary.hpp"

namespace tss {

struct LatticeVars {
  Array log_alpha;  // [T x (U+1)], alpha(0,0) = 0
  Array log_beta;   // [T x (U+1)], includes the terminal blank
  double log_likelihood = 0.0;
};

// t_u for every token, monotone non-decreasing, each in [0, T).
struct AlignmentIndices {
  std::vector<std::size_t> t_u;
};

enum class SamplingSource { kElm, kIlm, kRnnt };
const char* source_name(SamplingSource s);
SamplingSource parse_source(const std::string& name);

// U rows of log-probabilities over K, one per label position.
struct SamplingMatrix {
  Array log_probs;  // [U x K]
  SamplingSource source = SamplingSource::kRnnt;
  std::size_t rows() const { return log_probs.rank() == 2 ? log_probs.dim(0) : 0; }
};

// How t_u is read off the lattice.
enum class AlignmentPath { kOccupancy, kViterbi };
const char* path_name(AlignmentPath p);
AlignmentPath parse_path(const std::string& name);

LatticeVars rnnt_forward_backward(const JointTensor& j, const TokenSequence& y, int blank);

// d(-log p(Y|X)) / d(logits), where j.log_probs = log_softmax(logits).
Array rnnt_loss_grad(const JointTensor& j, const TokenSequence& y, int blank);

// gamma[t][u] = P(token u+1 is emitted at frame t | X, Y): [T x U].
Array emission_occupancy(const LatticeVars& v, const JointTensor& j, const TokenSequence& y);

// Per-column argmax over t (first maximum wins), clamped to be monotone.
AlignmentIndices extract_time_indices(const Array& gamma);

// Emission frames of the single best alignment.
AlignmentIndices viterbi_time_indices(const JointTensor& j, const TokenSequence& y, int blank);

// Row u is j[t_u][u], the distribution that predicts token u+1.
SamplingMatrix gather_rnnt_sampling_matrix(const JointTensor& j, const AlignmentIndices& idx);

// Full RNNT sampling-source pipeline: lattice, alignment, gather.
SamplingMatrix rnnt_sampling_matrix(const JointTensor& j, const TokenSequence& y, int blank,
                                    AlignmentPath path);

// Tape op: transducer loss from raw logits [T x (U+1) x K] at temperature 1.
Var transducer_loss(Tape& t, Var logits, const TokenSequence& y, int blank);

// ---- CTC --------------------------------------------------------------------

class CtcInfeasible : public ContractError {
 public:
  using ContractError::ContractError;
};

// Frames needed to emit y: one per token plus one blank between repeats.
std::size_t ctc_min_frames(const TokenSequence& y);

struct CtcResult {
  double loss = 0.0;
  Array grad;  // d loss / d logits, with log_probs = log_softmax(logits): [T x K]
};

CtcResult ctc_loss(const Array& log_probs, const TokenSequence& y, int blank);

// Tape op over raw logits [T x K].
Var ctc_loss(Tape& t, Var logits, const TokenSequence& y, int blank);

}  // namespace tss
