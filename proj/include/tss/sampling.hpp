#pragma once
// Scheduled sampling: replacement of ground-truth prediction-network inputs
// by argmax tokens of a sampling source.
//
//   token level:      y'_u = argmax row_u   if lambda > rho_u, else y_u
//   utterance level:  Y' = argmax rows      if lambda * Acc(argmax rows, Y) > rho
//
// rho ~ U[0,1) is drawn once per position (token level, in position order) or
// once per utterance (utterance level). Loss targets are never altered.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tss/lattice.hpp"
#include "tss/vocabulary.hpp"

namespace tss {

enum class SsLevel { kOff, kToken, kUtterance };
enum class AccScope { kUtterance, kMinibatch };

const char* level_name(SsLevel l);
SsLevel parse_level(const std::string& name);
const char* scope_name(AccScope s);
AccScope parse_scope(const std::string& name);

struct SamplingPolicy {
  SsLevel level = SsLevel::kOff;
  SamplingSource source = SamplingSource::kIlm;
  double lambda = 0.0;
  std::uint64_t rng_seed = 0;
  AccScope acc_scope = AccScope::kUtterance;
  AlignmentPath rnnt_path = AlignmentPath::kOccupancy;
  // First epoch (0-based) in which sampling is applied.
  int start_epoch = 0;

  // Throws ParameterError naming the offending field.
  void validate() const;
  static SamplingPolicy make(SsLevel level, SamplingSource source, double lambda,
                             std::uint64_t seed);
};

struct SampleOutcome {
  TokenSequence y_prime;
  std::vector<std::size_t> replaced_positions;
  std::optional<double> acc_value;  // utterance level only
  std::vector<double> rho_draws;
};

// Uniform draws in [0, 1) with 53 random bits, reproducible across platforms.
class SsRng {
 public:
  explicit SsRng(std::uint64_t seed) : engine_(seed) {}
  explicit SsRng(std::seed_seq& seq) : engine_(seq) {}
  // Independent stream per (seed, epoch, utterance).
  static SsRng for_utterance(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index);
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

 private:
  std::mt19937_64 engine_;
};

// Classes never fed to the prediction network: blank and the boundary symbol.
std::vector<int> excluded_classes(const Vocabulary& vocab);

// Per-row argmax over the classes not in `excluded`; ties go to the lowest id.
TokenSequence argmax_tokens(const SamplingMatrix& rows, std::span<const int> excluded);

// Fraction of positions where the sequences agree.
double proficiency(const TokenSequence& y_hat, const TokenSequence& y);

SampleOutcome token_level_ss(const TokenSequence& y, const SamplingMatrix& rows, double lambda,
                             SsRng& rng, std::span<const int> excluded);

// acc_override replaces the per-utterance Acc (minibatch scope).
SampleOutcome utterance_level_ss(const TokenSequence& y, const SamplingMatrix& rows,
                                 double lambda, SsRng& rng, std::span<const int> excluded,
                                 std::optional<double> acc_override = std::nullopt);

}  // namespace tss
