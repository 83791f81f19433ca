#include "tss/sampling.hpp"

#include <algorithm>
#include <cmath>

#include "tss/errors.hpp"

namespace tss {

const char* level_name(SsLevel l) {
  switch (l) {
    case SsLevel::kOff: return "off";
    case SsLevel::kToken: return "token";
    case SsLevel::kUtterance: return "utterance";
  }
  return "?";
}

SsLevel parse_level(const std::string& name) {
  if (name == "off") return SsLevel::kOff;
  if (name == "token") return SsLevel::kToken;
  if (name == "utterance") return SsLevel::kUtterance;
  throw ParameterError("ss.level: unknown level '" + name + "'");
}

const char* scope_name(AccScope s) {
  return s == AccScope::kMinibatch ? "minibatch" : "utterance";
}

AccScope parse_scope(const std::string& name) {
  if (name == "utterance") return AccScope::kUtterance;
  if (name == "minibatch") return AccScope::kMinibatch;
  throw ParameterError("ss.acc_scope: unknown scope '" + name + "'");
}

void SamplingPolicy::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ParameterError("ss.lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
  if (level == SsLevel::kToken && source == SamplingSource::kRnnt) {
    throw ParameterError(
        "ss.source: the rnnt source is only available for utterance-level sampling");
  }
  if (start_epoch < 0) throw ParameterError("ss.start_epoch must be >= 0");
}

SamplingPolicy SamplingPolicy::make(SsLevel level, SamplingSource source, double lambda,
                                    std::uint64_t seed) {
  SamplingPolicy p;
  p.level = level;
  p.source = source;
  p.lambda = lambda;
  p.rng_seed = seed;
  p.validate();
  return p;
}

SsRng SsRng::for_utterance(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return SsRng(seq);
}

std::vector<int> excluded_classes(const Vocabulary& vocab) {
  std::vector<int> out = {vocab.blank_id()};
  if (vocab.bos_id() != vocab.blank_id()) out.push_back(vocab.bos_id());
  if (vocab.eos_id() != vocab.bos_id() && vocab.eos_id() != vocab.blank_id()) {
    out.push_back(vocab.eos_id());
  }
  return out;
}

TokenSequence argmax_tokens(const SamplingMatrix& rows, std::span<const int> excluded) {
  TokenSequence out;
  const std::size_t n = rows.rows();
  if (n == 0) return out;
  const std::size_t k = rows.log_probs.dim(1);
  out.reserve(n);
  for (std::size_t u = 0; u < n; ++u) {
    int best = -1;
    for (std::size_t c = 0; c < k; ++c) {
      const int id = static_cast<int>(c);
      if (std::find(excluded.begin(), excluded.end(), id) != excluded.end()) continue;
      if (best < 0 || rows.log_probs.at(u, c) > rows.log_probs.at(u, static_cast<std::size_t>(best))) {
        best = id;
      }
    }
    if (best < 0) throw ContractError("argmax_tokens: every class is excluded");
    out.push_back(best);
  }
  return out;
}

double proficiency(const TokenSequence& y_hat, const TokenSequence& y) {
  if (y_hat.size() != y.size()) {
    throw ContractError("proficiency: lengths " + std::to_string(y_hat.size()) + " and " +
                        std::to_string(y.size()) + " differ");
  }
  if (y.empty()) return 1.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < y.size(); ++i) hits += y_hat[i] == y[i];
  return static_cast<double>(hits) / static_cast<double>(y.size());
}

namespace {

void CheckRows(const TokenSequence& y, const SamplingMatrix& rows, double lambda) {
  if (rows.rows() != y.size()) {
    throw ContractError("sampling matrix has " + std::to_string(rows.rows()) + " rows for " +
                        std::to_string(y.size()) + " tokens");
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ParameterError("lambda outside [0, 1]");
}

}  // namespace

SampleOutcome token_level_ss(const TokenSequence& y, const SamplingMatrix& rows, double lambda,
                             SsRng& rng, std::span<const int> excluded) {
  CheckRows(y, rows, lambda);
  if (rows.source == SamplingSource::kRnnt) {
    throw ContractError("token_level_ss: rnnt rows are utterance-level only");
  }
  const TokenSequence best = argmax_tokens(rows, excluded);
  SampleOutcome out;
  out.y_prime = y;
  out.rho_draws.reserve(y.size());
  for (std::size_t u = 0; u < y.size(); ++u) {
    const double rho = rng.uniform();
    out.rho_draws.push_back(rho);
    if (lambda > rho) {
      out.y_prime[u] = best[u];
      out.replaced_positions.push_back(u);
    }
  }
  return out;
}

SampleOutcome utterance_level_ss(const TokenSequence& y, const SamplingMatrix& rows,
                                 double lambda, SsRng& rng, std::span<const int> excluded,
                                 std::optional<double> acc_override) {
  CheckRows(y, rows, lambda);
  const TokenSequence best = argmax_tokens(rows, excluded);
  const double acc = acc_override ? *acc_override : proficiency(best, y);
  SampleOutcome out;
  out.acc_value = acc;
  const double rho = rng.uniform();
  out.rho_draws.push_back(rho);
  if (lambda * acc > rho) {
    out.y_prime = best;
    for (std::size_t u = 0; u < y.size(); ++u) out.replaced_positions.push_back(u);
  } else {
    out.y_prime = y;
  }
  return out;
}

}  // namespace tss
