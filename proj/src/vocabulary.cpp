#include "tss/vocabulary.hpp"

#include <sstream>

#include "tss/errors.hpp"

namespace tss {

Vocabulary::Vocabulary(std::vector<std::string> tokens, int blank_id, int bos_id,
                       int eos_id)
    : tokens_(std::move(tokens)), blank_id_(blank_id), bos_id_(bos_id), eos_id_(eos_id) {
  const int k = static_cast<int>(tokens_.size());
  for (int id : {blank_id_, bos_id_, eos_id_}) {
    if (id < 0 || id >= k) {
      throw ContractError("vocabulary: special id " + std::to_string(id) +
                          " outside [0, " + std::to_string(k) + ")");
    }
  }
  for (int i = 0; i < k; ++i) {
    if (!index_.emplace(tokens_[static_cast<std::size_t>(i)], i).second) {
      throw ContractError("vocabulary: duplicate token '" +
                          tokens_[static_cast<std::size_t>(i)] + "'");
    }
  }
}

Vocabulary Vocabulary::synthetic(std::size_t content_tokens) {
  std::vector<std::string> tokens = {"<blank>", "<s>"};
  for (std::size_t i = 0; i < content_tokens; ++i) {
    if (i < 26) {
      tokens.emplace_back(1, static_cast<char>('a' + i));
    } else {
      tokens.push_back("t" + std::to_string(i));
    }
  }
  return Vocabulary(std::move(tokens), 0, 1, 1);
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw ContractError("unknown token '" + token + "'");
  return it->second;
}

TokenSequence Vocabulary::encode(const std::string& space_separated) const {
  std::istringstream is(space_separated);
  TokenSequence out;
  std::string tok;
  while (is >> tok) out.push_back(id(tok));
  return out;
}

std::string Vocabulary::decode(const TokenSequence& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

void Vocabulary::validate(const TokenSequence& y) const {
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == blank_id_) {
      throw ContractError("token sequence contains blank at position " + std::to_string(i));
    }
    if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= size()) {
      throw ContractError("token id " + std::to_string(y[i]) + " outside vocabulary");
    }
  }
}

}  // namespace tss
