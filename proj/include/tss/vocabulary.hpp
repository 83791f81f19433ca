#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

namespace tss {

// Label history Y or Y' as vocabulary indices; never contains blank.
using TokenSequence = std::vector<int>;

// Output symbol inventory. K = size() counts the blank and the sentence
// boundary symbol as well as the content tokens.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::vector<std::string> tokens, int blank_id, int bos_id, int eos_id);

  // "<blank>", "<s>" followed by n content tokens named a, b, ... (then t26, t27, ...).
  static Vocabulary synthetic(std::size_t content_tokens);

  std::size_t size() const { return tokens_.size(); }
  int blank_id() const { return blank_id_; }
  int bos_id() const { return bos_id_; }
  int eos_id() const { return eos_id_; }
  bool is_special(int id) const {
    return id == blank_id_ || id == bos_id_ || id == eos_id_;
  }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  // Throws ContractError for unknown strings.
  int id(const std::string& token) const;

  TokenSequence encode(const std::string& space_separated) const;
  std::string decode(const TokenSequence& ids) const;

  // Rejects blank and out-of-range ids with a ContractError.
  void validate(const TokenSequence& y) const;

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && blank_id_ == other.blank_id_ &&
           bos_id_ == other.bos_id_ && eos_id_ == other.eos_id_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int blank_id_ = 0;
  int bos_id_ = 1;
  int eos_id_ = 1;
};

}  // namespace tss
