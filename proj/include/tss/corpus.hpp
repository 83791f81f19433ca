#pragma once
// Synthetic transduction corpus, its on-disk format, and scoring.
//
// On disk a dataset directory holds
//   vocab.json                  {"tokens": [...], "blank_id", "bos_id", "eos_id"}
//   synth.json                  generator settings (informational)
//   {train,dev,test}.jsonl      one {"id", "feats", "tokens"} object per line
//   feats/<id>.f32              uint32 rows, uint32 cols, rows*cols float32,
//                               all little-endian, row-major

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tss/array.hpp"
#include "tss/models.hpp"
#include "tss/vocabulary.hpp"

namespace tss {

struct SynthSpec {
  std::size_t vocab_size = 20;
  // Row-stochastic [vocab_size x vocab_size] over content tokens; generated
  // from the seed when left empty.
  Array transition = Array(Shape{0, 0});
  std::size_t successors = 5;  // allowed next tokens per row when generated
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 8;
  std::size_t min_frames_per_token = 2;
  std::size_t max_frames_per_token = 4;
  std::size_t feat_dim = 16;
  double noise = 0.3;
  double prototype_scale = 0.3;  // std-dev of the per-token prototype entries
  std::size_t utterances = 2500;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Utterance {
  std::string id;
  AcousticSequence features;
  TokenSequence reference;
};

struct Dataset {
  Vocabulary vocab;
  std::vector<Utterance> train;
  std::vector<Utterance> dev;
  std::vector<Utterance> test;
};

struct SynthCorpus {
  Dataset data;
  Array transition;  // the bigram actually used
  Array prototypes;  // [vocab K x feat_dim]; rows of special symbols are zero
};

SynthCorpus generate(const SynthSpec& spec);

void write_dataset(const Dataset& d, const std::filesystem::path& dir,
                   const SynthSpec* spec = nullptr);
Dataset read_dataset(const std::filesystem::path& dir);
std::vector<Utterance> read_manifest(const std::filesystem::path& manifest, const Vocabulary& v);
Vocabulary read_vocabulary(const std::filesystem::path& file);
void write_vocabulary(const Vocabulary& v, const std::filesystem::path& file);

void write_features(const Array& frames, const std::filesystem::path& file);
Array read_features(const std::filesystem::path& file);

struct EditOps {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t total() const { return substitutions + insertions + deletions; }
  bool operator==(const EditOps&) const = default;
};

// Minimum-cost Levenshtein alignment; among equal-cost alignments the
// backtrace prefers substitutions, then deletions, then insertions.
EditOps edit_distance(std::span<const int> hyp, std::span<const int> ref);

struct ScoredPair {
  TokenSequence hypothesis;
  TokenSequence reference;
};

// Corpus-level (S + I + D) / sum |ref|.
double error_rate(std::span<const ScoredPair> results);

}  // namespace tss
