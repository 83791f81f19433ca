#include "tss/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"
#include "tss/errors.hpp"

namespace tss {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats assume a little-endian host");

template <typename T>
void WriteRaw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T ReadRaw(std::istream& is, const fs::path& file) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("truncated file " + file.string());
  }
  return v;
}

Array MakeTransition(const SynthSpec& s, std::mt19937_64& rng) {
  const std::size_t n = s.vocab_size;
  Array t({n, n});
  std::vector<std::size_t> others;
  std::uniform_real_distribution<double> weight(0.2, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    others.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) others.push_back(j);
    }
    std::shuffle(others.begin(), others.end(), rng);
    const std::size_t keep = std::min(s.successors, others.size());
    double total = 0.0;
    for (std::size_t j = 0; j < keep; ++j) {
      const double w = weight(rng);
      t.at(i, others[j]) = w;
      total += w;
    }
    for (std::size_t j = 0; j < n; ++j) t.at(i, j) /= total;
  }
  return t;
}

std::size_t Sample(std::span<const double> probs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng), acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (r < acc) return i;
  }
  // Rounding slack: last class with nonzero mass.
  for (std::size_t i = probs.size(); i-- > 0;) {
    if (probs[i] > 0.0) return i;
  }
  return 0;
}

}  // namespace

void SynthSpec::validate() const {
  if (vocab_size == 0) throw ParameterError("synth: vocab_size must be positive");
  if (min_frames_per_token < 1 || max_frames_per_token < min_frames_per_token) {
    throw ParameterError("synth: frames-per-token range must satisfy 1 <= min <= max");
  }
  if (min_tokens < 1 || max_tokens < min_tokens) {
    throw ParameterError("synth: token-count range must satisfy 1 <= min <= max");
  }
  if (feat_dim == 0) throw ParameterError("synth: feat_dim must be positive");
  if (!(noise >= 0.0)) throw ParameterError("synth: noise must be non-negative");
  if (!(prototype_scale > 0.0)) throw ParameterError("synth: prototype_scale must be positive");
  if (transition.size() > 0) {
    if (transition.shape() != Shape{vocab_size, vocab_size}) {
      throw ParameterError("synth: transition matrix must be vocab_size x vocab_size");
    }
    for (std::size_t i = 0; i < vocab_size; ++i) {
      double s = 0.0;
      for (double p : transition.row(i)) {
        if (p < 0.0) throw ParameterError("synth: negative transition probability");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9) {
        throw ParameterError("synth: transition row " + std::to_string(i) + " sums to " +
                             std::to_string(s));
      }
    }
  }
}

SynthCorpus generate(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SynthCorpus out;
  out.data.vocab = Vocabulary::synthetic(spec.vocab_size);
  const std::size_t k = out.data.vocab.size();
  const std::size_t offset = k - spec.vocab_size;  // id of the first content token
  out.transition = spec.transition.size() > 0 ? spec.transition : MakeTransition(spec, rng);

  std::normal_distribution<double> gauss(0.0, 1.0);
  out.prototypes = Array({k, spec.feat_dim});
  for (std::size_t i = offset; i < k; ++i) {
    for (std::size_t d = 0; d < spec.feat_dim; ++d) {
      out.prototypes.at(i, d) = static_cast<float>(spec.prototype_scale * gauss(rng));
    }
  }

  std::uniform_int_distribution<std::size_t> length(spec.min_tokens, spec.max_tokens);
  std::uniform_int_distribution<std::size_t> duration(spec.min_frames_per_token,
                                                      spec.max_frames_per_token);
  std::uniform_int_distribution<std::size_t> first(0, spec.vocab_size - 1);
  std::vector<Utterance> all;
  all.reserve(spec.utterances);
  for (std::size_t n = 0; n < spec.utterances; ++n) {
    Utterance u;
    char name[32];
    std::snprintf(name, sizeof(name), "utt-%05zu", n);
    u.id = name;
    const std::size_t len = length(rng);
    std::size_t cur = first(rng);
    for (std::size_t i = 0; i < len; ++i) {
      if (i > 0) cur = Sample(out.transition.row(cur), rng);
      u.reference.push_back(static_cast<int>(cur + offset));
    }
    std::vector<double> frames;
    std::size_t rows = 0;
    for (int tok : u.reference) {
      const std::size_t dur = duration(rng);
      for (std::size_t f = 0; f < dur; ++f, ++rows) {
        for (std::size_t d = 0; d < spec.feat_dim; ++d) {
          const double v = out.prototypes.at(static_cast<std::size_t>(tok), d) +
                           spec.noise * gauss(rng);
          // Stored as float32 on disk; keep memory and disk identical.
          frames.push_back(static_cast<float>(v));
        }
      }
    }
    u.features.frames = Array({rows, spec.feat_dim}, std::move(frames));
    all.push_back(std::move(u));
  }

  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_train = all.size() * 8 / 10;
  const std::size_t n_dev = all.size() / 10;
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> dev_idx(order.begin() + n_train, order.begin() + n_train + n_dev);
  std::vector<std::size_t> test_idx(order.begin() + n_train + n_dev, order.end());
  for (auto* idx : {&train_idx, &dev_idx, &test_idx}) std::sort(idx->begin(), idx->end());
  for (std::size_t i : train_idx) out.data.train.push_back(all[i]);
  for (std::size_t i : dev_idx) out.data.dev.push_back(all[i]);
  for (std::size_t i : test_idx) out.data.test.push_back(all[i]);
  return out;
}

// ---- files --------------------------------------------------------------------

void write_features(const Array& frames, const fs::path& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  WriteRaw(os, static_cast<std::uint32_t>(frames.dim(0)));
  WriteRaw(os, static_cast<std::uint32_t>(frames.dim(1)));
  for (double v : frames.data()) WriteRaw(os, static_cast<float>(v));
}

Array read_features(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + file.string());
  const auto rows = ReadRaw<std::uint32_t>(is, file);
  const auto cols = ReadRaw<std::uint32_t>(is, file);
  std::vector<double> data(static_cast<std::size_t>(rows) * cols);
  for (double& v : data) v = ReadRaw<float>(is, file);
  return Array({rows, cols}, std::move(data));
}

void write_vocabulary(const Vocabulary& v, const fs::path& file) {
  json j = {{"tokens", v.tokens()},
            {"blank_id", v.blank_id()},
            {"bos_id", v.bos_id()},
            {"eos_id", v.eos_id()}};
  std::ofstream(file) << j.dump(2) << '\n';
}

Vocabulary read_vocabulary(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw std::runtime_error("cannot read " + file.string());
  json j = json::parse(is);
  return Vocabulary(j.at("tokens").get<std::vector<std::string>>(), j.at("blank_id").get<int>(),
                    j.at("bos_id").get<int>(), j.at("eos_id").get<int>());
}

void write_dataset(const Dataset& d, const fs::path& dir, const SynthSpec* spec) {
  fs::create_directories(dir / "feats");
  write_vocabulary(d.vocab, dir / "vocab.json");
  if (spec != nullptr) {
    json s = {{"vocab_size", spec->vocab_size},
              {"successors", spec->successors},
              {"min_tokens", spec->min_tokens},
              {"max_tokens", spec->max_tokens},
              {"min_frames_per_token", spec->min_frames_per_token},
              {"max_frames_per_token", spec->max_frames_per_token},
              {"feat_dim", spec->feat_dim},
              {"noise", spec->noise},
              {"prototype_scale", spec->prototype_scale},
              {"utterances", spec->utterances},
              {"seed", spec->seed}};
    std::ofstream(dir / "synth.json") << s.dump(2) << '\n';
  }
  const std::pair<const char*, const std::vector<Utterance>*> splits[] = {
      {"train", &d.train}, {"dev", &d.dev}, {"test", &d.test}};
  for (const auto& [name, utts] : splits) {
    std::ofstream manifest(dir / (std::string(name) + ".jsonl"));
    for (const Utterance& u : *utts) {
      const std::string rel = "feats/" + u.id + ".f32";
      write_features(u.features.frames, dir / rel);
      json line = {{"id", u.id}, {"feats", rel}, {"tokens", d.vocab.decode(u.reference)}};
      manifest << line.dump() << '\n';
    }
  }
}

std::vector<Utterance> read_manifest(const fs::path& manifest, const Vocabulary& v) {
  std::ifstream is(manifest);
  if (!is) throw std::runtime_error("cannot read " + manifest.string());
  std::vector<Utterance> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Utterance u;
    u.id = j.at("id").get<std::string>();
    fs::path feats = j.at("feats").get<std::string>();
    if (feats.is_relative()) feats = manifest.parent_path() / feats;
    u.features.frames = read_features(feats);
    u.reference = v.encode(j.at("tokens").get<std::string>());
    v.validate(u.reference);
    if (u.reference.empty()) throw ContractError("utterance " + u.id + " has an empty reference");
    out.push_back(std::move(u));
  }
  return out;
}

Dataset read_dataset(const fs::path& dir) {
  Dataset d;
  d.vocab = read_vocabulary(dir / "vocab.json");
  d.train = read_manifest(dir / "train.jsonl", d.vocab);
  d.dev = read_manifest(dir / "dev.jsonl", d.vocab);
  if (fs::exists(dir / "test.jsonl")) d.test = read_manifest(dir / "test.jsonl", d.vocab);
  return d;
}

// ---- scoring ------------------------------------------------------------------

EditOps edit_distance(std::span<const int> hyp, std::span<const int> ref) {
  const std::size_t n = hyp.size(), m = ref.size();
  std::vector<std::size_t> cost((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return cost[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  EditOps ops;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        at(i, j) == at(i - 1, j - 1) + (hyp[i - 1] == ref[j - 1] ? 0 : 1)) {
      if (hyp[i - 1] != ref[j - 1]) ++ops.substitutions;
      --i;
      --j;
    } else if (j > 0 && at(i, j) == at(i, j - 1) + 1) {
      ++ops.deletions;
      --j;
    } else {
      ++ops.insertions;
      --i;
    }
  }
  return ops;
}

double error_rate(std::span<const ScoredPair> results) {
  std::size_t errors = 0, words = 0;
  for (const ScoredPair& r : results) {
    errors += edit_distance(r.hypothesis, r.reference).total();
    words += r.reference.size();
  }
  if (words == 0) throw ContractError("error_rate: reference corpus is empty");
  return static_cast<double>(errors) / static_cast<double>(words);
}

}  // namespace tss
