#include "tss/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace tss {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'T', 'S', 'S', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void Put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T Get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw CheckpointError("checkpoint truncated");
  }
  return v;
}

std::string GetBytes(std::istream& is, std::uint64_t n) {
  if (n > (1ull << 32)) throw CheckpointError("checkpoint field length implausible");
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw CheckpointError("checkpoint truncated");
  }
  return s;
}

void Load(const Checkpoint& c, const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    const NamedArray* a = c.find(p->name);
    if (a == nullptr) throw CheckpointError("checkpoint lacks parameter " + p->name);
    if (a->value.shape() != p->value.shape()) {
      throw CheckpointError("checkpoint parameter " + p->name + " has shape " +
                            shape_string(a->value.shape()) + ", expected " +
                            shape_string(p->value.shape()));
    }
    p->value = a->value;
    p->grad = Array(p->value.shape());
  }
}

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const NamedArray& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

void write_checkpoint(const Checkpoint& c, const fs::path& file) {
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, sizeof(kMagic));
  Put<std::uint32_t>(os, kCheckpointVersion);
  Put<std::uint32_t>(os, static_cast<std::uint32_t>(c.kind));
  const std::string meta = c.meta.dump();
  Put<std::uint64_t>(os, meta.size());
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  Put<std::uint32_t>(os, static_cast<std::uint32_t>(c.arrays.size()));
  for (const NamedArray& a : c.arrays) {
    Put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    Put<std::uint8_t>(os, a.flags);
    Put<std::uint32_t>(os, static_cast<std::uint32_t>(a.value.rank()));
    for (std::size_t d : a.value.shape()) Put<std::uint64_t>(os, d);
    for (double v : a.value.data()) Put<double>(os, v);
  }
  // Write to a sibling file first so a crash never leaves a torn checkpoint.
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    const std::string bytes = os.str();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  fs::rename(tmp, file);
}

Checkpoint read_checkpoint(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw CheckpointError("cannot read " + file.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw CheckpointError(file.string() + " is not a checkpoint");
  }
  const auto version = Get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  const auto kind = Get<std::uint32_t>(is);
  if (kind != 1 && kind != 2) throw CheckpointError("unknown checkpoint kind");
  c.kind = static_cast<CheckpointKind>(kind);
  c.meta = json::parse(GetBytes(is, Get<std::uint64_t>(is)));
  const auto count = Get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = GetBytes(is, Get<std::uint32_t>(is));
    a.flags = Get<std::uint8_t>(is);
    const auto rank = Get<std::uint32_t>(is);
    if (rank > 8) throw CheckpointError("implausible rank for " + a.name);
    Shape shape(rank);
    for (auto& d : shape) d = Get<std::uint64_t>(is);
    std::vector<double> data(shape_size(shape));
    if (!data.empty() &&
        !is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(double)))) {
      throw CheckpointError("checkpoint truncated in " + a.name);
    }
    a.value = Array(shape, std::move(data));
    c.arrays.push_back(std::move(a));
  }
  return c;
}

std::string sha256_file(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw CheckpointError("cannot read " + file.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buf;
  while (is) {
    is.read(buf.data(), buf.size());
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

json model_config_to_json(const ModelConfig& c) {
  return {{"feat_dim", c.feat_dim},         {"downsample", c.downsample},
          {"conv_kernel", c.conv_kernel},   {"conv_channels", c.conv_channels},
          {"enc_hidden", c.enc_hidden},     {"enc_layers", c.enc_layers},
          {"pred_embed", c.pred_embed},     {"pred_hidden", c.pred_hidden},
          {"pred_dim", c.pred_dim},         {"joint_hidden", c.joint_hidden},
          {"elm_embed", c.elm_embed},       {"elm_hidden", c.elm_hidden}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.feat_dim = j.at("feat_dim");
  c.downsample = j.at("downsample");
  c.conv_kernel = j.at("conv_kernel");
  c.conv_channels = j.at("conv_channels");
  c.enc_hidden = j.at("enc_hidden");
  c.enc_layers = j.at("enc_layers");
  c.pred_embed = j.at("pred_embed");
  c.pred_hidden = j.at("pred_hidden");
  c.pred_dim = j.at("pred_dim");
  c.joint_hidden = j.at("joint_hidden");
  c.elm_embed = j.at("elm_embed");
  c.elm_hidden = j.at("elm_hidden");
  return c;
}

json vocabulary_to_json(const Vocabulary& v) {
  return {{"tokens", v.tokens()},
          {"blank_id", v.blank_id()},
          {"bos_id", v.bos_id()},
          {"eos_id", v.eos_id()}};
}

Vocabulary vocabulary_from_json(const json& j) {
  return Vocabulary(j.at("tokens").get<std::vector<std::string>>(), j.at("blank_id"),
                    j.at("bos_id"), j.at("eos_id"));
}

Checkpoint pack_model(const RnntModel& m) {
  Checkpoint c;
  c.kind = CheckpointKind::kRnnt;
  c.meta["model"] = model_config_to_json(m.config);
  c.meta["vocab"] = vocabulary_to_json(m.vocab);
  for (const Parameter* p : m.parameters()) {
    const bool aux = p == &m.ctc.weight || p == &m.ctc.bias;
    c.arrays.push_back({p->name, aux ? kFlagDiscardable : std::uint8_t{0}, p->value});
  }
  return c;
}

Checkpoint pack_model(const ElmModel& m) {
  Checkpoint c;
  c.kind = CheckpointKind::kElm;
  c.meta["model"] = model_config_to_json(m.config);
  c.meta["vocab"] = vocabulary_to_json(m.vocab);
  for (const Parameter* p : m.parameters()) c.arrays.push_back({p->name, 0, p->value});
  return c;
}

RnntModel unpack_rnnt(const Checkpoint& c) {
  if (c.kind != CheckpointKind::kRnnt) throw CheckpointError("not a transducer checkpoint");
  RnntModel m = RnntModel::create(model_config_from_json(c.meta.at("model")),
                                  vocabulary_from_json(c.meta.at("vocab")), 0);
  Load(c, m.parameters());
  return m;
}

ElmModel unpack_elm(const Checkpoint& c) {
  if (c.kind != CheckpointKind::kElm) throw CheckpointError("not an external LM checkpoint");
  ElmModel m = ElmModel::create(model_config_from_json(c.meta.at("model")),
                                vocabulary_from_json(c.meta.at("vocab")), 0);
  Load(c, m.parameters());
  return m;
}

}  // namespace tss
