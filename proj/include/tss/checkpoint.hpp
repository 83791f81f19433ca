#pragma once
// Portable binary checkpoint container. All integers little-endian.
//
//   offset  size  field
//   0       8     magic "TSSCKPT\0"
//   8       4     u32 format version (currently 1)
//   12      4     u32 kind: 1 = transducer, 2 = external LM
//   16      8     u64 meta length L
//   24      L     meta, UTF-8 JSON object with keys "model" (model config),
//                 "vocab" (tokens + special ids) and any caller extras such as
//                 "train_config" and "train_state"
//   24+L    4     u32 array count N
//   then N records:
//           4     u32 name length, followed by the name bytes
//           1     u8 flags (bit 0 discardable at inference, bit 1 optimizer state)
//           4     u32 rank R, followed by R x u64 dims
//           8*n   f64 values, row-major

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "tss/array.hpp"
#include "tss/models.hpp"

namespace tss {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint32_t { kRnnt = 1, kElm = 2 };

inline constexpr std::uint8_t kFlagDiscardable = 1;
inline constexpr std::uint8_t kFlagOptimizerState = 2;

struct NamedArray {
  std::string name;
  std::uint8_t flags = 0;
  Array value;
};

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::kRnnt;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_checkpoint(const Checkpoint& c, const std::filesystem::path& file);
Checkpoint read_checkpoint(const std::filesystem::path& file);

// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& file);

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json vocabulary_to_json(const Vocabulary& v);
Vocabulary vocabulary_from_json(const nlohmann::json& j);

// The CTC projection is stored flagged discardable.
Checkpoint pack_model(const RnntModel& m);
Checkpoint pack_model(const ElmModel& m);
RnntModel unpack_rnnt(const Checkpoint& c);
ElmModel unpack_elm(const Checkpoint& c);

}  // namespace tss
