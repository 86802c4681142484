#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "promptrestore/optim.hpp"

namespace promptrestore {

// On-disk layout: a JSON manifest at `path` and the tensor data at
// `path.bin`, raw little-endian float32 values in manifest order.
inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "promptrestore-checkpoint";

enum class CheckpointErrorKind { io, malformed, version_mismatch, truncated_blob, unknown_tensor, missing_tensor, shape_mismatch };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct TensorRecord {
  std::string name;
  std::vector<int64_t> shape;
  uint64_t offset = 0;  // bytes into the blob
  uint64_t nbytes = 0;
};

struct CheckpointManifest {
  int version = kCheckpointVersion;
  std::string kind;         // "backbone" | "textenc" | ...
  nlohmann::json config;    // snapshot of the producing configuration
  int64_t step = 0;
  std::string rng_state;
  nlohmann::json extra;     // kind-specific payload
  std::vector<TensorRecord> tensors;

  nlohmann::json to_json() const;
  static CheckpointManifest from_json(const nlohmann::json& j);
};

struct Checkpoint {
  CheckpointManifest manifest;
  std::map<std::string, torch::Tensor> tensors;
};

std::filesystem::path blob_path(const std::filesystem::path& manifest_path);

/// Writes manifest + blob. Tensor names must be unique.
void write_checkpoint(const std::filesystem::path& path, CheckpointManifest manifest, const NamedTensors& tensors);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint tensors whose names start with `prefix` into `targets`.
/// Every target must be present and every prefixed checkpoint tensor must
/// have a target; otherwise missing/unknown-tensor errors.
void assign_tensors(const Checkpoint& ckpt, const NamedTensors& targets, const std::string& prefix = "");

/// Tensors of `ckpt` under `prefix`, with the prefix removed.
NamedTensors tensors_with_prefix(const Checkpoint& ckpt, const std::string& prefix);

}  // namespace promptrestore
