#include "promptrestore/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <set>
#include <sstream>

namespace promptrestore {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

nlohmann::json CheckpointManifest::to_json() const {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = version;
  j["kind"] = kind;
  j["config"] = config;
  j["step"] = step;
  j["rng_state"] = rng_state;
  j["extra"] = extra;
  j["dtype"] = "float32";
  j["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) {
    j["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}, {"nbytes", t.nbytes}});
  }
  return j;
}

CheckpointManifest CheckpointManifest::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) {
      throw CheckpointError(CheckpointErrorKind::malformed, "not a checkpoint manifest");
    }
    CheckpointManifest m;
    m.version = j.at("version").get<int>();
    if (m.version != kCheckpointVersion) {
      throw CheckpointError(CheckpointErrorKind::version_mismatch,
                            "checkpoint version " + std::to_string(m.version) + ", expected " +
                                std::to_string(kCheckpointVersion));
    }
    m.kind = j.at("kind").get<std::string>();
    m.config = j.value("config", nlohmann::json::object());
    m.step = j.value("step", int64_t{0});
    m.rng_state = j.value("rng_state", std::string{});
    m.extra = j.value("extra", nlohmann::json::object());
    for (const auto& t : j.at("tensors")) {
      m.tensors.push_back({t.at("name").get<std::string>(), t.at("shape").get<std::vector<int64_t>>(),
                           t.at("offset").get<uint64_t>(), t.at("nbytes").get<uint64_t>()});
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, std::string("malformed manifest: ") + e.what());
  }
}

std::filesystem::path blob_path(const std::filesystem::path& manifest_path) {
  return std::filesystem::path(manifest_path.string() + ".bin");
}

void write_checkpoint(const std::filesystem::path& path, CheckpointManifest manifest, const NamedTensors& tensors) {
  std::set<std::string> names;
  manifest.tensors.clear();
  std::ofstream blob(blob_path(path), std::ios::binary | std::ios::trunc);
  if (!blob) throw CheckpointError(CheckpointErrorKind::io, "cannot write " + blob_path(path).string());
  uint64_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    if (!names.insert(name).second) {
      throw CheckpointError(CheckpointErrorKind::malformed, "duplicate tensor name " + name);
    }
    const auto data = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    const uint64_t nbytes = static_cast<uint64_t>(data.numel()) * sizeof(float);
    blob.write(reinterpret_cast<const char*>(data.data_ptr<float>()), static_cast<std::streamsize>(nbytes));
    manifest.tensors.push_back({name, data.sizes().vec(), offset, nbytes});
    offset += nbytes;
  }
  if (!blob) throw CheckpointError(CheckpointErrorKind::io, "write failed for " + blob_path(path).string());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointErrorKind::io, "cannot write " + path.string());
  out << manifest.to_json().dump(2) << "\n";
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, std::string("manifest is not JSON: ") + e.what());
  }
  Checkpoint ckpt{CheckpointManifest::from_json(j), {}};

  std::ifstream blob(blob_path(path), std::ios::binary | std::ios::ate);
  if (!blob) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + blob_path(path).string());
  const auto blob_size = static_cast<uint64_t>(blob.tellg());
  uint64_t expected = 0;
  for (const auto& t : ckpt.manifest.tensors) {
    int64_t numel = 1;
    for (auto d : t.shape) numel *= d;
    if (t.nbytes != static_cast<uint64_t>(numel) * sizeof(float) || t.offset != expected) {
      throw CheckpointError(CheckpointErrorKind::malformed, "inconsistent record for tensor " + t.name);
    }
    expected += t.nbytes;
  }
  if (blob_size != expected) {
    throw CheckpointError(CheckpointErrorKind::truncated_blob,
                          "blob holds " + std::to_string(blob_size) + " bytes, manifest declares " +
                              std::to_string(expected));
  }
  for (const auto& t : ckpt.manifest.tensors) {
    auto tensor = torch::empty(t.shape, torch::kFloat32);
    blob.seekg(static_cast<std::streamoff>(t.offset));
    blob.read(reinterpret_cast<char*>(tensor.data_ptr<float>()), static_cast<std::streamsize>(t.nbytes));
    if (!blob) throw CheckpointError(CheckpointErrorKind::truncated_blob, "short read for tensor " + t.name);
    ckpt.tensors.emplace(t.name, std::move(tensor));
  }
  return ckpt;
}

void assign_tensors(const Checkpoint& ckpt, const NamedTensors& targets, const std::string& prefix) {
  std::set<std::string> expected;
  for (const auto& [name, tensor] : targets) expected.insert(prefix + name);
  for (const auto& [name, tensor] : ckpt.tensors) {
    if (name.rfind(prefix, 0) == 0 && !expected.contains(name)) {
      throw CheckpointError(CheckpointErrorKind::unknown_tensor, "checkpoint tensor " + name + " has no counterpart");
    }
  }
  torch::NoGradGuard no_grad;
  for (const auto& [name, target] : targets) {
    auto it = ckpt.tensors.find(prefix + name);
    if (it == ckpt.tensors.end()) {
      throw CheckpointError(CheckpointErrorKind::missing_tensor, "checkpoint lacks tensor " + prefix + name);
    }
    if (!it->second.sizes().equals(target.sizes())) {
      throw CheckpointError(CheckpointErrorKind::shape_mismatch, "shape mismatch for tensor " + prefix + name);
    }
    auto dest = target;
    dest.copy_(it->second);
  }
}

NamedTensors tensors_with_prefix(const Checkpoint& ckpt, const std::string& prefix) {
  NamedTensors out;
  for (const auto& record : ckpt.manifest.tensors) {
    if (record.name.rfind(prefix, 0) == 0) {
      out.emplace_back(record.name.substr(prefix.size()), ckpt.tensors.at(record.name));
    }
  }
  return out;
}

}  // namespace promptrestore
