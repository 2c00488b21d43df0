#pragma once

// Binary checkpoint: magic, format version, embedded run config text, step,
// parameters and optimizer state as named arrays, trailing FNV-1a checksum.
// Little-endian doubles.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "aunet/config.hpp"
#include "aunet/model.hpp"
#include "aunet/optimizer.hpp"

namespace aunet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::uint64_t step = 0;  // completed optimizer steps
  std::vector<NamedArray> params;
  std::vector<NamedArray> optimizer;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
// Throws ParseError on a bad magic, truncation or checksum mismatch and
// VersionError on an unsupported format version.
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// IoError if the file cannot be read.
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint capture_checkpoint(const RunConfig& config, const AuNet& model, const Optimizer* optimizer,
                              std::uint64_t step);

// Copies parameters by name; every model parameter must be present with a
// matching shape (IntegrityError otherwise).
void restore_parameters(const Checkpoint& ckpt, AuNet& model);

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<AuNet> model;
  Checkpoint checkpoint;
};

// Rebuilds the model from the embedded config and restores its parameters.
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace aunet
