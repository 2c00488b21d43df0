#pragma once

// Run configuration as a plain `key = value` text file. Every key has a
// default; unknown or repeated keys are rejected.

#include <cstdint>
#include <filesystem>
#include <string>

#include "aunet/model.hpp"

namespace aunet {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double lr = 0.02;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 10.0;  // global L2 norm; 0 disables

  void validate() const;
};

struct RunConfig {
  std::string data_dir = "data";
  std::string output_dir = "run";
  std::uint64_t seed = 1;
  int image_size = 64;

  ModelConfig model;
  OptimizerConfig optimizer;

  int steps = 2000;
  int batch_size = 8;
  int checkpoint_interval = 500;  // 0 writes only the final checkpoint
  bool modality_dropout = true;

  double conf_thresh = kDefaultConfThresh;
  double nms_iou = kDefaultNmsIou;

  void validate() const;
};

// Token grids that fit a square image of the given side: 8, 4, 2 at 64.
std::vector<int> default_token_grids(int image_size);

RunConfig parse_config(const std::string& text);
std::string dump_config(const RunConfig& config);
RunConfig load_config_file(const std::filesystem::path& path);

// Applies one `key=value` override.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

}  // namespace aunet
