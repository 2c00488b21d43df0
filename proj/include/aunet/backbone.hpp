#pragma once

#include <string>
#include <vector>

#include "aunet/autograd.hpp"
#include "aunet/datagen.hpp"
#include "aunet/layers.hpp"

namespace aunet {

inline constexpr int kLevelCount = 3;
inline constexpr int kLevelStrides[kLevelCount] = {8, 16, 32};

// One feature map of a pyramid: data is [C, H/stride, W/stride].
struct FeatureMap {
  ag::Var data;
  int stride = 0;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

// Levels at strides 8, 16, 32, in that order.
using FeaturePyramid = std::vector<FeatureMap>;

struct BackboneConfig {
  int depth = 1;                       // residual blocks per CSP stage
  std::vector<int> widths = {32, 64, 128};  // channels at strides 8, 16, 32
  int stem_width = 16;
  int groups = 8;                      // group-norm groups (clamped per layer)

  void validate() const;
};

// Image [H, W, 3] -> constant [3, H, W] on the tape.
ag::Var image_to_chw(ag::Tape& tape, const Image& image);

// Small CSP-style residual CNN. One instance (one parameter set) serves every
// modality.
class Backbone {
 public:
  Backbone(ParameterStore& store, const BackboneConfig& config, Rng& rng,
           const std::string& prefix = "backbone");

  FeaturePyramid extract(ag::Tape& tape, const Image& image) const;
  FeaturePyramid extract(ag::Var image_chw) const;

  const BackboneConfig& config() const { return config_; }
  // Number of scalar parameters owned by this backbone.
  std::size_t parameter_count() const { return parameter_count_; }

 private:
  struct ResBlock {
    ConvNormAct first;
    ConvNormAct second;  // no activation; ReLU follows the skip sum
  };
  struct CspStage {
    ConvNormAct down;   // stride-2 3x3
    ConvNormAct shortcut;
    ConvNormAct main;
    std::vector<ResBlock> blocks;
    ConvNormAct merge;
  };

  ag::Var run_stage(const CspStage& stage, ag::Var x) const;

  BackboneConfig config_;
  ConvNormAct stem1_;  // stride 2
  ConvNormAct stem2_;  // stride 4
  std::vector<CspStage> stages_;
  std::size_t parameter_count_ = 0;
};

}  // namespace aunet
