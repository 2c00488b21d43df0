#pragma once

// Anchor-free single-class detection head, target assignment, detection and
// total losses, decoding and non-maximum suppression.

#include <array>
#include <string>
#include <vector>

#include "aunet/autograd.hpp"
#include "aunet/backbone.hpp"
#include "aunet/datagen.hpp"
#include "aunet/layers.hpp"

namespace aunet {

inline constexpr double kDefaultConfThresh = 0.25;
inline constexpr double kDefaultNmsIou = 0.5;

// Longest-side ranges per level, in image pixels: [lo, hi).
inline constexpr double kLevelSizeRanges[kLevelCount][2] = {
    {0.0, 64.0}, {64.0, 128.0}, {128.0, 1e300}};

struct DetectorConfig {
  int tower_width = 32;
  int groups = 8;
  double prior_prob = 0.05;  // initial objectness

  void validate() const;
};

struct LevelPrediction {
  ag::Var objectness;  // [1, h, w] logits
  ag::Var regression;  // [4, h, w] l, t, r, b in stride units, >= 0
  int stride = 0;

  int height() const { return objectness.dim(1); }
  int width() const { return objectness.dim(2); }
};

using RawPrediction = std::vector<LevelPrediction>;

class DetectionHead {
 public:
  DetectionHead(ParameterStore& store, const std::vector<int>& channels, const DetectorConfig& config,
                Rng& rng, const std::string& prefix = "head");

  RawPrediction predict(const FeaturePyramid& fused) const;

 private:
  struct Level {
    ConvNormAct tower;
    Conv2d objectness;
    Conv2d regression;
  };
  std::vector<Level> levels_;
};

struct LevelGeometry {
  int height = 0;
  int width = 0;
  int stride = 0;
};

std::vector<LevelGeometry> pyramid_geometry(int image_h, int image_w);
std::vector<LevelGeometry> geometry_of(const RawPrediction& preds);

// Image-space center of cell (y, x) at `stride`.
inline double cell_center(int i, int stride) { return (i + 0.5) * stride; }

struct LevelTargets {
  LevelGeometry geometry;
  std::vector<int> box_index;  // per cell, -1 for negatives
  std::vector<std::array<double, 4>> ltrb;  // per cell, valid where positive

  std::size_t positives() const;
};

// A cell is positive iff its center lies strictly inside a box whose longest
// side falls in the level's range; overlaps go to the smallest-area box.
std::vector<LevelTargets> assign_targets(const std::vector<BoundingBox>& boxes,
                                         const std::vector<LevelGeometry>& geometry);

// Distances from a cell center to the box sides, in stride units.
std::array<double, 4> encode_box(const BoundingBox& box, double cx, double cy, int stride);
BoundingBox decode_box(const std::array<double, 4>& ltrb, double cx, double cy, int stride);

// IoU of two boxes sharing an anchor point, given as l, t, r, b distances.
double ltrb_iou(const std::array<double, 4>& pred, const std::array<double, 4>& target);

// Positive weight for the objectness loss: clip(cells / positives, 1, 100).
double positive_weight(std::size_t cells, std::size_t positives);

struct DetectionLoss {
  ag::Var cls;
  ag::Var loc;
};

// cls: weighted BCE over all cells divided by the cell count.
// loc: mean (1 - IoU) over positive cells, 0 without positives.
DetectionLoss detection_loss(const RawPrediction& preds, const std::vector<LevelTargets>& targets);

struct LossBundle {
  double cls = 0.0;
  double loc = 0.0;
  double det = 0.0;
  double avail = 0.0;
  double contrast = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double total = 0.0;
};

// Learnable nonnegative loss weights, lambda = softplus(raw).
struct LossWeights {
  const Parameter* raw1 = nullptr;
  const Parameter* raw2 = nullptr;

  static LossWeights create(ParameterStore& store, double init, double lr_scale,
                            const std::string& prefix = "loss");
  double lambda1() const;
  double lambda2() const;
};

double softplus_inverse(double y);

// L_D + lambda1 L_V + lambda2 L_C.
ag::Var total_loss(ag::Var det, ag::Var avail, ag::Var contrast, const LossWeights& weights);
double total_loss(double det, double avail, double contrast, double lambda1, double lambda2);

struct Detection {
  BoundingBox box;
  double score = 0.0;
};

// Cells with sigmoid(objectness) > conf_thresh, boxes clipped to the image.
std::vector<Detection> decode(const RawPrediction& preds, double conf_thresh, int image_h,
                              int image_w);

// Greedy suppression by descending score (stable for ties).
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh);

}  // namespace aunet
