#pragma once

// Modality validation and refinement: the availability router with its
// cross-entropy loss, and the semantic refinement path (frozen encoder ->
// trainable 1x1 head -> weighting map) with its dice-style map loss.

#include <array>
#include <memory>
#include <span>
#include <vector>

#include "aunet/autograd.hpp"
#include "aunet/backbone.hpp"
#include "aunet/datagen.hpp"
#include "aunet/layers.hpp"

namespace aunet {

inline constexpr double kDecisionThreshold = 0.5;
inline constexpr double kProbClamp = 1e-7;
inline constexpr int kRouterFeaturesPerModality = 12;

struct RouterOutput {
  std::array<double, 3> probs{};  // (R, N, T)
  AvailabilityVector decisions;
};

// decisions[m] = probs[m] >= 0.5
AvailabilityVector threshold_decisions(const std::array<double, 3>& probs);

// Per modality, per channel: mean, std, max, fraction of non-zero pixels.
// 12 values per modality, modalities in (R, N, T) order.
std::vector<double> router_features(const ModalSample& sample);

// Two-layer perceptron over router_features with sigmoid outputs.
class Router {
 public:
  Router(ParameterStore& store, int hidden, Rng& rng, const std::string& prefix = "umvr.router");

  // [3] probabilities on the tape.
  ag::Var probs(ag::Tape& tape, const ModalSample& sample) const;
  ag::Var probs_from_features(ag::Tape& tape, std::span<const double> features) const;
  RouterOutput route(const ModalSample& sample) const;

 private:
  Linear hidden_;
  Linear out_;
};

// Sum over modalities of binary cross-entropy, probabilities clamped to
// [1e-7, 1 - 1e-7].
ag::Var availability_loss(ag::Var probs, AvailabilityVector truth);
double availability_loss(const std::array<double, 3>& probs, AvailabilityVector truth);

// Channel-major [C, h, w] grid of semantic features.
struct SemanticGrid {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;
};

// Frozen image encoder supplying semantic priors to the refinement head.
class SemanticEncoder {
 public:
  virtual ~SemanticEncoder() = default;
  virtual SemanticGrid encode(const Image& image) const = 0;
  virtual int channels() const = 0;
};

// Default encoder: three stride-2 3x3 conv + ReLU layers with fixed random
// weights, concatenated with the stride-8 average-pooled input intensities.
class RandomConvEncoder : public SemanticEncoder {
 public:
  explicit RandomConvEncoder(std::uint64_t seed, int width = 16);
  SemanticGrid encode(const Image& image) const override;
  int channels() const override { return width_ + 3; }

 private:
  int width_;
  ParameterStore frozen_;
  std::array<Conv2d, 3> convs_;
};

// Resizes a semantic grid to h x w (average pooling down, bilinear up).
ag::Var resize_semantic(ag::Tape& tape, const SemanticGrid& grid, int h, int w);

// sigmoid(conv1x1(conv1x1(grid))): one head per modality per pyramid level.
class CsrHead {
 public:
  CsrHead(ParameterStore& store, int in_channels, int hidden, Rng& rng, const std::string& prefix);

  // [1, h, w] weighting map in (0, 1).
  ag::Var weight_map(ag::Tape& tape, const SemanticGrid& grid, int h, int w) const;
  ag::Var weight_map(ag::Var semantic) const;

  const Conv2d& first() const { return first_; }
  const Conv2d& second() const { return second_; }

 private:
  Conv2d first_;
  Conv2d second_;
};

// F + F * M with M broadcast over channels.
ag::Var refine(ag::Var features, ag::Var weight_map);

// 1 - (2 sum(S t) + 1) / (sum S + sum t + 1) for one sample; S is [h, w] or
// [1, h, w].
ag::Var contrastive_loss(ag::Var map, const DistributionMap& truth);
double contrastive_loss(std::span<const double> map, const DistributionMap& truth);

// Learnable per-modality weights on the map loss, initialized to 1.
struct ContrastiveWeights {
  std::array<const Parameter*, 3> weights{};  // (R, N, T)

  static ContrastiveWeights create(ParameterStore& store, double init, double lr_scale,
                                   const std::string& prefix = "umvr.contrastive_weight");
};

// sum_m v[m] * W_m * mean_levels(L_m); modalities with v[m] = 0 contribute
// nothing. `per_level[m]` holds one loss per pyramid level.
ag::Var total_contrastive_loss(ag::Tape& tape, const std::array<std::vector<ag::Var>, 3>& per_level,
                               const ContrastiveWeights& weights, AvailabilityVector v);
double total_contrastive_loss(const std::array<double, 3>& losses, const std::array<double, 3>& weights,
                              AvailabilityVector v);

}  // namespace aunet
