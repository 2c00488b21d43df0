#pragma once

// Full network: router, shared backbone, per-modality refinement, interaction
// and detection head over one parameter store.

#include <array>
#include <memory>
#include <vector>

#include "aunet/backbone.hpp"
#include "aunet/detector.hpp"
#include "aunet/mai.hpp"
#include "aunet/umvr.hpp"

namespace aunet {

struct ModelConfig {
  BackboneConfig backbone;
  MaiConfig mai;
  DetectorConfig head;
  int router_hidden = 32;
  int csr_hidden = 16;
  int encoder_width = 16;
  std::uint64_t encoder_seed = 7;
  double lambda_init = 0.5;
  double contrastive_weight_init = 1.0;
  double loss_weight_lr_scale = 0.01;

  void validate() const;
};

struct Prediction {
  RouterOutput route;
  AvailabilityVector gates;  // what the fusion actually used
  std::vector<Detection> detections;
};

class AuNet {
 public:
  AuNet(const ModelConfig& config, std::uint64_t init_seed);

  AuNet(const AuNet&) = delete;
  AuNet& operator=(const AuNet&) = delete;

  // Records the full objective for one sample on `tape`, gating with the
  // sample's true availability. Fills `bundle` with the scalar parts.
  ag::Var training_loss(ag::Tape& tape, const ModalSample& sample, LossBundle* bundle = nullptr) const;

  // Router-gated inference. Falls back to the most probable modality when the
  // router rejects all three.
  Prediction infer(const ModalSample& sample, double conf_thresh = kDefaultConfThresh,
                   double nms_iou = kDefaultNmsIou, std::vector<AttentionRecord>* dump = nullptr) const;

  // Raw head outputs under fixed gates, on the caller's tape.
  RawPrediction forward(ag::Tape& tape, const ModalSample& sample, AvailabilityVector gates,
                        std::vector<AttentionRecord>* dump = nullptr) const;

  // Refinement maps of one modality, one [1, h, w] map per level.
  std::vector<ag::Var> weight_maps(ag::Tape& tape, const ModalSample& sample, Modality m) const;

  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const ModelConfig& config() const { return config_; }
  const Router& router() const { return *router_; }
  const LossWeights& loss_weights() const { return loss_weights_; }
  const ContrastiveWeights& contrastive_weights() const { return contrastive_weights_; }

 private:
  struct Refined {
    FeaturePyramid features;
    std::vector<ag::Var> maps;
  };
  Refined refine_modality(ag::Tape& tape, const ModalSample& sample, Modality m) const;
  std::vector<int> level_widths() const;

  ModelConfig config_;
  ParameterStore store_;
  std::unique_ptr<Router> router_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<RandomConvEncoder> encoder_;
  std::vector<CsrHead> csr_;  // [modality * levels + level]
  std::unique_ptr<Mai> mai_;
  std::unique_ptr<DetectionHead> head_;
  ContrastiveWeights contrastive_weights_;
  LossWeights loss_weights_;
};

}  // namespace aunet
