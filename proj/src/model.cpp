#include "aunet/model.hpp"

#include "aunet/error.hpp"
#include "aunet/rng.hpp"

namespace aunet {

void ModelConfig::validate() const {
  backbone.validate();
  mai.validate();
  head.validate();
  if (router_hidden < 1) throw ConfigError("router hidden width must be positive");
  if (csr_hidden < 1) throw ConfigError("refinement hidden width must be positive");
  if (encoder_width < 1) throw ConfigError("encoder width must be positive");
  if (!(lambda_init > 0.0)) throw ConfigError("lambda init must be positive");
  if (!(loss_weight_lr_scale >= 0.0)) throw ConfigError("loss weight lr scale must be nonnegative");
}

AuNet::AuNet(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(init_seed, 0x1417));
  router_ = std::make_unique<Router>(store_, config_.router_hidden, rng);
  backbone_ = std::make_unique<Backbone>(store_, config_.backbone, rng);
  encoder_ = std::make_unique<RandomConvEncoder>(config_.encoder_seed, config_.encoder_width);
  for (Modality m : kModalities)
    for (int l = 0; l < kLevelCount; ++l)
      csr_.emplace_back(store_, encoder_->channels(), config_.csr_hidden, rng,
                        std::string("umvr.csr.") + modality_letter(m) + ".level" + std::to_string(l));
  MaiConfig mc = config_.mai;
  mc.groups = config_.backbone.groups;
  mai_ = std::make_unique<Mai>(store_, mc, level_widths(), rng);
  DetectorConfig hc = config_.head;
  head_ = std::make_unique<DetectionHead>(store_, level_widths(), hc, rng);
  contrastive_weights_ = ContrastiveWeights::create(store_, config_.contrastive_weight_init,
                                                    config_.loss_weight_lr_scale);
  loss_weights_ = LossWeights::create(store_, config_.lambda_init, config_.loss_weight_lr_scale);
}

std::vector<int> AuNet::level_widths() const { return config_.backbone.widths; }

AuNet::Refined AuNet::refine_modality(ag::Tape& tape, const ModalSample& sample, Modality m) const {
  const Image& image = sample.image(m);
  Refined r;
  r.features = backbone_->extract(tape, image);
  const SemanticGrid grid = encoder_->encode(image);
  for (int l = 0; l < kLevelCount; ++l) {
    FeatureMap& f = r.features[static_cast<std::size_t>(l)];
    const CsrHead& head = csr_[index_of(m) * kLevelCount + static_cast<std::size_t>(l)];
    const ag::Var map = head.weight_map(tape, grid, f.height(), f.width());
    f.data = refine(f.data, map);
    r.maps.push_back(map);
  }
  return r;
}

std::vector<ag::Var> AuNet::weight_maps(ag::Tape& tape, const ModalSample& sample, Modality m) const {
  return refine_modality(tape, sample, m).maps;
}

RawPrediction AuNet::forward(ag::Tape& tape, const ModalSample& sample, AvailabilityVector gates,
                             std::vector<AttentionRecord>* dump) const {
  if (!gates.any()) throw NoModalityError("no modality selected for sample " + sample.id);
  std::array<FeaturePyramid, 3> pyramids;
  for (Modality m : kModalities)
    if (gates[m]) pyramids[index_of(m)] = refine_modality(tape, sample, m).features;
  return head_->predict(mai_->forward(tape, pyramids, gates, dump));
}

ag::Var AuNet::training_loss(ag::Tape& tape, const ModalSample& sample, LossBundle* bundle) const {
  const AvailabilityVector v = sample.availability;
  if (!v.any()) throw NoModalityError("sample " + sample.id + " has no available modality");

  const ag::Var avail = availability_loss(router_->probs(tape, sample), v);

  std::array<FeaturePyramid, 3> pyramids;
  std::array<std::vector<ag::Var>, 3> map_losses;
  for (Modality m : kModalities) {
    if (!v[m]) continue;
    Refined r = refine_modality(tape, sample, m);
    for (int l = 0; l < kLevelCount; ++l) {
      const FeatureMap& f = r.features[static_cast<std::size_t>(l)];
      std::vector<BoundingBox> frame;
      for (const BoundingBox& b : sample.boxes) frame.push_back(to_feature_frame(b, f.stride));
      const DistributionMap truth = render_distribution_map(frame, f.height(), f.width());
      map_losses[index_of(m)].push_back(contrastive_loss(r.maps[static_cast<std::size_t>(l)], truth));
    }
    pyramids[index_of(m)] = std::move(r.features);
  }
  const ag::Var contrast = total_contrastive_loss(tape, map_losses, contrastive_weights_, v);

  const RawPrediction preds = head_->predict(mai_->forward(tape, pyramids, v));
  const DetectionLoss det = detection_loss(preds, assign_targets(sample.boxes, geometry_of(preds)));
  const ag::Var det_sum = ag::add(det.cls, det.loc);
  const ag::Var total = total_loss(det_sum, avail, contrast, loss_weights_);

  if (bundle) {
    bundle->cls = det.cls.item();
    bundle->loc = det.loc.item();
    bundle->det = det_sum.item();
    bundle->avail = avail.item();
    bundle->contrast = contrast.item();
    bundle->lambda1 = loss_weights_.lambda1();
    bundle->lambda2 = loss_weights_.lambda2();
    bundle->total = total.item();
  }
  return total;
}

Prediction AuNet::infer(const ModalSample& sample, double conf_thresh, double nms_iou,
                        std::vector<AttentionRecord>* dump) const {
  Prediction p;
  p.route = router_->route(sample);
  p.gates = p.route.decisions;
  if (!p.gates.any()) {
    std::size_t best = 0;
    for (std::size_t m = 1; m < 3; ++m)
      if (p.route.probs[m] > p.route.probs[best]) best = m;
    p.gates.set(kModalities[best], true);
  }
  ag::Tape tape;
  const RawPrediction raw = forward(tape, sample, p.gates, dump);
  p.detections = nms(decode(raw, conf_thresh, sample.height(), sample.width()), nms_iou);
  return p;
}

}  // namespace aunet
