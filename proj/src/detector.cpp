#include "aunet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aunet/error.hpp"
#include "aunet/geometry.hpp"

namespace aunet {

namespace {

double stable_softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

void DetectorConfig::validate() const {
  if (tower_width < 1) throw ConfigError("head tower width must be positive");
  if (!(prior_prob > 0.0 && prior_prob < 1.0)) throw ConfigError("head prior must lie in (0, 1)");
}

DetectionHead::DetectionHead(ParameterStore& store, const std::vector<int>& channels,
                             const DetectorConfig& config, Rng& rng, const std::string& prefix) {
  config.validate();
  for (std::size_t l = 0; l < channels.size(); ++l) {
    const std::string lp = prefix + ".level" + std::to_string(l);
    Level level;
    level.tower = ConvNormAct::create(store, lp + ".tower", channels[l], config.tower_width, 3, 1,
                                      config.groups, rng);
    level.objectness = Conv2d::create(store, lp + ".obj", config.tower_width, 1, 1, 1, true, rng);
    level.regression = Conv2d::create(store, lp + ".reg", config.tower_width, 4, 1, 1, true, rng);
    init_normal(store.at(lp + ".obj.weight"), 0.01, rng);
    init_normal(store.at(lp + ".reg.weight"), 0.01, rng);
    init_constant(store.at(lp + ".obj.bias"), -std::log((1.0 - config.prior_prob) / config.prior_prob));
    levels_.push_back(level);
  }
}

RawPrediction DetectionHead::predict(const FeaturePyramid& fused) const {
  if (fused.size() != levels_.size())
    throw ShapeError("head expects " + std::to_string(levels_.size()) + " levels, got " +
                     std::to_string(fused.size()));
  RawPrediction out;
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    const ag::Var t = levels_[l].tower(fused[l].data);
    out.push_back({levels_[l].objectness(t), ag::softplus(levels_[l].regression(t)), fused[l].stride});
  }
  return out;
}

std::vector<LevelGeometry> pyramid_geometry(int image_h, int image_w) {
  std::vector<LevelGeometry> g;
  for (int s : kLevelStrides) g.push_back({image_h / s, image_w / s, s});
  return g;
}

std::vector<LevelGeometry> geometry_of(const RawPrediction& preds) {
  std::vector<LevelGeometry> g;
  for (const LevelPrediction& p : preds) g.push_back({p.height(), p.width(), p.stride});
  return g;
}

std::size_t LevelTargets::positives() const {
  return static_cast<std::size_t>(std::count_if(box_index.begin(), box_index.end(), [](int i) { return i >= 0; }));
}

std::array<double, 4> encode_box(const BoundingBox& box, double cx, double cy, int stride) {
  const double s = stride;
  return {(cx - box.x0()) / s, (cy - box.y0()) / s, (box.x1() - cx) / s, (box.y1() - cy) / s};
}

BoundingBox decode_box(const std::array<double, 4>& ltrb, double cx, double cy, int stride) {
  const double s = stride;
  return BoundingBox::from_corners(cx - ltrb[0] * s, cy - ltrb[1] * s, cx + ltrb[2] * s,
                                   cy + ltrb[3] * s);
}

std::vector<LevelTargets> assign_targets(const std::vector<BoundingBox>& boxes,
                                         const std::vector<LevelGeometry>& geometry) {
  std::vector<LevelTargets> out;
  for (std::size_t l = 0; l < geometry.size(); ++l) {
    const LevelGeometry& g = geometry[l];
    LevelTargets t;
    t.geometry = g;
    const std::size_t cells = static_cast<std::size_t>(g.height) * g.width;
    t.box_index.assign(cells, -1);
    t.ltrb.assign(cells, {0.0, 0.0, 0.0, 0.0});
    const double lo = kLevelSizeRanges[std::min<std::size_t>(l, kLevelCount - 1)][0];
    const double hi = kLevelSizeRanges[std::min<std::size_t>(l, kLevelCount - 1)][1];
    for (int y = 0; y < g.height; ++y) {
      const double cy = cell_center(y, g.stride);
      for (int x = 0; x < g.width; ++x) {
        const double cx = cell_center(x, g.stride);
        int best = -1;
        for (std::size_t b = 0; b < boxes.size(); ++b) {
          const BoundingBox& bx = boxes[b];
          const double side = std::max(bx.w, bx.h);
          if (side < lo || side >= hi) continue;
          if (!(cx > bx.x0() && cx < bx.x1() && cy > bx.y0() && cy < bx.y1())) continue;
          if (best < 0 || bx.area() < boxes[static_cast<std::size_t>(best)].area()) best = static_cast<int>(b);
        }
        const std::size_t i = static_cast<std::size_t>(y) * g.width + x;
        t.box_index[i] = best;
        if (best >= 0) t.ltrb[i] = encode_box(boxes[static_cast<std::size_t>(best)], cx, cy, g.stride);
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

double ltrb_iou(const std::array<double, 4>& p, const std::array<double, 4>& t) {
  const double iw = std::min(p[0], t[0]) + std::min(p[2], t[2]);
  const double ih = std::min(p[1], t[1]) + std::min(p[3], t[3]);
  const double inter = std::max(0.0, iw) * std::max(0.0, ih);
  const double uni = (p[0] + p[2]) * (p[1] + p[3]) + (t[0] + t[2]) * (t[1] + t[3]) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double positive_weight(std::size_t cells, std::size_t positives) {
  if (positives == 0) return 100.0;
  return std::clamp(static_cast<double>(cells) / static_cast<double>(positives), 1.0, 100.0);
}

DetectionLoss detection_loss(const RawPrediction& preds, const std::vector<LevelTargets>& targets) {
  if (preds.empty() || preds.size() != targets.size())
    throw ShapeError("detection loss: " + std::to_string(preds.size()) + " prediction levels vs " +
                     std::to_string(targets.size()) + " target levels");
  ag::Tape& tape = preds[0].objectness.tape();

  std::size_t cells = 0, positives = 0;
  for (std::size_t l = 0; l < preds.size(); ++l) {
    const std::size_t n = static_cast<std::size_t>(preds[l].height()) * preds[l].width();
    if (targets[l].box_index.size() != n) throw ShapeError("detection loss: target grid mismatch");
    cells += n;
    positives += targets[l].positives();
  }
  const double wpos = positive_weight(cells, positives);

  // Objectness: the per-cell derivatives are stored for the backward pass.
  double cls = 0.0;
  bool cls_rg = false;
  std::vector<int> obj_ids;
  std::vector<std::vector<double>> obj_grads;
  for (std::size_t l = 0; l < preds.size(); ++l) {
    const ag::Var z = preds[l].objectness;
    const double* zd = z.data();
    std::vector<double> g(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (targets[l].box_index[i] >= 0) {
        cls += wpos * stable_softplus(-zd[i]);
        g[i] = wpos * (sigmoid(zd[i]) - 1.0);
      } else {
        cls += stable_softplus(zd[i]);
        g[i] = sigmoid(zd[i]);
      }
      g[i] /= static_cast<double>(cells);
    }
    obj_ids.push_back(z.id());
    obj_grads.push_back(std::move(g));
    cls_rg = cls_rg || z.requires_grad();
  }
  cls /= static_cast<double>(cells);
  ag::Var cls_var = tape.record({1}, {cls}, cls_rg, [obj_ids, obj_grads](ag::Tape& t, int self) {
    const double g = t.grad(self)[0];
    for (std::size_t l = 0; l < obj_ids.size(); ++l) {
      double* d = t.grad(obj_ids[l]);
      for (std::size_t i = 0; i < obj_grads[l].size(); ++i) d[i] += g * obj_grads[l][i];
    }
  });

  // Localization: 1 - IoU on positives, with the analytic IoU derivative.
  double loc = 0.0;
  bool loc_rg = false;
  std::vector<int> reg_ids;
  std::vector<std::vector<double>> reg_grads;
  const double inv_pos = positives ? 1.0 / static_cast<double>(positives) : 0.0;
  for (std::size_t l = 0; l < preds.size(); ++l) {
    const ag::Var r = preds[l].regression;
    const std::size_t n = static_cast<std::size_t>(preds[l].height()) * preds[l].width();
    const double* rd = r.data();
    std::vector<double> g(r.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (targets[l].box_index[i] < 0) continue;
      const std::array<double, 4> p = {rd[i], rd[n + i], rd[2 * n + i], rd[3 * n + i]};
      const std::array<double, 4>& t = targets[l].ltrb[i];
      const double iw = std::min(p[0], t[0]) + std::min(p[2], t[2]);
      const double ih = std::min(p[1], t[1]) + std::min(p[3], t[3]);
      const double pw = p[0] + p[2], ph = p[1] + p[3];
      const double inter = iw * ih;
      const double uni = pw * ph + (t[0] + t[2]) * (t[1] + t[3]) - inter;
      loc += 1.0 - inter / uni;
      for (int k = 0; k < 4; ++k) {
        const bool horizontal = (k % 2 == 0);
        const double di = (p[k] < t[k]) ? (horizontal ? ih : iw) : 0.0;
        const double dp = horizontal ? ph : pw;
        const double du = dp - di;
        const double diou = (di * uni - inter * du) / (uni * uni);
        g[static_cast<std::size_t>(k) * n + i] = -diou * inv_pos;
      }
    }
    reg_ids.push_back(r.id());
    reg_grads.push_back(std::move(g));
    loc_rg = loc_rg || r.requires_grad();
  }
  loc *= inv_pos;
  ag::Var loc_var = tape.record({1}, {loc}, loc_rg && positives > 0,
                                [reg_ids, reg_grads](ag::Tape& t, int self) {
                                  const double g = t.grad(self)[0];
                                  for (std::size_t l = 0; l < reg_ids.size(); ++l) {
                                    double* d = t.grad(reg_ids[l]);
                                    for (std::size_t i = 0; i < reg_grads[l].size(); ++i)
                                      d[i] += g * reg_grads[l][i];
                                  }
                                });
  return {cls_var, loc_var};
}

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw ConfigError("softplus inverse needs a positive value");
  return std::log(std::expm1(y));
}

LossWeights LossWeights::create(ParameterStore& store, double init, double lr_scale,
                                const std::string& prefix) {
  LossWeights w;
  Parameter& a = store.create(prefix + ".lambda1_raw", {1}, lr_scale);
  Parameter& b = store.create(prefix + ".lambda2_raw", {1}, lr_scale);
  init_constant(a, softplus_inverse(init));
  init_constant(b, softplus_inverse(init));
  w.raw1 = &a;
  w.raw2 = &b;
  return w;
}

double LossWeights::lambda1() const { return stable_softplus(raw1->value[0]); }
double LossWeights::lambda2() const { return stable_softplus(raw2->value[0]); }

ag::Var total_loss(ag::Var det, ag::Var avail, ag::Var contrast, const LossWeights& weights) {
  ag::Tape& t = det.tape();
  const ag::Var l1 = ag::softplus(t.param(*weights.raw1));
  const ag::Var l2 = ag::softplus(t.param(*weights.raw2));
  return ag::add(det, ag::add(ag::mul_scalar(avail, l1), ag::mul_scalar(contrast, l2)));
}

double total_loss(double det, double avail, double contrast, double lambda1, double lambda2) {
  return det + lambda1 * avail + lambda2 * contrast;
}

std::vector<Detection> decode(const RawPrediction& preds, double conf_thresh, int image_h,
                              int image_w) {
  if (!(conf_thresh >= 0.0 && conf_thresh < 1.0)) throw ConfigError("confidence threshold must lie in [0, 1)");
  std::vector<Detection> out;
  for (const LevelPrediction& p : preds) {
    const int h = p.height(), w = p.width();
    const std::size_t n = static_cast<std::size_t>(h) * w;
    const double* obj = p.objectness.data();
    const double* reg = p.regression.data();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        const double score = sigmoid(obj[i]);
        if (!(score > conf_thresh)) continue;
        const double cx = cell_center(x, p.stride), cy = cell_center(y, p.stride);
        const BoundingBox raw = decode_box({reg[i], reg[n + i], reg[2 * n + i], reg[3 * n + i]}, cx, cy, p.stride);
        const double x0 = std::clamp(raw.x0(), 0.0, static_cast<double>(image_w));
        const double y0 = std::clamp(raw.y0(), 0.0, static_cast<double>(image_h));
        const double x1 = std::clamp(raw.x1(), 0.0, static_cast<double>(image_w));
        const double y1 = std::clamp(raw.y1(), 0.0, static_cast<double>(image_h));
        if (x1 <= x0 || y1 <= y0) continue;
        out.push_back({BoundingBox::from_corners(x0, y0, x1, y1), score});
      }
    }
  }
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh <= 1.0)) throw ConfigError("NMS IoU threshold must lie in (0, 1]");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    bool suppressed = false;
    for (const Detection& k : kept)
      if (iou(dets[i].box, k.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

}  // namespace aunet
