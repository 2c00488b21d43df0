#include "aunet/umvr.hpp"

#include <algorithm>
#include <cmath>

#include "aunet/error.hpp"

namespace aunet {

AvailabilityVector threshold_decisions(const std::array<double, 3>& probs) {
  return {probs[0] >= kDecisionThreshold, probs[1] >= kDecisionThreshold,
          probs[2] >= kDecisionThreshold};
}

std::vector<double> router_features(const ModalSample& sample) {
  std::vector<double> f;
  f.reserve(kNumModalities * kRouterFeaturesPerModality);
  for (Modality m : kModalities) {
    const Image& img = sample.image(m);
    const std::size_t n = static_cast<std::size_t>(img.height) * img.width;
    for (int c = 0; c < 3; ++c) {
      double s = 0.0, s2 = 0.0, mx = 0.0;
      std::size_t nonzero = 0;
      for (std::size_t p = 0; p < n; ++p) {
        const double v = img.pixels[p * 3 + c];
        s += v;
        s2 += v * v;
        mx = std::max(mx, v);
        if (v != 0.0) ++nonzero;
      }
      const double mean = n ? s / static_cast<double>(n) : 0.0;
      const double var = n ? std::max(0.0, s2 / static_cast<double>(n) - mean * mean) : 0.0;
      f.push_back(mean);
      f.push_back(std::sqrt(var));
      f.push_back(mx);
      f.push_back(n ? static_cast<double>(nonzero) / static_cast<double>(n) : 0.0);
    }
  }
  return f;
}

Router::Router(ParameterStore& store, int hidden, Rng& rng, const std::string& prefix) {
  if (hidden < 1) throw ConfigError("router hidden width must be positive");
  hidden_ = Linear::create(store, prefix + ".hidden", kNumModalities * kRouterFeaturesPerModality,
                           hidden, rng);
  out_ = Linear::create(store, prefix + ".out", hidden, kNumModalities, rng);
}

ag::Var Router::probs_from_features(ag::Tape& tape, std::span<const double> features) const {
  if (features.size() != kNumModalities * kRouterFeaturesPerModality)
    throw ShapeError("router expects " + std::to_string(kNumModalities * kRouterFeaturesPerModality) +
                     " features");
  ag::Var x = tape.constant({1, static_cast<int>(features.size())},
                            std::vector<double>(features.begin(), features.end()));
  ag::Var h = ag::relu(hidden_(x));
  return ag::reshape(ag::sigmoid(out_(h)), {kNumModalities});
}

ag::Var Router::probs(ag::Tape& tape, const ModalSample& sample) const {
  return probs_from_features(tape, router_features(sample));
}

RouterOutput Router::route(const ModalSample& sample) const {
  ag::Tape tape;
  const ag::Var p = probs(tape, sample);
  RouterOutput out;
  for (int m = 0; m < kNumModalities; ++m) out.probs[m] = p.data()[m];
  out.decisions = threshold_decisions(out.probs);
  return out;
}

ag::Var availability_loss(ag::Var probs, AvailabilityVector truth) {
  if (probs.size() != kNumModalities) throw ShapeError("availability loss expects 3 probabilities");
  const double* p = probs.data();
  double loss = 0.0;
  std::array<double, 3> dl{};
  for (int m = 0; m < kNumModalities; ++m) {
    const bool clamped = p[m] < kProbClamp || p[m] > 1.0 - kProbClamp;
    const double q = std::clamp(p[m], kProbClamp, 1.0 - kProbClamp);
    const double t = truth[static_cast<std::size_t>(m)] ? 1.0 : 0.0;
    loss += -t * std::log(q) - (1.0 - t) * std::log(1.0 - q);
    dl[m] = clamped ? 0.0 : -t / q + (1.0 - t) / (1.0 - q);
  }
  const int ip = probs.id();
  return probs.tape().record({1}, {loss}, probs.requires_grad(), [ip, dl](ag::Tape& t, int self) {
    const double g = t.grad(self)[0];
    double* d = t.grad(ip);
    for (int m = 0; m < kNumModalities; ++m) d[m] += g * dl[m];
  });
}

double availability_loss(const std::array<double, 3>& probs, AvailabilityVector truth) {
  ag::Tape tape;
  return availability_loss(tape.constant({3}, {probs[0], probs[1], probs[2]}), truth).item();
}

RandomConvEncoder::RandomConvEncoder(std::uint64_t seed, int width) : width_(width) {
  if (width < 1) throw ConfigError("encoder width must be positive");
  Rng rng(derive_seed(seed, 0xe9c0de));
  const int half = std::max(1, width / 2);
  convs_[0] = Conv2d::create(frozen_, "enc.0", 3, half, 3, 2, true, rng);
  convs_[1] = Conv2d::create(frozen_, "enc.1", half, width, 3, 2, true, rng);
  convs_[2] = Conv2d::create(frozen_, "enc.2", width, width, 3, 2, true, rng);
  // Small positive biases keep units alive on dark inputs.
  for (const auto& p : frozen_.all())
    if (p->shape.size() == 1) init_constant(*p, 0.05);
}

SemanticGrid RandomConvEncoder::encode(const Image& image) const {
  if (image.height < 8 || image.width < 8)
    throw ConfigError("encoder output would be smaller than 1x1 for a " + std::to_string(image.height) +
                      "x" + std::to_string(image.width) + " image");
  ag::Tape tape;
  const ag::Var x = image_to_chw(tape, image);
  ag::Var y = x;
  for (const Conv2d& c : convs_) y = ag::relu(c(y));
  const ag::Var pooled = ag::adaptive_avg_pool(x, y.dim(1), y.dim(2));
  const ag::Var parts[] = {y, pooled};
  const ag::Var out = ag::concat_channels(parts);
  return {out.dim(0), out.dim(1), out.dim(2), std::vector<double>(out.value().begin(), out.value().end())};
}

ag::Var resize_semantic(ag::Tape& tape, const SemanticGrid& grid, int h, int w) {
  if (grid.height < 1 || grid.width < 1)
    throw ConfigError("semantic encoder produced an empty grid");
  const ag::Var g = tape.constant({grid.channels, grid.height, grid.width}, grid.data);
  if (h == grid.height && w == grid.width) return g;
  if (h <= grid.height && w <= grid.width) return ag::adaptive_avg_pool(g, h, w);
  return ag::bilinear_resize(g, h, w);
}

CsrHead::CsrHead(ParameterStore& store, int in_channels, int hidden, Rng& rng,
                 const std::string& prefix) {
  first_ = Conv2d::create(store, prefix + ".conv1", in_channels, hidden, 1, 1, true, rng);
  second_ = Conv2d::create(store, prefix + ".conv2", hidden, 1, 1, 1, true, rng);
  // Start near M = 0.5 everywhere.
  init_normal(store.at(prefix + ".conv2.weight"), 0.01, rng);
}

ag::Var CsrHead::weight_map(ag::Tape& tape, const SemanticGrid& grid, int h, int w) const {
  return weight_map(resize_semantic(tape, grid, h, w));
}

ag::Var CsrHead::weight_map(ag::Var semantic) const {
  return ag::sigmoid(second_(first_(semantic)));
}

ag::Var refine(ag::Var features, ag::Var weight_map) {
  return ag::add(features, ag::mul_channel_broadcast(features, weight_map));
}

ag::Var contrastive_loss(ag::Var map, const DistributionMap& truth) {
  const Shape& s = map.shape();
  const bool ok2 = s.size() == 2 && s[0] == truth.height && s[1] == truth.width;
  const bool ok3 = s.size() == 3 && s[0] == 1 && s[1] == truth.height && s[2] == truth.width;
  if (!ok2 && !ok3)
    throw ShapeError("contrastive loss: map " + shape_str(s) + " vs truth [" +
                     std::to_string(truth.height) + "," + std::to_string(truth.width) + "]");
  const std::size_t n = map.size();
  const double* sp = map.data();
  double inter = 0.0, s_sum = 0.0, t_sum = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    inter += sp[p] * truth.grid[p];
    s_sum += sp[p];
    t_sum += truth.grid[p];
  }
  const double num = 2.0 * inter + 1.0;
  const double den = s_sum + t_sum + 1.0;
  const double loss = 1.0 - num / den;
  const int im = map.id();
  std::vector<std::uint8_t> t = truth.grid;
  return map.tape().record({1}, {loss}, map.requires_grad(),
                           [im, n, num, den, t = std::move(t)](ag::Tape& tp, int self) {
                             const double g = tp.grad(self)[0];
                             double* d = tp.grad(im);
                             const double inv = 1.0 / (den * den);
                             for (std::size_t p = 0; p < n; ++p)
                               d[p] += g * (num - 2.0 * t[p] * den) * inv;
                           });
}

double contrastive_loss(std::span<const double> map, const DistributionMap& truth) {
  ag::Tape tape;
  return contrastive_loss(tape.constant({truth.height, truth.width}, {map.begin(), map.end()}), truth)
      .item();
}

ContrastiveWeights ContrastiveWeights::create(ParameterStore& store, double init, double lr_scale,
                                              const std::string& prefix) {
  ContrastiveWeights w;
  for (Modality m : kModalities) {
    Parameter& p = store.create(prefix + "." + modality_letter(m), {1}, lr_scale);
    init_constant(p, init);
    w.weights[index_of(m)] = &p;
  }
  return w;
}

ag::Var total_contrastive_loss(ag::Tape& tape, const std::array<std::vector<ag::Var>, 3>& per_level,
                               const ContrastiveWeights& weights, AvailabilityVector v) {
  std::vector<ag::Var> terms;
  for (Modality m : kModalities) {
    if (!v[m]) continue;
    const auto& levels = per_level[index_of(m)];
    if (levels.empty()) throw ShapeError("missing map losses for available modality");
    const ag::Var avg = ag::scale(ag::add_n(levels), 1.0 / static_cast<double>(levels.size()));
    terms.push_back(ag::mul_scalar(avg, tape.param(*weights.weights[index_of(m)])));
  }
  if (terms.empty()) return tape.scalar(0.0);
  return ag::add_n(terms);
}

double total_contrastive_loss(const std::array<double, 3>& losses, const std::array<double, 3>& weights,
                              AvailabilityVector v) {
  double total = 0.0;
  for (std::size_t m = 0; m < 3; ++m)
    if (v[m]) total += weights[m] * losses[m];
  return total;
}

}  // namespace aunet
