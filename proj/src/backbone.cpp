#include "aunet/backbone.hpp"

#include "aunet/error.hpp"

namespace aunet {

void BackboneConfig::validate() const {
  if (depth < 1) throw ConfigError("backbone depth must be at least 1");
  if (static_cast<int>(widths.size()) != kLevelCount)
    throw ConfigError("backbone needs one width per pyramid level (" + std::to_string(kLevelCount) +
                      "), got " + std::to_string(widths.size()));
  for (int w : widths)
    if (w < 2 || w % 2 != 0) throw ConfigError("backbone widths must be even and >= 2");
  if (stem_width < 1) throw ConfigError("stem width must be positive");
  if (groups < 1) throw ConfigError("group count must be positive");
}

ag::Var image_to_chw(ag::Tape& tape, const Image& image) {
  const int h = image.height, w = image.width;
  std::vector<double> chw(static_cast<std::size_t>(3) * h * w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        chw[(static_cast<std::size_t>(c) * h + y) * w + x] = image.at(y, x, c);
  return tape.constant({3, h, w}, std::move(chw));
}

Backbone::Backbone(ParameterStore& store, const BackboneConfig& config, Rng& rng,
                   const std::string& prefix)
    : config_(config) {
  config_.validate();
  const std::size_t before = store.scalar_count();
  const int g = config_.groups;
  stem1_ = ConvNormAct::create(store, prefix + ".stem1", 3, config_.stem_width, 3, 2, g, rng);
  stem2_ = ConvNormAct::create(store, prefix + ".stem2", config_.stem_width, config_.stem_width, 3, 2,
                               g, rng);
  int in = config_.stem_width;
  for (int level = 0; level < kLevelCount; ++level) {
    const int c = config_.widths[static_cast<std::size_t>(level)];
    const int half = c / 2;
    const std::string p = prefix + ".stage" + std::to_string(level);
    CspStage s;
    s.down = ConvNormAct::create(store, p + ".down", in, c, 3, 2, g, rng);
    s.shortcut = ConvNormAct::create(store, p + ".shortcut", c, half, 1, 1, g, rng);
    s.main = ConvNormAct::create(store, p + ".main", c, half, 1, 1, g, rng);
    for (int b = 0; b < config_.depth; ++b) {
      const std::string bp = p + ".block" + std::to_string(b);
      s.blocks.push_back({ConvNormAct::create(store, bp + ".a", half, half, 3, 1, g, rng),
                          ConvNormAct::create(store, bp + ".b", half, half, 3, 1, g, rng, false)});
    }
    s.merge = ConvNormAct::create(store, p + ".merge", c, c, 1, 1, g, rng);
    stages_.push_back(std::move(s));
    in = c;
  }
  parameter_count_ = store.scalar_count() - before;
}

ag::Var Backbone::run_stage(const CspStage& stage, ag::Var x) const {
  ag::Var d = stage.down(x);
  ag::Var a = stage.shortcut(d);
  ag::Var b = stage.main(d);
  for (const ResBlock& blk : stage.blocks) b = ag::relu(ag::add(b, blk.second(blk.first(b))));
  const ag::Var parts[] = {a, b};
  return stage.merge(ag::concat_channels(parts));
}

FeaturePyramid Backbone::extract(ag::Tape& tape, const Image& image) const {
  return extract(image_to_chw(tape, image));
}

FeaturePyramid Backbone::extract(ag::Var image_chw) const {
  if (image_chw.shape().size() != 3 || image_chw.dim(0) != 3)
    throw ShapeError("backbone expects a [3, H, W] image, got " + shape_str(image_chw.shape()));
  const int h = image_chw.dim(1), w = image_chw.dim(2);
  if (h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0)
    throw ShapeError("image size " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by 32");
  ag::Var x = stem2_(stem1_(image_chw));
  FeaturePyramid pyramid;
  for (int level = 0; level < kLevelCount; ++level) {
    x = run_stage(stages_[static_cast<std::size_t>(level)], x);
    pyramid.push_back({x, kLevelStrides[level]});
  }
  return pyramid;
}

}  // namespace aunet
