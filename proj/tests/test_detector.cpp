#include <doctest.h>

#include <cmath>
#include <numeric>

#include "aunet/detector.hpp"
#include "aunet/error.hpp"
#include "aunet/geometry.hpp"
#include "aunet/optimizer.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace aunet;
using aunet::testing::make_input;
using aunet::testing::max_input_grad_error;
using aunet::testing::nms_oracle;
using aunet::testing::random_values;

namespace {

LevelPrediction constant_level(ag::Tape& tape, int h, int w, int stride, double logit,
                               const std::array<double, 4>& ltrb) {
  const std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<double> reg(4 * n);
  for (int k = 0; k < 4; ++k) std::fill_n(reg.begin() + static_cast<long>(k * n), n, ltrb[static_cast<std::size_t>(k)]);
  return {tape.constant({1, h, w}, std::vector<double>(n, logit)), tape.constant({4, h, w}, reg), stride};
}

std::vector<Detection> random_dets(Rng& rng, int n) {
  std::vector<Detection> d;
  for (int i = 0; i < n; ++i) {
    // Coarse scores so ties occur.
    d.push_back({{rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(2, 15), rng.uniform(2, 15)},
                 std::round(rng.uniform() * 8) / 8});
  }
  return d;
}

bool same_box(const BoundingBox& a, const BoundingBox& b) {
  return a.cx == b.cx && a.cy == b.cy && a.w == b.w && a.h == b.h;
}

}  // namespace

TEST_SUITE("detector") {
  TEST_CASE("prediction grids and nonnegative regression") {
    ParameterStore store;
    Rng rng(1);
    DetectorConfig cfg;
    cfg.tower_width = 8;
    cfg.groups = 4;
    const DetectionHead head(store, {8, 8, 8}, cfg, rng);
    Rng data(2);
    const int sizes[] = {8, 4, 2};
    for (int trial = 0; trial < 1000; ++trial) {
      ag::Tape tape;
      FeaturePyramid p;
      for (int l = 0; l < 3; ++l)
        p.push_back({tape.constant({8, sizes[l], sizes[l]},
                                   random_values(static_cast<std::size_t>(8 * sizes[l] * sizes[l]), data, -5, 5)),
                     kLevelStrides[l]});
      const RawPrediction pred = head.predict(p);
      if (trial == 0)
        for (int l = 0; l < 3; ++l) {
          CHECK(pred[static_cast<std::size_t>(l)].height() == sizes[l]);
          CHECK(pred[static_cast<std::size_t>(l)].regression.shape() == Shape{4, sizes[l], sizes[l]});
          CHECK(pred[static_cast<std::size_t>(l)].stride == kLevelStrides[l]);
        }
      for (const auto& lp : pred)
        for (double v : lp.regression.value()) REQUIRE(v >= 0.0);
    }
    const auto g = pyramid_geometry(64, 64);
    CHECK(g[0].height == 8);
    CHECK(g[1].height == 4);
    CHECK(g[2].height == 2);
  }

  TEST_CASE("assignment examples") {
    const auto geo = pyramid_geometry(64, 64);
    // A box holding exactly one stride-8 cell center, (20, 20).
    const auto one = assign_targets({{20, 20, 6, 6}}, geo);
    CHECK(one[0].positives() == 1);
    CHECK(one[0].box_index[2 * 8 + 2] == 0);
    CHECK(one[1].positives() == 0);
    CHECK(one[2].positives() == 0);

    // A 32-pixel box lands on the stride-8 level only; positives are exactly
    // the cell centers strictly inside it.
    const BoundingBox b{30, 26, 32, 20};
    const auto big = assign_targets({b}, geo);
    std::size_t expected = 0;
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        const double cx = cell_center(x, 8), cy = cell_center(y, 8);
        const bool inside = cx > b.x0() && cx < b.x1() && cy > b.y0() && cy < b.y1();
        expected += inside;
        CHECK((big[0].box_index[static_cast<std::size_t>(y * 8 + x)] == 0) == inside);
      }
    CHECK(big[0].positives() == expected);
    CHECK(expected == 8);
    CHECK(big[1].positives() + big[2].positives() == 0);

    for (const auto& lt : assign_targets({}, geo)) CHECK(lt.positives() == 0);

    const auto nested = assign_targets({{32, 32, 40, 40}, {32, 32, 12, 12}}, geo);
    CHECK(nested[0].box_index[3 * 8 + 3] == 1);
    CHECK(nested[0].box_index[2 * 8 + 2] == 0);

    // Longest side 80 belongs to the stride-16 level.
    const auto mid = assign_targets({{32, 32, 80, 30}}, pyramid_geometry(64, 64));
    CHECK(mid[0].positives() == 0);
    CHECK(mid[1].positives() > 0);
  }

  TEST_CASE("encode and decode round trip") {
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
      const BoundingBox b{rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(1, 40), rng.uniform(1, 40)};
      const int stride = kLevelStrides[rng.uniform_int(0, 2)];
      const double cx = rng.uniform(0, 64), cy = rng.uniform(0, 64);
      const BoundingBox r = decode_box(encode_box(b, cx, cy, stride), cx, cy, stride);
      CHECK(std::abs(r.x0() - b.x0()) < 1e-6);
      CHECK(std::abs(r.y0() - b.y0()) < 1e-6);
      CHECK(std::abs(r.x1() - b.x1()) < 1e-6);
      CHECK(std::abs(r.y1() - b.y1()) < 1e-6);
    }
  }

  TEST_CASE("positive weight clipping") {
    CHECK(positive_weight(84, 4) == 21.0);
    CHECK(positive_weight(84, 84) == 1.0);
    CHECK(positive_weight(10000, 1) == 100.0);
    CHECK(positive_weight(84, 0) == 100.0);
  }

  TEST_CASE("detection loss examples") {
    // One level, 2x2 grid at stride 8, cell (0,0) positive.
    LevelTargets t;
    t.geometry = {2, 2, 8};
    t.box_index = {0, -1, -1, -1};
    t.ltrb = {{{0.5, 0.5, 1.5, 1.5}}, {}, {}, {}};
    ag::Tape tape;

    LevelPrediction p = constant_level(tape, 2, 2, 8, -40.0, {0.5, 0.5, 1.5, 1.5});
    std::vector<double> logits = {40.0, -40.0, -40.0, -40.0};
    p.objectness = tape.constant({1, 2, 2}, logits);
    const DetectionLoss perfect = detection_loss({p}, {t});
    CHECK(perfect.cls.item() < 1e-15);
    CHECK(perfect.loc.item() == 0.0);

    // Box (0,0,2,2) against (1,1,3,3) about the shared anchor (1.5, 1.5).
    CHECK(ltrb_iou({1.5, 1.5, 0.5, 0.5}, {0.5, 0.5, 1.5, 1.5}) == doctest::Approx(1.0 / 7.0).epsilon(1e-14));
    p.regression = constant_level(tape, 2, 2, 8, 0, {1.5, 1.5, 0.5, 0.5}).regression;
    CHECK(detection_loss({p}, {t}).loc.item() == doctest::Approx(6.0 / 7.0).epsilon(1e-14));

    // Objectness at zero: positives weigh cells/positives = 4.
    p.objectness = tape.zeros({1, 2, 2});
    CHECK(detection_loss({p}, {t}).cls.item() == doctest::Approx((4.0 + 3.0) * std::log(2.0) / 4.0).epsilon(1e-14));

    LevelTargets none = t;
    none.box_index = {-1, -1, -1, -1};
    CHECK(detection_loss({p}, {none}).loc.item() == 0.0);
    CHECK_THROWS_AS(detection_loss({p, p}, {t}), ShapeError);
  }

  TEST_CASE("detection loss gradients") {
    Rng rng(4);
    const std::vector<BoundingBox> boxes = {{20, 20, 14, 18}, {44, 40, 20, 26}, {30, 30, 70, 60}};
    const auto targets = assign_targets(boxes, pyramid_geometry(64, 64));
    std::vector<Parameter> in;
    const int sizes[] = {8, 4, 2};
    for (int l = 0; l < 3; ++l) {
      in.push_back(make_input({1, sizes[l], sizes[l]}, rng, -2, 2));
      in.push_back(make_input({4, sizes[l], sizes[l]}, rng, 0.3, 3));
    }
    const double err = max_input_grad_error(in, [&](ag::Tape&, const std::vector<ag::Var>& v) {
      RawPrediction p;
      for (int l = 0; l < 3; ++l) p.push_back({v[static_cast<std::size_t>(2 * l)], v[static_cast<std::size_t>(2 * l + 1)], kLevelStrides[l]});
      const DetectionLoss d = detection_loss(p, targets);
      return ag::add(d.cls, d.loc);
    });
    CHECK(err < 1e-5);
  }

  TEST_CASE("total loss and its weights") {
    CHECK(total_loss(1.0, 0.4, 0.6, 0.5, 0.5) == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(total_loss(1.25, 0.0, 0.0, 0.5, 0.7) == 1.25);
    ParameterStore store;
    const LossWeights w = LossWeights::create(store, 0.5, 0.01);
    CHECK(w.lambda1() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(w.lambda2() == doctest::Approx(0.5).epsilon(1e-15));
    ag::Tape tape;
    const ag::Var t = total_loss(tape.scalar(1.0), tape.scalar(0.4), tape.scalar(0.6), w);
    CHECK(t.item() == doctest::Approx(1.5).epsilon(1e-14));
    CHECK(softplus_inverse(0.5) == doctest::Approx(std::log(std::expm1(0.5))));
  }

  TEST_CASE("loss weights stay nonnegative under gradient descent") {
    ParameterStore store;
    const LossWeights w = LossWeights::create(store, 0.5, 1.0);
    OptimizerConfig oc;
    oc.lr = 0.5;
    const auto opt = make_optimizer(oc);
    Rng rng(5);
    for (int step = 0; step < 1000; ++step) {
      ag::Tape tape;
      // Positive losses push both weights toward zero as hard as possible.
      const ag::Var l = total_loss(tape.scalar(rng.uniform()), tape.scalar(1.0 + 5 * rng.uniform()),
                                   tape.scalar(1.0 + 5 * rng.uniform()), w);
      tape.backward(l);
      GradientBuffer g;
      tape.accumulate_param_grads(g);
      opt->step(store, g);
      REQUIRE(w.lambda1() >= 0.0);
      REQUIRE(w.lambda2() >= 0.0);
      REQUIRE(std::isfinite(w.lambda1()));
    }
    CHECK(w.lambda1() < 0.5);
  }

  TEST_CASE("bundle reconstructs the total") {
    LossBundle b{0.3, 0.2, 0.5, 0.7, 0.4, 0.45, 0.55, 0.0};
    b.total = total_loss(b.det, b.avail, b.contrast, b.lambda1, b.lambda2);
    CHECK(b.det == b.cls + b.loc);
    CHECK(b.total == b.det + b.lambda1 * b.avail + b.lambda2 * b.contrast);
  }

  TEST_CASE("decode examples") {
    ag::Tape tape;
    RawPrediction quiet = {constant_level(tape, 8, 8, 8, -10, {1, 1, 1, 1}),
                           constant_level(tape, 4, 4, 16, -10, {1, 1, 1, 1}),
                           constant_level(tape, 2, 2, 32, -10, {1, 1, 1, 1})};
    CHECK(decode(quiet, 0.25, 64, 64).empty());

    RawPrediction one = quiet;
    std::vector<double> logits(64, -10.0);
    logits[3 * 8 + 2] = 20.0;  // cell (y=3, x=2), center (20, 28)
    one[0].objectness = tape.constant({1, 8, 8}, logits);
    std::vector<double> reg(4 * 64, 1.0);
    reg[0 * 64 + 26] = 0.5;   // l
    reg[1 * 64 + 26] = 1.0;   // t
    reg[2 * 64 + 26] = 1.5;   // r
    reg[3 * 64 + 26] = 2.0;   // b
    one[0].regression = tape.constant({4, 8, 8}, reg);
    const auto d = decode(one, 0.25, 64, 64);
    REQUIRE(d.size() == 1);
    CHECK(d[0].box.x0() == doctest::Approx(16.0));
    CHECK(d[0].box.y0() == doctest::Approx(20.0));
    CHECK(d[0].box.x1() == doctest::Approx(32.0));
    CHECK(d[0].box.y1() == doctest::Approx(44.0));
    CHECK(d[0].score == doctest::Approx(1.0 / (1.0 + std::exp(-20.0))));

    CHECK_THROWS_AS(decode(quiet, 1.0, 64, 64), ConfigError);
    CHECK_THROWS_AS(decode(quiet, -0.1, 64, 64), ConfigError);

    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
      RawPrediction r;
      for (int l = 0; l < 3; ++l) {
        const int s = 8 >> l;
        r.push_back({tape.constant({1, s, s}, random_values(static_cast<std::size_t>(s * s), rng, -3, 3)),
                     tape.constant({4, s, s}, random_values(static_cast<std::size_t>(4 * s * s), rng, 0, 6)),
                     kLevelStrides[l]});
      }
      for (const auto& det : decode(r, 0.0, 64, 64)) {
        CHECK(det.box.x0() >= 0.0);
        CHECK(det.box.y0() >= 0.0);
        CHECK(det.box.x1() <= 64.0);
        CHECK(det.box.y1() <= 64.0);
        CHECK((det.score > 0.0 && det.score < 1.0));
      }
    }
  }

  TEST_CASE("nms examples") {
    const BoundingBox b{10, 10, 8, 8};
    const auto kept = nms({{b, 0.8}, {b, 0.9}}, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.9);
    CHECK(nms({{{5, 5, 4, 4}, 0.3}, {{20, 20, 4, 4}, 0.9}, {{40, 5, 4, 4}, 0.6}}, 0.5).size() == 3);
    CHECK_THROWS_AS(nms({}, 0.0), ConfigError);
    CHECK_THROWS_AS(nms({}, 1.5), ConfigError);
    CHECK(nms({{b, 0.8}, {b, 0.9}}, 1.0).size() == 2);
  }

  TEST_CASE("nms matches the pairwise oracle and is idempotent") {
    Rng rng(7);
    for (int trial = 0; trial < 300; ++trial) {
      const auto d = random_dets(rng, rng.uniform_int(0, 20));
      const double t = rng.uniform(0.05, 0.95);
      const auto kept = nms(d, t);
      const auto expect = nms_oracle(d, t);
      REQUIRE(kept.size() == expect.size());
      for (std::size_t i = 0; i < kept.size(); ++i) {
        REQUIRE(same_box(kept[i].box, d[expect[i]].box));
        REQUIRE(kept[i].score == d[expect[i]].score);
      }
      const auto again = nms(kept, t);
      REQUIRE(again.size() == kept.size());
      for (std::size_t i = 0; i < kept.size(); ++i) REQUIRE(same_box(again[i].box, kept[i].box));
    }
  }
}
