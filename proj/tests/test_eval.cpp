#include <doctest.h>

#include <cmath>

#include "aunet/error.hpp"
#include "aunet/eval.hpp"
#include "aunet/geometry.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace aunet;
using aunet::testing::ap_oracle;

namespace {

BoundingBox corners(double x0, double y0, double x1, double y1) { return BoundingBox::from_corners(x0, y0, x1, y1); }

std::vector<BoundingBox> random_boxes(Rng& rng, int n) {
  std::vector<BoundingBox> b;
  for (int i = 0; i < n; ++i) b.push_back({rng.uniform(5, 40), rng.uniform(5, 40), rng.uniform(4, 14), rng.uniform(4, 14)});
  return b;
}

// Detections jittered around ground truth plus clutter, distinct scores.
std::vector<Detection> random_detections(Rng& rng, const std::vector<BoundingBox>& gts, int n) {
  std::vector<Detection> d;
  for (int i = 0; i < n; ++i) {
    BoundingBox b;
    if (!gts.empty() && rng.bernoulli(0.6)) {
      const BoundingBox& g = gts[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(gts.size()) - 1))];
      b = {g.cx + rng.uniform(-2, 2), g.cy + rng.uniform(-2, 2), g.w * rng.uniform(0.8, 1.2), g.h * rng.uniform(0.8, 1.2)};
    } else {
      b = {rng.uniform(5, 40), rng.uniform(5, 40), rng.uniform(4, 14), rng.uniform(4, 14)};
    }
    d.push_back({b, rng.uniform(0.01, 0.99)});
  }
  return d;
}

struct SmallSetup {
  Dataset data = generate_dataset(12, 31, SceneConfig{}, 0.5);
  AuNet model{ModelConfig{}, 3};
};

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("iou examples") {
    const BoundingBox a = corners(0, 0, 2, 2);
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, corners(5, 5, 7, 7)) == 0.0);
    CHECK(iou(a, corners(2, 0, 4, 2)) == 0.0);  // touching edges
    CHECK(iou(a, corners(1, 1, 3, 3)) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
    CHECK_THROWS_AS(iou(a, corners(1, 1, 1, 3)), DegenerateBoxError);
    CHECK_THROWS_AS(iou(corners(0, 0, 2, -1), a), DegenerateBoxError);
  }

  TEST_CASE("iou thresholds") {
    CHECK(iou_threshold(0) == doctest::Approx(0.5));
    CHECK(iou_threshold(5) == doctest::Approx(0.75));
    CHECK(iou_threshold(9) == doctest::Approx(0.95));
  }

  TEST_CASE("average precision examples") {
    const BoundingBox g = corners(0, 0, 10, 10);
    CHECK(average_precision({{g, 0.9}}, {g}, 0.5) == 1.0);
    CHECK(average_precision({}, {g}, 0.5) == 0.0);
    const double ap = average_precision({{corners(20, 20, 30, 30), 0.9}, {g, 0.8}}, {g}, 0.5);
    CHECK(ap == doctest::Approx(0.5).epsilon(1e-15));
    CHECK_THROWS_AS(average_precision({{g, 0.9}}, {}, 0.5), UndefinedApError);
  }

  TEST_CASE("average precision equals the operating-point oracle") {
    Rng rng(1);
    for (int trial = 0; trial < 400; ++trial) {
      const auto gts = random_boxes(rng, rng.uniform_int(1, 6));
      const auto dets = random_detections(rng, gts, rng.uniform_int(0, 10));
      const double thr = iou_threshold(rng.uniform_int(0, 9));
      REQUIRE(std::abs(average_precision(dets, gts, thr) - ap_oracle(dets, gts, thr)) < 1e-9);
    }
  }

  TEST_CASE("a lowest-scored miss never raises AP") {
    Rng rng(2);
    for (int trial = 0; trial < 300; ++trial) {
      const auto gts = random_boxes(rng, rng.uniform_int(1, 5));
      auto dets = random_detections(rng, gts, rng.uniform_int(0, 10));
      const double before = average_precision(dets, gts, 0.5);
      dets.push_back({corners(100, 100, 110, 110), 0.001});
      CHECK(average_precision(dets, gts, 0.5) <= before);
    }
  }

  TEST_CASE("pooled AP ranks detections across images") {
    const BoundingBox g = corners(0, 0, 10, 10);
    // Image A holds a confident miss, image B a weaker hit: AP 0.5 as in the
    // single-image example.
    const std::vector<ImageEval> images = {{{{corners(20, 20, 30, 30), 0.9}}, {g}}, {{{g, 0.8}}, {g}}};
    // Two gts, one TP at rank 2: precision 1/2 up to recall 1/2, nothing beyond.
    CHECK(average_precision(images, 0.5) == doctest::Approx(51.0 * 0.5 / 101.0).epsilon(1e-15));
  }

  TEST_CASE("summaries") {
    const BoundingBox g = corners(0, 0, 10, 10);
    const EvalResult r = summarize({true, false, true}, {{{{corners(0, 0, 10, 8), 0.9}}, {g}}});
    // IoU 0.8: a hit up to threshold 0.80, a miss from 0.85.
    for (int i = 0; i < 10; ++i) CHECK(r.ap[static_cast<std::size_t>(i)] == (iou_threshold(i) <= 0.8 + 1e-12 ? 1.0 : 0.0));
    CHECK(r.ap50 == 1.0);
    CHECK(r.ap75 == 1.0);
    CHECK(r.map == doctest::Approx(0.7));
  }

  TEST_CASE("evaluate contract on an untrained model") {
    SmallSetup s;
    CHECK_THROWS_AS(evaluate(s.model, s.data, {false, false, false}), InvalidMaskError);
    const EvalResult a = evaluate(s.model, s.data, {true, true, true});
    const EvalResult b = evaluate(s.model, s.data, {true, true, true});
    CHECK(a.ap == b.ap);
    CHECK(a.router_accuracy == b.router_accuracy);
    for (double v : a.ap) CHECK((v >= 0.0 && v <= 1.0));

    // NIR content is irrelevant once the combination drops it.
    Dataset blanked = s.data;
    for (auto& sample : blanked.samples) sample.images[index_of(Modality::kNir)] = Image::zeros(64, 64);
    const EvalResult c = evaluate(s.model, s.data, {true, false, true});
    const EvalResult d = evaluate(s.model, blanked, {true, false, true});
    CHECK(c.ap == d.ap);

    const auto rows = ablation_matrix(s.model, s.data);
    REQUIRE(rows.size() == 7);
    for (std::size_t i = 0; i < 7; ++i) CHECK(rows[i].combo == all_combos()[i]);
    const std::string csv = results_csv(rows);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 8);
    CHECK(csv.rfind("combo,label,AP50,AP75,mAP,AP@0.50", 0) == 0);
    const std::string table = results_table(rows);
    CHECK(table.find("coco-101pt") != std::string::npos);
    CHECK(table.find("RGB-NIR-TIR") != std::string::npos);
    for (const char* m : {"AP50", "AP75", "mAP"}) CHECK(bar_chart_svg(rows, m).rfind("<svg", 0) == 0);
    CHECK_THROWS(bar_chart_svg(rows, "AP90"));
  }

  TEST_CASE("router report is well formed") {
    SmallSetup s;
    std::vector<ModalSample> samples;
    for (std::size_t i = 0; i < s.data.samples.size(); ++i)
      samples.push_back(drop_modalities(s.data.samples[i], all_combos()[i % 7]));
    const RouterReport r = route_check(s.model, samples);
    CHECK(r.samples == samples.size());
    for (const auto& m : r.confusion) CHECK(m[0][0] + m[0][1] + m[1][0] + m[1][1] == samples.size());
    CHECK(r.exact <= r.samples);
    CHECK((r.decision_accuracy() >= 0.0 && r.decision_accuracy() <= 1.0));
    CHECK(router_report_text(r).find("accuracy") != std::string::npos);
  }

  TEST_CASE("throughput") {
    SmallSetup s;
    const std::vector<ModalSample> samples(s.data.samples.begin(), s.data.samples.begin() + 4);
    const Throughput a = measure_throughput(s.model, samples, 100, 2);
    const Throughput b = measure_throughput(s.model, samples, 100, 2);
    CHECK(a.samples_per_second > 0.0);
    CHECK(a.calls == 100);
    CHECK(a.std_seconds >= 0.0);
    CHECK(b.mean_seconds < 1.5 * a.mean_seconds);
    CHECK(b.mean_seconds > 0.5 * a.mean_seconds);
  }
}
