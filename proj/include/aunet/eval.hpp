#pragma once

// Detection metrics (COCO-style 101-point AP over IoU 0.50:0.05:0.95), the
// seven-combination ablation matrix, router accuracy and throughput.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "aunet/datagen.hpp"
#include "aunet/detector.hpp"
#include "aunet/geometry.hpp"
#include "aunet/model.hpp"

namespace aunet {

inline constexpr int kIouThresholdCount = 10;
inline constexpr const char* kApProtocol = "coco-101pt, iou 0.50:0.05:0.95, greedy by score";

// 0.50, 0.55, ..., 0.95
double iou_threshold(int i);

struct ImageEval {
  std::vector<Detection> detections;
  std::vector<BoundingBox> ground_truth;
};

// Detections of all images are ranked together by descending score (stable
// in image order); each goes to the unmatched ground truth of its own image
// with the highest IoU, if that IoU reaches the threshold. Throws
// UndefinedApError if there is no ground truth at all.
double average_precision(const std::vector<ImageEval>& images, double iou_thresh);
double average_precision(const std::vector<Detection>& dets, const std::vector<BoundingBox>& gts,
                         double iou_thresh);

struct EvalResult {
  AvailabilityVector combo;
  std::array<double, kIouThresholdCount> ap{};
  double ap50 = 0.0;
  double ap75 = 0.0;
  double map = 0.0;
  double router_accuracy = 0.0;  // fraction of samples whose decisions equal the combo
};

EvalResult summarize(AvailabilityVector combo, const std::vector<ImageEval>& images);

struct EvalOptions {
  double conf_thresh = kDefaultConfThresh;
  double nms_iou = kDefaultNmsIou;
};

// Runs inference on the test split with `combo` applied to every sample.
// Throws InvalidMaskError for (0,0,0).
EvalResult evaluate(const AuNet& model, const Dataset& data, AvailabilityVector combo,
                    const EvalOptions& options = {});

// One row per combination in table order.
std::vector<EvalResult> ablation_matrix(const AuNet& model, const Dataset& data,
                                        const EvalOptions& options = {});

std::string results_csv(const std::vector<EvalResult>& rows);
std::string results_table(const std::vector<EvalResult>& rows);
// Simple SVG bar chart of one metric across rows.
std::string bar_chart_svg(const std::vector<EvalResult>& rows, const std::string& metric);

struct RouterReport {
  // Per modality: [truth][decision] counts.
  std::array<std::array<std::array<std::size_t, 2>, 2>, 3> confusion{};
  std::size_t samples = 0;
  std::size_t exact = 0;  // samples whose three decisions are all correct
  double decision_accuracy() const;  // over the 3 * samples binary decisions
  double exact_accuracy() const;
};

RouterReport route_check(const AuNet& model, const std::vector<ModalSample>& samples);
std::string router_report_text(const RouterReport& r);

struct Throughput {
  double samples_per_second = 0.0;
  double mean_seconds = 0.0;
  double std_seconds = 0.0;
  int calls = 0;
};

Throughput measure_throughput(const AuNet& model, const std::vector<ModalSample>& samples, int calls = 100,
                              int warmup = 5);

}  // namespace aunet
