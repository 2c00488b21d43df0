#include "aunet/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "aunet/error.hpp"

namespace aunet {

double iou_threshold(int i) { return 0.50 + 0.05 * i; }

double average_precision(const std::vector<ImageEval>& images, double iou_thresh) {
  std::size_t total_gt = 0;
  for (const ImageEval& im : images) total_gt += im.ground_truth.size();
  if (total_gt == 0) throw UndefinedApError("average precision needs at least one ground-truth box");

  struct Ranked {
    double score;
    std::size_t image;
    std::size_t det;
  };
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t d = 0; d < images[i].detections.size(); ++d)
      ranked.push_back({images[i].detections[d].score, i, d});
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> matched(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) matched[i].assign(images[i].ground_truth.size(), false);

  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const Ranked& r : ranked) {
    const ImageEval& im = images[r.image];
    const BoundingBox& box = im.detections[r.det].box;
    int best = -1;
    double best_iou = iou_thresh;
    for (std::size_t g = 0; g < im.ground_truth.size(); ++g) {
      if (matched[r.image][g]) continue;
      const double v = iou(box, im.ground_truth[g]);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      matched[r.image][static_cast<std::size_t>(best)] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);

  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

double average_precision(const std::vector<Detection>& dets, const std::vector<BoundingBox>& gts,
                         double iou_thresh) {
  return average_precision(std::vector<ImageEval>{{dets, gts}}, iou_thresh);
}

EvalResult summarize(AvailabilityVector combo, const std::vector<ImageEval>& images) {
  EvalResult r;
  r.combo = combo;
  double s = 0.0;
  for (int i = 0; i < kIouThresholdCount; ++i) {
    r.ap[static_cast<std::size_t>(i)] = average_precision(images, iou_threshold(i));
    s += r.ap[static_cast<std::size_t>(i)];
  }
  r.ap50 = r.ap[0];
  r.ap75 = r.ap[5];
  r.map = s / kIouThresholdCount;
  return r;
}

EvalResult evaluate(const AuNet& model, const Dataset& data, AvailabilityVector combo,
                    const EvalOptions& options) {
  if (!combo.any()) throw InvalidMaskError("combination 000 selects no modality");
  std::vector<ImageEval> images;
  std::size_t routed = 0;
  for (std::size_t idx : data.test) {
    const ModalSample sample = drop_modalities(data.samples.at(idx), combo);
    const Prediction p = model.infer(sample, options.conf_thresh, options.nms_iou);
    if (p.route.decisions == sample.availability) ++routed;
    images.push_back({p.detections, sample.boxes});
  }
  EvalResult r = summarize(combo, images);
  r.router_accuracy = data.test.empty() ? 0.0 : static_cast<double>(routed) / static_cast<double>(data.test.size());
  return r;
}

std::vector<EvalResult> ablation_matrix(const AuNet& model, const Dataset& data, const EvalOptions& options) {
  std::vector<EvalResult> rows;
  for (AvailabilityVector combo : all_combos()) rows.push_back(evaluate(model, data, combo, options));
  return rows;
}

std::string results_csv(const std::vector<EvalResult>& rows) {
  std::ostringstream os;
  os << "combo,label,AP50,AP75,mAP";
  char buf[64];
  for (int i = 0; i < kIouThresholdCount; ++i) {
    std::snprintf(buf, sizeof buf, ",AP@%.2f", iou_threshold(i));
    os << buf;
  }
  os << ",router_acc\n";
  for (const EvalResult& r : rows) {
    os << r.combo.bits() << ',' << r.combo.label();
    for (double v : {r.ap50, r.ap75, r.map}) {
      std::snprintf(buf, sizeof buf, ",%.6f", v);
      os << buf;
    }
    for (double v : r.ap) {
      std::snprintf(buf, sizeof buf, ",%.6f", v);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.6f\n", r.router_accuracy);
    os << buf;
  }
  return os.str();
}

std::string results_table(const std::vector<EvalResult>& rows) {
  std::ostringstream os;
  os << "protocol: " << kApProtocol << '\n';
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-14s %7s %7s %7s %10s\n", "modalities", "AP50", "AP75", "mAP", "router");
  os << buf;
  for (const EvalResult& r : rows) {
    std::snprintf(buf, sizeof buf, "%-14s %7.2f %7.2f %7.2f %10.3f\n", r.combo.long_label().c_str(), 100.0 * r.ap50,
                  100.0 * r.ap75, 100.0 * r.map, r.router_accuracy);
    os << buf;
  }
  return os.str();
}

std::string bar_chart_svg(const std::vector<EvalResult>& rows, const std::string& metric) {
  auto value = [&](const EvalResult& r) {
    if (metric == "AP50") return r.ap50;
    if (metric == "AP75") return r.ap75;
    if (metric == "mAP") return r.map;
    throw UsageError("unknown metric '" + metric + "'");
  };
  const int bar = 48, gap = 16, left = 40, top = 30, height = 200;
  const int width = left + static_cast<int>(rows.size()) * (bar + gap) + gap;
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" font-family=\"sans-serif\" "
                "font-size=\"11\">\n",
                width, top + height + 40);
  os << buf;
  os << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << metric << " by modality combination</text>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", left,
                top + height, width - gap / 2, top + height);
  os << buf;
  for (int t = 0; t <= 4; ++t) {
    const int y = top + height - t * height / 4;
    std::snprintf(buf, sizeof buf, "<text x=\"4\" y=\"%d\">%.2f</text>\n", y + 4, t / 4.0);
    os << buf;
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double v = std::clamp(value(rows[i]), 0.0, 1.0);
    const int h = static_cast<int>(std::lround(v * height));
    const int x = left + gap + static_cast<int>(i) * (bar + gap);
    std::snprintf(buf, sizeof buf, "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"#4477aa\"/>\n", x,
                  top + height - h, bar, h);
    os << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\">%.3f</text>\n", x + 6, top + height - h - 4, v);
    os << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%d\" y=\"%d\">%s</text>\n", x + 12, top + height + 16,
                  rows[i].combo.label().c_str());
    os << buf;
  }
  os << "</svg>\n";
  return os.str();
}

double RouterReport::decision_accuracy() const {
  if (samples == 0) return 0.0;
  std::size_t correct = 0;
  for (const auto& c : confusion) correct += c[0][0] + c[1][1];
  return static_cast<double>(correct) / static_cast<double>(3 * samples);
}

double RouterReport::exact_accuracy() const {
  return samples ? static_cast<double>(exact) / static_cast<double>(samples) : 0.0;
}

RouterReport route_check(const AuNet& model, const std::vector<ModalSample>& samples) {
  RouterReport r;
  for (const ModalSample& s : samples) {
    const RouterOutput out = model.router().route(s);
    for (std::size_t m = 0; m < 3; ++m) ++r.confusion[m][s.availability[m] ? 1 : 0][out.decisions[m] ? 1 : 0];
    if (out.decisions == s.availability) ++r.exact;
    ++r.samples;
  }
  return r;
}

std::string router_report_text(const RouterReport& r) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-9s %8s %8s %8s %8s %8s\n", "modality", "tp", "fn", "fp", "tn", "total");
  os << buf;
  for (Modality m : kModalities) {
    const auto& c = r.confusion[index_of(m)];
    std::snprintf(buf, sizeof buf, "%-9s %8zu %8zu %8zu %8zu %8zu\n", modality_name(m), c[1][1], c[1][0], c[0][1],
                  c[0][0], c[0][0] + c[0][1] + c[1][0] + c[1][1]);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "samples %zu\ndecision_accuracy %.6f\nexact_accuracy %.6f\n", r.samples,
                r.decision_accuracy(), r.exact_accuracy());
  os << buf;
  return os.str();
}

Throughput measure_throughput(const AuNet& model, const std::vector<ModalSample>& samples, int calls,
                              int warmup) {
  if (samples.empty()) throw ConfigError("throughput needs at least one sample");
  if (calls < 1) throw ConfigError("throughput needs at least one call");
  for (int i = 0; i < warmup; ++i) model.infer(samples[static_cast<std::size_t>(i) % samples.size()]);
  std::vector<double> t;
  for (int i = 0; i < calls; ++i) {
    const auto a = std::chrono::steady_clock::now();
    model.infer(samples[static_cast<std::size_t>(i) % samples.size()]);
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count());
  }
  Throughput r;
  r.calls = calls;
  r.mean_seconds = std::accumulate(t.begin(), t.end(), 0.0) / calls;
  double var = 0.0;
  for (double x : t) var += (x - r.mean_seconds) * (x - r.mean_seconds);
  r.std_seconds = std::sqrt(var / calls);
  r.samples_per_second = 1.0 / r.mean_seconds;
  return r;
}

}  // namespace aunet
