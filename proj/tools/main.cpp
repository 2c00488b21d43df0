// aunet command-line entry point.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aunet/checkpoint.hpp"
#include "aunet/config.hpp"
#include "aunet/error.hpp"
#include "aunet/eval.hpp"
#include "aunet/trainer.hpp"

namespace fs = std::filesystem;
using namespace aunet;

namespace {

constexpr const char* kOutputRootEnv = "AUNET_OUTPUT_ROOT";

// Relative artifact paths (datasets, runs, checkpoints, reports) resolve under
// $AUNET_OUTPUT_ROOT when it is set.
fs::path resolve(const std::string& p) {
  const fs::path path(p);
  const char* root = std::getenv(kOutputRootEnv);
  if (root && *root && path.is_relative()) return fs::path(root) / path;
  return path;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw IoError(std::string(what) + " not found: " + path.string());
}

std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) {
      const int v = std::stoi(s);
      return {v, v};
    }
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw UsageError("bad size '" + s + "', expected HxW");
  }
}

RunConfig build_config(const std::string& config_file, const std::vector<std::string>& overrides) {
  std::string text;
  if (!config_file.empty()) {
    require_file(config_file, "config");
    std::ifstream in(config_file, std::ios::binary);
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  for (const std::string& o : overrides) {
    if (o.find('=') == std::string::npos) throw UsageError("override '" + o + "' is not key=value");
    text += "\n" + o;
  }
  return parse_config(text);
}

struct GenDataArgs {
  std::string out = "data";
  int count = 100;
  std::uint64_t seed = 1;
  std::string size = "64x64";
  double night_fraction = 0.5;
  double train_fraction = 0.85;
};

int cmd_gen_data(const GenDataArgs& a) {
  if (a.count <= 0) throw ConfigError("--count must be positive");
  SceneConfig sc;
  std::tie(sc.height, sc.width) = parse_size(a.size);
  sc.night_fraction = a.night_fraction;
  const Dataset ds = generate_dataset(a.count, a.seed, sc, a.train_fraction);
  const fs::path out = resolve(a.out);
  save_dataset(ds, out);
  std::printf("wrote %zu samples (%zu train, %zu test) to %s\n", ds.samples.size(), ds.train.size(), ds.test.size(),
              out.string().c_str());
  return 0;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> set;
  std::string data;
  std::string out;
  std::string resume;
  int steps = -1;
  long long seed = -1;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  std::vector<std::string> overrides = a.set;
  if (!a.data.empty()) overrides.push_back("data_dir=" + a.data);
  if (!a.out.empty()) overrides.push_back("output_dir=" + a.out);
  if (a.steps >= 0) overrides.push_back("steps=" + std::to_string(a.steps));
  if (a.seed >= 0) overrides.push_back("seed=" + std::to_string(a.seed));
  const RunConfig config = build_config(a.config, overrides);

  const fs::path data_dir = resolve(config.data_dir);
  require_file(data_dir / "manifest.json", "dataset manifest");
  const Dataset data = load_dataset(data_dir);
  AuNet model(config.model, config.seed);
  Trainer trainer(config, model, data);
  if (!a.resume.empty()) {
    require_file(resolve(a.resume), "checkpoint");
    const Checkpoint ckpt = load_checkpoint(resolve(a.resume));
    // Only the step budget may change between the original run and the resume.
    RunConfig saved = parse_config(ckpt.config_text);
    saved.steps = config.steps;
    if (dump_config(saved) != dump_config(config))
      throw ConfigError("checkpoint was written with a different configuration");
    if (ckpt.step > static_cast<std::uint64_t>(config.steps))
      throw ConfigError("checkpoint is at step " + std::to_string(ckpt.step) + ", beyond steps = " +
                        std::to_string(config.steps));
    trainer.resume(ckpt);
  }
  const fs::path out = resolve(config.output_dir);
  write_file(out / "config.txt", dump_config(config));
  trainer.run(out, [&](const StepRecord& r) {
    if (!a.quiet && (r.step % 50 == 0 || r.step == 1)) std::printf("%s\n", loss_log_row(r).c_str());
  });
  std::printf("checkpoint %s\n", (out / "checkpoint.bin").string().c_str());
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out = "eval";
  std::string combo = "111";
  double conf = -1.0;
  double nms = -1.0;
  std::string dump_attention;
  bool throughput = false;
};

LoadedModel open_model(const std::string& path) {
  require_file(resolve(path), "checkpoint");
  return load_model(resolve(path));
}

Dataset open_data(const std::string& dir) {
  require_file(resolve(dir) / "manifest.json", "dataset manifest");
  return load_dataset(resolve(dir));
}

EvalOptions eval_options(const LoadedModel& m, const EvalArgs& a) {
  EvalOptions o;
  o.conf_thresh = a.conf >= 0.0 ? a.conf : m.config.conf_thresh;
  o.nms_iou = a.nms >= 0.0 ? a.nms : m.config.nms_iou;
  return o;
}

int cmd_eval(const EvalArgs& a) {
  const AvailabilityVector combo = AvailabilityVector::parse(a.combo);
  if (!combo.any()) throw UsageError("--combo 000 selects no modality");
  const LoadedModel m = open_model(a.checkpoint);
  const Dataset data = open_data(a.data);
  const EvalResult r = evaluate(*m.model, data, combo, eval_options(m, a));
  const fs::path out = resolve(a.out);
  write_file(out / "eval.csv", results_csv({r}));
  write_file(out / "eval.txt", results_table({r}));
  std::fputs(results_table({r}).c_str(), stdout);
  if (!a.dump_attention.empty()) {
    std::vector<AttentionRecord> records;
    if (data.test.empty()) throw ConfigError("dataset has no test samples");
    const ModalSample s = drop_modalities(data.samples[data.test.front()], combo);
    m.model->infer(s, eval_options(m, a).conf_thresh, eval_options(m, a).nms_iou, &records);
    write_file(resolve(a.dump_attention), "sample " + s.id + "\n" + format_attention(records));
  }
  return 0;
}

int cmd_ablate(const EvalArgs& a) {
  const LoadedModel m = open_model(a.checkpoint);
  const Dataset data = open_data(a.data);
  const std::vector<EvalResult> rows = ablation_matrix(*m.model, data, eval_options(m, a));
  const fs::path out = resolve(a.out);
  write_file(out / "ablation.csv", results_csv(rows));
  write_file(out / "ablation.txt", results_table(rows));
  for (const char* metric : {"AP50", "AP75", "mAP"})
    write_file(out / ("ablation_" + std::string(metric) + ".svg"), bar_chart_svg(rows, metric));
  std::fputs(results_table(rows).c_str(), stdout);
  if (a.throughput) {
    std::vector<ModalSample> samples;
    for (std::size_t i : data.test) samples.push_back(data.samples[i]);
    const Throughput t = measure_throughput(*m.model, samples);
    char buf[160];
    std::snprintf(buf, sizeof buf, "throughput %.2f samples/s (mean %.3f ms, std %.3f ms, %d calls)\n",
                  t.samples_per_second, 1e3 * t.mean_seconds, 1e3 * t.std_seconds, t.calls);
    std::fputs(buf, stdout);
    write_file(out / "throughput.txt", buf);
  }
  return 0;
}

struct RouteArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  bool all_combos = false;
  bool per_sample = false;
};

int cmd_route_check(const RouteArgs& a) {
  const LoadedModel m = open_model(a.checkpoint);
  const Dataset data = open_data(a.data);
  std::vector<std::size_t> idx;
  if (a.split == "test" || a.split == "all") idx.insert(idx.end(), data.test.begin(), data.test.end());
  if (a.split == "train" || a.split == "all") idx.insert(idx.end(), data.train.begin(), data.train.end());
  if (a.split != "test" && a.split != "train" && a.split != "all")
    throw UsageError("--split must be test, train or all");
  std::vector<ModalSample> samples;
  for (std::size_t i : idx) {
    if (a.all_combos)
      for (AvailabilityVector c : all_combos()) samples.push_back(drop_modalities(data.samples[i], c));
    else
      samples.push_back(data.samples[i]);
  }
  if (a.per_sample)
    for (const ModalSample& s : samples) {
      const RouterOutput r = m.model->router().route(s);
      std::printf("%s truth=%s probs=%.4f,%.4f,%.4f decision=%s\n", s.id.c_str(), s.availability.bits().c_str(),
                  r.probs[0], r.probs[1], r.probs[2], r.decisions.bits().c_str());
    }
  std::fputs(router_report_text(route_check(*m.model, samples)).c_str(), stdout);
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"Tri-modal pedestrian detector: data generation, training and evaluation"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic tri-modal dataset");
  g->add_option("--out", gen.out, "Output directory")->capture_default_str();
  g->add_option("--count", gen.count, "Number of samples")->capture_default_str();
  g->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  g->add_option("--size", gen.size, "Image size HxW")->capture_default_str();
  g->add_option("--night-fraction", gen.night_fraction, "Fraction of night scenes")->capture_default_str();
  g->add_option("--train-fraction", gen.train_fraction, "Fraction of samples in the train split")
      ->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", tr.config, "Config file (key = value)");
  t->add_option("--set", tr.set, "Config override key=value (repeatable)");
  t->add_option("--data", tr.data, "Dataset directory (overrides data_dir)");
  t->add_option("--out", tr.out, "Output directory (overrides output_dir)");
  t->add_option("--steps", tr.steps, "Optimizer steps (overrides steps)");
  t->add_option("--seed", tr.seed, "Run seed (overrides seed)");
  t->add_option("--resume", tr.resume, "Checkpoint to resume from");
  t->add_flag("--quiet", tr.quiet, "Do not print loss rows");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate one modality combination");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--out", ev.out, "Output directory")->capture_default_str();
  e->add_option("--combo", ev.combo, "Availability bits in R,N,T order, e.g. 101")->capture_default_str();
  e->add_option("--conf", ev.conf, "Confidence threshold (default from config)");
  e->add_option("--nms", ev.nms, "NMS IoU threshold (default from config)");
  e->add_option("--dump-attention", ev.dump_attention, "Write attention matrices of the first test sample");

  EvalArgs ab;
  ab.out = "ablation";
  auto* b = app.add_subcommand("ablate", "Evaluate all seven modality combinations");
  b->add_option("--checkpoint", ab.checkpoint, "Checkpoint file")->required();
  b->add_option("--data", ab.data, "Dataset directory")->required();
  b->add_option("--out", ab.out, "Output directory")->capture_default_str();
  b->add_option("--conf", ab.conf, "Confidence threshold (default from config)");
  b->add_option("--nms", ab.nms, "NMS IoU threshold (default from config)");
  b->add_flag("--throughput", ab.throughput, "Also measure inference throughput");

  RouteArgs rt;
  auto* r = app.add_subcommand("route-check", "Report router decision accuracy");
  r->add_option("--checkpoint", rt.checkpoint, "Checkpoint file")->required();
  r->add_option("--data", rt.data, "Dataset directory")->required();
  r->add_option("--split", rt.split, "test, train or all")->capture_default_str();
  r->add_flag("--all-combos", rt.all_combos, "Expand every sample into all seven combinations");
  r->add_flag("--per-sample", rt.per_sample, "Print probabilities and decisions per sample");

  std::string dump_from;
  auto* d = app.add_subcommand("dump-config", "Print the configuration (defaults unless --config is given)");
  d->add_option("--config", dump_from, "Config file to normalize");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    throw UsageError(ex.what());
  }

  if (g->parsed()) return cmd_gen_data(gen);
  if (t->parsed()) return cmd_train(tr);
  if (e->parsed()) return cmd_eval(ev);
  if (b->parsed()) return cmd_ablate(ab);
  if (r->parsed()) return cmd_route_check(rt);
  if (d->parsed()) {
    std::fputs(dump_config(build_config(dump_from, {})).c_str(), stdout);
    return 0;
  }
  return 0;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& ex) {
    std::fprintf(stderr, "error: %s: %s\n", ex.code().c_str(), one_line(ex.what()).c_str());
    return 2;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: internal: %s\n", one_line(ex.what()).c_str());
    return 3;
  }
}
