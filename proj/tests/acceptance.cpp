// Acceptance experiments. Usage: acceptance <A1..A8> [path-to-cli]
// Each run prints exactly one line "A<n> PASS|FAIL <details>" to stdout
// (progress goes to stderr) and exits 0 on PASS, 1 on FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "aunet/checkpoint.hpp"
#include "aunet/error.hpp"
#include "aunet/eval.hpp"
#include "aunet/trainer.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace aunet;
using namespace aunet::testing;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// ---- A1 -----------------------------------------------------------------

Verdict router_fidelity() {
  const auto t0 = Clock::now();
  const Dataset train = generate_dataset(500, 101, SceneConfig{}, 1.0);
  const Dataset held = generate_dataset(100, 202, SceneConfig{}, 1.0);
  RunConfig rc;
  AuNet model(rc.model, 1);

  OptimizerConfig oc;
  oc.kind = OptimizerKind::kAdam;
  oc.lr = 0.01;
  const auto opt = make_optimizer(oc);
  Rng rng(303);
  const int kSteps = 3000, kBatch = 16;
  double budget_used = 0.0;
  for (int step = 0; step < kSteps; ++step) {
    GradientBuffer grads;
    for (int b = 0; b < kBatch; ++b) {
      const ModalSample& s = train.samples[static_cast<std::size_t>(rng.uniform_int(0, 499))];
      const AvailabilityVector mask = all_combos()[static_cast<std::size_t>(rng.uniform_int(0, 6))];
      const ModalSample d = drop_modalities(s, mask);
      ag::Tape tape;
      tape.backward(availability_loss(model.router().probs(tape, d), mask));
      tape.accumulate_param_grads(grads, 1.0 / kBatch);
    }
    opt->step(model.params(), grads);
    budget_used = seconds_since(t0);
    if (budget_used > 120.0) break;
  }

  std::size_t right = 0, total = 0;
  std::string per_combo;
  double worst = 1.0;
  for (const AvailabilityVector& combo : all_combos()) {
    std::size_t ok = 0;
    for (const ModalSample& s : held.samples) ok += model.router().route(drop_modalities(s, combo)).decisions == combo;
    right += ok;
    total += held.samples.size();
    worst = std::min(worst, double(ok) / double(held.samples.size()));
    per_combo += " " + combo.label() + "=" + std::to_string(ok);
  }
  const double acc = double(right) / double(total);
  const double runtime = seconds_since(t0);
  return {acc >= 0.99 && budget_used <= 120.0 && runtime < 300.0,
          "accuracy " + fmt("%.4f", acc) + " over " + std::to_string(total) + " (worst combo " + fmt("%.2f", worst) +
              ";" + per_combo + ") train " + fmt("%.1fs", budget_used) + " total " + fmt("%.1fs", runtime)};
}

// ---- A2 -----------------------------------------------------------------

Verdict gating_table() {
  const std::map<std::string, std::set<std::string>> expected = {
      {"111", {"TN", "NT", "TR", "RT", "NR", "RN"}},
      {"101", {"TR", "RT"}},
      {"110", {"NR", "RN"}},
      {"011", {"TN", "NT"}},
      {"100", {}},
      {"010", {}},
      {"001", {}}};
  int ok = 0;
  std::string bad;
  for (const auto& combo : all_combos()) {
    std::set<std::string> got;
    for (Mechanism m : gate_interactions(combo)) got.insert(mechanism_name(m));
    if (got == expected.at(combo.bits()))
      ++ok;
    else
      bad += " " + combo.bits();
  }
  bool error_on_empty = false;
  try {
    gate_interactions({false, false, false});
  } catch (const NoModalityError&) {
    error_on_empty = true;
  }
  return {ok == 7 && error_on_empty,
          std::to_string(ok) + "/7 vectors exact, 000 " + (error_on_empty ? "rejected" : "accepted") + bad};
}

// ---- A3 -----------------------------------------------------------------

Verdict kernels() {
  Rng rng(31);
  std::vector<std::string> failures;

  // (a) and (b)
  double attend_err = 0.0, row_err = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const int lq = rng.uniform_int(1, 8), lk = rng.uniform_int(1, 8), c = rng.uniform_int(1, 8);
    const auto q = random_values(static_cast<std::size_t>(lq * c), rng, -3, 3);
    const auto k = random_values(static_cast<std::size_t>(lk * c), rng, -3, 3);
    const auto v = random_values(static_cast<std::size_t>(lk * c), rng, -3, 3);
    ag::Tape tape;
    const ag::Var out = cross_attend(tape.constant({lq, c}, q), tape.constant({lk, c}, k), tape.constant({lk, c}, v));
    const auto expect = attend_oracle(q, k, v, lq, lk, c);
    for (std::size_t i = 0; i < expect.size(); ++i) attend_err = std::max(attend_err, std::abs(out.data()[i] - expect[i]));
    const ag::Var a = attention_weights(tape.constant({lq, c}, q), tape.constant({lk, c}, k));
    for (int i = 0; i < lq; ++i) {
      double s = 0;
      for (int j = 0; j < lk; ++j) s += a.data()[i * lk + j];
      row_err = std::max(row_err, std::abs(s - 1.0));
    }
  }
  if (!(attend_err < 1e-10)) failures.push_back("a");
  if (!(row_err < 1e-6)) failures.push_back("b");

  // (c)
  bool refine_exact = true;
  for (int trial = 0; trial < 200; ++trial) {
    const int c = rng.uniform_int(1, 4), h = rng.uniform_int(1, 8), w = rng.uniform_int(1, 8);
    const auto f = random_values(static_cast<std::size_t>(c * h * w), rng);
    const auto m = random_values(static_cast<std::size_t>(h * w), rng, 0, 1);
    ag::Tape tape;
    const ag::Var out = refine(tape.constant({c, h, w}, f), tape.constant({1, h, w}, m));
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < h * w; ++p) {
        const double x = f[static_cast<std::size_t>(ch * h * w + p)];
        refine_exact = refine_exact && out.data()[ch * h * w + p] == x + x * m[static_cast<std::size_t>(p)];
      }
  }
  if (!refine_exact) failures.push_back("c");

  // (d)
  DistributionMap t{5, 7, std::vector<std::uint8_t>(35)};
  for (auto& b : t.grid) b = rng.bernoulli(0.5);
  const double same = contrastive_loss(std::vector<double>(t.grid.begin(), t.grid.end()), t);
  const double ones = contrastive_loss(std::vector<double>(4, 1.0), DistributionMap{2, 2, std::vector<std::uint8_t>(4, 0)});
  if (!(same == 0.0 && ones == 0.8)) failures.push_back("d");

  // (e)
  bool maps_equal = true;
  for (int trial = 0; trial < 100; ++trial) {
    const int h = rng.uniform_int(1, 64), w = rng.uniform_int(1, 64);
    std::vector<BoundingBox> boxes;
    for (int i = rng.uniform_int(0, 5); i > 0; --i)
      boxes.push_back({rng.uniform(-4, w + 4), rng.uniform(-4, h + 4), rng.uniform(0.2, 30), rng.uniform(0.2, 30)});
    const DistributionMap m = render_distribution_map(boxes, h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) maps_equal = maps_equal && (m.at(y, x) != 0) == ellipse_oracle(boxes, x, y);
  }
  if (!maps_equal) failures.push_back("e");

  // (f)
  bool nms_equal = true;
  double ap_err = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Detection> d;
    std::vector<BoundingBox> gts;
    for (int i = rng.uniform_int(1, 6); i > 0; --i)
      gts.push_back({rng.uniform(5, 40), rng.uniform(5, 40), rng.uniform(4, 14), rng.uniform(4, 14)});
    for (int i = rng.uniform_int(0, 20); i > 0; --i) {
      BoundingBox b = gts[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(gts.size()) - 1))];
      if (rng.bernoulli(0.3)) b = {rng.uniform(5, 40), rng.uniform(5, 40), 8, 8};
      b.cx += rng.uniform(-2, 2);
      b.cy += rng.uniform(-2, 2);
      b.w *= rng.uniform(0.8, 1.2);
      d.push_back({b, rng.uniform(0.01, 0.99)});
    }
    const double thr = rng.uniform(0.1, 0.9);
    const auto kept = nms(d, thr);
    const auto idx = nms_oracle(d, thr);
    nms_equal = nms_equal && kept.size() == idx.size();
    for (std::size_t i = 0; nms_equal && i < kept.size(); ++i)
      nms_equal = kept[i].score == d[idx[i]].score && kept[i].box.cx == d[idx[i]].box.cx;
    const double at = iou_threshold(rng.uniform_int(0, 9));
    ap_err = std::max(ap_err, std::abs(average_precision(d, gts, at) - ap_oracle(d, gts, at)));
  }
  if (!(nms_equal && ap_err < 1e-9)) failures.push_back("f");

  std::string detail = "attend " + fmt("%.2e", attend_err) + " rows " + fmt("%.2e", row_err) + " refine " +
                       (refine_exact ? "exact" : "differs") + " dice " + fmt("%.17g", same) + "/" + fmt("%.17g", ones) +
                       " maps " + (maps_equal ? "equal" : "differ") + " nms " + (nms_equal ? "equal" : "differ") +
                       " ap " + fmt("%.2e", ap_err);
  for (const auto& f : failures) detail += " failed(" + f + ")";
  return {failures.empty(), detail};
}

// ---- A4 -----------------------------------------------------------------

Verdict gradients() {
  const auto t0 = Clock::now();
  const RunConfig rc = parse_config("image_size = 32\n");
  AuNet model(rc.model, 41);
  SceneConfig sc;
  sc.height = sc.width = 32;
  sc.min_pedestrian_height = 10;
  sc.max_pedestrian_height = 20;
  const ModalSample sample = generate_scene(42, sc);

  Rng pick(43);
  const auto entries = stratified_entries(model.params(), 64, pick);
  const auto errors = param_grad_errors(entries, [&](ag::Tape& tape) { return model.training_loss(tape, sample); });
  double worst = 0.0;
  std::string worst_name;
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (errors[i] > worst) {
      worst = errors[i];
      worst_name = entries[i].param->name;
    }

  // L_V through the router parameters.
  ParameterStore& store = model.params();
  std::vector<ParamEntry> router_entries;
  for (const auto& p : store.all())
    if (p->name.rfind("umvr.router", 0) == 0)
      for (std::size_t i = 0; i < p->value.size(); i += 7) router_entries.push_back({p.get(), i});
  const ModalSample partial = drop_modalities(sample, {true, false, true});
  double lv = 0.0;
  for (double e : param_grad_errors(router_entries, [&](ag::Tape& tape) {
         return availability_loss(model.router().probs(tape, partial), partial.availability);
       }))
    lv = std::max(lv, e);

  // L_C through one refinement head and the map itself.
  std::vector<ParamEntry> csr_entries;
  for (const auto& p : store.all())
    if (p->name.rfind("umvr.csr.T", 0) == 0)
      for (std::size_t i = 0; i < p->value.size(); i += 5) csr_entries.push_back({p.get(), i});
  std::vector<BoundingBox> frame;
  for (const auto& b : sample.boxes) frame.push_back(to_feature_frame(b, 8));
  const DistributionMap truth = render_distribution_map(frame, 4, 4);
  double lc = 0.0;
  for (double e : param_grad_errors(csr_entries, [&](ag::Tape& tape) {
         return contrastive_loss(model.weight_maps(tape, sample, Modality::kTir)[0], truth);
       }))
    lc = std::max(lc, e);
  Rng rng(44);
  std::vector<Parameter> map_in = {make_input({1, 4, 4}, rng, 0.0, 1.0)};
  lc = std::max(lc, max_input_grad_error(map_in, [&](ag::Tape&, const std::vector<ag::Var>& v) {
    return contrastive_loss(v[0], truth);
  }));

  std::vector<Parameter> qkv = {make_input({6, 4}, rng), make_input({5, 4}, rng), make_input({5, 4}, rng)};
  const double ca = max_input_grad_error(qkv, [](ag::Tape& tape, const std::vector<ag::Var>& v) {
    Rng coef(45);
    const ag::Var out = cross_attend(v[0], v[1], v[2]);
    return ag::sum(ag::mul(out, tape.constant(out.shape(), random_values(out.size(), coef))));
  });

  const double runtime = seconds_since(t0);
  return {worst < 1e-3 && lv < 1e-4 && lc < 1e-4 && ca < 1e-4 && runtime < 600.0,
          "full model max rel " + fmt("%.2e", worst) + " (" + worst_name + ") over " + std::to_string(entries.size()) +
              " params; L_V " + fmt("%.2e", lv) + " L_C " + fmt("%.2e", lc) + " cross_attend " + fmt("%.2e", ca) +
              " in " + fmt("%.1fs", runtime)};
}

// ---- A5 -----------------------------------------------------------------

Verdict overfit() {
  const auto t0 = Clock::now();
  Dataset ds = generate_dataset(32, 51, SceneConfig{}, 1.0);
  ds.test = ds.train;  // evaluate on the training scenes
  RunConfig rc;
  rc.steps = 2000;
  rc.modality_dropout = false;
  AuNet model(rc.model, rc.seed);
  Trainer tr(rc, model, ds);
  double ap50 = 0.0;
  std::uint64_t reached = 0;
  std::string curve;
  while (tr.completed_steps() < 2000) {
    for (int i = 0; i < 250; ++i) tr.step();
    ap50 = evaluate(model, ds, {true, true, true}).ap50;
    curve += " " + std::to_string(tr.completed_steps()) + ":" + fmt("%.3f", ap50);
    std::fprintf(stderr, "A5 step %llu AP50 %.4f (%.0fs)\n", static_cast<unsigned long long>(tr.completed_steps()),
                 ap50, seconds_since(t0));
    if (ap50 >= 0.9) {
      reached = tr.completed_steps();
      break;
    }
  }
  const double runtime = seconds_since(t0);
  return {reached > 0 && runtime < 900.0,
          "AP50 " + fmt("%.4f", ap50) + (reached ? " at step " + std::to_string(reached) : " not reached") +
              " in " + fmt("%.1fs", runtime) + "; curve" + curve};
}

// ---- A6 -----------------------------------------------------------------

Verdict ablation_trend() {
  const auto t0 = Clock::now();
  const Dataset ds = generate_dataset(600, 21, SceneConfig{}, 500.0 / 600.0);
  RunConfig rc;
  rc.steps = 6000;
  rc.modality_dropout = true;
  AuNet model(rc.model, rc.seed);
  Trainer tr(rc, model, ds);
  tr.run({}, [&](const StepRecord& r) {
    if (r.step % 500 == 0)
      std::fprintf(stderr, "A6 step %llu total %.4f (%.0fs)\n", static_cast<unsigned long long>(r.step), r.loss.total,
                   seconds_since(t0));
  });
  const auto rows = ablation_matrix(model, ds);
  std::fprintf(stderr, "%s", results_table(rows).c_str());
  std::map<std::string, double> ap;
  for (const auto& r : rows) ap[r.combo.label()] = r.ap50;
  const double best_single = std::max({ap["R"], ap["N"], ap["T"]});
  bool ok = ap["RNT"] >= best_single - 0.01;
  std::string detail = "RNT " + fmt("%.4f", ap["RNT"]) + " vs best single " + fmt("%.4f", best_single);
  for (const auto& [pair, a, b] : {std::tuple{"RN", "R", "N"}, {"NT", "N", "T"}, {"RT", "R", "T"}}) {
    const double floor = std::min(ap[a], ap[b]) - 0.01;
    ok = ok && ap[pair] >= floor;
    detail += std::string("; ") + pair + " " + fmt("%.4f", ap[pair]) + " vs " + fmt("%.4f", floor + 0.01);
  }
  const double runtime = seconds_since(t0);
  return {ok && runtime < 1800.0, detail + "; " + fmt("%.1fs", runtime)};
}

// ---- A7 -----------------------------------------------------------------

Verdict robust_inference() {
  const Dataset ds = generate_dataset(60, 71, SceneConfig{}, 0.75);
  RunConfig rc;
  rc.steps = 150;
  AuNet trained(rc.model, rc.seed);
  Trainer tr(rc, trained, ds);
  tr.run();
  const fs::path dir = fs::temp_directory_path() / "aunet_acceptance_a7";
  fs::remove_all(dir);
  save_checkpoint(tr.checkpoint(), dir / "checkpoint.bin");

  const LoadedModel lm = load_model(dir / "checkpoint.bin");
  const std::string before = serialize_checkpoint(capture_checkpoint(lm.config, *lm.model, nullptr, 0));
  int ok = 0;
  std::string detail;
  for (const auto& combo : all_combos()) {
    try {
      const EvalResult r = evaluate(*lm.model, ds, combo);
      bool finite = std::isfinite(r.map);
      for (double v : r.ap) finite = finite && std::isfinite(v) && v >= 0.0 && v <= 1.0;
      ok += finite;
      detail += " " + combo.label() + "=" + fmt("%.3f", r.ap50);
    } catch (const std::exception& e) {
      detail += " " + combo.label() + "=error(" + e.what() + ")";
    }
  }
  const bool unchanged = serialize_checkpoint(capture_checkpoint(lm.config, *lm.model, nullptr, 0)) == before;
  fs::remove_all(dir);
  return {ok == 7 && unchanged, std::to_string(ok) + "/7 combos evaluated from one checkpoint, parameters " +
                                    (unchanged ? "untouched" : "modified") + ";" + detail};
}

// ---- A8 -----------------------------------------------------------------

int shell(const std::string& cmd) {
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Verdict determinism(const std::string& cli) {
  const fs::path base = fs::temp_directory_path() / "aunet_acceptance_a8";
  fs::remove_all(base);
  std::vector<fs::path> roots = {base / "first", base / "second"};
  for (const fs::path& root : roots) {
    fs::create_directories(root);
    // Identical relative paths under different output roots keep the embedded
    // config text identical too.
    const std::string env = "AUNET_OUTPUT_ROOT='" + root.string() + "' ";
    const std::string quiet = " > '" + (root / "log.txt").string() + "' 2>&1";
    if (shell(env + cli + " gen-data --out data --count 48 --seed 81" + quiet) != 0 ||
        shell(env + cli + " train --data data --out run --steps 60 --seed 82 --quiet" + quiet) != 0 ||
        shell(env + cli + " ablate --checkpoint run/checkpoint.bin --data data --out ablate" + quiet) != 0)
      return {false, "pipeline failed under " + root.string() + ": " + read_bytes(root / "log.txt")};
  }
  std::string detail;
  bool ok = true;
  for (const char* f : {"ablate/ablation.csv", "run/train_log.csv", "run/checkpoint.bin"}) {
    const std::string a = read_bytes(roots[0] / f), b = read_bytes(roots[1] / f);
    const bool same = !a.empty() && a == b;
    ok = ok && same;
    detail += std::string(" ") + f + (same ? " identical" : " differs") + " (" + std::to_string(a.size()) + " bytes)";
  }
  fs::remove_all(base);
  return {ok, "two seeded runs:" + detail};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <A1..A8> [cli]\n");
    return 2;
  }
  const std::string which = argv[1];
  const std::map<std::string, std::function<Verdict()>> runs = {
      {"A1", router_fidelity},
      {"A2", gating_table},
      {"A3", kernels},
      {"A4", gradients},
      {"A5", overfit},
      {"A6", ablation_trend},
      {"A7", robust_inference},
      {"A8", [&] { return determinism(argc > 2 ? argv[2] : "aunet"); }},
  };
  const auto it = runs.find(which);
  if (it == runs.end()) {
    std::fprintf(stderr, "unknown criterion %s\n", which.c_str());
    return 2;
  }
  Verdict v;
  try {
    v = it->second();
  } catch (const std::exception& e) {
    v = {false, std::string("exception: ") + e.what()};
  }
  std::printf("%s %s %s\n", which.c_str(), v.pass ? "PASS" : "FAIL", v.detail.c_str());
  return v.pass ? 0 : 1;
}
