#include "aunet/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "aunet/error.hpp"
#include "aunet/rng.hpp"

namespace aunet {

namespace {

constexpr std::uint64_t kBatchStream = 0xba7c4;

bool finite(const LossBundle& b) {
  for (double v : {b.cls, b.loc, b.det, b.avail, b.contrast, b.lambda1, b.lambda2, b.total})
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

std::string loss_log_header() { return "step,cls,loc,det,avail,contrast,lambda1,lambda2,total,grad_norm"; }

std::string loss_log_row(const StepRecord& r) {
  char buf[512];
  const LossBundle& b = r.loss;
  std::snprintf(buf, sizeof buf, "%llu,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g",
                static_cast<unsigned long long>(r.step), b.cls, b.loc, b.det, b.avail, b.contrast, b.lambda1,
                b.lambda2, b.total, r.grad_norm);
  return buf;
}

std::uint64_t batch_seed(std::uint64_t run_seed, std::uint64_t step) {
  return derive_seed(run_seed, kBatchStream, step);
}

std::vector<BatchItem> draw_batch(const Dataset& data, std::uint64_t seed, int batch_size, bool dropout) {
  if (data.train.empty()) throw ConfigError("dataset has no training samples");
  Rng rng(seed);
  const auto& combos = all_combos();
  std::vector<BatchItem> out;
  for (int i = 0; i < batch_size; ++i) {
    BatchItem item;
    item.sample = data.train[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(data.train.size()) - 1))];
    item.mask = dropout ? combos[static_cast<std::size_t>(rng.uniform_int(0, 6))] : AvailabilityVector{true, true, true};
    out.push_back(item);
  }
  return out;
}

Trainer::Trainer(const RunConfig& config, AuNet& model, const Dataset& data)
    : config_(config), model_(model), data_(data), optimizer_(make_optimizer(config.optimizer)) {
  config_.validate();
}

void Trainer::resume(const Checkpoint& ckpt) {
  restore_parameters(ckpt, model_);
  optimizer_->load_state(ckpt.optimizer);
  step_ = ckpt.step;
}

Checkpoint Trainer::checkpoint() const { return capture_checkpoint(config_, model_, optimizer_.get(), step_); }

StepRecord Trainer::step() {
  const std::uint64_t next = step_ + 1;
  const std::uint64_t seed = batch_seed(config_.seed, next);
  const std::vector<BatchItem> batch = draw_batch(data_, seed, config_.batch_size, config_.modality_dropout);
  const double inv = 1.0 / static_cast<double>(batch.size());

  GradientBuffer grads;
  StepRecord rec;
  rec.step = next;
  for (const BatchItem& item : batch) {
    const ModalSample& base = data_.samples.at(item.sample);
    AvailabilityVector mask = item.mask;
    for (Modality m : kModalities) mask.set(m, mask[m] && base.availability[m]);
    if (!mask.any()) mask = base.availability;
    const ModalSample sample = mask == base.availability ? base : drop_modalities(base, mask);

    ag::Tape tape;
    LossBundle b;
    const ag::Var loss = model_.training_loss(tape, sample, &b);
    tape.backward(loss);
    tape.accumulate_param_grads(grads, inv);
    rec.loss.cls += inv * b.cls;
    rec.loss.loc += inv * b.loc;
    rec.loss.det += inv * b.det;
    rec.loss.avail += inv * b.avail;
    rec.loss.contrast += inv * b.contrast;
    rec.loss.total += inv * b.total;
    rec.loss.lambda1 = b.lambda1;
    rec.loss.lambda2 = b.lambda2;
  }

  if (!finite(rec.loss) || !grads.all_finite()) {
    if (!diagnostic_dir.empty()) {
      nlohmann::json j;
      j["step"] = next;
      j["batch_seed"] = seed;
      j["loss"] = loss_log_row(rec);
      for (const BatchItem& item : batch)
        j["batch"].push_back({{"sample", data_.samples[item.sample].id}, {"mask", item.mask.bits()}});
      std::filesystem::create_directories(diagnostic_dir);
      std::ofstream(diagnostic_dir / "nonfinite_batch.json") << j.dump(2) << '\n';
    }
    throw NumericError("non-finite loss or gradient at step " + std::to_string(next) + " (batch seed " +
                       std::to_string(seed) + ")");
  }

  rec.grad_norm = clip_gradients(model_.params(), grads, config_.optimizer.grad_clip);
  optimizer_->step(model_.params(), grads);
  step_ = next;
  return rec;
}

std::vector<StepRecord> Trainer::run(const std::filesystem::path& out_dir,
                                     const std::function<void(const StepRecord&)>& on_step) {
  std::ofstream log;
  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
    const std::filesystem::path log_path = out_dir / "train_log.csv";
    // Keep only rows up to the resumed step so the log stays contiguous.
    std::vector<std::string> keep;
    if (step_ > 0) {
      std::ifstream in(log_path);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty() || line == loss_log_header()) continue;
        if (std::stoull(line.substr(0, line.find(','))) <= step_) keep.push_back(line);
      }
    }
    log.open(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write " + log_path.string());
    log << loss_log_header() << '\n';
    for (const std::string& l : keep) log << l << '\n';
    log.flush();
    if (diagnostic_dir.empty()) diagnostic_dir = out_dir;
  }

  std::vector<StepRecord> records;
  while (step_ < static_cast<std::uint64_t>(config_.steps)) {
    const StepRecord r = step();
    records.push_back(r);
    if (log.is_open()) log << loss_log_row(r) << '\n';
    if (on_step) on_step(r);
    if (!out_dir.empty() && config_.checkpoint_interval > 0 &&
        step_ % static_cast<std::uint64_t>(config_.checkpoint_interval) == 0) {
      log.flush();
      save_checkpoint(checkpoint(), out_dir / ("checkpoint_" + std::to_string(step_) + ".bin"));
    }
  }
  if (!out_dir.empty()) save_checkpoint(checkpoint(), out_dir / "checkpoint.bin");
  return records;
}

}  // namespace aunet
