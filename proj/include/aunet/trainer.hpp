#pragma once

// Mini-batch training loop with modality dropout, per-step loss logging,
// interval checkpoints and exact resume.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "aunet/checkpoint.hpp"
#include "aunet/config.hpp"
#include "aunet/datagen.hpp"
#include "aunet/model.hpp"
#include "aunet/optimizer.hpp"

namespace aunet {

struct StepRecord {
  std::uint64_t step = 0;  // 1-based
  LossBundle loss;         // batch mean
  double grad_norm = 0.0;  // before clipping
};

// Header and row of the per-step CSV log.
std::string loss_log_header();
std::string loss_log_row(const StepRecord& r);

// Seed of the batch drawn at `step`; a pure function of (run seed, step).
std::uint64_t batch_seed(std::uint64_t run_seed, std::uint64_t step);

struct BatchItem {
  std::size_t sample = 0;  // index into Dataset::samples
  AvailabilityVector mask;
};

// Train-split picks and dropout masks for one step.
std::vector<BatchItem> draw_batch(const Dataset& data, std::uint64_t seed, int batch_size, bool dropout);

class Trainer {
 public:
  Trainer(const RunConfig& config, AuNet& model, const Dataset& data);

  // Continues from a checkpoint's optimizer state and step counter.
  void resume(const Checkpoint& ckpt);

  // One optimizer step. Throws NumericError on a non-finite loss or gradient
  // after writing a diagnostic file to `diagnostic_dir` (when non-empty).
  StepRecord step();

  // Runs until `config.steps` steps have completed. When `out_dir` is non-empty
  // it appends to `out_dir/train_log.csv` and writes `checkpoint_<step>.bin` at
  // the interval plus `checkpoint.bin` at the end.
  std::vector<StepRecord> run(const std::filesystem::path& out_dir = {},
                              const std::function<void(const StepRecord&)>& on_step = {});

  std::uint64_t completed_steps() const { return step_; }
  Checkpoint checkpoint() const;
  const Optimizer& optimizer() const { return *optimizer_; }

  std::filesystem::path diagnostic_dir;

 private:
  RunConfig config_;
  AuNet& model_;
  const Dataset& data_;
  std::unique_ptr<Optimizer> optimizer_;
  std::uint64_t step_ = 0;
};

}  // namespace aunet
