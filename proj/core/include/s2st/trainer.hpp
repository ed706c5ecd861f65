#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "s2st/model.hpp"
#include "s2st/nn.hpp"
#include "s2st/units.hpp"

namespace s2st::trainer {

struct TrainConfig {
  int max_steps = 1500;
  int batch_size = 16;
  double lr_peak = 2e-3;
  int warmup_steps = 300;
  nn::AdamConfig adam;
  uint64_t seed = 1;
  bool use_specaugment = false;
  units::SpecAugmentPolicy specaugment;
  int log_every = 50;
  int checkpoint_every = 0;  // 0: no periodic checkpoints
  std::string checkpoint_dir;
};

/// Single-threaded deterministic training loop. Batch composition, dropout
/// and augmentation streams are pure functions of (seed, step), so resuming
/// from a checkpoint continues bit-identically.
class Trainer {
 public:
  Trainer(model::S2UTModel model, TrainConfig cfg);

  void set_data(std::vector<model::TrainItem> items);

  model::LossBreakdown run_step();
  /// Runs until cfg.max_steps, optionally reporting each step's breakdown.
  void run(const std::function<void(int64_t, const model::LossBreakdown&)>& on_step = nullptr);

  int64_t step() const { return step_; }
  model::S2UTModel& model() { return model_; }
  const model::S2UTModel& model() const { return model_; }

  nn::Checkpoint make_checkpoint() const;
  static Trainer from_checkpoint(const nn::Checkpoint& ckpt, TrainConfig cfg);

 private:
  std::vector<int> batch_indices(int64_t step) const;

  model::S2UTModel model_;
  TrainConfig cfg_;
  std::vector<model::TrainItem> items_;
  int64_t step_{0};
  nn::Adam adam_;
};

/// Rebuilds a model (architecture + weights) from a checkpoint.
model::S2UTModel model_from_checkpoint(const nn::Checkpoint& ckpt);

}  // namespace s2st::trainer
