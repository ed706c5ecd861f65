#include "s2st/trainer.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cmath>
#include <random>

namespace s2st::trainer {

Trainer::Trainer(model::S2UTModel model, TrainConfig cfg)
    : model_(std::move(model)), cfg_(cfg), adam_(model_.params(), cfg.adam) {
  if (cfg_.batch_size < 1) throw ConfigError("trainer: batch_size must be >= 1");
  if (cfg_.max_steps < 1) throw ConfigError("trainer: max_steps must be >= 1");
  if (cfg_.lr_peak <= 0.0) throw ConfigError("trainer: lr_peak must be positive");
}

void Trainer::set_data(std::vector<model::TrainItem> items) {
  if (items.empty()) throw DataError("trainer: no training items");
  items_ = std::move(items);
}

std::vector<int> Trainer::batch_indices(int64_t step) const {
  const int n = static_cast<int>(items_.size());
  const int b = std::min(cfg_.batch_size, n);
  const int64_t batches_per_epoch = (n + b - 1) / b;
  const int64_t epoch = step / batches_per_epoch;
  const int64_t pos = step % batches_per_epoch;

  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(derive_seed(cfg_.seed, "epoch", static_cast<uint64_t>(epoch)));
  std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<int> out;
  for (int64_t i = pos * b; i < std::min<int64_t>(n, (pos + 1) * b); ++i)
    out.push_back(perm[static_cast<size_t>(i)]);
  return out;
}

model::LossBreakdown Trainer::run_step() {
  if (items_.empty()) throw DataError("trainer: no training items");
  const uint64_t step_seed = derive_seed(cfg_.seed, "step", static_cast<uint64_t>(step_));

  std::vector<model::TrainItem> batch;
  for (int idx : batch_indices(step_)) {
    batch.push_back(items_[static_cast<size_t>(idx)]);
    if (cfg_.use_specaugment) {
      model::TrainItem& item = batch.back();
      item.source_frames = units::specaugment(item.source_frames, cfg_.specaugment,
                                              derive_seed(step_seed, "specaug", batch.size()));
    }
  }

  model_.params().zero_grads();
  model::LossBreakdown bd =
      model_.forward_train(batch, step_seed, /*training=*/true, /*accumulate_grads=*/true);
  if (const char* bad = bd.first_non_finite()) {
    throw TrainingError(
        fmt::format("training aborted: {} became non-finite at step {}", bad, step_ + 1));
  }

  const double lr = nn::inverse_sqrt_lr(step_ + 1, cfg_.lr_peak, cfg_.warmup_steps);
  adam_.step(model_.params(), lr);
  ++step_;
  return bd;
}

void Trainer::run(const std::function<void(int64_t, const model::LossBreakdown&)>& on_step) {
  while (step_ < cfg_.max_steps) {
    model::LossBreakdown bd = run_step();
    if (on_step) on_step(step_, bd);
    if (cfg_.log_every > 0 && (step_ % cfg_.log_every == 0 || step_ == cfg_.max_steps)) {
      fmt::print(stderr, "[train] step {}/{} total {:.4f} unit {:.4f} aux {:.4f} ctc {:.4f} lr {:.2e}\n",
                 step_, cfg_.max_steps, bd.total, bd.unit_loss, bd.aux_sum(), bd.ctc_loss,
                 nn::inverse_sqrt_lr(step_, cfg_.lr_peak, cfg_.warmup_steps));
    }
    if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0 &&
        !cfg_.checkpoint_dir.empty()) {
      make_checkpoint().save(fmt::format("{}/step{:06d}.ckpt", cfg_.checkpoint_dir, step_));
    }
  }
}

nn::Checkpoint Trainer::make_checkpoint() const {
  nn::Checkpoint ckpt;
  ckpt.kind = "s2ut";
  ckpt.config = model_.config().to_kv();
  for (const auto& e : model_.params().entries()) ckpt.tensors.emplace_back(e.name, e.var.v());
  const auto& entries = model_.params().entries();
  auto& adam = const_cast<nn::Adam&>(adam_);
  for (size_t i = 0; i < entries.size(); ++i) {
    ckpt.adam_m.emplace_back(entries[i].name, adam.first_moments()[i]);
    ckpt.adam_v.emplace_back(entries[i].name, adam.second_moments()[i]);
  }
  ckpt.adam_steps = adam_.steps_taken();
  ckpt.train_step = step_;
  return ckpt;
}

model::S2UTModel model_from_checkpoint(const nn::Checkpoint& ckpt) {
  if (ckpt.kind != "s2ut") throw DataError("checkpoint kind is '" + ckpt.kind + "', expected 's2ut'");
  model::S2UTModel m(model::ModelConfig::from_kv(ckpt.config));
  if (ckpt.tensors.size() != m.params().entries().size())
    throw DataError("checkpoint tensor count does not match the model architecture");
  for (const auto& [name, value] : ckpt.tensors) {
    auto* e = m.params().find(name);
    if (!e) throw DataError("checkpoint tensor '" + name + "' not present in model");
    if (e->var.v().rows() != value.rows() || e->var.v().cols() != value.cols())
      throw DataError("checkpoint tensor '" + name + "' has mismatched shape");
    e->var.node->value = value;
  }
  return m;
}

Trainer Trainer::from_checkpoint(const nn::Checkpoint& ckpt, TrainConfig cfg) {
  Trainer t(model_from_checkpoint(ckpt), cfg);
  t.step_ = ckpt.train_step;
  t.adam_ = nn::Adam(t.model_.params(), cfg.adam);
  auto& entries = t.model_.params().entries();
  if (ckpt.adam_m.size() == entries.size() && ckpt.adam_v.size() == entries.size()) {
    for (size_t i = 0; i < entries.size(); ++i) {
      t.adam_.first_moments()[i] = ckpt.adam_m[i].second;
      t.adam_.second_moments()[i] = ckpt.adam_v[i].second;
    }
    t.adam_.set_steps(ckpt.adam_steps);
  }
  return t;
}

}  // namespace s2st::trainer
