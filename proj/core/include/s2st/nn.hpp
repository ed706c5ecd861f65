#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "s2st/autodiff.hpp"
#include "s2st/kv.hpp"

namespace s2st::nn {

/// Named trainable parameters in fixed creation order. The order is part of
/// the determinism contract: the same seed yields bit-identical parameters.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ad::Var var;
  };

  ad::Var xavier(const std::string& name, int rows, int cols, std::mt19937_64& rng);
  ad::Var zeros(const std::string& name, int rows, int cols);
  ad::Var ones(const std::string& name, int rows, int cols);
  ad::Var constant(const std::string& name, int rows, int cols, double value);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  Entry* find(const std::string& name);
  size_t parameter_count() const;
  void zero_grads();
  /// Order-stable FNV hash of all parameter bytes; used by determinism tests.
  uint64_t checksum() const;

 private:
  ad::Var add(const std::string& name, ad::Mat value);
  std::vector<Entry> entries_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(const ParamStore& params, AdamConfig config);

  void step(ParamStore& params, double lr);
  int64_t steps_taken() const { return t_; }

  // Checkpoint access.
  const AdamConfig& config() const { return cfg_; }
  std::vector<ad::Mat>& first_moments() { return m_; }
  std::vector<ad::Mat>& second_moments() { return v_; }
  void set_steps(int64_t t) { t_ = t; }

 private:
  AdamConfig cfg_;
  std::vector<ad::Mat> m_, v_;
  int64_t t_{0};
};

/// Inverse square-root decay with linear warmup:
/// lr(t) = peak * min(t / warmup, sqrt(warmup / t)).
double inverse_sqrt_lr(int64_t step, double peak, int64_t warmup);

/// Versioned checkpoint container: named tensors, a flat key/value config
/// block, optimizer state and the training RNG stream.
struct Checkpoint {
  std::string kind;  // e.g. "s2ut", "duration"
  kv::Document config;
  std::vector<std::pair<std::string, ad::Mat>> tensors;
  std::vector<std::pair<std::string, ad::Mat>> adam_m;
  std::vector<std::pair<std::string, ad::Mat>> adam_v;
  int64_t adam_steps{0};
  int64_t train_step{0};
  std::string rng_state;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace s2st::nn
