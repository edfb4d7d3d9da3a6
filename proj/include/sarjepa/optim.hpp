#pragma once

#include <cstdint>
#include <vector>

#include "sarjepa/model.hpp"

namespace sarjepa {

/// Linear warmup from 0 to peak over warmup_steps, then half-cosine decay to 0
/// at total_steps.
double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double peak_lr);

/// Constant warmup_lr for the first warmup_steps, then half-cosine decay from
/// peak_lr over the remaining steps.
double lr_constant_warmup(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double peak_lr,
                          double warmup_lr);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Decoupled-weight-decay Adam over an ordered list of tensors. Decay applies
/// only to tensors whose ParamInfo::decay is set.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  /// theta <- theta - lr * wd * theta, then the bias-corrected Adam step.
  void step(const std::vector<ParamRef<T>>& params, const std::vector<ParamRef<T>>& grads, double lr);

  std::int64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<Mat<T>> m_, v_;
};

}  // namespace sarjepa
