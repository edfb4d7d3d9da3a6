#include "sarjepa/optim.hpp"

#include <cmath>
#include <numbers>

#include "sarjepa/errors.hpp"

namespace sarjepa {

double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double peak_lr) {
  require(step >= 0 && step < total_steps, "lr_at: step out of range");
  require(warmup_steps >= 0 && warmup_steps < total_steps, "lr_at: warmup must be shorter than the run");
  if (step < warmup_steps) return peak_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double lr_constant_warmup(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double peak_lr,
                          double warmup_lr) {
  if (step < warmup_steps) return warmup_lr;
  return lr_at(step, total_steps, warmup_steps, peak_lr);
}

template <typename T>
void AdamW<T>::step(const std::vector<ParamRef<T>>& params, const std::vector<ParamRef<T>>& grads, double lr) {
  require(params.size() == grads.size(), "AdamW: parameter/gradient count mismatch");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Mat<T>::Zero(p.value->rows(), p.value->cols()));
      v_.push_back(Mat<T>::Zero(p.value->rows(), p.value->cols()));
    }
  }
  require(m_.size() == params.size(), "AdamW: parameter list changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(cfg_.eps);
  const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);

  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat<T>& theta = *params[i].value;
    const Mat<T>& g = *grads[i].value;
    if (params[i].info.decay && cfg_.weight_decay != 0.0) theta *= decay;
    m_[i] = b1 * m_[i] + (T(1) - b1) * g;
    v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
    theta.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace sarjepa
