#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "avemo/autograd.hpp"

namespace avemo {

struct OptimizerConfig {
  double peak_lr = 1e-3;
  double min_lr = 0.0;  // cosine floor reached at max_steps
  double weight_decay = 0.01;
  int warmup_steps = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_grad_norm = 1.0;  // <= 0 disables clipping

  void validate() const {
    if (warmup_steps < 0) fail(ErrorCode::kConfigError, "warmup_steps must be >= 0");
    if (peak_lr <= 0 || min_lr < 0 || min_lr > peak_lr) fail(ErrorCode::kConfigError, "need 0 <= min_lr <= peak_lr");
    if (weight_decay < 0) fail(ErrorCode::kConfigError, "weight_decay must be >= 0");
  }
};

/// Linear warm-up, peak * min(1, (step + 1) / warmup), so step 0 already has a
/// nonzero rate; from step == warmup the rate follows a half cosine from
/// peak down to min_lr at max_steps and stays there.
inline double learning_rate(const OptimizerConfig& cfg, int step, int max_steps) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.peak_lr * std::min(1.0, static_cast<double>(step + 1) / cfg.warmup_steps);
  const int span = max_steps - cfg.warmup_steps;
  if (span <= 0) return cfg.peak_lr;
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / span);
  return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

/// AdamW with decoupled weight decay. Only parameters flagged trainable are
/// touched; biases and norm scales are not decayed.
template <class T>
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  /// Global gradient norm over trainable parameters, before clipping.
  double step(const std::vector<ag::Parameter<T>*>& params, double lr) {
    double sq = 0;
    for (auto* p : params)
      if (p->trainable && p->has_grad()) sq += static_cast<double>(p->grad.squaredNorm());
    const double norm = std::sqrt(sq);
    const double clip = cfg_.max_grad_norm > 0 && norm > cfg_.max_grad_norm ? cfg_.max_grad_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1 - std::pow(cfg_.beta1, t_), bc2 = 1 - std::pow(cfg_.beta2, t_);
    for (auto* p : params) {
      if (!p->trainable) continue;
      auto& st = state_[p->name];
      if (st.m.size() != p->value.size()) {
        st.m = Mat<T>::Zero(p->value.rows(), p->value.cols());
        st.v = Mat<T>::Zero(p->value.rows(), p->value.cols());
      }
      const Mat<T> g = p->has_grad() ? Mat<T>(p->grad * static_cast<T>(clip))
                                     : Mat<T>(Mat<T>::Zero(p->value.rows(), p->value.cols()));
      st.m = static_cast<T>(cfg_.beta1) * st.m + static_cast<T>(1 - cfg_.beta1) * g;
      st.v = static_cast<T>(cfg_.beta2) * st.v + static_cast<T>(1 - cfg_.beta2) * g.cwiseProduct(g);
      const bool decay = p->kind != ag::ParamKind::kBias && p->kind != ag::ParamKind::kNorm;
      if (decay && cfg_.weight_decay > 0) p->value *= static_cast<T>(1 - lr * cfg_.weight_decay);
      p->value.array() -= static_cast<T>(lr) * (st.m.array() / static_cast<T>(bc1)) /
                          ((st.v.array() / static_cast<T>(bc2)).sqrt() + static_cast<T>(cfg_.eps));
    }
    return norm;
  }

  int steps_taken() const { return t_; }

 private:
  struct State {
    Mat<T> m, v;
  };
  OptimizerConfig cfg_;
  std::map<std::string, State> state_;
  int t_ = 0;
};

}  // namespace avemo
