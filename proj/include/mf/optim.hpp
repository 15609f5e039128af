#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mf/errors.hpp"
#include "mf/network.hpp"

namespace mf {

struct OptimConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch = 4;
  int lr_decay_every = 4000;
  double lr_decay_factor = 0.8;
  int total_iters = 2000;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) {
      throw ConfigError("betas must lie in [0, 1)");
    }
    if (!(eps > 0)) throw ConfigError("eps must be positive");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (lr_decay_every < 1) throw ConfigError("lr_decay_every must be >= 1");
    if (!(lr_decay_factor > 0)) throw ConfigError("lr_decay_factor must be positive");
    if (total_iters < 0) throw ConfigError("total_iters must be >= 0");
  }
};

// Bias-corrected Adam on one parameter array. Moments are kept in double
// regardless of the parameter precision. `t` is the post-increment step
// index (1 on the first update).
template <typename T>
void adam_update_array(std::span<T> theta, std::span<const T> grad,
                       std::vector<double>& m, std::vector<double>& v,
                       long long t, const OptimConfig& cfg, double lr) {
  if (m.size() != theta.size()) m.assign(theta.size(), 0.0);
  if (v.size() != theta.size()) v.assign(theta.size(), 0.0);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = i < grad.size() ? static_cast<double>(grad[i]) : 0.0;
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    theta[i] = static_cast<T>(static_cast<double>(theta[i]) -
                              lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
  }
}

template <typename T>
struct AdamState {
  struct Slot {
    std::vector<double> m, v;
  };
  std::map<std::string, Slot> slots;
  long long step_count = 0;

  static AdamState init(const Parameters<T>& params) {
    AdamState s;
    for (const auto& [name, t] : params.named) {
      Slot slot;
      slot.m.assign(static_cast<std::size_t>(t.numel()), 0.0);
      slot.v.assign(static_cast<std::size_t>(t.numel()), 0.0);
      s.slots.emplace(name, std::move(slot));
    }
    return s;
  }
};

// One optimizer step over all parameters. A non-finite gradient anywhere
// aborts the step before any parameter is touched.
template <typename T>
void adam_step(Parameters<T>& params, AdamState<T>& state,
               const OptimConfig& cfg, double lr) {
  cfg.validate();
  for (const auto& [name, t] : params.named) {
    for (T g : t.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericsError("non-finite gradient in " + name + "; step aborted");
      }
    }
  }
  ++state.step_count;
  for (auto& [name, t] : params.named) {
    auto it = state.slots.find(name);
    if (it == state.slots.end()) {
      it = state.slots.emplace(name, typename AdamState<T>::Slot{}).first;
    }
    adam_update_array<T>(t.raw_values(), t.grad(), it->second.m, it->second.v,
                         state.step_count, cfg, lr);
  }
}

// Learning rate after `iter` completed iterations of the decay schedule.
inline double scheduled_lr(const OptimConfig& cfg, int iter) {
  double lr = cfg.lr;
  for (int k = cfg.lr_decay_every; k <= iter; k += cfg.lr_decay_every) {
    lr *= cfg.lr_decay_factor;
  }
  return lr;
}

}  // namespace mf
