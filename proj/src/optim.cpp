#include "rec/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace rec {

void ScheduleConfig::validate() const {
  if (peak_rate <= 0.0) throw std::runtime_error("schedule: peak_rate must be positive");
  if (warmup_steps <= 0) throw std::runtime_error("schedule: warmup_steps must be positive");
  if (total_steps < warmup_steps) {
    throw std::runtime_error("schedule: total_steps must be at least warmup_steps");
  }
}

double lr_schedule(int step, const ScheduleConfig& cfg) {
  cfg.validate();
  if (step <= 0) throw std::runtime_error("lr_schedule: step must be positive");
  if (step <= cfg.warmup_steps) {
    return cfg.peak_rate * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  return cfg.peak_rate / std::sqrt(static_cast<double>(step - cfg.warmup_steps));
}

AdamState AdamState::init(const std::vector<Tensor>& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const Tensor& p : params) {
    s.m.push_back(Tensor::zeros(p.shape));
    s.v.push_back(Tensor::zeros(p.shape));
  }
  return s;
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               float rate) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::runtime_error("adam_step: parameter/gradient count mismatch");
  }
  for (size_t t = 0; t < params.size(); ++t) {
    if (!params[t].same_shape(grads[t])) throw std::runtime_error("adam_step: shape mismatch");
    if (!grads[t].all_finite()) {
      throw std::runtime_error("adam_step: poisoned gradient (NaN/Inf), step aborted");
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(state.beta1), static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(static_cast<double>(state.beta2), static_cast<double>(state.step));
  for (size_t t = 0; t < params.size(); ++t) {
    float* p = params[t].data.data();
    const float* g = grads[t].data.data();
    float* m = state.m[t].data.data();
    float* v = state.v[t].data.data();
    const size_t n = params[t].numel();
    for (size_t i = 0; i < n; ++i) {
      m[i] = state.beta1 * m[i] + (1.0f - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0f - state.beta2) * g[i] * g[i];
      const float mhat = static_cast<float>(m[i] / bc1);
      const float vhat = static_cast<float>(v[i] / bc2);
      p[i] -= rate * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace rec
