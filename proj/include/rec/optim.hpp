#pragma once

#include <vector>

#include "rec/tensor.hpp"

namespace rec {

struct ScheduleConfig {
  double peak_rate = 0.1024;
  int warmup_steps = 1000;
  int total_steps = 3500;

  void validate() const;
};

// Linear warmup to peak_rate over warmup_steps, then peak_rate/sqrt(s - W).
// Step numbering starts at 1.
double lr_schedule(int step, const ScheduleConfig& cfg);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;

  static AdamState init(const std::vector<Tensor>& params);
};

// Bias-corrected Adam update in place. Throws on non-finite gradients without
// touching params or state.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               float rate);

}  // namespace rec
