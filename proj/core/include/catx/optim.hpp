#pragma once

#include "catx/tensor.hpp"

namespace catx {

// Bias-corrected Adam over an ordered parameter list. Moment buffers are
// indexed by position, so the parameter order must stay fixed for the life
// of the state (and across checkpoint save/load).
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  static AdamState init(const std::vector<Tensor*>& params, double beta1,
                        double beta2, double eps);
};

// In-place update: p -= lr * m_hat / (sqrt(v_hat) + eps). Call only after the
// tape that produced the gradients has been consumed (parameters share
// storage with their watched copies).
void adam_step(const std::vector<Tensor*>& params,
               const std::vector<Tensor>& grads, AdamState& state, double lr,
               Precision precision = Precision::f64);

// base_lr * (1 + cos(pi * step / total_steps)) / 2.
double cosine_lr(int step, int total_steps, double base_lr);

}  // namespace catx
