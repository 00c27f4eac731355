#include "catx/optim.hpp"

#include "catx/rng.hpp"

#include <cmath>

namespace catx {

double Rng::normal() {
  // Box-Muller on two fresh uniforms; u1 nudged away from 0.
  const double u1 = std::max(uniform(), 1e-300);
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::trunc_normal(double stddev, double clip) {
  for (;;) {
    const double z = normal();
    if (std::fabs(z) <= clip) return z * stddev;
  }
}

uint64_t Rng::mix(uint64_t a, uint64_t b) {
  Rng r(a ^ (b * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull));
  return r.next_u64();
}

uint64_t Rng::hash_str(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (char c : s) {
    h ^= uint64_t(uint8_t(c));
    h *= 0x100000001b3ull;
  }
  return h;
}

AdamState AdamState::init(const std::vector<Tensor*>& params, double beta1,
                          double beta2, double eps) {
  AdamState s;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  for (const Tensor* p : params) {
    s.m.emplace_back(size_t(p->size()), 0.0);
    s.v.emplace_back(size_t(p->size()), 0.0);
  }
  return s;
}

void adam_step(const std::vector<Tensor*>& params,
               const std::vector<Tensor>& grads, AdamState& state, double lr,
               Precision precision) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw TensorError("adam_step: parameter/gradient/state counts disagree");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    if (p.shape() != g.shape())
      throw TensorError("adam_step: gradient shape " + shape_str(g.shape()) +
                        " does not match parameter " + shape_str(p.shape()));
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t j = 0; j < m.size(); ++j) {
      const double gj = g.values()[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      double upd = p.values()[j] - lr * mhat / (std::sqrt(vhat) + state.eps);
      if (precision == Precision::f32) upd = double(float(upd));
      p.values()[j] = upd;
    }
  }
}

double cosine_lr(int step, int total_steps, double base_lr) {
  if (total_steps <= 0) return base_lr;
  const double frac = double(step) / double(total_steps);
  return base_lr * (1.0 + std::cos(M_PI * frac)) / 2.0;
}

}  // namespace catx
