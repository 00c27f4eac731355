#pragma once

// Independent reference implementations used as test oracles. These live in
// test code on purpose: they must never share a code path with the library
// they check.

#include "catx/tensor.hpp"

#include <array>
#include <vector>

namespace oracles {

// Scalar Adam recurrence, written directly from the update equations.
struct ScalarAdamRef {
  double beta1, beta2, eps;
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double param, double grad, double lr);
};

// Quadruple-nested-loop evaluation of multi-scale deformable cross-attention
// for one head:
//   out_q = sum_l sum_k A[q,l,k] * V_l sampled at (phi_l(p_q) + dp[q,l,k])
// value maps are [D, h_l, w_l]; sampling clamps to the border like the
// production bilinear kernel but is re-written from scratch here.
std::vector<double> deformable_ref(
    const std::vector<catx::Tensor>& value_levels,        // [D,h,w] each
    const std::vector<std::array<double, 2>>& ref_points, // normalized (x,y)
    const std::vector<double>& offsets,  // [Q][L][K][2] pixel offsets
    const std::vector<double>& weights,  // [Q][L][K], sums to 1 over (L,K)
    int num_queries, int num_points);

// Umeyama similarity alignment via Eigen's own implementation (independent
// of the hand-written solver in the library). Returns s, R (row-major 3x3), t.
struct SimilarityRef {
  double s;
  std::array<double, 9> r;
  std::array<double, 3> t;
};
SimilarityRef umeyama_ref(const catx::Tensor& x, const catx::Tensor& y);

// Exhaustive optimal one-to-one matching count under a radius (<= 8 people).
int best_matching_count(const std::vector<std::array<double, 3>>& pred,
                        const std::vector<std::array<double, 3>>& gt,
                        double radius);

}  // namespace oracles
