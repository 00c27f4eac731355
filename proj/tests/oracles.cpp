#include "oracles.hpp"

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <functional>

namespace oracles {

double ScalarAdamRef::step(double param, double grad, double lr) {
  t += 1;
  m = beta1 * m + (1.0 - beta1) * grad;
  v = beta2 * v + (1.0 - beta2) * grad * grad;
  const double mhat = m / (1.0 - std::pow(beta1, t));
  const double vhat = v / (1.0 - std::pow(beta2, t));
  return param - lr * mhat / (std::sqrt(vhat) + eps);
}

namespace {

// Border-clamped bilinear lookup, independent of the library kernel.
double sample_one(const catx::Tensor& map, int ch, double x, double y) {
  const int h = map.dim(1), w = map.dim(2);
  x = std::min(std::max(x, 0.0), double(w - 1));
  y = std::min(std::max(y, 0.0), double(h - 1));
  int x0 = int(std::floor(x));
  int y0 = int(std::floor(y));
  if (x0 > w - 2) x0 = std::max(w - 2, 0);
  if (y0 > h - 2) y0 = std::max(h - 2, 0);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0, fy = y - y0;
  auto v = [&](int yy, int xx) {
    return map.values()[(size_t(ch) * h + yy) * w + xx];
  };
  return v(y0, x0) * (1 - fy) * (1 - fx) + v(y0, x1) * (1 - fy) * fx +
         v(y1, x0) * fy * (1 - fx) + v(y1, x1) * fy * fx;
}

}  // namespace

std::vector<double> deformable_ref(
    const std::vector<catx::Tensor>& value_levels,
    const std::vector<std::array<double, 2>>& ref_points,
    const std::vector<double>& offsets, const std::vector<double>& weights,
    int num_queries, int num_points) {
  const int levels = int(value_levels.size());
  const int d = value_levels[0].dim(0);
  std::vector<double> out(size_t(num_queries) * d, 0.0);
  for (int q = 0; q < num_queries; ++q) {
    for (int l = 0; l < levels; ++l) {
      const int h = value_levels[size_t(l)].dim(1);
      const int w = value_levels[size_t(l)].dim(2);
      for (int k = 0; k < num_points; ++k) {
        const size_t base = ((size_t(q) * levels + l) * num_points + k);
        const double a = weights[base];
        const double px =
            ref_points[size_t(q)][0] * w - 0.5 + offsets[base * 2 + 0];
        const double py =
            ref_points[size_t(q)][1] * h - 0.5 + offsets[base * 2 + 1];
        for (int c = 0; c < d; ++c)
          out[size_t(q) * d + c] +=
              a * sample_one(value_levels[size_t(l)], c, px, py);
      }
    }
  }
  return out;
}

SimilarityRef umeyama_ref(const catx::Tensor& x, const catx::Tensor& y) {
  const int n = x.rows();
  Eigen::MatrixXd src(3, n), dst(3, n);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      src(c, i) = x.values()[size_t(i) * 3 + c];
      dst(c, i) = y.values()[size_t(i) * 3 + c];
    }
  const Eigen::Matrix4d m = Eigen::umeyama(src, dst, true);
  SimilarityRef ref;
  const Eigen::Matrix3d sr = m.block<3, 3>(0, 0);
  ref.s = std::cbrt(sr.determinant());
  const Eigen::Matrix3d r = sr / ref.s;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) ref.r[size_t(i) * 3 + j] = r(i, j);
  for (int i = 0; i < 3; ++i) ref.t[size_t(i)] = m(i, 3);
  return ref;
}

int best_matching_count(const std::vector<std::array<double, 3>>& pred,
                        const std::vector<std::array<double, 3>>& gt,
                        double radius) {
  const int np = int(pred.size()), ng = int(gt.size());
  std::vector<std::vector<bool>> ok(static_cast<size_t>(np),
                                    std::vector<bool>(static_cast<size_t>(ng)));
  for (int i = 0; i < np; ++i)
    for (int j = 0; j < ng; ++j) {
      double d2 = 0;
      for (int c = 0; c < 3; ++c) {
        const double d = pred[size_t(i)][size_t(c)] - gt[size_t(j)][size_t(c)];
        d2 += d * d;
      }
      ok[size_t(i)][size_t(j)] = d2 <= radius * radius;
    }
  // Recursive exhaustive assignment (inputs are tiny).
  std::vector<bool> used(size_t(ng), false);
  std::function<int(int)> go = [&](int i) -> int {
    if (i == np) return 0;
    int best = go(i + 1);
    for (int j = 0; j < ng; ++j) {
      if (used[size_t(j)] || !ok[size_t(i)][size_t(j)]) continue;
      used[size_t(j)] = true;
      best = std::max(best, 1 + go(i + 1));
      used[size_t(j)] = false;
    }
    return best;
  };
  return go(0);
}

}  // namespace oracles
