#pragma once

#include "catx/body_model.hpp"
#include "catx/tensor.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace catx {

// Similarity transform minimizing sum ||s*R*x_i + t - y_i||^2 (Umeyama via
// SVD of the 3x3 cross-covariance; det(R) = +1 always, reflections corrected
// through the smallest singular direction).
struct Similarity {
  double s = 1.0;
  Tensor r;  // [3,3]
  Tensor t;  // [3]
  bool degenerate = false;  // rank-deficient covariance (alignment still valid)
};
Similarity procrustes_align(const Tensor& x, const Tensor& y);

// Applies s*R*x + t row-wise.
Tensor apply_similarity(const Similarity& sim, const Tensor& x);

struct ErrorPair {
  double raw = 0.0;  // millimeters
  double pa = 0.0;   // after Procrustes alignment
};

// Mean Euclidean distance in millimeters over the masked rows; the PA value
// aligns the masked subset first. Empty masks are an error.
ErrorPair point_errors(const Tensor& pred, const Tensor& gt,
                       const std::vector<int>& mask);

struct ComponentErrors {
  ErrorPair all, body, hands, face;  // hands = mean of left and right
};

// Per-component MPVPE/PA-MPVPE from meshes and MPJPE/PA-MPJPE from joints.
struct MeshErrors {
  ComponentErrors vertex;
  ComponentErrors joint;
};
MeshErrors mesh_errors(const Tensor& pred_vertices, const Tensor& gt_vertices,
                       const Tensor& pred_joints, const Tensor& gt_joints,
                       const BodyTemplate& tpl);

// Greedy nearest-neighbor one-to-one matching under the radius; candidate
// pairs sorted by distance with index ties broken deterministically.
struct F1Result {
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::vector<std::pair<int, int>> matches;  // (pred, gt)
};
F1Result f1_match(const std::vector<std::array<double, 3>>& pred_people,
                  const std::vector<std::array<double, 3>>& gt_people,
                  double radius);

// error / f1; empty when f1 == 0 (never divides by zero).
std::optional<double> nmve(double error_mm, double f1);

struct MetricsReport {
  ComponentErrors vertex;  // MPVPE / PA-MPVPE (mm)
  ComponentErrors joint;   // MPJPE / PA-MPJPE (mm)
  double f1 = 0.0;
  std::optional<double> nmve_all;  // MPVPE-all / F1
  std::optional<double> nmje_all;  // MPJPE-all / F1
  int num_samples = 0;
  int num_matched = 0;

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
  void validate() const;  // PA <= raw, non-negative
};

}  // namespace catx
