#pragma once

#include "catx/body_model.hpp"
#include "catx/tensor.hpp"

#include <optional>

namespace catx {

// Perspective pinhole, z > 0 forward, pixels (u,v) = (fx*x/z+cx, fy*y/z+cy).
struct CameraModel {
  double fx = 5000.0, fy = 5000.0;
  double cx = 96.0, cy = 128.0;
  void validate() const;
  // Convention from the cited baseline family: f = 5000 * (H/256), principal
  // point at the image center.
  static CameraModel for_image(int height, int width);
};

struct GroundTruth {
  SmplxParams params;
  Tensor kpt3d;               // [J,3] meters
  Tensor kpt2d;               // [J,2] pixels
  std::vector<uint8_t> vis;   // per-joint visibility
  Tensor boxes;               // [3,4] normalized (lhand,rhand,face)
  Tensor mesh;                // optional [V,3]
};

// Depth clamped to z_min = 1e-4 before dividing; clamped points are counted
// in the diagnostic (training robustness, gradient w.r.t. z is zero there).
struct ProjectDiag {
  int clamped = 0;
};
Tensor project_points(const Tensor& x, const CameraModel& cam,
                      ProjectDiag* diag = nullptr);

struct LossWeights {
  double smplx = 1.0;
  double kpt3d = 1.0;
  double kpt2d = 1.0;
  double bbox2d = 1.0;
};

struct LossBreakdown {
  Tensor total;   // scalar
  Tensor smplx, kpt3d, kpt2d, bbox2d;  // scalar terms (pre-weight)
};

// Predicted quantities entering the objective. Boxes may be empty when the
// decoder pathway is disabled (then the bbox weight must be zero).
struct Prediction {
  SmplxParams params;
  Tensor boxes;  // [3,4] or empty
};

// Weighted sum of mean-reduced L1 terms: the 182 parameter scalars, the 3-d
// joints from the body model, the projected visible 2-d joints, and the
// three boxes. Fully differentiable.
LossBreakdown loss_total(const Prediction& pred, const GroundTruth& gt,
                         const BodyTemplate& tpl, const CameraModel& cam,
                         const LossWeights& weights);

}  // namespace catx
