#include "catx/losses.hpp"

#include "catx/gradcheck.hpp"
#include "catx/rng.hpp"

#include <cmath>

namespace catx {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

constexpr double kZMin = 1e-4;

}  // namespace

void CameraModel::validate() const {
  require(fx > 0.0 && fy > 0.0, "camera: focal lengths must be positive");
}

CameraModel CameraModel::for_image(int height, int width) {
  CameraModel cam;
  cam.fx = cam.fy = 5000.0 * double(height) / 256.0;
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  return cam;
}

Tensor project_points(const Tensor& x, const CameraModel& cam,
                      ProjectDiag* diag) {
  require(x.ndim() == 2 && x.cols() == 3, "project_points: want [n,3]");
  cam.validate();
  const int n = x.rows();
  std::vector<double> out(size_t(n) * 2);
  std::vector<uint8_t> clamped(size_t(n), 0);
  for (int i = 0; i < n; ++i) {
    const double px = x.values()[size_t(i) * 3 + 0];
    const double py = x.values()[size_t(i) * 3 + 1];
    double z = x.values()[size_t(i) * 3 + 2];
    if (z <= kZMin) {
      z = kZMin;
      clamped[size_t(i)] = 1;
      if (diag) diag->clamped += 1;
    }
    out[size_t(i) * 2 + 0] = cam.fx * px / z + cam.cx;
    out[size_t(i) * 2 + 1] = cam.fy * py / z + cam.cy;
  }
  if (!x.on_tape()) return Tensor({n, 2}, std::move(out));
  int nx = x.node();
  Tensor xv = x.detached();
  auto cl = std::make_shared<std::vector<uint8_t>>(std::move(clamped));
  const double fx = cam.fx, fy = cam.fy;
  return x.tape()->emit(
      {n, 2}, std::move(out),
      [nx, xv, cl, fx, fy, n](Tape& t, const std::vector<double>& g) {
        auto& buf = t.grad_buf(nx);
        for (int i = 0; i < n; ++i) {
          const double px = xv.values()[size_t(i) * 3 + 0];
          const double py = xv.values()[size_t(i) * 3 + 1];
          const bool was_clamped = (*cl)[size_t(i)] != 0;
          const double z = was_clamped ? kZMin : xv.values()[size_t(i) * 3 + 2];
          const double gu = g[size_t(i) * 2 + 0];
          const double gv = g[size_t(i) * 2 + 1];
          buf[size_t(i) * 3 + 0] += gu * fx / z;
          buf[size_t(i) * 3 + 1] += gv * fy / z;
          if (!was_clamped)
            buf[size_t(i) * 3 + 2] +=
                -(gu * fx * px + gv * fy * py) / (z * z);
        }
      });
}

LossBreakdown loss_total(const Prediction& pred, const GroundTruth& gt,
                         const BodyTemplate& tpl, const CameraModel& cam,
                         const LossWeights& weights) {
  LossBreakdown out;

  // L1 over the 182 parameter scalars, mean reduction.
  require(gt.params.theta_body.defined(),
          "loss_total: ground-truth parameters missing");
  out.smplx = mean(abs(sub(pred.params.flatten(), gt.params.flatten())));

  // 3-d joints through the body model.
  MeshOutput mesh = smplx_forward(tpl, pred.params);
  if (weights.kpt3d != 0.0) {
    require(gt.kpt3d.defined() && gt.kpt3d.size() > 0,
            "loss_total: kpt3d weight is nonzero but ground truth is missing");
    out.kpt3d = mean(abs(sub(mesh.joints, gt.kpt3d)));
  } else {
    out.kpt3d = Tensor::scalar(0.0);
  }

  // Projected 2-d joints, invisible ones masked out of the mean.
  if (weights.kpt2d != 0.0) {
    require(gt.kpt2d.defined() && gt.kpt2d.size() > 0,
            "loss_total: kpt2d weight is nonzero but ground truth is missing");
    require(int(gt.vis.size()) == gt.kpt2d.rows(),
            "loss_total: visibility flags do not match kpt2d");
    Tensor proj = project_points(mesh.joints, cam);
    Tensor mask({proj.rows(), 2});
    int visible = 0;
    for (int j = 0; j < proj.rows(); ++j)
      if (gt.vis[size_t(j)]) {
        mask.values()[size_t(j) * 2 + 0] = 1.0;
        mask.values()[size_t(j) * 2 + 1] = 1.0;
        ++visible;
      }
    if (visible == 0) {
      out.kpt2d = Tensor::scalar(0.0);
    } else {
      Tensor diff = mul(abs(sub(proj, gt.kpt2d)), mask);
      out.kpt2d = scale(sum(diff), 1.0 / double(2 * visible));
    }
  } else {
    out.kpt2d = Tensor::scalar(0.0);
  }

  if (weights.bbox2d != 0.0) {
    require(pred.boxes.defined() && pred.boxes.size() > 0,
            "loss_total: bbox weight is nonzero but prediction has no boxes");
    require(gt.boxes.defined() && gt.boxes.size() > 0,
            "loss_total: bbox weight is nonzero but ground truth is missing");
    out.bbox2d = mean(abs(sub(pred.boxes, gt.boxes)));
  } else {
    out.bbox2d = Tensor::scalar(0.0);
  }

  out.total = add(add(scale(out.smplx, weights.smplx),
                      scale(out.kpt3d, weights.kpt3d)),
                  add(scale(out.kpt2d, weights.kpt2d),
                      scale(out.bbox2d, weights.bbox2d)));
  return out;
}

// --- gradcheck suites --------------------------------------------------------------

namespace {

double suite_project_points(const GradCheckOptions& o) {
  Rng rng(o.seed + 70);
  CameraModel cam = CameraModel::for_image(64, 48);
  double worst = 0.0;
  for (int it = 0; it < 10; ++it) {
    Tensor x({5, 3});
    for (int i = 0; i < 5; ++i) {
      x.values()[size_t(i) * 3 + 0] = rng.uniform(-0.5, 0.5);
      x.values()[size_t(i) * 3 + 1] = rng.uniform(-0.5, 0.5);
      x.values()[size_t(i) * 3 + 2] = rng.uniform(1.5, 4.0);
    }
    worst = std::max(
        worst, gradcheck_case(
                   [&](Tape&, const std::vector<Tensor>& in) {
                     Tensor p = project_points(in[0], cam);
                     Rng wr(o.seed + 99 + it);
                     Tensor w(p.shape());
                     for (double& v : w.values()) v = wr.uniform(-1, 1);
                     return sum(mul(p, w));
                   },
                   {x}, o.h, o.corrupt_op == "project_points" && it == 0));
  }
  return worst;
}

double suite_loss_total(const GradCheckOptions& o) {
  static const BodyTemplate tpl = make_toy_template(ToyTemplateConfig{4, 4, 4}, 99);
  CameraModel cam = CameraModel::for_image(64, 48);
  Rng rng(o.seed + 71);

  SmplxParams gt_params = SmplxParams::zero();
  for (double& v : gt_params.theta_body.values()) v = rng.uniform(-0.3, 0.3);
  for (double& v : gt_params.beta.values()) v = rng.uniform(-0.5, 0.5);
  gt_params.t = Tensor({3}, {0.1, -0.05, 2.5});
  GroundTruth gt;
  gt.params = gt_params;
  MeshOutput gt_mesh = smplx_forward(tpl, gt_params);
  gt.kpt3d = gt_mesh.joints.detached();
  gt.kpt2d = project_points(gt_mesh.joints, cam).detached();
  gt.vis.assign(size_t(kNumJoints), 1);
  gt.vis[3] = 0;  // one masked joint
  gt.boxes = Tensor({3, 4}, {0.3, 0.4, 0.1, 0.1, 0.7, 0.4, 0.1, 0.12,
                             0.5, 0.2, 0.2, 0.15});
  LossWeights w;

  Tensor flat({SmplxParams::kNumScalars});
  for (double& v : flat.values()) v = rng.uniform(-0.25, 0.25);
  flat.values()[78] = 2.8;  // keep the body in front of the camera
  Tensor boxes({3, 4});
  for (double& v : boxes.values()) v = rng.uniform(0.1, 0.9);

  return gradcheck_case(
      [&](Tape&, const std::vector<Tensor>& in) {
        Prediction pred;
        pred.params = SmplxParams::from_flat(in[0]);
        pred.boxes = in[1];
        return loss_total(pred, gt, tpl, cam, w).total;
      },
      {flat, boxes}, o.h, o.corrupt_op == "loss_total");
}

}  // namespace

std::vector<GradCheckSuite> losses_gradcheck_suites() {
  return {{"project_points", suite_project_points},
          {"loss_total", suite_loss_total}};
}

}  // namespace catx
