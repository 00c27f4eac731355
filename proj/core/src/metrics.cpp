#include "catx/metrics.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include "json.hpp"

#include <algorithm>
#include <cmath>

namespace catx {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

}  // namespace

Similarity procrustes_align(const Tensor& x, const Tensor& y) {
  require(x.ndim() == 2 && x.cols() == 3 && y.shape() == x.shape(),
          "procrustes_align: want matching [n,3] inputs");
  const int n = x.rows();
  require(n >= 3, "procrustes_align: need at least 3 points");

  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>>
      X(x.data(), n, 3), Y(y.data(), n, 3);
  const Eigen::RowVector3d mx = X.colwise().mean();
  const Eigen::RowVector3d my = Y.colwise().mean();
  const auto X0 = X.rowwise() - mx;
  const auto Y0 = Y.rowwise() - my;

  const double var_x = X0.squaredNorm() / n;
  require(var_x > 0.0, "procrustes_align: source points are all coincident");

  const Eigen::Matrix3d sigma = (Y0.transpose() * X0) / n;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(sigma,
                                        Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d d = Eigen::Vector3d::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0)
    d(2) = -1.0;  // push the reflection into the smallest singular direction
  const Eigen::Matrix3d r =
      svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  const double scale_num = (svd.singularValues().asDiagonal().toDenseMatrix() *
                            d.asDiagonal().toDenseMatrix())
                               .trace();

  Similarity out;
  out.s = scale_num / var_x;
  out.r = Tensor({3, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.r.values()[size_t(i) * 3 + j] = r(i, j);
  const Eigen::Vector3d t = my.transpose() - out.s * r * mx.transpose();
  out.t = Tensor({3}, {t(0), t(1), t(2)});
  out.degenerate =
      svd.singularValues()(1) < 1e-12 * std::max(svd.singularValues()(0), 1.0);
  return out;
}

Tensor apply_similarity(const Similarity& sim, const Tensor& x) {
  require(x.ndim() == 2 && x.cols() == 3, "apply_similarity: want [n,3]");
  const int n = x.rows();
  Tensor out({n, 3});
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < 3; ++r) {
      double acc = sim.t.values()[size_t(r)];
      for (int c = 0; c < 3; ++c)
        acc += sim.s * sim.r.values()[size_t(r) * 3 + c] *
               x.values()[size_t(i) * 3 + c];
      out.values()[size_t(i) * 3 + r] = acc;
    }
  return out;
}

namespace {

Tensor gather_rows(const Tensor& x, const std::vector<int>& mask) {
  Tensor out({int(mask.size()), 3});
  for (size_t i = 0; i < mask.size(); ++i)
    for (int c = 0; c < 3; ++c)
      out.values()[i * 3 + c] = x.values()[size_t(mask[i]) * 3 + c];
  return out;
}

double mean_dist_mm(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (int i = 0; i < a.rows(); ++i) {
    double d2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double d = a.values()[size_t(i) * 3 + c] - b.values()[size_t(i) * 3 + c];
      d2 += d * d;
    }
    acc += std::sqrt(d2);
  }
  return 1000.0 * acc / a.rows();
}

}  // namespace

ErrorPair point_errors(const Tensor& pred, const Tensor& gt,
                       const std::vector<int>& mask) {
  require(!mask.empty(), "point_errors: empty component mask");
  Tensor p = gather_rows(pred, mask);
  Tensor g = gather_rows(gt, mask);
  ErrorPair out;
  out.raw = mean_dist_mm(p, g);
  out.pa = mean_dist_mm(apply_similarity(procrustes_align(p, g), p), g);
  return out;
}

namespace {

ErrorPair mean_pair(const ErrorPair& a, const ErrorPair& b) {
  return {(a.raw + b.raw) / 2.0, (a.pa + b.pa) / 2.0};
}

std::vector<int> all_indices(int n) {
  std::vector<int> v(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) v[size_t(i)] = i;
  return v;
}

}  // namespace

MeshErrors mesh_errors(const Tensor& pred_vertices, const Tensor& gt_vertices,
                       const Tensor& pred_joints, const Tensor& gt_joints,
                       const BodyTemplate& tpl) {
  require(pred_vertices.shape() == gt_vertices.shape(),
          "mesh_errors: vertex count mismatch");
  require(pred_joints.shape() == gt_joints.shape(),
          "mesh_errors: joint count mismatch");
  MeshErrors out;
  out.vertex.all = point_errors(pred_vertices, gt_vertices,
                                all_indices(pred_vertices.rows()));
  out.vertex.body =
      point_errors(pred_vertices, gt_vertices, tpl.mask(BodyPart::body));
  out.vertex.hands = mean_pair(
      point_errors(pred_vertices, gt_vertices, tpl.mask(BodyPart::lhand)),
      point_errors(pred_vertices, gt_vertices, tpl.mask(BodyPart::rhand)));
  out.vertex.face =
      point_errors(pred_vertices, gt_vertices, tpl.mask(BodyPart::face));

  out.joint.all =
      point_errors(pred_joints, gt_joints, all_indices(pred_joints.rows()));
  out.joint.body = point_errors(pred_joints, gt_joints, joint_set(BodyPart::body));
  out.joint.hands =
      mean_pair(point_errors(pred_joints, gt_joints, joint_set(BodyPart::lhand)),
                point_errors(pred_joints, gt_joints, joint_set(BodyPart::rhand)));
  out.joint.face = point_errors(pred_joints, gt_joints, joint_set(BodyPart::face));
  return out;
}

F1Result f1_match(const std::vector<std::array<double, 3>>& pred_people,
                  const std::vector<std::array<double, 3>>& gt_people,
                  double radius) {
  require(radius > 0.0, "f1_match: radius must be positive");
  struct Cand {
    double d;
    int pred, gt;
  };
  std::vector<Cand> cands;
  for (int i = 0; i < int(pred_people.size()); ++i)
    for (int j = 0; j < int(gt_people.size()); ++j) {
      double d2 = 0;
      for (int c = 0; c < 3; ++c) {
        const double d = pred_people[size_t(i)][size_t(c)] -
                         gt_people[size_t(j)][size_t(c)];
        d2 += d * d;
      }
      if (d2 <= radius * radius) cands.push_back({std::sqrt(d2), i, j});
    }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.d != b.d) return a.d < b.d;
    if (a.pred != b.pred) return a.pred < b.pred;
    return a.gt < b.gt;
  });
  std::vector<bool> pred_used(pred_people.size(), false);
  std::vector<bool> gt_used(gt_people.size(), false);
  F1Result out;
  for (const Cand& c : cands) {
    if (pred_used[size_t(c.pred)] || gt_used[size_t(c.gt)]) continue;
    pred_used[size_t(c.pred)] = true;
    gt_used[size_t(c.gt)] = true;
    out.matches.push_back({c.pred, c.gt});
  }
  const double m = double(out.matches.size());
  out.precision = pred_people.empty() ? 0.0 : m / double(pred_people.size());
  out.recall = gt_people.empty() ? 0.0 : m / double(gt_people.size());
  out.f1 = (out.precision + out.recall) > 0.0
               ? 2.0 * out.precision * out.recall / (out.precision + out.recall)
               : 0.0;
  return out;
}

std::optional<double> nmve(double error_mm, double f1) {
  if (f1 <= 0.0) return std::nullopt;
  require(f1 <= 1.0, "nmve: f1 must be in (0,1]");
  return error_mm / f1;
}

// --- report JSON -------------------------------------------------------------------

namespace {

using json = nlohmann::json;

json pair_json(const ErrorPair& p) { return {{"raw", p.raw}, {"pa", p.pa}}; }

ErrorPair pair_from(const json& j) {
  return {j.at("raw").get<double>(), j.at("pa").get<double>()};
}

json comp_json(const ComponentErrors& c) {
  return {{"all", pair_json(c.all)},
          {"body", pair_json(c.body)},
          {"hands", pair_json(c.hands)},
          {"face", pair_json(c.face)}};
}

ComponentErrors comp_from(const json& j) {
  ComponentErrors c;
  c.all = pair_from(j.at("all"));
  c.body = pair_from(j.at("body"));
  c.hands = pair_from(j.at("hands"));
  c.face = pair_from(j.at("face"));
  return c;
}

}  // namespace

std::string MetricsReport::to_json() const {
  json j;
  j["schema"] = "catx-metrics-v1";
  j["num_samples"] = num_samples;
  j["num_matched"] = num_matched;
  j["f1"] = f1;
  j["nmve_all"] = nmve_all ? json(*nmve_all) : json(nullptr);
  j["nmje_all"] = nmje_all ? json(*nmje_all) : json(nullptr);
  j["vertex"] = comp_json(vertex);
  j["joint"] = comp_json(joint);
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  const json j = json::parse(text);
  require(j.at("schema").get<std::string>() == "catx-metrics-v1",
          "metrics: unknown schema");
  MetricsReport r;
  r.num_samples = j.at("num_samples").get<int>();
  r.num_matched = j.at("num_matched").get<int>();
  r.f1 = j.at("f1").get<double>();
  if (!j.at("nmve_all").is_null()) r.nmve_all = j.at("nmve_all").get<double>();
  if (!j.at("nmje_all").is_null()) r.nmje_all = j.at("nmje_all").get<double>();
  r.vertex = comp_from(j.at("vertex"));
  r.joint = comp_from(j.at("joint"));
  return r;
}

void MetricsReport::validate() const {
  auto check_pair = [](const ErrorPair& p, const char* name) {
    require(p.raw >= 0.0 && p.pa >= 0.0,
            std::string("metrics: negative error in ") + name);
    require(p.pa <= p.raw + 1e-9,
            std::string("metrics: PA exceeds raw error in ") + name);
  };
  for (const auto* c : {&vertex, &joint}) {
    check_pair(c->all, "all");
    check_pair(c->body, "body");
    check_pair(c->hands, "hands");
    check_pair(c->face, "face");
  }
  require(f1 >= 0.0 && f1 <= 1.0, "metrics: f1 out of range");
}

}  // namespace catx
