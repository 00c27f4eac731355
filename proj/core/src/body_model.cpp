#include "catx/body_model.hpp"

#include "catx/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace catx {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

struct Vec3 {
  double x = 0, y = 0, z = 0;
  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double norm() const { return std::sqrt(x * x + y * y + z * z); }
};

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

Vec3 normalize(const Vec3& v) {
  const double n = v.norm();
  return n > 1e-12 ? v * (1.0 / n) : Vec3{0, 1, 0};
}

// Constant 9x3 map assembling skew(aa) row-major from (x,y,z).
const Tensor& skew_basis() {
  static const Tensor s({9, 3}, {0, 0, 0,   0, 0, -1,  0, 1, 0,
                                 0, 0, 1,   0, 0, 0,   -1, 0, 0,
                                 0, -1, 0,  1, 0, 0,   0, 0, 0});
  return s;
}

}  // namespace

// --- SmplxParams -------------------------------------------------------------

SmplxParams SmplxParams::zero() {
  SmplxParams p;
  p.theta_body = Tensor({22, 3});
  p.beta = Tensor({10});
  p.t = Tensor({3});
  p.theta_lhand = Tensor({15, 3});
  p.theta_rhand = Tensor({15, 3});
  p.theta_jaw = Tensor({3});
  p.phi = Tensor({10});
  return p;
}

Tensor SmplxParams::flatten() const {
  Tensor body2 = reshape(theta_body, {66, 1});
  Tensor lh = reshape(theta_lhand, {45, 1});
  Tensor rh = reshape(theta_rhand, {45, 1});
  Tensor out = concat({body2, reshape(beta, {10, 1}), reshape(t, {3, 1}), lh, rh,
                       reshape(theta_jaw, {3, 1}), reshape(phi, {10, 1})},
                      0);
  return reshape(out, {kNumScalars});
}

SmplxParams SmplxParams::from_flat(const Tensor& flat) {
  require(flat.size() == kNumScalars,
          "SmplxParams::from_flat: expected 182 scalars, got " +
              std::to_string(flat.size()));
  Tensor col = reshape(flat, {kNumScalars, 1});
  SmplxParams p;
  p.theta_body = reshape(slice_rows(col, 0, 66), {22, 3});
  p.beta = reshape(slice_rows(col, 66, 76), {10});
  p.t = reshape(slice_rows(col, 76, 79), {3});
  p.theta_lhand = reshape(slice_rows(col, 79, 124), {15, 3});
  p.theta_rhand = reshape(slice_rows(col, 124, 169), {15, 3});
  p.theta_jaw = reshape(slice_rows(col, 169, 172), {3});
  p.phi = reshape(slice_rows(col, 172, 182), {10});
  return p;
}

void SmplxParams::validate() const {
  auto check = [](const Tensor& t, Shape want, const char* name) {
    require(t.defined() && t.shape() == want,
            std::string("SmplxParams: ") + name + " must have shape " +
                shape_str(want));
    for (double v : t.values())
      require(std::isfinite(v), std::string("SmplxParams: ") + name +
                                    " contains a non-finite value");
  };
  check(theta_body, {22, 3}, "theta_body");
  check(beta, {10}, "beta");
  check(t, {3}, "t");
  check(theta_lhand, {15, 3}, "theta_lhand");
  check(theta_rhand, {15, 3}, "theta_rhand");
  check(theta_jaw, {3}, "theta_jaw");
  check(phi, {10}, "phi");
}

// --- rotations ----------------------------------------------------------------

Tensor rodrigues(const Tensor& aa) {
  require(aa.size() == 3, "rodrigues: input must be a 3-vector");
  const double x = aa.values()[0], y = aa.values()[1], z = aa.values()[2];
  const double t2 = x * x + y * y + z * z;
  double a, b;
  if (t2 < 1e-16) {
    a = 1.0 - t2 / 6.0;
    b = 0.5 - t2 / 24.0;
  } else {
    const double th = std::sqrt(t2);
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / t2;
  }
  // R = I + a*K + b*K^2, K = skew(aa)
  return Tensor({3, 3}, {1 + b * (-z * z - y * y), -a * z + b * x * y, a * y + b * x * z,
                         a * z + b * x * y, 1 + b * (-z * z - x * x), -a * x + b * y * z,
                         -a * y + b * x * z, a * x + b * y * z, 1 + b * (-y * y - x * x)});
}

Tensor rodrigues_op(const Tensor& aa_row) {
  require(aa_row.ndim() == 2 && aa_row.rows() == 1 && aa_row.cols() == 3,
          "rodrigues_op: input must be [1,3]");
  Tensor k = reshape(matmul(skew_basis(), transpose(aa_row)), {3, 3});
  Tensor theta2 = sum(mul(aa_row, aa_row));
  Tensor a = rot_coeff_a(theta2);
  Tensor b = rot_coeff_b(theta2);
  return add(Tensor::eye(3), add(smul(k, a), smul(matmul(k, k), b)));
}

// --- toy template -------------------------------------------------------------

namespace {

struct JointSpec {
  Vec3 pos;
  int parent;
  BodyPart part;
};

std::vector<JointSpec> joint_layout() {
  std::vector<JointSpec> j(kNumJoints);
  auto set = [&](int i, double x, double y, double z, int parent, BodyPart p) {
    j[size_t(i)] = {{x, y, z}, parent, p};
  };
  // Body, T-pose, y-up, left side at +x. Heights in meters.
  set(0, 0.00, 0.95, 0.00, -1, BodyPart::body);   // pelvis
  set(1, 0.09, 0.91, 0.00, 0, BodyPart::body);    // L hip
  set(2, -0.09, 0.91, 0.00, 0, BodyPart::body);   // R hip
  set(3, 0.00, 1.05, 0.00, 0, BodyPart::body);    // spine1
  set(4, 0.10, 0.50, 0.00, 1, BodyPart::body);    // L knee
  set(5, -0.10, 0.50, 0.00, 2, BodyPart::body);   // R knee
  set(6, 0.00, 1.15, 0.00, 3, BodyPart::body);    // spine2
  set(7, 0.10, 0.08, 0.00, 4, BodyPart::body);    // L ankle
  set(8, -0.10, 0.08, 0.00, 5, BodyPart::body);   // R ankle
  set(9, 0.00, 1.25, 0.00, 6, BodyPart::body);    // spine3
  set(10, 0.11, 0.02, 0.10, 7, BodyPart::body);   // L foot
  set(11, -0.11, 0.02, 0.10, 8, BodyPart::body);  // R foot
  set(12, 0.00, 1.40, 0.00, 9, BodyPart::body);   // neck
  set(13, 0.06, 1.33, 0.00, 9, BodyPart::body);   // L collar
  set(14, -0.06, 1.33, 0.00, 9, BodyPart::body);  // R collar
  set(15, 0.00, 1.52, 0.00, 12, BodyPart::face);  // head
  set(16, 0.18, 1.35, 0.00, 13, BodyPart::body);  // L shoulder
  set(17, -0.18, 1.35, 0.00, 14, BodyPart::body); // R shoulder
  set(18, 0.45, 1.35, 0.00, 16, BodyPart::body);  // L elbow
  set(19, -0.45, 1.35, 0.00, 17, BodyPart::body); // R elbow
  set(20, 0.70, 1.35, 0.00, 18, BodyPart::body);  // L wrist
  set(21, -0.70, 1.35, 0.00, 19, BodyPart::body); // R wrist
  // Hands: 5 finger chains of 3 joints, spread along z, extending along +-x.
  const double fz[5] = {0.030, 0.015, 0.0, -0.015, -0.030};
  for (int f = 0; f < 5; ++f) {
    const int lb = kBodyJoints + 3 * f;
    set(lb + 0, 0.74, 1.35, fz[f], kLeftWrist, BodyPart::lhand);
    set(lb + 1, 0.765, 1.35, fz[f], lb + 0, BodyPart::lhand);
    set(lb + 2, 0.79, 1.35, fz[f], lb + 1, BodyPart::lhand);
    const int rb = kBodyJoints + kHandJoints + 3 * f;
    set(rb + 0, -0.74, 1.35, fz[f], kRightWrist, BodyPart::rhand);
    set(rb + 1, -0.765, 1.35, fz[f], rb + 0, BodyPart::rhand);
    set(rb + 2, -0.79, 1.35, fz[f], rb + 1, BodyPart::rhand);
  }
  set(kJawJoint, 0.00, 1.48, 0.05, kHeadJoint, BodyPart::face);  // jaw
  return j;
}

double ring_radius(BodyPart p) {
  switch (p) {
    case BodyPart::lhand:
    case BodyPart::rhand: return 0.008;
    case BodyPart::face: return 0.055;
    default: return 0.05;
  }
}

}  // namespace

const std::vector<std::pair<int, int>>& body_mirror_pairs() {
  static const std::vector<std::pair<int, int>> pairs = {
      {1, 2}, {4, 5}, {7, 8}, {10, 11}, {13, 14}, {16, 17}, {18, 19}, {20, 21}};
  return pairs;
}

std::vector<int> joint_set(BodyPart p) {
  std::vector<int> out;
  switch (p) {
    case BodyPart::body:
      for (int j = 0; j < kBodyJoints; ++j)
        if (j != kHeadJoint) out.push_back(j);
      break;
    case BodyPart::lhand:
      for (int j = 0; j < kHandJoints; ++j) out.push_back(kBodyJoints + j);
      break;
    case BodyPart::rhand:
      for (int j = 0; j < kHandJoints; ++j)
        out.push_back(kBodyJoints + kHandJoints + j);
      break;
    case BodyPart::face:
      out = {kHeadJoint, kJawJoint};
      break;
  }
  return out;
}

BodyTemplate make_toy_template(const ToyTemplateConfig& cfg, uint64_t seed) {
  require(cfg.ring_body >= 4 && cfg.ring_hand >= 4 && cfg.ring_face >= 4,
          "make_toy_template: every joint needs at least 4 skinned vertices");
  const auto joints = joint_layout();
  const int J = kNumJoints;
  Rng rng(Rng::mix(seed, Rng::hash_str("toy_template")));

  // One tube per bone (plus a root ring): ring at the parent end, ring at the
  // child end. The child-end ring is centered on the joint, so the regressor
  // row (uniform over that ring) reproduces the joint position exactly.
  std::vector<double> verts;
  std::vector<std::array<int, 3>> faces;
  std::vector<std::array<double, 2>> wts;  // (self, parent) weight per vertex
  std::vector<int> vert_joint;             // skinning target
  std::vector<int> vert_parent;
  std::vector<std::vector<int>> joint_ring(static_cast<size_t>(J));  // child-end ring verts
  std::array<std::vector<int>, 4> masks;

  auto push_ring = [&](const Vec3& center, const Vec3& axis, int n, double r,
                       double phase) {
    std::vector<int> ids;
    const Vec3 d = normalize(axis);
    const Vec3 ref = std::fabs(d.y) < 0.9 ? Vec3{0, 1, 0} : Vec3{1, 0, 0};
    const Vec3 u = normalize(cross(d, ref));
    const Vec3 v = cross(d, u);
    for (int i = 0; i < n; ++i) {
      const double ang = phase + 2.0 * M_PI * i / n;
      const Vec3 p = center + u * (r * std::cos(ang)) + v * (r * std::sin(ang));
      ids.push_back(int(verts.size() / 3));
      verts.insert(verts.end(), {p.x, p.y, p.z});
    }
    return ids;
  };

  auto ring_size = [&](BodyPart p) {
    switch (p) {
      case BodyPart::lhand:
      case BodyPart::rhand: return cfg.ring_hand;
      case BodyPart::face: return cfg.ring_face;
      default: return cfg.ring_body;
    }
  };

  // Root ring.
  {
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    auto ids = push_ring(joints[0].pos, {0, 1, 0}, cfg.ring_body,
                         ring_radius(BodyPart::body) * 1.6, phase);
    for (int id : ids) {
      wts.push_back({1.0, 0.0});
      vert_joint.push_back(0);
      vert_parent.push_back(-1);
      masks[size_t(BodyPart::body)].push_back(id);
    }
    joint_ring[0] = ids;
  }

  for (int j = 1; j < J; ++j) {
    const auto& js = joints[size_t(j)];
    const Vec3 pp = joints[size_t(js.parent)].pos;
    Vec3 axis = js.pos - pp;
    if (axis.norm() < 1e-9) axis = {0, 1, 0};
    const int n = ring_size(js.part);
    const double r = ring_radius(js.part);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    auto a = push_ring(pp + (js.pos - pp) * 0.15, axis, n, r, phase);
    auto b = push_ring(js.pos, axis, n, r, phase);
    for (int id : a) {
      wts.push_back({0.5, 0.5});
      vert_joint.push_back(j);
      vert_parent.push_back(js.parent);
      masks[size_t(js.part)].push_back(id);
    }
    for (int id : b) {
      wts.push_back({0.9, 0.1});
      vert_joint.push_back(j);
      vert_parent.push_back(js.parent);
      masks[size_t(js.part)].push_back(id);
    }
    joint_ring[size_t(j)] = b;
    for (int i = 0; i < n; ++i) {
      const int i2 = (i + 1) % n;
      faces.push_back({a[size_t(i)], b[size_t(i)], b[size_t(i2)]});
      faces.push_back({a[size_t(i)], b[size_t(i2)], a[size_t(i2)]});
    }
  }

  const int V = int(verts.size() / 3);
  BodyTemplate tpl;
  tpl.vertices = Tensor({V, 3}, std::move(verts));
  tpl.faces = std::move(faces);
  tpl.parents.resize(size_t(J));
  for (int j = 0; j < J; ++j) tpl.parents[size_t(j)] = joints[size_t(j)].parent;
  tpl.component_masks = std::move(masks);

  // Skin weights and regressor.
  {
    std::vector<double> w(size_t(V) * J, 0.0);
    for (int i = 0; i < V; ++i) {
      w[size_t(i) * J + vert_joint[size_t(i)]] += wts[size_t(i)][0];
      if (vert_parent[size_t(i)] >= 0)
        w[size_t(i) * J + vert_parent[size_t(i)]] += wts[size_t(i)][1];
      else
        w[size_t(i) * J + vert_joint[size_t(i)]] += wts[size_t(i)][1];
    }
    tpl.skin_weights = Tensor({V, J}, std::move(w));
    std::vector<double> reg(size_t(J) * V, 0.0);
    for (int j = 0; j < J; ++j) {
      const auto& ring = joint_ring[size_t(j)];
      for (int id : ring) reg[size_t(j) * V + id] = 1.0 / double(ring.size());
    }
    tpl.joint_regressor = Tensor({J, V}, std::move(reg));
  }
  tpl.rest_joints = matmul(tpl.joint_regressor, tpl.vertices);

  // Shape modes: global smooth fields; the last three add seeded per-joint
  // offsets so distinct seeds give distinct templates.
  {
    std::vector<double> sd(size_t(V) * 3 * 10, 0.0);
    std::vector<std::array<double, 3>> jdir(static_cast<size_t>(J) * 3);
    for (auto& d : jdir) d = {rng.uniform(-0.01, 0.01), rng.uniform(-0.01, 0.01),
                              rng.uniform(-0.01, 0.01)};
    for (int i = 0; i < V; ++i) {
      const double x = tpl.vertices.data()[size_t(i) * 3 + 0];
      const double y = tpl.vertices.data()[size_t(i) * 3 + 1];
      const double z = tpl.vertices.data()[size_t(i) * 3 + 2];
      auto put = [&](int mode, double dx, double dy, double dz) {
        sd[(size_t(i) * 3 + 0) * 10 + mode] = dx;
        sd[(size_t(i) * 3 + 1) * 10 + mode] = dy;
        sd[(size_t(i) * 3 + 2) * 10 + mode] = dz;
      };
      put(0, 0.0, (y - 0.95) * 0.05, 0.0);              // stature
      put(1, x * 0.05, 0.0, 0.0);                       // width
      put(2, 0.0, 0.0, z * 0.05 + 0.01);                // depth
      const double ax = std::fabs(x) > 0.2 ? (x - (x > 0 ? 0.2 : -0.2)) : 0.0;
      put(3, ax * 0.15, 0.0, 0.0);                      // arm span
      put(4, 0.0, y < 0.95 ? (y - 0.95) * 0.04 : 0.0, 0.0);  // leg length
      put(5, 0.0, y > 1.4 ? (y - 1.4) * 0.06 : 0.0, 0.0);    // head height
      put(6, 0.0, 0.0, std::exp(-8.0 * (y - 1.1) * (y - 1.1)) * 0.02);  // torso
      for (int m = 7; m < 10; ++m) {
        const auto& d = jdir[size_t(vert_joint[size_t(i)] * 3 + (m - 7))];
        put(m, d[0], d[1], d[2]);
      }
    }
    tpl.shape_dirs = Tensor({V * 3, 10}, std::move(sd));
  }
  {
    std::vector<double> ed(size_t(V) * 3 * 10, 0.0);
    for (int id : tpl.mask(BodyPart::face)) {
      for (int m = 0; m < 10; ++m) {
        const double ph = 0.7 * m + 0.13 * id;
        ed[(size_t(id) * 3 + 0) * 10 + m] = 0.008 * std::sin(ph);
        ed[(size_t(id) * 3 + 1) * 10 + m] = 0.008 * std::cos(1.7 * ph);
        ed[(size_t(id) * 3 + 2) * 10 + m] = 0.008 * std::sin(2.3 * ph + 1.0);
      }
    }
    tpl.expr_dirs = Tensor({V * 3, 10}, std::move(ed));
  }

  tpl.validate();
  return tpl;
}

double BodyTemplate::bounding_sphere_radius() const {
  const int V = num_vertices();
  double cx = 0, cy = 0, cz = 0;
  for (int i = 0; i < V; ++i) {
    cx += vertices.data()[size_t(i) * 3 + 0];
    cy += vertices.data()[size_t(i) * 3 + 1];
    cz += vertices.data()[size_t(i) * 3 + 2];
  }
  cx /= V; cy /= V; cz /= V;
  double r2 = 0;
  for (int i = 0; i < V; ++i) {
    const double dx = vertices.data()[size_t(i) * 3 + 0] - cx;
    const double dy = vertices.data()[size_t(i) * 3 + 1] - cy;
    const double dz = vertices.data()[size_t(i) * 3 + 2] - cz;
    r2 = std::max(r2, dx * dx + dy * dy + dz * dz);
  }
  return std::sqrt(r2);
}

void BodyTemplate::validate() const {
  const int V = num_vertices(), J = num_joints();
  require(J == kNumJoints, "template: expected 53 joints");
  require(parents[0] == -1, "template: parents[0] must be the root sentinel");
  for (int j = 1; j < J; ++j)
    require(parents[size_t(j)] >= 0 && parents[size_t(j)] < j,
            "template: parents must be topologically ordered");
  auto check_rows = [&](const Tensor& m, int nrows, int ncols, const char* name) {
    require(m.ndim() == 2 && m.rows() == nrows && m.cols() == ncols,
            std::string("template: ") + name + " has shape " +
                shape_str(m.shape()));
    for (int r = 0; r < nrows; ++r) {
      double s = 0;
      for (int c = 0; c < ncols; ++c) s += m.data()[size_t(r) * ncols + c];
      require(std::fabs(s - 1.0) < 1e-9,
              std::string("template: ") + name + " row " + std::to_string(r) +
                  " sums to " + std::to_string(s));
    }
  };
  check_rows(skin_weights, V, J, "skin_weights");
  check_rows(joint_regressor, J, V, "joint_regressor");
  require(shape_dirs.shape() == Shape({V * 3, 10}), "template: shape_dirs shape");
  require(expr_dirs.shape() == Shape({V * 3, 10}), "template: expr_dirs shape");
}

// --- template IO ---------------------------------------------------------------
//
// Layout (little-endian): magic "CATBODY1"; i64 V, J, F; vertices V*3 f64;
// faces F*3 i64; shape_dirs V*3*10 f64; expr_dirs V*3*10 f64;
// joint_regressor J*V f64; skin_weights V*J f64; parents J i64;
// four component masks, each i64 count + indices.

namespace {

constexpr char kBodyMagic[8] = {'C', 'A', 'T', 'B', 'O', 'D', 'Y', '1'};

void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64s(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * 8));
}
int64_t read_i64(std::istream& is) {
  int64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
std::vector<double> read_f64s(std::istream& is, size_t n) {
  std::vector<double> v(n);
  is.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * 8));
  return v;
}

}  // namespace

void save_template(const BodyTemplate& tpl, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_template: cannot open " + path);
  os.write(kBodyMagic, 8);
  const int V = tpl.num_vertices(), J = tpl.num_joints();
  write_i64(os, V);
  write_i64(os, J);
  write_i64(os, int64_t(tpl.faces.size()));
  write_f64s(os, tpl.vertices.values());
  for (const auto& f : tpl.faces)
    for (int v : f) write_i64(os, v);
  write_f64s(os, tpl.shape_dirs.values());
  write_f64s(os, tpl.expr_dirs.values());
  write_f64s(os, tpl.joint_regressor.values());
  write_f64s(os, tpl.skin_weights.values());
  for (int p : tpl.parents) write_i64(os, p);
  for (const auto& mask : tpl.component_masks) {
    write_i64(os, int64_t(mask.size()));
    for (int v : mask) write_i64(os, v);
  }
  if (!os) throw std::runtime_error("save_template: write failed for " + path);
}

BodyTemplate load_template(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_template: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (std::memcmp(magic, kBodyMagic, 8) != 0)
    throw std::runtime_error("load_template: bad magic in " + path);
  const int V = int(read_i64(is));
  const int J = int(read_i64(is));
  const int F = int(read_i64(is));
  require(V > 0 && J == kNumJoints && F >= 0, "load_template: bad header");
  BodyTemplate tpl;
  tpl.vertices = Tensor({V, 3}, read_f64s(is, size_t(V) * 3));
  tpl.faces.resize(size_t(F));
  for (auto& f : tpl.faces)
    for (int& v : f) v = int(read_i64(is));
  tpl.shape_dirs = Tensor({V * 3, 10}, read_f64s(is, size_t(V) * 30));
  tpl.expr_dirs = Tensor({V * 3, 10}, read_f64s(is, size_t(V) * 30));
  tpl.joint_regressor = Tensor({J, V}, read_f64s(is, size_t(J) * V));
  tpl.skin_weights = Tensor({V, J}, read_f64s(is, size_t(V) * J));
  tpl.parents.resize(size_t(J));
  for (int& p : tpl.parents) p = int(read_i64(is));
  for (auto& mask : tpl.component_masks) {
    mask.resize(size_t(read_i64(is)));
    for (int& v : mask) v = int(read_i64(is));
  }
  if (!is) throw std::runtime_error("load_template: truncated file " + path);
  tpl.rest_joints = matmul(tpl.joint_regressor, tpl.vertices);
  tpl.validate();
  return tpl;
}

// --- forward model --------------------------------------------------------------

ShapedRest shape_blend(const BodyTemplate& tpl, const Tensor& beta,
                       const Tensor& phi) {
  require(beta.size() == 10, "shape_blend: beta must have 10 coefficients");
  require(phi.size() == 10, "shape_blend: phi must have 10 coefficients");
  const int V = tpl.num_vertices();
  Tensor offs = matmul(tpl.shape_dirs, reshape(beta, {10, 1}));
  Tensor offe = matmul(tpl.expr_dirs, reshape(phi, {10, 1}));
  Tensor shaped = add(tpl.vertices, reshape(add(offs, offe), {V, 3}));
  ShapedRest out;
  out.vertices = shaped;
  out.rest_joints = matmul(tpl.joint_regressor, shaped);
  return out;
}

FkResult forward_kinematics(const Tensor& rest_joints,
                            const std::vector<Tensor>& rotations,
                            const std::vector<int>& parents) {
  const int J = int(parents.size());
  require(rest_joints.ndim() == 2 && rest_joints.rows() == J &&
              rest_joints.cols() == 3,
          "forward_kinematics: rest_joints must be [J,3]");
  require(int(rotations.size()) == J, "forward_kinematics: need J rotations");
  static const Tensor bottom({1, 4}, {0, 0, 0, 1});
  std::vector<Tensor> globals(static_cast<size_t>(J));
  std::vector<Tensor> joint_rows;
  joint_rows.reserve(size_t(J));
  for (int j = 0; j < J; ++j) {
    Tensor trans = slice_rows(rest_joints, j, j + 1);  // [1,3]
    if (parents[size_t(j)] >= 0)
      trans = sub(trans, slice_rows(rest_joints, parents[size_t(j)],
                                    parents[size_t(j)] + 1));
    Tensor local = concat(
        {concat({rotations[size_t(j)], transpose(trans)}, 1), bottom}, 0);
    globals[size_t(j)] = parents[size_t(j)] >= 0
                             ? matmul(globals[size_t(parents[size_t(j)])], local)
                             : local;
    joint_rows.push_back(transpose(slice(globals[size_t(j)], 0, 3, 3, 4)));
  }
  FkResult out;
  out.joints = concat(joint_rows, 0);
  out.globals = std::move(globals);
  return out;
}

Tensor lbs(const Tensor& shaped_vertices, const std::vector<Tensor>& globals,
           const Tensor& skin_weights, const Tensor& rest_joints) {
  const int V = shaped_vertices.rows();
  const int J = int(globals.size());
  require(skin_weights.rows() == V && skin_weights.cols() == J,
          "lbs: skin_weights must be [V,J]");
  static const Tensor bottom({1, 4}, {0, 0, 0, 1});
  static const Tensor eye3 = Tensor::eye(3);
  // Relative transforms A_j = G_j * [I | -rest_j], flattened to [J,12].
  std::vector<Tensor> rows;
  rows.reserve(size_t(J));
  for (int j = 0; j < J; ++j) {
    Tensor rest = slice_rows(rest_joints, j, j + 1);
    Tensor inv = concat({concat({eye3, neg(transpose(rest))}, 1), bottom}, 0);
    Tensor a = matmul(globals[size_t(j)], inv);
    rows.push_back(reshape(slice(a, 0, 3, 0, 4), {1, 12}));
  }
  Tensor a_all = concat(rows, 0);                       // [J,12]
  Tensor t = matmul(skin_weights, a_all);               // [V,12]
  Tensor vh = concat({shaped_vertices, Tensor::full({V, 1}, 1.0)}, 1);  // [V,4]
  std::vector<Tensor> out_cols;
  for (int r = 0; r < 3; ++r) {
    Tensor tr = slice(t, 0, V, r * 4, r * 4 + 4);
    out_cols.push_back(reshape(sum_axis(mul(tr, vh), 1), {V, 1}));
  }
  return concat(out_cols, 1);
}

MeshOutput smplx_forward(const BodyTemplate& tpl, const SmplxParams& params) {
  ShapedRest shaped = shape_blend(tpl, params.beta, params.phi);
  Tensor pose = concat({params.theta_body, params.theta_lhand,
                        params.theta_rhand, reshape(params.theta_jaw, {1, 3})},
                       0);  // [53,3]
  std::vector<Tensor> rots;
  rots.reserve(size_t(kNumJoints));
  for (int j = 0; j < kNumJoints; ++j)
    rots.push_back(rodrigues_op(slice_rows(pose, j, j + 1)));
  FkResult fk = forward_kinematics(shaped.rest_joints, rots, tpl.parents);
  Tensor posed = lbs(shaped.vertices, fk.globals, tpl.skin_weights,
                     shaped.rest_joints);
  MeshOutput out;
  out.vertices = add_rowvec(posed, params.t);
  out.joints = add_rowvec(fk.joints, params.t);
  return out;
}

// --- mirroring -------------------------------------------------------------------

Tensor mirror_axis_angle_rows(const Tensor& aa) {
  require(aa.ndim() == 2 && aa.cols() == 3, "mirror_axis_angle_rows: want [N,3]");
  std::vector<double> out(aa.values());
  for (int r = 0; r < aa.rows(); ++r) {
    out[size_t(r) * 3 + 1] = -out[size_t(r) * 3 + 1];
    out[size_t(r) * 3 + 2] = -out[size_t(r) * 3 + 2];
  }
  return Tensor(aa.shape(), std::move(out));
}

SmplxParams mirror_params(const SmplxParams& p) {
  SmplxParams m;
  Tensor body = mirror_axis_angle_rows(p.theta_body);
  std::vector<double> b(body.values());
  for (auto [l, r] : body_mirror_pairs())
    for (int c = 0; c < 3; ++c) std::swap(b[size_t(l) * 3 + c], b[size_t(r) * 3 + c]);
  m.theta_body = Tensor({22, 3}, std::move(b));
  m.beta = p.beta;
  std::vector<double> t(p.t.values());
  t[0] = -t[0];
  m.t = Tensor({3}, std::move(t));
  m.theta_lhand = mirror_axis_angle_rows(p.theta_rhand);
  m.theta_rhand = mirror_axis_angle_rows(p.theta_lhand);
  m.theta_jaw = reshape(mirror_axis_angle_rows(reshape(p.theta_jaw, {1, 3})), {3});
  m.phi = p.phi;
  return m;
}

}  // namespace catx
