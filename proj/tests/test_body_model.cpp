#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "catx/body_model.hpp"
#include "catx/gradcheck.hpp"
#include "catx/rng.hpp"

#include <cmath>
#include <cstdio>

using namespace catx;

namespace {

const BodyTemplate& tpl() {
  static const BodyTemplate t = make_toy_template(ToyTemplateConfig{}, 42);
  return t;
}

SmplxParams random_pose(uint64_t seed, double body_mag = 0.4) {
  Rng rng(seed);
  SmplxParams p = SmplxParams::zero();
  for (double& v : p.theta_body.values()) v = rng.uniform(-body_mag, body_mag);
  for (double& v : p.theta_lhand.values()) v = rng.uniform(-0.8, 0.8);
  for (double& v : p.theta_rhand.values()) v = rng.uniform(-0.8, 0.8);
  for (double& v : p.theta_jaw.values()) v = rng.uniform(-0.3, 0.3);
  for (double& v : p.beta.values()) v = rng.uniform(-1.0, 1.0);
  for (double& v : p.phi.values()) v = rng.uniform(-1.0, 1.0);
  for (double& v : p.t.values()) v = rng.uniform(-1.0, 1.0);
  return p;
}

}  // namespace

TEST_CASE("rodrigues on canonical rotations") {
  Tensor id = rodrigues(Tensor({3}, {0, 0, 0}));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(id.at({i, j}) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-15));

  Tensor half_x = rodrigues(Tensor({3}, {M_PI, 0, 0}));
  const double want_hx[9] = {1, 0, 0, 0, -1, 0, 0, 0, -1};
  for (int i = 0; i < 9; ++i)
    CHECK(half_x.values()[size_t(i)] == doctest::Approx(want_hx[i]).epsilon(1e-12));

  Tensor quarter_z = rodrigues(Tensor({3}, {0, 0, M_PI / 2}));
  const double want_qz[9] = {0, -1, 0, 1, 0, 0, 0, 0, 1};
  for (int i = 0; i < 9; ++i)
    CHECK(quarter_z.values()[size_t(i)] == doctest::Approx(want_qz[i]).epsilon(1e-12));
}

TEST_CASE("rodrigues outputs are orthonormal with det one") {
  Rng rng(17);
  for (int it = 0; it < 200; ++it) {
    Tensor aa({3}, {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)});
    if (it == 0) aa = Tensor({3}, {1e-12, -3e-13, 2e-12});  // small-angle branch
    Tensor r = rodrigues(aa);
    const auto& v = r.values();
    double max_dev = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double dot = 0;
        for (int k = 0; k < 3; ++k) dot += v[size_t(k) * 3 + i] * v[size_t(k) * 3 + j];
        max_dev = std::max(max_dev, std::fabs(dot - (i == j ? 1.0 : 0.0)));
      }
    CHECK(max_dev < 1e-12);
    const double det = v[0] * (v[4] * v[8] - v[5] * v[7]) -
                       v[1] * (v[3] * v[8] - v[5] * v[6]) +
                       v[2] * (v[3] * v[7] - v[4] * v[6]);
    CHECK(std::fabs(det - 1.0) < 1e-12);
  }
}

TEST_CASE("rodrigues gradient matches rodrigues_op small-angle form") {
  // Below the cutover the series form reduces to I + skew(aa) to first order.
  Tensor aa({1, 3}, {3e-9, -2e-9, 1e-9});
  Tensor r = rodrigues_op(aa);
  CHECK(r.at({0, 1}) == doctest::Approx(-1e-9).epsilon(1e-6));
  CHECK(r.at({1, 0}) == doctest::Approx(1e-9).epsilon(1e-6));
  CHECK(r.at({0, 0}) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("toy template is deterministic per seed") {
  BodyTemplate a = make_toy_template(ToyTemplateConfig{}, 7);
  BodyTemplate b = make_toy_template(ToyTemplateConfig{}, 7);
  CHECK(a.vertices.values() == b.vertices.values());
  CHECK(a.shape_dirs.values() == b.shape_dirs.values());
  CHECK(a.skin_weights.values() == b.skin_weights.values());
  BodyTemplate c = make_toy_template(ToyTemplateConfig{}, 8);
  CHECK(a.shape_dirs.values() != c.shape_dirs.values());
}

TEST_CASE("toy template row sums and regressor self-consistency") {
  const BodyTemplate& t = tpl();
  const int V = t.num_vertices(), J = t.num_joints();
  for (int i = 0; i < V; ++i) {
    double s = 0;
    for (int j = 0; j < J; ++j) s += t.skin_weights.at({i, j});
    CHECK(std::fabs(s - 1.0) < 1e-9);
  }
  Tensor regressed = matmul(t.joint_regressor, t.vertices);
  for (int64_t i = 0; i < regressed.size(); ++i)
    CHECK(std::fabs(regressed.values()[size_t(i)] -
                    t.rest_joints.values()[size_t(i)]) < 1e-9);
}

TEST_CASE("toy template rejects a vertex budget below minimum") {
  CHECK_THROWS_AS(make_toy_template(ToyTemplateConfig{3, 4, 4}, 1), TensorError);
  CHECK_THROWS_AS(make_toy_template(ToyTemplateConfig{8, 2, 12}, 1), TensorError);
}

TEST_CASE("shape_blend at zero returns the template exactly") {
  ShapedRest s = shape_blend(tpl(), Tensor::zeros({10}), Tensor::zeros({10}));
  CHECK(s.vertices.values() == tpl().vertices.values());
}

TEST_CASE("expression coefficients touch only face vertices") {
  Rng rng(9);
  Tensor phi({10});
  for (double& v : phi.values()) v = rng.uniform(-1, 1);
  ShapedRest s = shape_blend(tpl(), Tensor::zeros({10}), phi);
  std::vector<bool> in_face(size_t(tpl().num_vertices()), false);
  for (int id : tpl().mask(BodyPart::face)) in_face[size_t(id)] = true;
  bool face_moved = false;
  for (int i = 0; i < tpl().num_vertices(); ++i) {
    double d = 0;
    for (int c = 0; c < 3; ++c)
      d += std::fabs(s.vertices.at({i, c}) - tpl().vertices.at({i, c}));
    if (in_face[size_t(i)]) face_moved |= d > 0;
    else CHECK(d == 0.0);
  }
  CHECK(face_moved);
}

TEST_CASE("shape_blend is linear in beta") {
  Rng rng(10);
  Tensor beta({10});
  for (double& v : beta.values()) v = rng.uniform(-1, 1);
  Tensor beta2 = scale(beta, 2.0);
  Tensor zero = Tensor::zeros({10});
  ShapedRest b0 = shape_blend(tpl(), zero, zero);
  ShapedRest b1 = shape_blend(tpl(), beta, zero);
  ShapedRest b2 = shape_blend(tpl(), beta2, zero);
  for (int64_t i = 0; i < b0.vertices.size(); ++i) {
    const double d1 = b1.vertices.values()[size_t(i)] - b0.vertices.values()[size_t(i)];
    const double d2 = b2.vertices.values()[size_t(i)] - b0.vertices.values()[size_t(i)];
    CHECK(std::fabs(d2 - 2.0 * d1) < 1e-12);
  }
}

TEST_CASE("fk with identity rotations returns rest joints") {
  std::vector<Tensor> rots(size_t(kNumJoints), Tensor::eye(3));
  FkResult fk = forward_kinematics(tpl().rest_joints, rots, tpl().parents);
  for (int64_t i = 0; i < fk.joints.size(); ++i)
    CHECK(fk.joints.values()[size_t(i)] ==
          doctest::Approx(tpl().rest_joints.values()[size_t(i)]).epsilon(1e-12));
}

TEST_CASE("bone lengths are invariant under random poses") {
  const BodyTemplate& t = tpl();
  for (int it = 0; it < 50; ++it) {
    SmplxParams p = random_pose(100 + it, 1.2);
    Tensor pose = concat({p.theta_body, p.theta_lhand, p.theta_rhand,
                          reshape(p.theta_jaw, {1, 3})}, 0);
    std::vector<Tensor> rots;
    for (int j = 0; j < kNumJoints; ++j)
      rots.push_back(rodrigues_op(slice_rows(pose, j, j + 1)));
    FkResult fk = forward_kinematics(t.rest_joints, rots, t.parents);
    for (int j = 1; j < kNumJoints; ++j) {
      const int pj = t.parents[size_t(j)];
      double rest = 0, posed = 0;
      for (int c = 0; c < 3; ++c) {
        const double dr = t.rest_joints.at({j, c}) - t.rest_joints.at({pj, c});
        const double dp = fk.joints.at({j, c}) - fk.joints.at({pj, c});
        rest += dr * dr;
        posed += dp * dp;
      }
      rest = std::sqrt(rest);
      posed = std::sqrt(posed);
      CHECK(std::fabs(posed - rest) / std::max(rest, 1e-12) < 1e-9);
    }
  }
}

TEST_CASE("lbs identity and single-joint transforms") {
  const BodyTemplate& t = tpl();
  std::vector<Tensor> globals;
  for (int j = 0; j < kNumJoints; ++j) {
    Tensor g = Tensor::eye(4);
    for (int c = 0; c < 3; ++c)
      g.values()[size_t(c) * 4 + 3] = t.rest_joints.at({j, c});
    globals.push_back(g);
  }
  Tensor posed = lbs(t.vertices, globals, t.skin_weights, t.rest_joints);
  for (int64_t i = 0; i < posed.size(); ++i)
    CHECK(posed.values()[size_t(i)] ==
          doctest::Approx(t.vertices.values()[size_t(i)]).epsilon(1e-12));

  // A vertex fully bound to joint j moves exactly by that joint's transform.
  const int j = 18;
  Tensor w = Tensor::zeros({2, kNumJoints});
  w.values()[size_t(0) * kNumJoints + j] = 1.0;
  w.values()[size_t(1) * kNumJoints + j] = 1.0;
  Tensor verts({2, 3}, {0.3, 1.2, 0.1, -0.2, 0.9, 0.05});
  Tensor rot = rodrigues(Tensor({3}, {0.3, -0.5, 0.7}));
  Tensor g = Tensor::eye(4);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) g.values()[size_t(r) * 4 + c] = rot.at({r, c});
  g.values()[3] = 0.25;  // translation x
  std::vector<Tensor> single(size_t(kNumJoints), Tensor::eye(4));
  single[size_t(j)] = g;
  Tensor out = lbs(verts, single, w, t.rest_joints);
  for (int i = 0; i < 2; ++i) {
    double rest[3] = {t.rest_joints.at({j, 0}), t.rest_joints.at({j, 1}),
                      t.rest_joints.at({j, 2})};
    double rel[3] = {verts.at({i, 0}) - rest[0], verts.at({i, 1}) - rest[1],
                     verts.at({i, 2}) - rest[2]};
    // A_j = G_j * [I|-rest]: x -> R*(x - rest) + G_trans
    for (int r = 0; r < 3; ++r) {
      double want = g.values()[size_t(r) * 4 + 3];
      for (int c = 0; c < 3; ++c) want += rot.at({r, c}) * rel[c];
      CHECK(out.at({i, r}) == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("lbs all-root weights rotate rigidly about the root") {
  const BodyTemplate& t = tpl();
  const int V = t.num_vertices();
  Tensor w = Tensor::zeros({V, kNumJoints});
  for (int i = 0; i < V; ++i) w.values()[size_t(i) * kNumJoints + 0] = 1.0;
  SmplxParams p = SmplxParams::zero();
  p.theta_body.values()[0] = 0.4;
  p.theta_body.values()[1] = -0.2;
  p.theta_body.values()[2] = 0.9;
  Tensor rot = rodrigues(Tensor({3}, {0.4, -0.2, 0.9}));
  Tensor pose = concat({p.theta_body, p.theta_lhand, p.theta_rhand,
                        reshape(p.theta_jaw, {1, 3})}, 0);
  std::vector<Tensor> rots;
  for (int j = 0; j < kNumJoints; ++j)
    rots.push_back(rodrigues_op(slice_rows(pose, j, j + 1)));
  FkResult fk = forward_kinematics(t.rest_joints, rots, t.parents);
  Tensor posed = lbs(t.vertices, fk.globals, w, t.rest_joints);
  for (int i = 0; i < V; ++i) {
    double rel[3] = {t.vertices.at({i, 0}) - t.rest_joints.at({0, 0}),
                     t.vertices.at({i, 1}) - t.rest_joints.at({0, 1}),
                     t.vertices.at({i, 2}) - t.rest_joints.at({0, 2})};
    for (int r = 0; r < 3; ++r) {
      double want = t.rest_joints.at({0, r});
      for (int c = 0; c < 3; ++c) want += rot.at({r, c}) * rel[c];
      CHECK(std::fabs(posed.at({i, r}) - want) < 1e-12);
    }
  }
}

TEST_CASE("smplx_forward zero pose translates the template") {
  SmplxParams p = SmplxParams::zero();
  p.t = Tensor({3}, {1.0, 2.0, 3.0});
  MeshOutput m = smplx_forward(tpl(), p);
  CHECK(m.vertices.shape() == Shape({tpl().num_vertices(), 3}));
  CHECK(m.joints.shape() == Shape({53, 3}));
  for (int i = 0; i < tpl().num_vertices(); ++i)
    for (int c = 0; c < 3; ++c)
      CHECK(m.vertices.at({i, c}) ==
            doctest::Approx(tpl().vertices.at({i, c}) + (c + 1)).epsilon(1e-12));
}

TEST_CASE("smplx_forward is translation equivariant and deterministic") {
  SmplxParams p = random_pose(55);
  p.t = Tensor::zeros({3});
  MeshOutput base = smplx_forward(tpl(), p);
  MeshOutput again = smplx_forward(tpl(), p);
  CHECK(base.vertices.values() == again.vertices.values());
  CHECK(base.joints.values() == again.joints.values());

  const double delta[3] = {0.5, -2.0, 0.25};
  SmplxParams q = p;
  q.t = Tensor({3}, {delta[0], delta[1], delta[2]});
  MeshOutput moved = smplx_forward(tpl(), q);
  for (int i = 0; i < tpl().num_vertices(); ++i)
    for (int c = 0; c < 3; ++c)
      CHECK(moved.vertices.at({i, c}) == base.vertices.at({i, c}) + delta[c]);
}

TEST_CASE("smplx params flatten round-trip and validation") {
  SmplxParams p = random_pose(77);
  Tensor flat = p.flatten();
  CHECK(flat.shape() == Shape({182}));
  SmplxParams q = SmplxParams::from_flat(flat);
  CHECK(q.theta_body.values() == p.theta_body.values());
  CHECK(q.theta_rhand.values() == p.theta_rhand.values());
  CHECK(q.phi.values() == p.phi.values());
  p.validate();
  SmplxParams bad = p;
  bad.beta = Tensor::zeros({9});
  CHECK_THROWS_AS(bad.validate(), TensorError);
}

TEST_CASE("smplx gradients match finite differences") {
  GradCheckOptions opts;
  auto results =
      run_gradcheck(opts, {"rodrigues", "forward_kinematics", "lbs", "smplx_forward"});
  CHECK(results.size() == 4);
  for (const auto& r : results) {
    INFO(r.op, " max_rel_err=", r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("template file round-trips bitwise") {
  const char* path = "toy_template_roundtrip.catbody";
  save_template(tpl(), path);
  BodyTemplate back = load_template(path);
  CHECK(back.vertices.values() == tpl().vertices.values());
  CHECK(back.shape_dirs.values() == tpl().shape_dirs.values());
  CHECK(back.expr_dirs.values() == tpl().expr_dirs.values());
  CHECK(back.joint_regressor.values() == tpl().joint_regressor.values());
  CHECK(back.skin_weights.values() == tpl().skin_weights.values());
  CHECK(back.parents == tpl().parents);
  CHECK(back.faces == tpl().faces);
  for (int i = 0; i < 4; ++i)
    CHECK(back.component_masks[size_t(i)] == tpl().component_masks[size_t(i)]);
  std::remove(path);
}

TEST_CASE("mirroring is an involution") {
  SmplxParams p = random_pose(31);
  SmplxParams m = mirror_params(mirror_params(p));
  CHECK(m.theta_body.values() == p.theta_body.values());
  CHECK(m.theta_lhand.values() == p.theta_lhand.values());
  CHECK(m.t.values() == p.t.values());
  SmplxParams once = mirror_params(p);
  CHECK(once.t.values()[0] == -p.t.values()[0]);
  CHECK(once.theta_lhand.values()[0] == p.theta_rhand.values()[0]);
  CHECK(once.theta_lhand.values()[1] == -p.theta_rhand.values()[1]);
}
