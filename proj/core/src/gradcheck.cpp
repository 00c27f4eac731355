#include "catx/gradcheck.hpp"

#include "catx/body_model.hpp"
#include "catx/rng.hpp"

#include <algorithm>
#include <cmath>

namespace catx {

namespace {

Tensor random_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

double rel_err(double a, double n) {
  return std::fabs(a - n) / std::max({1.0, std::fabs(a), std::fabs(n)});
}

}  // namespace

double gradcheck_case(const ScalarBuilder& fn, std::vector<Tensor> inputs,
                      double h, bool corrupt) {
  // Analytic gradients.
  std::vector<Tensor> grads;
  {
    Tape tape(Precision::f64);
    std::vector<Tensor> watched;
    watched.reserve(inputs.size());
    for (const Tensor& x : inputs) watched.push_back(tape.watch(x));
    Tensor loss = fn(tape, watched);
    tape.backward(loss);
    for (const Tensor& w : watched) grads.push_back(tape.grad(w));
  }
  if (corrupt && !grads.empty() && grads[0].size() > 0)
    grads[0].values()[0] += 1.0;

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape tape(Precision::f64);
    std::vector<Tensor> watched;
    watched.reserve(xs.size());
    for (const Tensor& x : xs) watched.push_back(tape.watch(x));
    return fn(tape, watched).item();
  };

  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int64_t e = 0; e < inputs[i].size(); ++e) {
      std::vector<Tensor> xs = inputs;
      Tensor bumped(inputs[i].shape(), inputs[i].values());
      bumped.values()[size_t(e)] += h;
      xs[i] = bumped;
      const double fp = eval(xs);
      bumped.values()[size_t(e)] -= 2.0 * h;
      xs[i] = Tensor(inputs[i].shape(), bumped.values());
      const double fm = eval(xs);
      const double numeric = (fp - fm) / (2.0 * h);
      worst = std::max(worst, rel_err(grads[i].values()[size_t(e)], numeric));
    }
  }
  return worst;
}

namespace {

// Fixed random projection so "sum of outputs" style scalars exercise every
// output element with distinct weights.
Tensor weighted_sum(Tape&, const Tensor& y, uint64_t seed) {
  Rng rng(seed);
  Tensor w(y.shape());
  for (double& v : w.values()) v = rng.uniform(-1.0, 1.0);
  return sum(mul(y, w));
}

double suite_matmul(const GradCheckOptions& o) {
  Rng rng(o.seed);
  double worst = 0.0;
  for (int it = 0; it < 10; ++it) {
    auto a = random_tensor(rng, {4, 5});
    auto b = random_tensor(rng, {5, 3});
    worst = std::max(
        worst, gradcheck_case(
                   [&](Tape& t, const std::vector<Tensor>& in) {
                     return weighted_sum(t, matmul(in[0], in[1]), o.seed + it);
                   },
                   {a, b}, o.h, o.corrupt_op == "matmul" && it == 0));
  }
  return worst;
}

double suite_layer_norm(const GradCheckOptions& o) {
  Rng rng(o.seed + 1);
  double worst = 0.0;
  for (int it = 0; it < 10; ++it) {
    auto x = random_tensor(rng, {3, 6});
    auto g = random_tensor(rng, {6}, 0.5, 1.5);
    auto b = random_tensor(rng, {6});
    worst = std::max(
        worst,
        gradcheck_case(
            [&](Tape& t, const std::vector<Tensor>& in) {
              return weighted_sum(t, layer_norm(in[0], in[1], in[2], 1e-5),
                                  o.seed + it);
            },
            {x, g, b}, o.h, o.corrupt_op == "layer_norm" && it == 0));
  }
  return worst;
}

double suite_softmax(const GradCheckOptions& o) {
  Rng rng(o.seed + 2);
  double worst = 0.0;
  for (int it = 0; it < 10; ++it) {
    auto x = random_tensor(rng, {4, 5}, -2.0, 2.0);
    const int axis = it % 2;
    worst = std::max(
        worst, gradcheck_case(
                   [&](Tape& t, const std::vector<Tensor>& in) {
                     return weighted_sum(t, softmax(in[0], axis), o.seed + it);
                   },
                   {x}, o.h, o.corrupt_op == "softmax" && it == 0));
  }
  return worst;
}

double suite_gelu(const GradCheckOptions& o) {
  Rng rng(o.seed + 3);
  double worst = 0.0;
  for (int it = 0; it < 10; ++it) {
    auto x = random_tensor(rng, {12}, -3.0, 3.0);
    worst = std::max(
        worst, gradcheck_case(
                   [&](Tape& t, const std::vector<Tensor>& in) {
                     return weighted_sum(t, gelu(in[0]), o.seed + it);
                   },
                   {x}, o.h, o.corrupt_op == "gelu" && it == 0));
  }
  return worst;
}

double suite_conv_transpose2d(const GradCheckOptions& o) {
  Rng rng(o.seed + 4);
  double worst = 0.0;
  for (int it = 0; it < 10; ++it) {
    auto x = random_tensor(rng, {2, 3, 4});
    auto k = random_tensor(rng, {2, 3, 4, 4});
    worst = std::max(
        worst,
        gradcheck_case(
            [&](Tape& t, const std::vector<Tensor>& in) {
              return weighted_sum(t, conv_transpose2d(in[0], in[1], 2),
                                  o.seed + it);
            },
            {x, k}, o.h, o.corrupt_op == "conv_transpose2d" && it == 0));
  }
  return worst;
}

double suite_bilinear_sample(const GradCheckOptions& o) {
  Rng rng(o.seed + 5);
  double worst = 0.0;
  for (int it = 0; it < 10; ++it) {
    auto map = random_tensor(rng, {3, 5, 6});
    // Interior points kept away from integer coordinates: clamping zeroes
    // the position gradient and the interpolation kinks break central
    // differences.
    Tensor pts({4, 2});
    for (int p = 0; p < 4; ++p) {
      pts.values()[size_t(p) * 2 + 0] = std::floor(rng.uniform(0, 4)) + rng.uniform(0.1, 0.9);
      pts.values()[size_t(p) * 2 + 1] = std::floor(rng.uniform(0, 3)) + rng.uniform(0.1, 0.9);
    }
    worst = std::max(
        worst,
        gradcheck_case(
            [&](Tape& t, const std::vector<Tensor>& in) {
              return weighted_sum(t, bilinear_sample(in[0], in[1]), o.seed + it);
            },
            {map, pts}, o.h, o.corrupt_op == "bilinear_sample" && it == 0));
  }
  return worst;
}

double suite_rodrigues(const GradCheckOptions& o) {
  Rng rng(o.seed + 6);
  double worst = 0.0;
  for (int it = 0; it < 10; ++it) {
    auto aa = random_tensor(rng, {1, 3}, -1.5, 1.5);
    worst = std::max(
        worst, gradcheck_case(
                   [&](Tape& t, const std::vector<Tensor>& in) {
                     return weighted_sum(t, rodrigues_op(in[0]), o.seed + it);
                   },
                   {aa}, o.h, o.corrupt_op == "rodrigues" && it == 0));
  }
  return worst;
}

const BodyTemplate& tiny_template() {
  static const BodyTemplate tpl = make_toy_template(ToyTemplateConfig{4, 4, 4}, 99);
  return tpl;
}

double suite_forward_kinematics(const GradCheckOptions& o) {
  Rng rng(o.seed + 7);
  const BodyTemplate& tpl = tiny_template();
  double worst = 0.0;
  for (int it = 0; it < 3; ++it) {
    auto pose = random_tensor(rng, {kNumJoints, 3}, -0.5, 0.5);
    worst = std::max(
        worst,
        gradcheck_case(
            [&](Tape& t, const std::vector<Tensor>& in) {
              std::vector<Tensor> rots;
              for (int j = 0; j < kNumJoints; ++j)
                rots.push_back(rodrigues_op(slice_rows(in[0], j, j + 1)));
              FkResult fk = forward_kinematics(tpl.rest_joints, rots, tpl.parents);
              return weighted_sum(t, fk.joints, o.seed + it);
            },
            {pose}, o.h, o.corrupt_op == "forward_kinematics" && it == 0));
  }
  return worst;
}

double suite_lbs(const GradCheckOptions& o) {
  Rng rng(o.seed + 8);
  const BodyTemplate& tpl = tiny_template();
  // Small stand-in vertex set with its own blended weights; probing every
  // template vertex would make the finite-difference sweep needlessly slow.
  const int nv = 6;
  Tensor weights({nv, kNumJoints});
  for (int i = 0; i < nv; ++i) {
    const int a = rng.index(kNumJoints), b = rng.index(kNumJoints);
    const double wa = rng.uniform(0.2, 0.8);
    weights.values()[size_t(i) * kNumJoints + a] += wa;
    weights.values()[size_t(i) * kNumJoints + b] += 1.0 - wa;
  }
  double worst = 0.0;
  for (int it = 0; it < 3; ++it) {
    auto pose = random_tensor(rng, {kNumJoints, 3}, -0.4, 0.4);
    auto verts = random_tensor(rng, {nv, 3}, -0.6, 0.6);
    worst = std::max(
        worst,
        gradcheck_case(
            [&](Tape& t, const std::vector<Tensor>& in) {
              std::vector<Tensor> rots;
              for (int j = 0; j < kNumJoints; ++j)
                rots.push_back(rodrigues_op(slice_rows(in[0], j, j + 1)));
              FkResult fk = forward_kinematics(tpl.rest_joints, rots, tpl.parents);
              Tensor posed = lbs(in[1], fk.globals, weights, tpl.rest_joints);
              return weighted_sum(t, posed, o.seed + it);
            },
            {pose, verts}, o.h, o.corrupt_op == "lbs" && it == 0));
  }
  return worst;
}

double suite_smplx_forward(const GradCheckOptions& o) {
  Rng rng(o.seed + 9);
  const BodyTemplate& tpl = tiny_template();
  double worst = 0.0;
  for (int it = 0; it < 2; ++it) {
    auto flat = random_tensor(rng, {SmplxParams::kNumScalars}, -0.4, 0.4);
    worst = std::max(
        worst,
        gradcheck_case(
            [&](Tape& t, const std::vector<Tensor>& in) {
              MeshOutput mesh = smplx_forward(tpl, SmplxParams::from_flat(in[0]));
              return add(mean(mesh.vertices),
                         weighted_sum(t, mesh.joints, o.seed + it));
            },
            {flat}, o.h, o.corrupt_op == "smplx_forward" && it == 0));
  }
  return worst;
}

}  // namespace

const std::vector<GradCheckSuite>& gradcheck_suites() {
  static const std::vector<GradCheckSuite> all = [] {
    std::vector<GradCheckSuite> s = {
        {"matmul", suite_matmul},
        {"layer_norm", suite_layer_norm},
        {"softmax", suite_softmax},
        {"gelu", suite_gelu},
        {"conv_transpose2d", suite_conv_transpose2d},
        {"bilinear_sample", suite_bilinear_sample},
        {"rodrigues", suite_rodrigues},
        {"forward_kinematics", suite_forward_kinematics},
        {"lbs", suite_lbs},
        {"smplx_forward", suite_smplx_forward},
    };
    for (auto& e : encoder_gradcheck_suites()) s.push_back(std::move(e));
    for (auto& e : decoder_gradcheck_suites()) s.push_back(std::move(e));
    for (auto& e : losses_gradcheck_suites()) s.push_back(std::move(e));
    return s;
  }();
  return all;
}

std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opts,
                                           const std::vector<std::string>& ops) {
  std::vector<GradCheckResult> out;
  for (const auto& suite : gradcheck_suites()) {
    if (!ops.empty() &&
        std::find(ops.begin(), ops.end(), suite.name) == ops.end())
      continue;
    GradCheckResult r;
    r.op = suite.name;
    r.max_rel_err = suite.run(opts);
    r.pass = r.max_rel_err < opts.tol;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace catx
