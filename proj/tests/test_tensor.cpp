#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "catx/gradcheck.hpp"
#include "catx/optim.hpp"
#include "catx/rng.hpp"
#include "catx/tensor.hpp"

#include "oracles.hpp"

#include <cmath>

using namespace catx;

TEST_CASE("matmul identity and zeros") {
  Tensor b({3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor y = matmul(Tensor::eye(3), b);
  for (int i = 0; i < 6; ++i) CHECK(y.values()[size_t(i)] == b.values()[size_t(i)]);

  Tensor z = matmul(Tensor::zeros({2, 3}), b);
  for (double v : z.values()) CHECK(v == 0.0);

  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                  TensorError);
  CHECK_THROWS_WITH_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})),
                       doctest::Contains("[2,3]"), TensorError);
}

TEST_CASE("layer_norm constant row is zeroed by eps") {
  Tensor x = Tensor::full({2, 5}, 3.7);
  Tensor y = layer_norm(x, Tensor::full({5}, 1.0), Tensor::zeros({5}), 1e-5);
  for (double v : y.values()) CHECK(std::fabs(v) < 1e-12);
}

TEST_CASE("layer_norm normalizes rows") {
  Rng rng(5);
  Tensor x({4, 16});
  for (double& v : x.values()) v = rng.uniform(-3.0, 3.0);
  Tensor y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}), 1e-12);
  for (int r = 0; r < 4; ++r) {
    double m = 0, var = 0;
    for (int c = 0; c < 16; ++c) m += y.values()[size_t(r) * 16 + c];
    m /= 16;
    for (int c = 0; c < 16; ++c) {
      const double d = y.values()[size_t(r) * 16 + c] - m;
      var += d * d;
    }
    var /= 16;
    CHECK(std::fabs(m) < 1e-12);
    CHECK(std::fabs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax basics") {
  Tensor a = softmax(Tensor({2}, {0.0, 0.0}), 0);
  CHECK(a.values()[0] == doctest::Approx(0.5).epsilon(1e-12));

  Tensor b = softmax(Tensor({2}, {1000.0, 1000.0 + std::log(2.0)}), 0);
  CHECK(b.values()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(b.values()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  Rng rng(7);
  Tensor x({5});
  for (double& v : x.values()) v = rng.uniform(-4.0, 4.0);
  Tensor y = softmax(x, 0);
  double s = 0;
  for (double v : y.values()) {
    CHECK(v >= 0.0);
    s += v;
  }
  CHECK(std::fabs(s - 1.0) < 1e-12);

  CHECK_THROWS_AS(softmax(x, 1), TensorError);
}

TEST_CASE("softmax rows sum to one for random matrices") {
  Rng rng(11);
  for (int it = 0; it < 20; ++it) {
    Tensor x({3, 7});
    for (double& v : x.values()) v = rng.uniform(-8.0, 8.0);
    Tensor y = softmax(x, 1);
    for (int r = 0; r < 3; ++r) {
      double s = 0;
      for (int c = 0; c < 7; ++c) s += y.values()[size_t(r) * 7 + c];
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("gelu endpoints") {
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(std::fabs(gelu(Tensor::scalar(10.0)).item() - 10.0) < 1e-4);
}

TEST_CASE("conv_transpose2d replicates a single input through the kernel") {
  const double v = 2.5;
  Tensor x({1, 1, 1}, {v});
  Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
  Tensor y = conv_transpose2d(x, k, 2);
  CHECK(y.shape() == Shape({1, 2, 2}));
  for (double o : y.values()) CHECK(o == doctest::Approx(v).epsilon(1e-15));
}

TEST_CASE("conv_transpose2d output dims are stride*input") {
  Tensor x = Tensor::zeros({3, 5, 7});
  Tensor k = Tensor::zeros({3, 4, 4, 4});
  CHECK(conv_transpose2d(x, k, 2).shape() == Shape({4, 10, 14}));
  CHECK_THROWS_AS(conv_transpose2d(x, Tensor::zeros({2, 4, 4, 4}), 2), TensorError);
}

TEST_CASE("bilinear_sample constants and corner average") {
  Tensor cmap = Tensor::full({2, 3, 4}, 1.25);
  Tensor pts({3, 2}, {0.0, 0.0, 1.7, 2.2, -5.0, 9.0});
  Tensor out = bilinear_sample(cmap, pts);
  for (double v : out.values()) CHECK(v == doctest::Approx(1.25).epsilon(1e-15));

  Tensor m({1, 2, 2}, {0, 1, 2, 3});
  Tensor p({1, 2}, {0.5, 0.5});
  CHECK(bilinear_sample(m, p).item() == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("backward of sum of squares is 2x exactly") {
  Tape tape;
  Tensor x = tape.watch(Tensor({3}, {1.0, -2.0, 0.5}));
  Tensor loss = sum(mul(x, x));
  tape.backward(loss);
  Tensor g = tape.grad(x);
  CHECK(g.values()[0] == 2.0);
  CHECK(g.values()[1] == -4.0);
  CHECK(g.values()[2] == 1.0);
}

TEST_CASE("constants receive no gradient and errors are reported") {
  Tape tape;
  Tensor x = tape.watch(Tensor({2}, {1.0, 2.0}));
  Tensor c({2}, {3.0, 4.0});  // never watched
  Tensor loss = sum(mul(x, c));
  tape.backward(loss);
  CHECK(tape.grad(x).values()[0] == 3.0);
  CHECK(!c.on_tape());
  CHECK_THROWS_AS(tape.grad(c), TensorError);

  Tensor vec = mul(x, c);
  CHECK_THROWS_AS(tape.backward(vec), TensorError);  // non-scalar loss
  Tape other;
  CHECK_THROWS_AS(other.backward(loss), TensorError);  // wrong tape
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(3);
  Tensor xv({4}, {0.3, -1.2, 0.7, 2.0});
  Tensor wv({4}, {1.0, 0.5, -0.25, 2.5});

  auto grads_for = [&](int which) {
    Tape tape;
    Tensor x = tape.watch(xv);
    Tensor l1 = sum(mul(x, wv));
    Tensor l2 = sum(mul(mul(x, x), wv));
    Tensor loss = which == 0 ? l1 : (which == 1 ? l2 : add(l1, l2));
    tape.backward(loss);
    return tape.grad(x).values();
  };
  auto g1 = grads_for(0), g2 = grads_for(1), g12 = grads_for(2);
  for (int i = 0; i < 4; ++i)
    CHECK(std::fabs(g12[size_t(i)] - (g1[size_t(i)] + g2[size_t(i)])) < 1e-12);
}

TEST_CASE("repeated backward on one tape resets gradients") {
  Tape tape;
  Tensor x = tape.watch(Tensor({2}, {1.0, 2.0}));
  Tensor loss = sum(mul(x, x));
  tape.backward(loss);
  tape.backward(loss);
  CHECK(tape.grad(x).values()[0] == 2.0);
}

TEST_CASE("adam zero gradient leaves parameters unchanged") {
  Tensor p({3}, {1.0, -2.0, 0.25});
  std::vector<Tensor*> params{&p};
  AdamState st = AdamState::init(params, 0.9, 0.999, 1e-8);
  adam_step(params, {Tensor::zeros({3})}, st, 0.1);
  CHECK(p.values()[0] == 1.0);
  CHECK(p.values()[1] == -2.0);
  CHECK(st.step == 1);
}

TEST_CASE("adam first step moves by -lr*sign(g)") {
  Tensor p({2}, {0.0, 0.0});
  std::vector<Tensor*> params{&p};
  AdamState st = AdamState::init(params, 0.9, 0.999, 1e-12);
  const double lr = 0.05;
  adam_step(params, {Tensor({2}, {0.3, -7.0})}, st, lr);
  CHECK(std::fabs(p.values()[0] - (-lr)) < 1e-6);
  CHECK(std::fabs(p.values()[1] - lr) < 1e-6);
}

TEST_CASE("adam matches the scalar recurrence oracle over 10 steps") {
  Tensor p({1}, {0.7});
  std::vector<Tensor*> params{&p};
  AdamState st = AdamState::init(params, 0.9, 0.999, 1e-8);
  oracles::ScalarAdamRef ref{0.9, 0.999, 1e-8};
  double ref_p = 0.7;
  Rng rng(21);
  for (int i = 0; i < 10; ++i) {
    const double g = rng.uniform(-2.0, 2.0);
    const double lr = 0.1 / (1 + i);
    adam_step(params, {Tensor({1}, {g})}, st, lr);
    ref_p = ref.step(ref_p, g, lr);
    CHECK(std::fabs(p.values()[0] - ref_p) < 1e-12);
  }
  CHECK_THROWS_AS(adam_step(params, {Tensor::zeros({2})}, st, 0.1), TensorError);
}

TEST_CASE("cosine schedule endpoints and monotonicity") {
  CHECK(cosine_lr(0, 100, 0.3) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(cosine_lr(100, 100, 0.3) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(cosine_lr(50, 100, 0.3) == doctest::Approx(0.15).epsilon(1e-12));
  double prev = 1e9;
  for (int s = 0; s <= 200; ++s) {
    const double lr = cosine_lr(s, 200, 1.0);
    CHECK(lr <= prev + 1e-15);
    prev = lr;
  }
}

TEST_CASE("finite differences pass for every tensor-core op") {
  GradCheckOptions opts;
  auto results = run_gradcheck(opts, {"matmul", "layer_norm", "softmax", "gelu",
                                      "conv_transpose2d", "bilinear_sample"});
  CHECK(results.size() == 6);
  for (const auto& r : results) {
    INFO(r.op, " max_rel_err=", r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("corrupted backward is reported by name") {
  GradCheckOptions opts;
  opts.corrupt_op = "matmul";
  auto results = run_gradcheck(opts, {"matmul", "gelu"});
  bool matmul_failed = false;
  for (const auto& r : results) {
    if (r.op == "matmul") matmul_failed = !r.pass;
    if (r.op == "gelu") CHECK(r.pass);
  }
  CHECK(matmul_failed);
}

TEST_CASE("f32 precision mode quantizes stored activations") {
  Tape tape(Precision::f32);
  Tensor x = tape.watch(Tensor({1}, {0.1}));
  Tensor y = mul(x, x);
  CHECK(y.item() == double(float(double(float(0.1)) * double(float(0.1)))));
}

TEST_CASE("slicing, concat and transpose round-trip") {
  Tensor x({3, 4}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  Tensor top = slice_rows(x, 0, 2);
  Tensor bot = slice_rows(x, 2, 3);
  Tensor back = concat({top, bot}, 0);
  CHECK(back.values() == x.values());
  Tensor tt = transpose(transpose(x));
  CHECK(tt.values() == x.values());
  Tensor l = slice(x, 0, 3, 0, 2), r = slice(x, 0, 3, 2, 4);
  CHECK(concat({l, r}, 1).values() == x.values());
}
