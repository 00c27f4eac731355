#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "catx/encoder.hpp"
#include "catx/gradcheck.hpp"
#include "catx/rng.hpp"

#include <cmath>

using namespace catx;

namespace {

EncoderConfig toy_cfg() {
  EncoderConfig cfg;
  cfg.height = 32;
  cfg.width = 16;
  cfg.patch = 8;
  cfg.channels = 16;
  cfg.body_tokens = 27;
  cfg.depth = 2;
  cfg.heads = 4;
  cfg.ffn_mult = 2;
  cfg.head_hidden = 16;
  cfg.box_hidden = 8;
  return cfg;
}

Tensor random_image(const EncoderConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  Tensor img({cfg.height, cfg.width, 3});
  for (double& v : img.values()) v = rng.uniform(-1.0, 1.0);
  return img;
}

}  // namespace

TEST_CASE("patch count matches the full-resolution config") {
  EncoderConfig cfg;  // 256x192, M=16
  CHECK(cfg.num_patches() == 192);
  EncoderConfig bad = cfg;
  bad.patch = 15;
  CHECK_THROWS_AS(bad.validate(), TensorError);
  bad = cfg;
  bad.heads = 7;
  CHECK_THROWS_AS(bad.validate(), TensorError);
}

TEST_CASE("zero image embeds to bias plus position embedding") {
  const EncoderConfig cfg = toy_cfg();
  EncoderWeights w = make_encoder_weights(cfg, 3);
  Rng rng(4);
  for (double& v : w.patch_bias.values()) v = rng.uniform(-1, 1);
  Tensor tokens = patchify_embed(Tensor::zeros({cfg.height, cfg.width, 3}), w, cfg);
  CHECK(tokens.shape() == Shape({cfg.num_patches(), cfg.channels}));
  for (int p = 0; p < cfg.num_patches(); ++p)
    for (int c = 0; c < cfg.channels; ++c)
      CHECK(tokens.at({p, c}) ==
            doctest::Approx(w.patch_bias.values()[size_t(c)] +
                            w.pos_embed.at({p, c})).epsilon(1e-15));
}

TEST_CASE("swapping input patches swaps pre-embedding token rows") {
  const EncoderConfig cfg = toy_cfg();
  EncoderWeights w = make_encoder_weights(cfg, 5);
  w.pos_embed = Tensor::zeros(w.pos_embed.shape());  // expose raw projections
  Tensor img = random_image(cfg, 6);
  Tensor tok = patchify_embed(img, w, cfg);

  // Swap patch (0,0) with patch (1,1) in pixel space.
  Tensor swapped = img;
  Tensor copy(img.shape(), img.values());
  const int m = cfg.patch;
  for (int py = 0; py < m; ++py)
    for (int px = 0; px < m; ++px)
      for (int ch = 0; ch < 3; ++ch) {
        const size_t a = (size_t(py) * cfg.width + px) * 3 + ch;
        const size_t b = (size_t(m + py) * cfg.width + (m + px)) * 3 + ch;
        std::swap(copy.values()[a], copy.values()[b]);
      }
  Tensor tok2 = patchify_embed(copy, w, cfg);
  const int pa = 0, pb = 1 * cfg.grid_w() + 1;
  for (int c = 0; c < cfg.channels; ++c) {
    CHECK(tok2.at({pa, c}) == tok.at({pb, c}));
    CHECK(tok2.at({pb, c}) == tok.at({pa, c}));
    if (pa + 1 != pb)
      CHECK(tok2.at({pa + 1, c}) == tok.at({pa + 1, c}));
  }
}

TEST_CASE("encoder output shapes preserve token counts") {
  const EncoderConfig cfg = toy_cfg();
  EncoderWeights w = make_encoder_weights(cfg, 7);
  Tensor tf = patchify_embed(random_image(cfg, 8), w, cfg);
  EncoderOutput out = encoder_forward(tf, w, cfg);
  CHECK(out.feat_tokens.shape() == Shape({cfg.num_patches(), cfg.channels}));
  CHECK(out.body_tokens.shape() == Shape({27, cfg.channels}));
}

TEST_CASE("attention rows are normalized for every head") {
  const EncoderConfig cfg = toy_cfg();
  EncoderWeights w = make_encoder_weights(cfg, 9);
  Tensor tf = patchify_embed(random_image(cfg, 10), w, cfg);
  AttnTrace trace;
  encoder_forward(tf, w, cfg, &trace);
  CHECK(int(trace.attention.size()) == cfg.depth);
  for (const auto& block : trace.attention) {
    CHECK(int(block.size()) == cfg.heads);
    for (const Tensor& attn : block) {
      const int s = attn.rows();
      CHECK(s == cfg.num_patches() + cfg.body_tokens);
      for (int r = 0; r < s; ++r) {
        double sum = 0;
        for (int c = 0; c < s; ++c) sum += attn.at({r, c});
        CHECK(std::fabs(sum - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("encoder is deterministic bitwise") {
  const EncoderConfig cfg = toy_cfg();
  EncoderWeights w = make_encoder_weights(cfg, 11);
  Tensor img = random_image(cfg, 12);
  EncoderOutput a = encoder_forward(patchify_embed(img, w, cfg), w, cfg);
  EncoderOutput b = encoder_forward(patchify_embed(img, w, cfg), w, cfg);
  CHECK(a.feat_tokens.values() == b.feat_tokens.values());
  CHECK(a.body_tokens.values() == b.body_tokens.values());

  EncoderWeights w2 = make_encoder_weights(cfg, 11);
  ParamRegistry ra, rb;
  w.visit("enc", ra);
  w2.visit("enc", rb);
  REQUIRE(ra.size() == rb.size());
  for (size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].first == rb[i].first);
    CHECK(ra[i].second->values() == rb[i].second->values());
  }
}

TEST_CASE("without position embeddings the encoder is permutation equivariant") {
  // 4-patch toy input: permute patches, outputs permute the same way.
  EncoderConfig cfg = toy_cfg();
  cfg.height = 16;
  cfg.width = 16;  // 2x2 grid of 8px patches
  EncoderWeights w = make_encoder_weights(cfg, 13);
  w.pos_embed = Tensor::zeros(w.pos_embed.shape());
  Tensor img = random_image(cfg, 14);

  Tensor patches = extract_patches(img, cfg);
  REQUIRE(patches.rows() == 4);
  const int perm[4] = {2, 0, 3, 1};
  Tensor permuted(patches.shape());
  for (int p = 0; p < 4; ++p)
    for (int c = 0; c < patches.cols(); ++c)
      permuted.values()[size_t(p) * patches.cols() + c] =
          patches.at({perm[p], c});

  auto run = [&](const Tensor& pt) {
    Tensor tok = add(linear(pt, w.patch_proj, w.patch_bias), w.pos_embed);
    return encoder_forward(tok, w, cfg);
  };
  EncoderOutput base = run(patches);
  EncoderOutput permd = run(permuted);
  for (int p = 0; p < 4; ++p)
    for (int c = 0; c < cfg.channels; ++c)
      CHECK(permd.feat_tokens.at({p, c}) ==
            doctest::Approx(base.feat_tokens.at({perm[p], c})).epsilon(1e-12));
  // Body-token outputs are invariant to the patch order.
  for (int64_t i = 0; i < base.body_tokens.size(); ++i)
    CHECK(permd.body_tokens.values()[size_t(i)] ==
          doctest::Approx(base.body_tokens.values()[size_t(i)]).epsilon(1e-12));
}

TEST_CASE("fresh body head emits rest pose and centered boxes") {
  const EncoderConfig cfg = toy_cfg();
  EncoderWeights w = make_encoder_weights(cfg, 15);
  Tensor tf = patchify_embed(random_image(cfg, 16), w, cfg);
  EncoderOutput out = encoder_forward(tf, w, cfg);
  BodyRegression body = regress_body(out.body_tokens, w);
  CHECK(body.theta_body.shape() == Shape({22, 3}));
  CHECK(body.beta.shape() == Shape({10}));
  CHECK(body.t.shape() == Shape({3}));
  for (double v : body.theta_body.values()) CHECK(v == 0.0);
  for (double v : body.beta.values()) CHECK(v == 0.0);
  for (double v : body.t.values()) CHECK(v == 0.0);

  ComponentBoxes boxes = regress_component_boxes(out.feat_tokens, w);
  for (const Tensor* b : {&boxes.lhand, &boxes.rhand, &boxes.face}) {
    CHECK(b->shape() == Shape({4}));
    for (double v : b->values()) CHECK(v == 0.5);
  }
}

TEST_CASE("boxes stay inside the unit square for arbitrary features") {
  const EncoderConfig cfg = toy_cfg();
  EncoderWeights w = make_encoder_weights(cfg, 17);
  Rng rng(18);
  for (double& v : w.box_lhand.w2.values()) v = rng.uniform(-3, 3);
  for (double& v : w.box_lhand.b2.values()) v = rng.uniform(-5, 5);
  for (int it = 0; it < 20; ++it) {
    Tensor tf({cfg.num_patches(), cfg.channels});
    for (double& v : tf.values()) v = rng.uniform(-50.0, 50.0);
    ComponentBoxes boxes = regress_component_boxes(tf, w);
    for (double v : boxes.lhand.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("encoder gradients match finite differences") {
  GradCheckOptions opts;
  auto results = run_gradcheck(
      opts, {"encoder_block", "encoder_tokens", "body_head", "box_head"});
  CHECK(results.size() == 4);
  for (const auto& r : results) {
    INFO(r.op, " max_rel_err=", r.max_rel_err);
    CHECK(r.pass);
  }
}
