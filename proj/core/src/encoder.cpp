#include "catx/encoder.hpp"

#include "catx/gradcheck.hpp"
#include "catx/rng.hpp"

#include <cmath>

namespace catx {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

Tensor trunc_normal_tensor(Shape s, const std::string& name, uint64_t seed,
                           double stddev = 0.02) {
  Rng rng(Rng::mix(seed, Rng::hash_str(name)));
  Tensor t(std::move(s));
  for (double& v : t.values()) v = rng.trunc_normal(stddev);
  return t;
}

}  // namespace

void EncoderConfig::validate() const {
  require(patch > 0 && height % patch == 0 && width % patch == 0,
          "encoder: patch size must divide image height and width");
  require(channels % heads == 0, "encoder: channels must be divisible by heads");
  require(body_tokens >= 1, "encoder: need at least one body token");
  require(depth >= 1 && ffn_mult >= 1, "encoder: bad depth or ffn_mult");
}

void TransformerBlock::visit(const std::string& p, ParamRegistry& out) {
  out.insert(out.end(), {{p + ".ln1_g", &ln1_g}, {p + ".ln1_b", &ln1_b},
                         {p + ".ln2_g", &ln2_g}, {p + ".ln2_b", &ln2_b},
                         {p + ".wq", &wq}, {p + ".bq", &bq},
                         {p + ".wk", &wk}, {p + ".bk", &bk},
                         {p + ".wv", &wv}, {p + ".bv", &bv},
                         {p + ".wo", &wo}, {p + ".bo", &bo},
                         {p + ".w1", &w1}, {p + ".b1", &b1},
                         {p + ".w2", &w2}, {p + ".b2", &b2}});
}

void MlpHead::visit(const std::string& p, ParamRegistry& out) {
  out.insert(out.end(), {{p + ".w1", &w1}, {p + ".b1", &b1},
                         {p + ".w2", &w2}, {p + ".b2", &b2}});
}

MlpHead make_mlp_head(int in_dim, int hidden, int out_dim,
                      const std::string& name, uint64_t seed) {
  MlpHead h;
  h.w1 = trunc_normal_tensor({hidden, in_dim}, name + ".w1", seed);
  h.b1 = Tensor::zeros({hidden});
  h.w2 = Tensor::zeros({out_dim, hidden});  // rest pose at init
  h.b2 = Tensor::zeros({out_dim});
  return h;
}

Tensor mlp_head_forward(const MlpHead& head, const Tensor& x) {
  return linear(gelu(linear(x, head.w1, head.b1)), head.w2, head.b2);
}

TransformerBlock make_transformer_block(int channels, int ffn_mult,
                                        const std::string& name, uint64_t seed) {
  TransformerBlock b;
  b.ln1_g = Tensor::full({channels}, 1.0);
  b.ln1_b = Tensor::zeros({channels});
  b.ln2_g = Tensor::full({channels}, 1.0);
  b.ln2_b = Tensor::zeros({channels});
  b.wq = trunc_normal_tensor({channels, channels}, name + ".wq", seed);
  b.wk = trunc_normal_tensor({channels, channels}, name + ".wk", seed);
  b.wv = trunc_normal_tensor({channels, channels}, name + ".wv", seed);
  b.wo = trunc_normal_tensor({channels, channels}, name + ".wo", seed);
  b.bq = Tensor::zeros({channels});
  b.bk = Tensor::zeros({channels});
  b.bv = Tensor::zeros({channels});
  b.bo = Tensor::zeros({channels});
  const int hidden = channels * ffn_mult;
  b.w1 = trunc_normal_tensor({hidden, channels}, name + ".w1", seed);
  b.b1 = Tensor::zeros({hidden});
  b.w2 = trunc_normal_tensor({channels, hidden}, name + ".w2", seed);
  b.b2 = Tensor::zeros({channels});
  return b;
}

void EncoderWeights::visit(const std::string& p, ParamRegistry& out) {
  out.insert(out.end(), {{p + ".patch_proj", &patch_proj},
                         {p + ".patch_bias", &patch_bias},
                         {p + ".pos_embed", &pos_embed},
                         {p + ".body_tokens", &body_tokens}});
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].visit(p + ".block" + std::to_string(i), out);
  out.insert(out.end(), {{p + ".final_ln_g", &final_ln_g},
                         {p + ".final_ln_b", &final_ln_b}});
  body_head.visit(p + ".body_head", out);
  box_lhand.visit(p + ".box_lhand", out);
  box_rhand.visit(p + ".box_rhand", out);
  box_face.visit(p + ".box_face", out);
}

EncoderWeights make_encoder_weights(const EncoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  const int c = cfg.channels;
  EncoderWeights w;
  w.patch_proj = trunc_normal_tensor({c, cfg.patch * cfg.patch * 3},
                                     "enc.patch_proj", seed);
  w.patch_bias = Tensor::zeros({c});
  w.pos_embed = trunc_normal_tensor({cfg.num_patches(), c}, "enc.pos_embed", seed);
  w.body_tokens = trunc_normal_tensor({cfg.body_tokens, c}, "enc.body_tokens", seed);
  for (int i = 0; i < cfg.depth; ++i)
    w.blocks.push_back(make_transformer_block(
        c, cfg.ffn_mult, "enc.block" + std::to_string(i), seed));
  w.final_ln_g = Tensor::full({c}, 1.0);
  w.final_ln_b = Tensor::zeros({c});
  w.body_head = make_mlp_head(cfg.body_tokens * c, cfg.head_hidden, 79,
                              "enc.body_head", seed);
  w.box_lhand = make_mlp_head(c, cfg.box_hidden, 4, "enc.box_lhand", seed);
  w.box_rhand = make_mlp_head(c, cfg.box_hidden, 4, "enc.box_rhand", seed);
  w.box_face = make_mlp_head(c, cfg.box_hidden, 4, "enc.box_face", seed);
  return w;
}

Tensor extract_patches(const Tensor& image, const EncoderConfig& cfg) {
  require(image.shape() == Shape({cfg.height, cfg.width, 3}),
          "patchify: image shape " + shape_str(image.shape()) +
              " does not match config [" + std::to_string(cfg.height) + "," +
              std::to_string(cfg.width) + ",3]");
  const int m = cfg.patch, gw = cfg.grid_w(), gh = cfg.grid_h();
  const int pd = m * m * 3;
  Tensor out({gh * gw, pd});
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      double* dst = out.data() + size_t(gy * gw + gx) * pd;
      for (int py = 0; py < m; ++py)
        for (int px = 0; px < m; ++px)
          for (int ch = 0; ch < 3; ++ch)
            *dst++ = image.data()[(size_t(gy * m + py) * cfg.width +
                                   (gx * m + px)) * 3 + ch];
    }
  return out;
}

Tensor patchify_embed(const Tensor& image, const EncoderWeights& w,
                      const EncoderConfig& cfg) {
  Tensor patches = extract_patches(image, cfg);
  return add(linear(patches, w.patch_proj, w.patch_bias), w.pos_embed);
}

Tensor mhsa(const Tensor& x, const TransformerBlock& blk, int heads,
            std::vector<Tensor>* head_traces) {
  const int s = x.rows(), c = x.cols();
  require(c % heads == 0, "mhsa: channels not divisible by heads");
  const int dh = c / heads;
  Tensor q = linear(x, blk.wq, blk.bq);
  Tensor k = linear(x, blk.wk, blk.bk);
  Tensor v = linear(x, blk.wv, blk.bv);
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  std::vector<Tensor> outs;
  outs.reserve(size_t(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice(q, 0, s, h * dh, (h + 1) * dh);
    Tensor kh = slice(k, 0, s, h * dh, (h + 1) * dh);
    Tensor vh = slice(v, 0, s, h * dh, (h + 1) * dh);
    Tensor attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
    if (head_traces) head_traces->push_back(attn.detached());
    outs.push_back(matmul(attn, vh));
  }
  return linear(concat(outs, 1), blk.wo, blk.bo);
}

Tensor transformer_block_forward(const Tensor& x, const TransformerBlock& blk,
                                 int heads, std::vector<Tensor>* head_traces) {
  Tensor h = add(x, mhsa(layer_norm(x, blk.ln1_g, blk.ln1_b, 1e-6), blk, heads,
                         head_traces));
  Tensor ff = linear(gelu(linear(layer_norm(h, blk.ln2_g, blk.ln2_b, 1e-6),
                                 blk.w1, blk.b1)),
                     blk.w2, blk.b2);
  return add(h, ff);
}

EncoderOutput encoder_forward(const Tensor& feat_tokens,
                              const EncoderWeights& w, const EncoderConfig& cfg,
                              AttnTrace* trace) {
  const int p = cfg.num_patches(), b = cfg.body_tokens;
  require(feat_tokens.shape() == Shape({p, cfg.channels}),
          "encoder_forward: feature tokens must be [" + std::to_string(p) +
              "," + std::to_string(cfg.channels) + "]");
  Tensor x = concat({feat_tokens, w.body_tokens}, 0);
  for (const TransformerBlock& blk : w.blocks) {
    std::vector<Tensor> head_traces;
    x = transformer_block_forward(x, blk, cfg.heads,
                                  trace ? &head_traces : nullptr);
    if (trace) trace->attention.push_back(std::move(head_traces));
  }
  x = layer_norm(x, w.final_ln_g, w.final_ln_b, 1e-6);
  EncoderOutput out;
  out.feat_tokens = slice_rows(x, 0, p);
  out.body_tokens = slice_rows(x, p, p + b);
  return out;
}

BodyRegression regress_body(const Tensor& body_tokens_out,
                            const EncoderWeights& w) {
  const int b = body_tokens_out.rows(), c = body_tokens_out.cols();
  Tensor flat = reshape(body_tokens_out, {1, b * c});
  Tensor out = reshape(mlp_head_forward(w.body_head, flat), {79, 1});
  BodyRegression r;
  r.theta_body = reshape(slice_rows(out, 0, 66), {22, 3});
  r.beta = reshape(slice_rows(out, 66, 76), {10});
  r.t = reshape(slice_rows(out, 76, 79), {3});
  return r;
}

ComponentBoxes regress_component_boxes(const Tensor& feat_tokens_out,
                                       const EncoderWeights& w) {
  Tensor pooled = reshape(mean_axis(feat_tokens_out, 0),
                          {1, feat_tokens_out.cols()});
  auto box = [&](const MlpHead& head) {
    return reshape(sigmoid(mlp_head_forward(head, pooled)), {4});
  };
  ComponentBoxes boxes;
  boxes.lhand = box(w.box_lhand);
  boxes.rhand = box(w.box_rhand);
  boxes.face = box(w.box_face);
  return boxes;
}

// --- gradcheck suites ------------------------------------------------------------

namespace {

EncoderConfig toy_encoder_cfg() {
  EncoderConfig cfg;
  cfg.height = 16;
  cfg.width = 16;
  cfg.patch = 8;
  cfg.channels = 8;
  cfg.body_tokens = 4;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.head_hidden = 8;
  cfg.box_hidden = 8;
  return cfg;
}

double suite_encoder_block(const GradCheckOptions& o) {
  const EncoderConfig cfg = toy_encoder_cfg();
  Rng rng(o.seed + 40);
  Tensor x({6, cfg.channels});
  for (double& v : x.values()) v = rng.uniform(-1.0, 1.0);
  TransformerBlock blk = make_transformer_block(cfg.channels, cfg.ffn_mult,
                                                "gc.block", 5);
  double worst = 0.0;
  for (int it = 0; it < 3; ++it) {
    worst = std::max(
        worst,
        gradcheck_case(
            [&](Tape&, const std::vector<Tensor>& in) {
              TransformerBlock b = blk;
              b.wq = in[1];
              b.wv = in[2];
              Tensor y = transformer_block_forward(in[0], b, cfg.heads);
              Rng wr(o.seed + 91 + it);
              Tensor w(y.shape());
              for (double& v : w.values()) v = wr.uniform(-1, 1);
              return sum(mul(y, w));
            },
            {x, blk.wq, blk.wv}, o.h, o.corrupt_op == "encoder_block" && it == 0));
  }
  return worst;
}

double suite_encoder_tokens(const GradCheckOptions& o) {
  const EncoderConfig cfg = toy_encoder_cfg();
  EncoderWeights w = make_encoder_weights(cfg, 11);
  Rng rng(o.seed + 41);
  Tensor tf({cfg.num_patches(), cfg.channels});
  for (double& v : tf.values()) v = rng.uniform(-1.0, 1.0);
  // Gradient w.r.t. the learnable body tokens through the whole encoder.
  // Checked at a well-scaled point: near-constant rows into layer_norm have
  // third derivatives that swamp an h=1e-3 central difference.
  Tensor tb({cfg.body_tokens, cfg.channels});
  for (double& v : tb.values()) v = rng.uniform(-1.0, 1.0);
  return gradcheck_case(
      [&](Tape&, const std::vector<Tensor>& in) {
        EncoderWeights wl = w;
        wl.body_tokens = in[0];
        EncoderOutput out = encoder_forward(tf, wl, cfg);
        Rng wr(o.seed + 92);
        Tensor pw(out.body_tokens.shape());
        for (double& v : pw.values()) v = wr.uniform(-1, 1);
        Tensor pf(out.feat_tokens.shape());
        for (double& v : pf.values()) v = wr.uniform(-1, 1);
        return add(sum(mul(out.body_tokens, pw)), sum(mul(out.feat_tokens, pf)));
      },
      {tb}, o.h, o.corrupt_op == "encoder_tokens");
}

double suite_body_head(const GradCheckOptions& o) {
  const EncoderConfig cfg = toy_encoder_cfg();
  EncoderWeights w = make_encoder_weights(cfg, 12);
  Rng rng(o.seed + 42);
  Tensor tb({cfg.body_tokens, cfg.channels});
  for (double& v : tb.values()) v = rng.uniform(-1.0, 1.0);
  Tensor w2({79, cfg.head_hidden});
  for (double& v : w2.values()) v = rng.uniform(-0.2, 0.2);
  return gradcheck_case(
      [&](Tape&, const std::vector<Tensor>& in) {
        EncoderWeights wl = w;
        wl.body_head.w1 = in[0];
        wl.body_head.w2 = in[1];
        BodyRegression r = regress_body(tb, wl);
        return sum(mul(r.theta_body, r.theta_body));
      },
      {w.body_head.w1, w2}, o.h, o.corrupt_op == "body_head");
}

double suite_box_head(const GradCheckOptions& o) {
  const EncoderConfig cfg = toy_encoder_cfg();
  EncoderWeights w = make_encoder_weights(cfg, 13);
  Rng rng(o.seed + 43);
  Tensor tf({cfg.num_patches(), cfg.channels});
  for (double& v : tf.values()) v = rng.uniform(-1.0, 1.0);
  Tensor w2({4, cfg.box_hidden});
  for (double& v : w2.values()) v = rng.uniform(-0.3, 0.3);
  Tensor target({4}, {0.3, 0.6, 0.2, 0.1});
  return gradcheck_case(
      [&](Tape&, const std::vector<Tensor>& in) {
        EncoderWeights wl = w;
        wl.box_face.w1 = in[0];
        wl.box_face.w2 = in[1];
        ComponentBoxes boxes = regress_component_boxes(tf, wl);
        return mean(abs(sub(boxes.face, target)));
      },
      {w.box_face.w1, w2}, o.h, o.corrupt_op == "box_head");
}

}  // namespace

std::vector<GradCheckSuite> encoder_gradcheck_suites() {
  return {{"encoder_block", suite_encoder_block},
          {"encoder_tokens", suite_encoder_tokens},
          {"body_head", suite_body_head},
          {"box_head", suite_box_head}};
}

}  // namespace catx
