#include "catx/decoder.hpp"

#include "catx/gradcheck.hpp"
#include "catx/rng.hpp"

#include <cmath>

namespace catx {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }

Tensor trunc_normal_tensor(Shape s, const std::string& name, uint64_t seed,
                           double stddev = 0.02) {
  Rng rng(Rng::mix(seed, Rng::hash_str(name)));
  Tensor t(std::move(s));
  for (double& v : t.values()) v = rng.trunc_normal(stddev);
  return t;
}

}  // namespace

void DecoderConfig::validate(int encoder_channels) const {
  require(!scales.empty(), "decoder: scales must be non-empty");
  for (size_t i = 0; i < scales.size(); ++i) {
    require(is_pow2(scales[i]), "decoder: scales must be powers of two");
    if (i) require(scales[i] > scales[i - 1], "decoder: scales must increase");
  }
  require(crop_h >= 2 && crop_w >= 2, "decoder: crop size too small");
  const int cp = width(encoder_channels);
  require(cp % heads == 0, "decoder: width must be divisible by heads");
  require(cp % 4 == 0, "decoder: width must be a multiple of 4 (sincos embed)");
  require(n_points >= 1, "decoder: need at least one sampling point");
  require(k_hand >= 1 && k_face >= 1, "decoder: bad component token counts");
}

Tensor clamp_min(const Tensor& x, double lo) {
  std::vector<double> out(x.values());
  for (double& v : out) v = std::max(v, lo);
  if (!x.on_tape()) return Tensor(x.shape(), std::move(out));
  int nx = x.node();
  Tensor xv = x.detached();
  return x.tape()->emit(x.shape(), std::move(out),
                        [nx, xv, lo](Tape& t, const std::vector<double>& g) {
                          auto& buf = t.grad_buf(nx);
                          for (size_t i = 0; i < g.size(); ++i)
                            if (xv.values()[i] > lo) buf[i] += g[i];
                        });
}

Tensor roi_align(const Tensor& map, const Tensor& box, int out_h, int out_w,
                 RoiDiag* diag) {
  require(map.ndim() == 3, "roi_align: map must be [C,H,W]");
  require(box.size() == 4, "roi_align: box must be (cx,cy,w,h)");
  const int c = map.dim(0), h = map.dim(1), w = map.dim(2);
  if (diag && (box.values()[2] < 1e-6 || box.values()[3] < 1e-6))
    diag->degenerate_boxes += 1;

  Tensor center = slice(reshape(box, {1, 4}), 0, 1, 0, 2);  // (cx,cy)
  Tensor size = clamp_min(slice(reshape(box, {1, 4}), 0, 1, 2, 4), 1e-6);

  // Bin centers in box-fraction coordinates, then into pixel coordinates via
  // pix = norm*extent - 0.5 (pixel centers at half-integer normalized spots).
  Tensor frac({out_h * out_w, 2});
  for (int i = 0; i < out_h; ++i)
    for (int j = 0; j < out_w; ++j) {
      frac.values()[(size_t(i) * out_w + j) * 2 + 0] = (j + 0.5) / out_w - 0.5;
      frac.values()[(size_t(i) * out_w + j) * 2 + 1] = (i + 0.5) / out_h - 0.5;
    }
  const int n = out_h * out_w;
  Tensor norm = add(repeat_interleave_rows(center, n),
                    mul(frac, repeat_interleave_rows(size, n)));
  Tensor pix = add(matmul(norm, Tensor({2, 2}, {double(w), 0, 0, double(h)})),
                   Tensor::full({n, 2}, -0.5));
  Tensor sampled = bilinear_sample(map, pix);          // [n, C]
  return reshape(transpose(sampled), {c, out_h, out_w});
}

// --- upsampling -----------------------------------------------------------------

void UpsampleWeights::visit(const std::string& p, ParamRegistry& out) {
  for (size_t i = 0; i < kernels.size(); ++i)
    out.push_back({p + ".deconv" + std::to_string(i), &kernels[i]});
}

UpsampleWeights make_upsample_weights(int channels, const std::vector<int>& scales,
                                      const std::string& name, uint64_t seed) {
  const int max_scale = scales.empty() ? 1 : scales.back();
  int chain = 0;
  for (int s = 1; s < max_scale; s *= 2) ++chain;
  UpsampleWeights w;
  // Bilinear-upsampling init on the channel diagonal plus small noise, so the
  // decoder sees a faithful upsampled map before any training.
  const double taps[4] = {0.25, 0.75, 0.75, 0.25};
  for (int d = 0; d < chain; ++d) {
    Tensor k = trunc_normal_tensor({channels, channels, 4, 4},
                                   name + ".deconv" + std::to_string(d), seed,
                                   0.01);
    for (int c = 0; c < channels; ++c)
      for (int ki = 0; ki < 4; ++ki)
        for (int kj = 0; kj < 4; ++kj)
          k.values()[((size_t(c) * channels + c) * 4 + ki) * 4 + kj] +=
              taps[ki] * taps[kj];
    w.kernels.push_back(std::move(k));
  }
  return w;
}

std::vector<Tensor> upsample_multiscale(const Tensor& base_map,
                                        const UpsampleWeights& w,
                                        const std::vector<int>& scales) {
  require(base_map.ndim() == 3, "upsample_multiscale: map must be [C,H,W]");
  std::vector<Tensor> out;
  Tensor cur = base_map;
  int cur_scale = 1;
  size_t next = 0;
  if (!scales.empty() && scales[0] == 1) {
    out.push_back(cur);
    next = 1;
  }
  size_t chain = 0;
  while (next < scales.size()) {
    require(chain < w.kernels.size(), "upsample_multiscale: missing deconv");
    cur = conv_transpose2d(cur, w.kernels[chain++], 2);
    cur_scale *= 2;
    if (scales[next] == cur_scale) {
      out.push_back(cur);
      ++next;
    }
  }
  return out;
}

// --- deformable attention ---------------------------------------------------------

void DeformableBlock::visit(const std::string& p, ParamRegistry& out) {
  sa.visit(p + ".sa", out);
  out.insert(out.end(), {{p + ".ln_cross_g", &ln_cross_g},
                         {p + ".ln_cross_b", &ln_cross_b},
                         {p + ".off_w", &off_w}, {p + ".off_b", &off_b},
                         {p + ".attn_w", &attn_w}, {p + ".attn_b", &attn_b},
                         {p + ".val_w", &val_w}, {p + ".val_b", &val_b},
                         {p + ".out_w", &out_w}, {p + ".out_b", &out_b}});
}

namespace {

DeformableBlock make_deformable_block(int c_prime, const DecoderConfig& cfg,
                                      const std::string& name, uint64_t seed) {
  DeformableBlock b;
  b.sa = make_transformer_block(c_prime, cfg.ffn_mult, name + ".sa", seed);
  b.ln_cross_g = Tensor::full({c_prime}, 1.0);
  b.ln_cross_b = Tensor::zeros({c_prime});
  const int l = cfg.num_levels(), p = cfg.n_points, h = cfg.heads;
  // Zero offset weights; the bias places the initial samples on a one-pixel
  // ring around the reference point. Zero attention logits = uniform A.
  b.off_w = Tensor::zeros({h * l * p * 2, c_prime});
  b.off_b = Tensor::zeros({h * l * p * 2});
  for (int hh = 0; hh < h; ++hh)
    for (int ll = 0; ll < l; ++ll)
      for (int pp = 0; pp < p; ++pp) {
        const double ang = 2.0 * M_PI * (hh * p + pp) / double(h * p);
        const size_t base = size_t(((hh * l + ll) * p + pp)) * 2;
        b.off_b.values()[base + 0] = std::cos(ang);
        b.off_b.values()[base + 1] = std::sin(ang);
      }
  b.attn_w = Tensor::zeros({h * l * p, c_prime});
  b.attn_b = Tensor::zeros({h * l * p});
  b.val_w = trunc_normal_tensor({c_prime, c_prime}, name + ".val_w", seed);
  b.val_b = Tensor::zeros({c_prime});
  b.out_w = trunc_normal_tensor({c_prime, c_prime}, name + ".out_w", seed);
  b.out_b = Tensor::zeros({c_prime});
  return b;
}

}  // namespace

void ComponentDecoderWeights::visit(const std::string& p, ParamRegistry& out) {
  out.insert(out.end(), {{p + ".kp_w", &kp_w}, {p + ".kp_b", &kp_b},
                         {p + ".red_w", &red_w}, {p + ".red_b", &red_b},
                         {p + ".feat_w", &feat_w},
                         {p + ".learned_embed", &learned_embed}});
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].visit(p + ".block" + std::to_string(i), out);
  out.insert(out.end(), {{p + ".final_ln_g", &final_ln_g},
                         {p + ".final_ln_b", &final_ln_b}});
  head.visit(p + ".head", out);
}

ComponentDecoderWeights make_component_decoder(int enc_channels,
                                               const DecoderConfig& cfg, int k,
                                               int head_out,
                                               const std::string& name,
                                               uint64_t seed) {
  const int cp = cfg.width(enc_channels);
  ComponentDecoderWeights w;
  w.kp_w = trunc_normal_tensor({k, enc_channels}, name + ".kp_w", seed);
  w.kp_b = Tensor::zeros({k});
  w.red_w = trunc_normal_tensor({cp, enc_channels}, name + ".red_w", seed);
  w.red_b = Tensor::zeros({cp});
  w.feat_w = trunc_normal_tensor({cp, enc_channels}, name + ".feat_w", seed);
  w.learned_embed = trunc_normal_tensor({k, cp}, name + ".learned_embed", seed);
  for (int i = 0; i < cfg.n_blocks; ++i)
    w.blocks.push_back(make_deformable_block(
        cp, cfg, name + ".block" + std::to_string(i), seed));
  w.final_ln_g = Tensor::full({cp}, 1.0);
  w.final_ln_b = Tensor::zeros({cp});
  w.head = make_mlp_head(k * cp, std::max(64, cp), head_out, name + ".head", seed);
  return w;
}

RefKeypoints regress_reference_keypoints(const Tensor& f_lr,
                                         const ComponentDecoderWeights& w) {
  require(f_lr.ndim() == 3, "regress_reference_keypoints: crop must be [C,H,W]");
  const int c = f_lr.dim(0), ch = f_lr.dim(1), cw = f_lr.dim(2);
  const int k = w.kp_w.rows();
  require(w.kp_w.cols() == c, "regress_reference_keypoints: channel mismatch");
  Tensor logits = add_colvec(matmul(w.kp_w, reshape(f_lr, {c, ch * cw})), w.kp_b);
  Tensor heat = softmax(logits, 1);  // [K, ch*cw]
  Tensor gx({ch * cw, 1}), gy({ch * cw, 1});
  for (int i = 0; i < ch; ++i)
    for (int j = 0; j < cw; ++j) {
      gx.values()[size_t(i) * cw + j] = (j + 0.5) / cw;
      gy.values()[size_t(i) * cw + j] = (i + 0.5) / ch;
    }
  RefKeypoints out;
  out.points = concat({matmul(heat, gx), matmul(heat, gy)}, 1);  // [K,2] (x,y)
  out.heatmaps = reshape(heat, {k, ch, cw});
  return out;
}

Tensor sincos_embed(const Tensor& points, int dim) {
  require(dim % 4 == 0, "sincos_embed: dim must be a multiple of 4");
  require(points.ndim() == 2 && points.cols() == 2,
          "sincos_embed: points must be [K,2]");
  const int k = points.rows();
  const int per_coord = dim / 2;
  std::vector<double> freqs(size_t(per_coord / 2));
  for (int i = 0; i < per_coord / 2; ++i)
    freqs[size_t(i)] = 2.0 * M_PI / std::pow(10000.0, 2.0 * i / double(per_coord));
  std::vector<double> out(size_t(k) * dim);
  for (int q = 0; q < k; ++q)
    for (int coord = 0; coord < 2; ++coord) {
      const double v = points.values()[size_t(q) * 2 + coord];
      for (int i = 0; i < per_coord / 2; ++i) {
        out[size_t(q) * dim + coord * per_coord + 2 * i] = std::sin(v * freqs[size_t(i)]);
        out[size_t(q) * dim + coord * per_coord + 2 * i + 1] = std::cos(v * freqs[size_t(i)]);
      }
    }
  if (!points.on_tape()) return Tensor({k, dim}, std::move(out));
  int np = points.node();
  Tensor pv = points.detached();
  return points.tape()->emit(
      {k, dim}, std::move(out),
      [np, pv, k, dim, per_coord, freqs](Tape& t, const std::vector<double>& g) {
        auto& buf = t.grad_buf(np);
        for (int q = 0; q < k; ++q)
          for (int coord = 0; coord < 2; ++coord) {
            const double v = pv.values()[size_t(q) * 2 + coord];
            double acc = 0.0;
            for (int i = 0; i < per_coord / 2; ++i) {
              const double f = freqs[size_t(i)];
              acc += g[size_t(q) * dim + coord * per_coord + 2 * i] *
                     f * std::cos(v * f);
              acc -= g[size_t(q) * dim + coord * per_coord + 2 * i + 1] *
                     f * std::sin(v * f);
            }
            buf[size_t(q) * 2 + coord] += acc;
          }
      });
}

ComponentTokens build_component_tokens(const Tensor& f_lr,
                                       const Tensor& ref_points,
                                       const ComponentDecoderWeights& w,
                                       int c_prime) {
  const int ch = f_lr.dim(1), cw = f_lr.dim(2);
  Tensor pix = add(matmul(ref_points,
                          Tensor({2, 2}, {double(cw), 0, 0, double(ch)})),
                   Tensor::full({ref_points.rows(), 2}, -0.5));
  Tensor feat = matmul(bilinear_sample(f_lr, pix), transpose(w.feat_w));
  Tensor pos = sincos_embed(ref_points, c_prime);
  ComponentTokens out;
  out.tokens = add(add(feat, pos), w.learned_embed);
  out.reference_points = ref_points;
  return out;
}

Tensor uniform_ref_grid(int k) {
  const int g = int(std::ceil(std::sqrt(double(k))));
  Tensor out({k, 2});
  for (int i = 0; i < k; ++i) {
    out.values()[size_t(i) * 2 + 0] = ((i % g) + 0.5) / g;
    out.values()[size_t(i) * 2 + 1] = ((i / g) + 0.5) / g;
  }
  return out;
}

Tensor deformable_cross_attn(const Tensor& queries,
                             const std::vector<Tensor>& value_levels,
                             const Tensor& ref_points,
                             const DeformableBlock& blk,
                             const DecoderConfig& cfg, int c_prime) {
  const int k = queries.rows();
  const int l = cfg.num_levels(), p = cfg.n_points, heads = cfg.heads;
  require(int(value_levels.size()) == l,
          "deformable_cross_attn: declared " + std::to_string(l) +
              " levels but got " + std::to_string(value_levels.size()));
  require(queries.cols() == c_prime && c_prime % heads == 0,
          "deformable_cross_attn: bad query width");
  const int dh = c_prime / heads;

  Tensor offsets = linear(queries, blk.off_w, blk.off_b);  // [K, H*L*P*2]
  Tensor logits = linear(queries, blk.attn_w, blk.attn_b); // [K, H*L*P]

  // Value projection once per level, shared by the heads.
  std::vector<Tensor> projected;
  projected.reserve(size_t(l));
  for (const Tensor& v : value_levels) {
    require(v.dim(0) == c_prime, "deformable_cross_attn: value width mismatch");
    projected.push_back(add_colvec(
        matmul(blk.val_w, reshape(v, {c_prime, v.dim(1) * v.dim(2)})),
        blk.val_b));
  }

  std::vector<Tensor> head_outs;
  head_outs.reserve(size_t(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor a = softmax(slice(logits, 0, k, h * l * p, (h + 1) * l * p), 1);
    Tensor acc;
    for (int lv = 0; lv < l; ++lv) {
      const int mh = value_levels[size_t(lv)].dim(1);
      const int mw = value_levels[size_t(lv)].dim(2);
      Tensor base = add(matmul(ref_points,
                               Tensor({2, 2}, {double(mw), 0, 0, double(mh)})),
                        Tensor::full({k, 2}, -0.5));
      const int col0 = ((h * l + lv) * p) * 2;
      Tensor off = reshape(slice(offsets, 0, k, col0, col0 + p * 2), {k * p, 2});
      Tensor pts = add(repeat_interleave_rows(base, p), off);
      Tensor map_h = reshape(
          slice_rows(projected[size_t(lv)], h * dh, (h + 1) * dh), {dh, mh, mw});
      Tensor sampled = bilinear_sample(map_h, pts);        // [K*P, dh]
      Tensor a_l = slice(a, 0, k, lv * p, lv * p + p);     // [K, P]
      Tensor contrib = row_group_weighted_sum(sampled, a_l);
      acc = acc.defined() ? add(acc, contrib) : contrib;
    }
    head_outs.push_back(acc);
  }
  return linear(concat(head_outs, 1), blk.out_w, blk.out_b);
}

Tensor decoder_forward(const ComponentTokens& tokens,
                       const std::vector<Tensor>& value_levels,
                       const ComponentDecoderWeights& w,
                       const DecoderConfig& cfg, int c_prime) {
  Tensor x = tokens.tokens;
  for (const DeformableBlock& blk : w.blocks) {
    x = add(x, mhsa(layer_norm(x, blk.sa.ln1_g, blk.sa.ln1_b, 1e-6), blk.sa,
                    cfg.heads));
    x = add(x, deformable_cross_attn(
                   layer_norm(x, blk.ln_cross_g, blk.ln_cross_b, 1e-6),
                   value_levels, tokens.reference_points, blk, cfg, c_prime));
    Tensor ff = linear(gelu(linear(layer_norm(x, blk.sa.ln2_g, blk.sa.ln2_b, 1e-6),
                                   blk.sa.w1, blk.sa.b1)),
                       blk.sa.w2, blk.sa.b2);
    x = add(x, ff);
  }
  return x;
}

Tensor regress_hand(const Tensor& tokens_out, const ComponentDecoderWeights& w) {
  const int k = tokens_out.rows(), cp = tokens_out.cols();
  Tensor out = mlp_head_forward(w.head, reshape(tokens_out, {1, k * cp}));
  require(out.cols() == 45, "regress_hand: head must emit 45 scalars");
  return reshape(out, {15, 3});
}

FaceRegression regress_face(const Tensor& tokens_out,
                            const ComponentDecoderWeights& w) {
  const int k = tokens_out.rows(), cp = tokens_out.cols();
  Tensor out = reshape(mlp_head_forward(w.head, reshape(tokens_out, {1, k * cp})),
                       {13, 1});
  FaceRegression r;
  r.theta_jaw = reshape(slice_rows(out, 0, 3), {3});
  r.phi = reshape(slice_rows(out, 3, 13), {10});
  return r;
}

Tensor unmirror_hand_rotations(const Tensor& theta) {
  Tensor flip({15, 3});
  for (int r = 0; r < 15; ++r) {
    flip.values()[size_t(r) * 3 + 0] = 1.0;
    flip.values()[size_t(r) * 3 + 1] = -1.0;
    flip.values()[size_t(r) * 3 + 2] = -1.0;
  }
  return mul(theta, flip);
}

ComponentDecode decode_component(const std::vector<Tensor>& maps,
                                 const Tensor& box,
                                 const ComponentDecoderWeights& w,
                                 const DecoderConfig& cfg, int enc_channels,
                                 bool keypoint_guided, bool mirror,
                                 RoiDiag* diag) {
  const int cp = cfg.width(enc_channels);
  require(int(maps.size()) == cfg.num_levels(),
          "decode_component: map count does not match configured scales");
  std::vector<Tensor> crops;
  crops.reserve(maps.size());
  for (size_t i = 0; i < maps.size(); ++i) {
    const int s = cfg.scales[i];
    Tensor crop = roi_align(maps[i], box, cfg.crop_h * s, cfg.crop_w * s, diag);
    crops.push_back(mirror ? flip_cols_chw(crop) : crop);
  }
  const Tensor& f_lr = crops[0];

  std::vector<Tensor> reduced;
  reduced.reserve(crops.size());
  for (const Tensor& crop : crops) {
    const int h = crop.dim(1), wd = crop.dim(2);
    reduced.push_back(reshape(
        add_colvec(matmul(w.red_w, reshape(crop, {enc_channels, h * wd})),
                   w.red_b),
        {cp, h, wd}));
  }

  ComponentDecode out;
  ComponentTokens tokens;
  if (keypoint_guided) {
    RefKeypoints rk = regress_reference_keypoints(f_lr, w);
    tokens = build_component_tokens(f_lr, rk.points, w, cp);
    out.heatmaps = rk.heatmaps;
  } else {
    tokens.tokens = w.learned_embed;
    tokens.reference_points = uniform_ref_grid(w.learned_embed.rows());
  }
  Tensor decoded = decoder_forward(tokens, reduced, w, cfg, cp);
  out.tokens_out = layer_norm(decoded, w.final_ln_g, w.final_ln_b, 1e-6);
  out.ref_points = tokens.reference_points;
  return out;
}

// --- gradcheck suites --------------------------------------------------------------

namespace {

Tensor uniform_tensor(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

Tensor projection(const Tensor& like, uint64_t seed) {
  Rng rng(seed);
  Tensor w(like.shape());
  for (double& v : w.values()) v = rng.uniform(-1, 1);
  return w;
}

// Distance of the closest sampled coordinate to an integer grid line.
// Bilinear interpolation has derivative kinks there, so finite-difference
// instances must keep a margin bigger than the probe step.
double kink_margin(const std::function<void()>& forward) {
  std::vector<double> trace;
  debug::bilinear_trace = &trace;
  forward();
  debug::bilinear_trace = nullptr;
  double margin = 1e9;
  for (double c : trace)
    margin = std::min(margin, std::fabs(c - std::round(c)));
  return margin;
}

double suite_roi_align(const GradCheckOptions& o) {
  Rng rng(o.seed + 60);
  double worst = 0.0;
  int accepted = 0;
  while (accepted < 10) {
    Tensor map = uniform_tensor(rng, {2, 6, 6});
    Tensor box({4}, {rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6),
                     rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5)});
    if (kink_margin([&] { roi_align(map, box, 3, 3); }) < 0.05) continue;
    worst = std::max(
        worst, gradcheck_case(
                   [&](Tape&, const std::vector<Tensor>& in) {
                     Tensor crop = roi_align(in[0], in[1], 3, 3);
                     return sum(mul(crop, projection(crop, o.seed + accepted)));
                   },
                   {map, box}, o.h, o.corrupt_op == "roi_align" && accepted == 0));
    ++accepted;
  }
  return worst;
}

DecoderConfig toy_decoder_cfg() {
  DecoderConfig cfg;
  cfg.scales = {1, 2};
  cfg.crop_h = 4;
  cfg.crop_w = 4;
  cfg.c_prime = 8;
  cfg.k_hand = 3;
  cfg.k_face = 3;
  cfg.n_blocks = 1;
  cfg.n_points = 2;
  cfg.heads = 2;
  return cfg;
}

double suite_soft_argmax(const GradCheckOptions& o) {
  const DecoderConfig cfg = toy_decoder_cfg();
  ComponentDecoderWeights w =
      make_component_decoder(6, cfg, 3, 45, "gc.sam", 31);
  Rng rng(o.seed + 61);
  double worst = 0.0;
  for (int it = 0; it < 5; ++it) {
    Tensor f_lr = uniform_tensor(rng, {6, 4, 4});
    worst = std::max(
        worst,
        gradcheck_case(
            [&](Tape&, const std::vector<Tensor>& in) {
              ComponentDecoderWeights wl = w;
              wl.kp_w = in[1];
              RefKeypoints rk = regress_reference_keypoints(in[0], wl);
              return sum(mul(rk.points, projection(rk.points, o.seed + it)));
            },
            {f_lr, w.kp_w}, o.h, o.corrupt_op == "soft_argmax" && it == 0));
  }
  return worst;
}

double suite_deformable_attn(const GradCheckOptions& o) {
  const DecoderConfig cfg = toy_decoder_cfg();
  const int cp = cfg.c_prime;
  Rng rng(o.seed + 62);
  DeformableBlock blk = make_deformable_block(cp, cfg, "gc.deform", 32);
  for (double& v : blk.off_w.values()) v = rng.uniform(-0.05, 0.05);
  for (double& v : blk.attn_w.values()) v = rng.uniform(-0.3, 0.3);
  double worst = 0.0;
  Tensor ref({3, 2}, {0.31, 0.42, 0.57, 0.63, 0.44, 0.52});
  int accepted = 0;
  while (accepted < 3) {
    Tensor q = uniform_tensor(rng, {3, cp});
    Tensor v1 = uniform_tensor(rng, {cp, 4, 4});
    Tensor v2 = uniform_tensor(rng, {cp, 8, 8});
    if (kink_margin([&] {
          deformable_cross_attn(q, {v1, v2}, ref, blk, cfg, cp);
        }) < 0.05)
      continue;
    worst = std::max(
        worst,
        gradcheck_case(
            [&](Tape&, const std::vector<Tensor>& in) {
              Tensor out = deformable_cross_attn(in[0], {in[1], in[2]}, ref,
                                                 blk, cfg, cp);
              return sum(mul(out, projection(out, o.seed + accepted)));
            },
            {q, v1, v2}, o.h,
            o.corrupt_op == "deformable_attn" && accepted == 0));
    ++accepted;
  }
  return worst;
}

double suite_decoder_forward(const GradCheckOptions& o) {
  const DecoderConfig cfg = toy_decoder_cfg();
  const int enc_c = 6;
  ComponentDecoderWeights w =
      make_component_decoder(enc_c, cfg, cfg.k_hand, 45, "gc.dec", 33);
  Rng rng(o.seed + 63);
  // End to end: maps -> RoIAlign -> keypoints -> tokens -> blocks -> head.
  auto build = [&](const Tensor& base, const Tensor& bx) {
    Tensor m2 =
        conv_transpose2d(base, Tensor::full({enc_c, enc_c, 2, 2}, 0.04), 2);
    return decode_component({base, m2}, bx, w, cfg, enc_c, true, false);
  };
  for (;;) {
    Tensor m1 = uniform_tensor(rng, {enc_c, 6, 6});
    Tensor box({4}, {rng.uniform(0.45, 0.55), rng.uniform(0.45, 0.55),
                     rng.uniform(0.5, 0.6), rng.uniform(0.45, 0.55)});
    if (kink_margin([&] { build(m1, box); }) < 0.05) continue;
    return gradcheck_case(
        [&](Tape&, const std::vector<Tensor>& in) {
          ComponentDecode dec = build(in[0], in[1]);
          Tensor hand = regress_hand(dec.tokens_out, w);
          return add(sum(mul(hand, projection(hand, o.seed))),
                     sum(mul(dec.tokens_out,
                             projection(dec.tokens_out, o.seed + 1))));
        },
        {m1, box}, o.h, o.corrupt_op == "decoder_forward");
  }
}

double suite_face_head(const GradCheckOptions& o) {
  const DecoderConfig cfg = toy_decoder_cfg();
  ComponentDecoderWeights w =
      make_component_decoder(6, cfg, cfg.k_face, 13, "gc.face", 34);
  Rng rng(o.seed + 64);
  Tensor tokens = uniform_tensor(rng, {cfg.k_face, cfg.c_prime});
  Tensor w2 = uniform_tensor(rng, {13, std::max(64, cfg.c_prime)}, -0.2, 0.2);
  return gradcheck_case(
      [&](Tape&, const std::vector<Tensor>& in) {
        ComponentDecoderWeights wl = w;
        wl.head.w1 = in[0];
        wl.head.w2 = in[1];
        FaceRegression f = regress_face(tokens, wl);
        return add(sum(mul(f.theta_jaw, f.theta_jaw)), sum(mul(f.phi, f.phi)));
      },
      {w.head.w1, w2}, o.h, o.corrupt_op == "face_head");
}

}  // namespace

std::vector<GradCheckSuite> decoder_gradcheck_suites() {
  return {{"roi_align", suite_roi_align},
          {"soft_argmax", suite_soft_argmax},
          {"deformable_attn", suite_deformable_attn},
          {"decoder_forward", suite_decoder_forward},
          {"face_head", suite_face_head}};
}

}  // namespace catx
