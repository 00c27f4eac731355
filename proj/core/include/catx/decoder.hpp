#pragma once

#include "catx/encoder.hpp"
#include "catx/tensor.hpp"

#include <string>
#include <vector>

namespace catx {

struct DecoderConfig {
  std::vector<int> scales = {1, 2, 4};  // upsample factors, increasing powers of 2
  int crop_h = 8, crop_w = 8;           // RoIAlign output at the base scale
  int c_prime = 0;                      // decoder width; 0 derives C/2
  int k_hand = 21, k_face = 50;         // component token counts (21+21+50=92)
  int n_blocks = 2;                     // N deformable blocks
  int n_points = 4;                     // sampling points per level per query
  int heads = 8;
  int ffn_mult = 2;

  int width(int encoder_channels) const {
    return c_prime > 0 ? c_prime : encoder_channels / 2;
  }
  int num_levels() const { return int(scales.size()); }
  void validate(int encoder_channels) const;
};

// Diagnostics counter for degenerate boxes (w or h clamped up to 1e-6).
struct RoiDiag {
  int degenerate_boxes = 0;
};

// Differentiable crop: out_h x out_w bilinear samples at bin centers inside
// the (cx,cy,w,h) box given in normalized [0,1] coordinates of the map.
// Composed from bilinear_sample, so gradients flow into map AND box.
Tensor roi_align(const Tensor& map, const Tensor& box, int out_h, int out_w,
                 RoiDiag* diag = nullptr);

// Elementwise max(x, lo); gradient is zero where clamped.
Tensor clamp_min(const Tensor& x, double lo);

// --- upsampling ------------------------------------------------------------

struct UpsampleWeights {
  std::vector<Tensor> kernels;  // chained stride-2 deconvs [C,C,4,4]
  void visit(const std::string& prefix, ParamRegistry& out);
};
UpsampleWeights make_upsample_weights(int channels, const std::vector<int>& scales,
                                      const std::string& name, uint64_t seed);

// Scale x1 is the reshaped map itself; higher scales come from chained
// stride-2 deconvolutions. All maps keep C channels.
std::vector<Tensor> upsample_multiscale(const Tensor& base_map,
                                        const UpsampleWeights& w,
                                        const std::vector<int>& scales);

// --- deformable decoder ------------------------------------------------------

struct DeformableBlock {
  TransformerBlock sa;          // ln1+attention (self), ln2+FFN
  Tensor ln_cross_g, ln_cross_b;
  Tensor off_w, off_b;          // [heads*L*P*2, C']; bias seeds a 1px ring
  Tensor attn_w, attn_b;        // [heads*L*P, C']
  Tensor val_w, val_b;          // value projection [C',C']
  Tensor out_w, out_b;          // output projection [C',C']
  void visit(const std::string& prefix, ParamRegistry& out);
};

struct ComponentTokens {
  Tensor tokens;            // [K,C']
  Tensor reference_points;  // [K,2] normalized (x,y) within the crop
};

// Weights for one component pathway (hands share one instance; face has its
// own). K is k_hand or k_face.
struct ComponentDecoderWeights {
  Tensor kp_w, kp_b;        // 1x1 conv C -> K heatmaps
  Tensor red_w, red_b;      // crop reduction C -> C' (shared across levels)
  Tensor feat_w;            // token feature projection [C',C], bias-free
  Tensor learned_embed;     // [K,C']
  std::vector<DeformableBlock> blocks;
  Tensor final_ln_g, final_ln_b;
  MlpHead head;             // K*C' -> 45 (hand) or 13 (face)
  void visit(const std::string& prefix, ParamRegistry& out);
};

ComponentDecoderWeights make_component_decoder(int enc_channels,
                                               const DecoderConfig& cfg, int k,
                                               int head_out,
                                               const std::string& name,
                                               uint64_t seed);

// Soft-argmax keypoints from the base-scale crop: 1x1 conv -> K heatmaps ->
// per-map spatial softmax -> expected (x,y) in [0,1]^2.
struct RefKeypoints {
  Tensor points;    // [K,2]
  Tensor heatmaps;  // [K, crop_h, crop_w] (post-softmax)
};
RefKeypoints regress_reference_keypoints(const Tensor& f_lr,
                                         const ComponentDecoderWeights& w);

// token_q = Proj(bilinear_sample(F_lr, p_q)) + sincos(p_q) + learned_q.
ComponentTokens build_component_tokens(const Tensor& f_lr,
                                       const Tensor& ref_points,
                                       const ComponentDecoderWeights& w,
                                       int c_prime);

// Per-point sinusoidal embedding of normalized 2-d points;
// differentiable in the point coordinates.
Tensor sincos_embed(const Tensor& points, int dim);

// Uniform fallback grid for the keypoint-guidance-off arm.
Tensor uniform_ref_grid(int k);

// Multi-scale deformable cross-attention (Eq.-style): per head and query,
// A-weighted bilinear samples of the value-projected levels at
// phi_l(p_q) + offsets, followed by the output projection.
Tensor deformable_cross_attn(const Tensor& queries,
                             const std::vector<Tensor>& value_levels,
                             const Tensor& ref_points,
                             const DeformableBlock& blk,
                             const DecoderConfig& cfg, int c_prime);

// N pre-norm blocks of (self-attn, deformable cross-attn, FFN); N=0 is a
// diagnostic passthrough. Reference points stay fixed across blocks.
Tensor decoder_forward(const ComponentTokens& tokens,
                       const std::vector<Tensor>& value_levels,
                       const ComponentDecoderWeights& w,
                       const DecoderConfig& cfg, int c_prime);

Tensor regress_hand(const Tensor& tokens_out, const ComponentDecoderWeights& w);
struct FaceRegression {
  Tensor theta_jaw;  // [3]
  Tensor phi;        // [10]
};
FaceRegression regress_face(const Tensor& tokens_out,
                            const ComponentDecoderWeights& w);

// Axis-angle rows produced by the shared (right-handed) hand head, converted
// for the mirrored left pathway: flips the (y,z) components.
Tensor unmirror_hand_rotations(const Tensor& theta);

// Full per-component decode from the C-channel multi-scale maps, up to and
// including the final layer norm (regress_hand/regress_face apply the head).
struct ComponentDecode {
  Tensor tokens_out;        // [K,C']
  Tensor ref_points;        // [K,2]
  Tensor heatmaps;          // [K,ch,cw] or empty when guidance is off
};
ComponentDecode decode_component(const std::vector<Tensor>& maps,
                                 const Tensor& box,
                                 const ComponentDecoderWeights& w,
                                 const DecoderConfig& cfg, int enc_channels,
                                 bool keypoint_guided, bool mirror,
                                 RoiDiag* diag = nullptr);

}  // namespace catx
