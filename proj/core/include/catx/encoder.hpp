#pragma once

#include "catx/tensor.hpp"

#include <string>
#include <vector>

namespace catx {

struct EncoderConfig {
  int height = 256;
  int width = 192;
  int patch = 16;       // M
  int channels = 768;   // C
  int body_tokens = 27; // B
  int depth = 12;
  int heads = 12;
  int ffn_mult = 4;
  int head_hidden = 256;  // body-head hidden width
  int box_hidden = 64;    // box-head hidden width

  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  int num_patches() const { return grid_h() * grid_w(); }
  void validate() const;
};

using ParamRegistry = std::vector<std::pair<std::string, Tensor*>>;

struct TransformerBlock {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor w1, b1, w2, b2;  // FFN
  void visit(const std::string& prefix, ParamRegistry& out);
};

// Two-layer head: out = W2 * gelu(W1 x + b1) + b2. The final layer is
// zero-initialized so fresh models emit rest pose / centered boxes.
struct MlpHead {
  Tensor w1, b1, w2, b2;
  void visit(const std::string& prefix, ParamRegistry& out);
};
MlpHead make_mlp_head(int in_dim, int hidden, int out_dim,
                      const std::string& name, uint64_t seed);
Tensor mlp_head_forward(const MlpHead& head, const Tensor& x);

struct EncoderWeights {
  Tensor patch_proj;  // [C, M*M*3]
  Tensor patch_bias;  // [C]
  Tensor pos_embed;   // [num_patches, C]
  Tensor body_tokens; // [B, C] learnable queries
  std::vector<TransformerBlock> blocks;
  Tensor final_ln_g, final_ln_b;
  MlpHead body_head;                       // B*C -> 79
  MlpHead box_lhand, box_rhand, box_face;  // C -> 4 each
  void visit(const std::string& prefix, ParamRegistry& out);
};

EncoderWeights make_encoder_weights(const EncoderConfig& cfg, uint64_t seed);

// Per-block, per-head post-softmax attention matrices (detached values).
struct AttnTrace {
  std::vector<std::vector<Tensor>> attention;  // [block][head] -> [S,S]
};

// Image is [H,W,3] with values pre-normalized to [-1,1]; patches are read
// row-major (top-left first), each flattened row-major as (py, px, channel).
Tensor patchify_embed(const Tensor& image, const EncoderWeights& w,
                      const EncoderConfig& cfg);

// Extracts the patch matrix [P, M*M*3] without projection (value-only).
Tensor extract_patches(const Tensor& image, const EncoderConfig& cfg);

struct EncoderOutput {
  Tensor feat_tokens;  // [P, C]
  Tensor body_tokens;  // [B, C]
};
EncoderOutput encoder_forward(const Tensor& feat_tokens,
                              const EncoderWeights& w, const EncoderConfig& cfg,
                              AttnTrace* trace = nullptr);

// Shared pre-norm MHSA block used by encoder and decoder self-attention.
Tensor mhsa(const Tensor& x, const TransformerBlock& blk, int heads,
            std::vector<Tensor>* head_traces = nullptr);
Tensor transformer_block_forward(const Tensor& x, const TransformerBlock& blk,
                                 int heads,
                                 std::vector<Tensor>* head_traces = nullptr);
TransformerBlock make_transformer_block(int channels, int ffn_mult,
                                        const std::string& name, uint64_t seed);

struct BodyRegression {
  Tensor theta_body;  // [22,3]
  Tensor beta;        // [10]
  Tensor t;           // [3]
};
BodyRegression regress_body(const Tensor& body_tokens_out,
                            const EncoderWeights& w);

struct ComponentBoxes {
  Tensor lhand, rhand, face;  // [4] each: (cx,cy,w,h) in [0,1]
};
ComponentBoxes regress_component_boxes(const Tensor& feat_tokens_out,
                                       const EncoderWeights& w);

}  // namespace catx
