#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "qddetr/nn.hpp"
#include "qddetr/tensor.hpp"

namespace qd {

// Normalized temporal moment: center and width on [0,1].
struct Moment {
  Real center = 0;
  Real width = 0;

  Real start() const { return center - width / 2; }
  Real end() const { return center + width / 2; }
  static Moment from_interval(Real start, Real end) { return {(start + end) / 2, end - start}; }
  bool valid() const { return center >= 0 && center <= 1 && width > 0 && width <= 1; }
};

// Architectural switches mirroring the ablation table: cross-attentive
// encoder, negative-pair training, saliency token, dynamic anchor moments.
// use_neg_pair only affects training.
struct AblationFlags {
  bool use_cate = true;
  bool use_neg_pair = true;
  bool use_saliency_token = true;
  bool use_dam = true;

  bool operator==(const AblationFlags&) const = default;
};

struct ModelConfig {
  std::size_t d_model = 256;
  std::size_t n_heads = 8;
  std::size_t n_cross_layers = 2;
  std::size_t n_self_layers = 2;
  std::size_t n_decoder_layers = 2;
  std::size_t n_moment_queries = 10;
  std::size_t ffn_dim = 1024;
  std::size_t video_in_dim = 0;
  std::size_t text_in_dim = 0;
  Real dropout = 0;
  Real anchor_init_width = Real(0.1);
  Real reference_width = Real(0.1);
  AblationFlags flags;

  // Throws ContractError naming the offending field.
  void validate() const;
  // Canonical text of every architecture-relevant field.
  std::string canonical() const;
  std::uint64_t hash() const;
};

struct EncoderOutput {
  Tensor video_tokens;    // [L×d]
  Tensor saliency_token;  // [d]; undefined without the saliency token
  Mask clip_mask;         // [L]
  // Decoder memory: video tokens, followed by text tokens when the encoder
  // mixes modalities (no cross-attentive encoder).
  Tensor memory;
  Mask memory_mask;
  Tensor memory_pos;  // positional embedding per memory row, zero for text
};

struct DecoderOutput {
  std::vector<Tensor> anchors;  // per layer [Q×2] refined (center, width)
  std::vector<Tensor> queries;  // per layer [Q×d]
};

struct LayerPrediction {
  Tensor moments;  // [Q×2] (center, width)
  Tensor logits;   // [Q×2] (foreground, background)
};

struct ModelOutput {
  EncoderOutput encoder;
  Tensor saliency;  // [L]
  std::vector<LayerPrediction> layers;  // last entry is the final prediction
};

struct EncoderTrace {
  std::vector<nn::AttentionTrace> cross;
};

struct DecoderTrace {
  // Per layer, per head: width-modulated positional logits [Q×M].
  std::vector<std::vector<Tensor>> position_logits;
};

// Post-norm cross-attention block: video rows query text keys/values.
class CrossAttentionBlock {
 public:
  CrossAttentionBlock() = default;
  CrossAttentionBlock(nn::ParamStore& ps, const std::string& name, const ModelConfig& cfg, std::mt19937_64& rng);

  Tensor operator()(const Tensor& video, const Tensor& text, const Mask& text_mask, const nn::ForwardContext& ctx,
                    nn::AttentionTrace* trace = nullptr) const;

  nn::MultiHeadAttention attn;
  nn::LayerNorm norm1, norm2;
  nn::Mlp ffn;
};

// Post-norm self-attention layer; positions are added to queries and keys.
class SelfAttentionLayer {
 public:
  SelfAttentionLayer() = default;
  SelfAttentionLayer(nn::ParamStore& ps, const std::string& name, const ModelConfig& cfg, std::mt19937_64& rng);

  Tensor operator()(const Tensor& x, const Tensor& pos, const Mask& mask, const nn::ForwardContext& ctx) const;

  nn::MultiHeadAttention attn;
  nn::LayerNorm norm1, norm2;
  nn::Mlp ffn;
};

class DecoderLayer {
 public:
  DecoderLayer() = default;
  DecoderLayer(nn::ParamStore& ps, const std::string& name, const ModelConfig& cfg, std::mt19937_64& rng);

  nn::MultiHeadAttention self_attn, cross_attn;
  nn::Linear pos_query, pos_key;  // anchor-mode positional projections
  nn::LayerNorm norm1, norm2, norm3;
  nn::Mlp ffn;
};

// Clip position of real clip i among n real clips: (i + 0.5) / n.
std::vector<Real> clip_positions(const Mask& clip_mask);

// Width-modulated positional attention logits for one head:
// (reference_width / width_q) · <Pq·PE(c_q), Pk·PE(t_i)> / sqrt(head_dim).
Tensor width_modulated_logits(const Tensor& query_pos, const Tensor& key_pos, const Tensor& widths,
                              Real reference_width);

class QDDetr {
 public:
  QDDetr(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  EncoderOutput encode(const Tensor& video, const Mask& video_mask, const Tensor& text, const Mask& text_mask,
                       const nn::ForwardContext& ctx = {}, EncoderTrace* trace = nullptr) const;
  Tensor saliency_scores(const EncoderOutput& enc) const;
  DecoderOutput decode(const EncoderOutput& enc, const nn::ForwardContext& ctx = {},
                       DecoderTrace* trace = nullptr) const;
  std::vector<LayerPrediction> predict_moments(const DecoderOutput& dec) const;

  ModelOutput forward(const Tensor& video, const Mask& video_mask, const Tensor& text, const Mask& text_mask,
                      const nn::ForwardContext& ctx = {}) const;

  // Current learnable anchors (DAM) as moments.
  std::vector<Moment> anchors() const;

  // Sub-modules, exposed for tests and structural inspection.
  nn::Linear video_proj, text_proj;
  std::vector<CrossAttentionBlock> cross_layers;
  std::vector<SelfAttentionLayer> self_layers;
  Tensor saliency_token;          // [1×d]
  nn::Linear saliency_w_token;    // w_s, d->d, no bias
  nn::Linear saliency_w_video;    // w_v, d->d, no bias
  nn::Linear saliency_head;       // d->1 when no saliency token
  Tensor anchor_logits;           // [Q×2] inverse-sigmoid of (center, width)
  Tensor query_pos_embed;         // [Q×d] when no DAM
  nn::Mlp query_pos_head;         // PE(center) -> d, DAM only
  std::vector<DecoderLayer> decoder_layers;
  nn::Mlp moment_head;            // d -> 2
  nn::Linear class_head;          // d -> 2

 private:
  ModelConfig cfg_;
  nn::ParamStore params_;
};

}  // namespace qd
