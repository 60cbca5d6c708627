#include "qddetr/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qd {

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::size_t count_real(const Mask& m) {
  std::size_t n = 0;
  for (auto v : m) n += v ? 1 : 0;
  return n;
}

Tensor position_table(const Mask& mask, std::size_t dim) {
  const auto pos = clip_positions(mask);
  return sinusoidal_embedding(Tensor::from({pos.size()}, pos), dim);
}

Tensor column(const Tensor& x, std::size_t c) { return reshape(slice_cols(x, c, 1), {x.dim(0)}); }

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ContractError("model config: " + field + " " + why);
  };
  if (d_model == 0 || d_model % 2 != 0) fail("d_model", "must be even and positive");
  if (n_heads == 0 || d_model % n_heads != 0) fail("n_heads", "must divide d_model");
  if (n_cross_layers == 0) fail("n_cross_layers", "must be >= 1");
  if (n_self_layers == 0) fail("n_self_layers", "must be >= 1");
  if (n_decoder_layers == 0) fail("n_decoder_layers", "must be >= 1");
  if (n_moment_queries == 0) fail("n_moment_queries", "must be >= 1");
  if (ffn_dim == 0) fail("ffn_dim", "must be >= 1");
  if (video_in_dim == 0) fail("video_in_dim", "must be >= 1");
  if (text_in_dim == 0) fail("text_in_dim", "must be >= 1");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout", "must be in [0, 1)");
  if (!(anchor_init_width > 0 && anchor_init_width <= 1)) fail("anchor_init_width", "must be in (0, 1]");
  if (!(reference_width > 0)) fail("reference_width", "must be positive");
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  os << "d_model=" << d_model << ";n_heads=" << n_heads << ";n_cross_layers=" << n_cross_layers
     << ";n_self_layers=" << n_self_layers << ";n_decoder_layers=" << n_decoder_layers
     << ";n_moment_queries=" << n_moment_queries << ";ffn_dim=" << ffn_dim << ";video_in_dim=" << video_in_dim
     << ";text_in_dim=" << text_in_dim << ";dropout=" << dropout << ";anchor_init_width=" << anchor_init_width
     << ";reference_width=" << reference_width << ";use_cate=" << flags.use_cate
     << ";use_saliency_token=" << flags.use_saliency_token << ";use_dam=" << flags.use_dam
     << ";real_bytes=" << sizeof(Real);
  return os.str();
}

std::uint64_t ModelConfig::hash() const { return fnv1a(canonical()); }

std::vector<Real> clip_positions(const Mask& clip_mask) {
  const std::size_t n = count_real(clip_mask);
  std::vector<Real> pos(clip_mask.size(), Real(1));
  std::size_t k = 0;
  for (std::size_t i = 0; i < clip_mask.size(); ++i) {
    if (clip_mask[i]) pos[i] = (static_cast<Real>(k++) + Real(0.5)) / static_cast<Real>(n);
  }
  return pos;
}

Tensor width_modulated_logits(const Tensor& query_pos, const Tensor& key_pos, const Tensor& widths,
                              Real reference_width) {
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(query_pos.dim(1)));
  const Tensor sim = scale(matmul_nt(query_pos, key_pos), inv_sqrt);
  return scale_rows(sim, scale(reciprocal(widths), reference_width));
}

// ---- blocks ----------------------------------------------------------------

CrossAttentionBlock::CrossAttentionBlock(nn::ParamStore& ps, const std::string& name, const ModelConfig& cfg,
                                         std::mt19937_64& rng)
    : attn(ps, name + ".attn", cfg.d_model, cfg.n_heads, rng),
      norm1(ps, name + ".norm1", cfg.d_model),
      norm2(ps, name + ".norm2", cfg.d_model),
      ffn(ps, name + ".ffn", cfg.d_model, cfg.ffn_dim, cfg.d_model, rng) {}

Tensor CrossAttentionBlock::operator()(const Tensor& video, const Tensor& text, const Mask& text_mask,
                                       const nn::ForwardContext& ctx, nn::AttentionTrace* trace) const {
  Tensor x = norm1(add(video, ctx.drop(attn(video, text, text, &text_mask, nullptr, trace))));
  return norm2(add(x, ctx.drop(ffn(x, ctx))));
}

SelfAttentionLayer::SelfAttentionLayer(nn::ParamStore& ps, const std::string& name, const ModelConfig& cfg,
                                       std::mt19937_64& rng)
    : attn(ps, name + ".attn", cfg.d_model, cfg.n_heads, rng),
      norm1(ps, name + ".norm1", cfg.d_model),
      norm2(ps, name + ".norm2", cfg.d_model),
      ffn(ps, name + ".ffn", cfg.d_model, cfg.ffn_dim, cfg.d_model, rng) {}

Tensor SelfAttentionLayer::operator()(const Tensor& x, const Tensor& pos, const Mask& mask,
                                      const nn::ForwardContext& ctx) const {
  const Tensor qk = add(x, pos);
  Tensor y = norm1(add(x, ctx.drop(attn(qk, qk, x, &mask))));
  return norm2(add(y, ctx.drop(ffn(y, ctx))));
}

DecoderLayer::DecoderLayer(nn::ParamStore& ps, const std::string& name, const ModelConfig& cfg,
                           std::mt19937_64& rng)
    : self_attn(ps, name + ".self_attn", cfg.d_model, cfg.n_heads, rng),
      cross_attn(ps, name + ".cross_attn", cfg.d_model, cfg.n_heads, rng) {
  if (cfg.flags.use_dam) {
    pos_query = nn::Linear(ps, name + ".pos_query", cfg.d_model, cfg.d_model, rng, false);
    pos_key = nn::Linear(ps, name + ".pos_key", cfg.d_model, cfg.d_model, rng, false);
  }
  norm1 = nn::LayerNorm(ps, name + ".norm1", cfg.d_model);
  norm2 = nn::LayerNorm(ps, name + ".norm2", cfg.d_model);
  norm3 = nn::LayerNorm(ps, name + ".norm3", cfg.d_model);
  ffn = nn::Mlp(ps, name + ".ffn", cfg.d_model, cfg.ffn_dim, cfg.d_model, rng);
}

// ---- model -----------------------------------------------------------------

QDDetr::QDDetr(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg_.d_model;
  const auto& f = cfg_.flags;

  video_proj = nn::Linear(params_, "input.video_proj", cfg_.video_in_dim, d, rng);
  text_proj = nn::Linear(params_, "input.text_proj", cfg_.text_in_dim, d, rng);
  if (f.use_cate) {
    for (std::size_t i = 0; i < cfg_.n_cross_layers; ++i) {
      cross_layers.emplace_back(params_, "encoder.cross." + std::to_string(i), cfg_, rng);
    }
  }
  for (std::size_t i = 0; i < cfg_.n_self_layers; ++i) {
    self_layers.emplace_back(params_, "encoder.self." + std::to_string(i), cfg_, rng);
  }
  if (f.use_saliency_token) {
    saliency_token = params_.add("saliency.token", Tensor::randn({1, d}, rng, Real(0.02)));
    saliency_w_token = nn::Linear(params_, "saliency.w_token", d, d, rng, false);
    saliency_w_video = nn::Linear(params_, "saliency.w_video", d, d, rng, false);
  } else {
    saliency_head = nn::Linear(params_, "saliency.head", d, 1, rng);
  }

  const std::size_t Q = cfg_.n_moment_queries;
  if (f.use_dam) {
    std::vector<Real> init(Q * 2);
    const Real w = std::min(cfg_.anchor_init_width, Real(1) - Real(1e-4));
    for (std::size_t q = 0; q < Q; ++q) {
      const Real c = (static_cast<Real>(q) + Real(0.5)) / static_cast<Real>(Q);
      init[2 * q] = std::log(c / (1 - c));
      init[2 * q + 1] = std::log(w / (1 - w));
    }
    anchor_logits = params_.add("decoder.anchor_logits", Tensor::from({Q, 2}, init));
    query_pos_head = nn::Mlp(params_, "decoder.query_pos_head", d, d, d, rng);
  } else {
    query_pos_embed = params_.add("decoder.query_pos", Tensor::randn({Q, d}, rng, Real(1)));
  }
  for (std::size_t i = 0; i < cfg_.n_decoder_layers; ++i) {
    decoder_layers.emplace_back(params_, "decoder.layers." + std::to_string(i), cfg_, rng);
  }
  moment_head = nn::Mlp(params_, "head.moment", d, d, 2, rng);
  if (f.use_dam) {
    // Refinement starts as the identity: predictions equal the anchors.
    std::fill(moment_head.fc2.weight.data().begin(), moment_head.fc2.weight.data().end(), Real(0));
  }
  class_head = nn::Linear(params_, "head.class", d, 2, rng);
}

EncoderOutput QDDetr::encode(const Tensor& video, const Mask& video_mask, const Tensor& text,
                             const Mask& text_mask, const nn::ForwardContext& ctx, EncoderTrace* trace) const {
  if (video.rank() != 2 || video.dim(1) != cfg_.video_in_dim) {
    throw ShapeError("encode: video features " + shape_str(video.shape()) + " vs video_in_dim " +
                     std::to_string(cfg_.video_in_dim));
  }
  if (text.rank() != 2 || text.dim(1) != cfg_.text_in_dim) {
    throw ShapeError("encode: text features " + shape_str(text.shape()) + " vs text_in_dim " +
                     std::to_string(cfg_.text_in_dim));
  }
  if (video_mask.size() != video.dim(0) || text_mask.size() != text.dim(0)) {
    throw MaskError("encode: mask lengths do not match feature rows");
  }
  if (count_real(video_mask) == 0) throw MaskError("encode: no real clips");
  if (count_real(text_mask) == 0) throw MaskError("encode: no real text tokens");

  const std::size_t d = cfg_.d_model;
  const std::size_t L = video.dim(0);
  const std::size_t N = text.dim(0);
  const auto& f = cfg_.flags;

  Tensor x = video_proj(video);
  const Tensor t = text_proj(text);
  const Tensor clip_pos = position_table(video_mask, d);

  if (f.use_cate) {
    for (const auto& block : cross_layers) {
      nn::AttentionTrace* tr = nullptr;
      if (trace) tr = &trace->cross.emplace_back();
      x = block(x, t, text_mask, ctx, tr);
    }
  }

  std::vector<Tensor> tokens;
  std::vector<Tensor> pos;
  Mask mask;
  const std::size_t offset = f.use_saliency_token ? 1 : 0;
  if (f.use_saliency_token) {
    tokens.push_back(saliency_token);
    pos.push_back(Tensor::zeros({1, d}));
    mask.push_back(1);
  }
  tokens.push_back(x);
  pos.push_back(clip_pos);
  mask.insert(mask.end(), video_mask.begin(), video_mask.end());
  if (!f.use_cate) {
    tokens.push_back(t);
    pos.push_back(Tensor::zeros({N, d}));
    mask.insert(mask.end(), text_mask.begin(), text_mask.end());
  }
  Tensor h = tokens.size() == 1 ? tokens.front() : concat_rows(tokens);
  const Tensor p = pos.size() == 1 ? pos.front() : concat_rows(pos);
  for (const auto& layer : self_layers) h = layer(h, p, mask, ctx);

  EncoderOutput out;
  out.clip_mask = video_mask;
  out.video_tokens = slice_rows(h, offset, L);
  if (f.use_saliency_token) out.saliency_token = reshape(slice_rows(h, 0, 1), {d});
  if (f.use_cate) {
    out.memory = out.video_tokens;
    out.memory_mask = video_mask;
    out.memory_pos = clip_pos;
  } else {
    out.memory = slice_rows(h, offset, L + N);
    out.memory_mask = video_mask;
    out.memory_mask.insert(out.memory_mask.end(), text_mask.begin(), text_mask.end());
    out.memory_pos = concat_rows({clip_pos, Tensor::zeros({N, d})});
  }
  return out;
}

Tensor QDDetr::saliency_scores(const EncoderOutput& enc) const {
  const std::size_t L = enc.video_tokens.dim(0);
  if (!cfg_.flags.use_saliency_token) return reshape(saliency_head(enc.video_tokens), {L});
  const std::size_t d = cfg_.d_model;
  const Tensor s = saliency_w_token(reshape(enc.saliency_token, {1, d}));  // [1×d]
  const Tensor v = saliency_w_video(enc.video_tokens);                      // [L×d]
  return scale(reshape(matmul_nt(v, s), {L}), Real(1) / std::sqrt(static_cast<Real>(d)));
}

DecoderOutput QDDetr::decode(const EncoderOutput& enc, const nn::ForwardContext& ctx, DecoderTrace* trace) const {
  const std::size_t d = cfg_.d_model;
  const std::size_t Q = cfg_.n_moment_queries;
  DecoderOutput out;
  Tensor tgt = Tensor::zeros({Q, d});

  if (!cfg_.flags.use_dam) {
    const Tensor mem_k = add(enc.memory, enc.memory_pos);
    for (const auto& layer : decoder_layers) {
      const Tensor q = add(tgt, query_pos_embed);
      tgt = layer.norm1(add(tgt, ctx.drop(layer.self_attn(q, q, tgt, nullptr))));
      const Tensor ca = layer.cross_attn(add(tgt, query_pos_embed), mem_k, enc.memory, &enc.memory_mask);
      tgt = layer.norm2(add(tgt, ctx.drop(ca)));
      tgt = layer.norm3(add(tgt, ctx.drop(layer.ffn(tgt, ctx))));
      out.queries.push_back(tgt);
      out.anchors.push_back(sigmoid(moment_head(tgt)));
    }
    return out;
  }

  Tensor anchor = sigmoid(anchor_logits);
  for (const auto& layer : decoder_layers) {
    const Tensor centers = column(anchor, 0);
    const Tensor widths = column(anchor, 1);
    const Tensor pe = sinusoidal_embedding(centers, d);
    const Tensor qpos = query_pos_head(pe);

    const Tensor q = add(tgt, qpos);
    tgt = layer.norm1(add(tgt, ctx.drop(layer.self_attn(q, q, tgt, nullptr))));

    const Tensor pq = layer.pos_query(pe);
    const Tensor pk = layer.pos_key(enc.memory_pos);
    const std::size_t H = layer.cross_attn.n_heads();
    const std::size_t dh = layer.cross_attn.head_dim();
    std::vector<Tensor> pos_logits;
    pos_logits.reserve(H);
    for (std::size_t h = 0; h < H; ++h) {
      const Tensor pqh = H == 1 ? pq : slice_cols(pq, h * dh, dh);
      const Tensor pkh = H == 1 ? pk : slice_cols(pk, h * dh, dh);
      pos_logits.push_back(width_modulated_logits(pqh, pkh, widths, cfg_.reference_width));
    }
    if (trace) trace->position_logits.push_back(pos_logits);
    const Tensor ca = layer.cross_attn(tgt, enc.memory, enc.memory, &enc.memory_mask, &pos_logits);
    tgt = layer.norm2(add(tgt, ctx.drop(ca)));
    tgt = layer.norm3(add(tgt, ctx.drop(layer.ffn(tgt, ctx))));

    const Tensor refined = sigmoid(add(inverse_sigmoid(anchor), moment_head(tgt)));
    out.queries.push_back(tgt);
    out.anchors.push_back(refined);
    anchor = refined.detach();
  }
  return out;
}

std::vector<LayerPrediction> QDDetr::predict_moments(const DecoderOutput& dec) const {
  std::vector<LayerPrediction> out;
  out.reserve(dec.queries.size());
  for (std::size_t l = 0; l < dec.queries.size(); ++l) {
    out.push_back({dec.anchors[l], class_head(dec.queries[l])});
  }
  return out;
}

ModelOutput QDDetr::forward(const Tensor& video, const Mask& video_mask, const Tensor& text, const Mask& text_mask,
                            const nn::ForwardContext& ctx) const {
  ModelOutput out;
  out.encoder = encode(video, video_mask, text, text_mask, ctx);
  out.saliency = saliency_scores(out.encoder);
  out.layers = predict_moments(decode(out.encoder, ctx));
  return out;
}

std::vector<Moment> QDDetr::anchors() const {
  std::vector<Moment> out;
  if (!cfg_.flags.use_dam) return out;
  NoGradGuard ng;
  const Tensor a = sigmoid(anchor_logits);
  for (std::size_t q = 0; q < cfg_.n_moment_queries; ++q) out.push_back({a.at(q, 0), a.at(q, 1)});
  return out;
}

}  // namespace qd
