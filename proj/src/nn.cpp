#include "qddetr/nn.hpp"

#include <cmath>

namespace qd::nn {

Tensor ParamStore::add(std::string name, Tensor t) {
  for (const auto& [n, _] : items_) {
    if (n == name) throw ContractError("duplicate parameter name " + name);
  }
  t.set_requires_grad(true);
  items_.emplace_back(std::move(name), t);
  return t;
}

std::vector<Tensor> ParamStore::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& [_, t] : items_) out.push_back(t);
  return out;
}

std::optional<Tensor> ParamStore::find(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return t;
  }
  return std::nullopt;
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

Tensor ForwardContext::drop(const Tensor& x) const {
  if (!training || dropout <= 0 || rng == nullptr) return x;
  return qd::dropout(x, dropout, *rng);
}

Linear::Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
               bool with_bias) {
  // Xavier-uniform weights, zero bias.
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-a, a);
  std::vector<Real> w(in * out);
  for (auto& v : w) v = static_cast<Real>(u(rng));
  weight = ps.add(name + ".weight", Tensor::from({in, out}, std::move(w)));
  if (with_bias) bias = ps.add(name + ".bias", Tensor::zeros({out}));
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add_bias(y, bias) : y;
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, std::size_t dim) {
  gamma = ps.add(name + ".gamma", Tensor::full({dim}, 1));
  beta = ps.add(name + ".beta", Tensor::zeros({dim}));
}

Mlp::Mlp(ParamStore& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
         std::mt19937_64& rng)
    : fc1(ps, name + ".fc1", in, hidden, rng), fc2(ps, name + ".fc2", hidden, out, rng) {}

Tensor Mlp::operator()(const Tensor& x, const ForwardContext& ctx) const {
  return fc2(ctx.drop(relu(fc1(x))));
}

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& name, std::size_t d_model,
                                       std::size_t n_heads, std::mt19937_64& rng)
    : q_proj(ps, name + ".q", d_model, d_model, rng),
      k_proj(ps, name + ".k", d_model, d_model, rng),
      v_proj(ps, name + ".v", d_model, d_model, rng),
      out_proj(ps, name + ".out", d_model, d_model, rng),
      n_heads_(n_heads),
      head_dim_(d_model / n_heads) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ContractError("attention: d_model " + std::to_string(d_model) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
  }
}

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& key, const Tensor& value,
                                      const Mask* key_mask, const std::vector<Tensor>* extra_logits,
                                      AttentionTrace* trace) const {
  const Tensor q = q_proj(query);
  const Tensor k = k_proj(key);
  const Tensor v = v_proj(value);
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(head_dim_));
  if (extra_logits && extra_logits->size() != n_heads_) {
    throw ShapeError("attention: expected " + std::to_string(n_heads_) + " extra logit maps, got " +
                     std::to_string(extra_logits->size()));
  }
  std::vector<Tensor> heads;
  heads.reserve(n_heads_);
  for (std::size_t h = 0; h < n_heads_; ++h) {
    const Tensor qh = n_heads_ == 1 ? q : slice_cols(q, h * head_dim_, head_dim_);
    const Tensor kh = n_heads_ == 1 ? k : slice_cols(k, h * head_dim_, head_dim_);
    const Tensor vh = n_heads_ == 1 ? v : slice_cols(v, h * head_dim_, head_dim_);
    Tensor logits = scale(matmul_nt(qh, kh), inv_sqrt);
    if (extra_logits) logits = add(logits, (*extra_logits)[h]);
    const Tensor w = softmax_lastdim(logits, key_mask);
    if (trace) {
      trace->logits.push_back(logits);
      trace->weights.push_back(w);
    }
    heads.push_back(matmul(w, vh));
  }
  return out_proj(n_heads_ == 1 ? heads.front() : concat_cols(heads));
}

}  // namespace qd::nn
