#pragma once

#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "qddetr/tensor.hpp"

namespace qd::nn {

// Ordered name -> parameter registry. Order is construction order and is
// what checkpoints and the optimizer iterate over.
class ParamStore {
 public:
  Tensor add(std::string name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<Tensor> tensors() const;
  std::optional<Tensor> find(const std::string& name) const;
  std::size_t count() const;  // total scalar parameters
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// Per-forward options. Dropout is active only when training and rate > 0.
struct ForwardContext {
  bool training = false;
  Real dropout = 0;
  std::mt19937_64* rng = nullptr;

  Tensor drop(const Tensor& x) const;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
         bool bias = true);

  Tensor operator()(const Tensor& x) const;
  Tensor weight;  // [in×out]
  Tensor bias;    // [out], undefined when built without bias
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, Real(1e-5)); }
  Tensor gamma;
  Tensor beta;
};

// Two-layer perceptron with ReLU between layers.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& ps, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
      std::mt19937_64& rng);
  Tensor operator()(const Tensor& x, const ForwardContext& ctx = {}) const;
  Linear fc1;
  Linear fc2;
};

struct AttentionTrace {
  std::vector<Tensor> weights;  // per head [Lq×Lk]
  std::vector<Tensor> logits;   // per head, pre-softmax, including extra terms
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, std::size_t d_model, std::size_t n_heads,
                     std::mt19937_64& rng);

  // Scaled dot-product attention over keys; `key_mask` masks key positions.
  // `extra_logits` (one [Lq×Lk] per head) is added before the softmax.
  Tensor operator()(const Tensor& query, const Tensor& key, const Tensor& value, const Mask* key_mask,
                    const std::vector<Tensor>* extra_logits = nullptr, AttentionTrace* trace = nullptr) const;

  std::size_t n_heads() const { return n_heads_; }
  std::size_t head_dim() const { return head_dim_; }

  Linear q_proj, k_proj, v_proj, out_proj;

 private:
  std::size_t n_heads_ = 1;
  std::size_t head_dim_ = 1;
};

}  // namespace qd::nn
