#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "qddetr/data.hpp"
#include "qddetr/losses.hpp"
#include "qddetr/model.hpp"
#include "qddetr/tensor.hpp"

namespace qdtest {

using namespace qd;

inline Tensor rand_tensor(Shape shape, std::mt19937_64& rng, Real lo = -1, Real hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(u(rng));
  return Tensor::from(std::move(shape), std::move(v));
}

// Values bounded away from zero so kinks (relu, abs, max) are not straddled
// by finite differences.
inline Tensor rand_away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(sign(rng) ? u(rng) : -u(rng));
  return Tensor::from(std::move(shape), std::move(v));
}

// Scalar read-out with fixed, non-uniform weights, so every output element
// contributes a distinct amount to the checked loss.
inline Tensor probe(const Tensor& y) {
  std::vector<Real> w(y.numel());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<Real>(std::sin(1.3 * double(i) + 0.7) + 0.2);
  if (y.rank() == 0) return mul(y, Tensor::scalar(w[0]));
  return sum(mul(y, Tensor::from(y.shape(), std::move(w))));
}

struct GradCase {
  std::string name;
  std::function<Tensor()> f;
  std::vector<Tensor> inputs;
};

inline std::vector<GradCase> primitive_grad_cases(std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  std::vector<GradCase> cases;
  auto T = [&](Shape s) { return rand_tensor(std::move(s), rng); };
  auto Z = [&](Shape s) { return rand_away_from_zero(std::move(s), rng); };
  auto P = [&](Shape s) { return rand_tensor(std::move(s), rng, Real(0.2), Real(1.5)); };

  {
    Tensor a = T({3, 4}), b = T({4, 2});
    cases.push_back({"matmul", [=] { return probe(matmul(a, b)); }, {a, b}});
  }
  {
    Tensor a = T({3, 4}), b = T({5, 4});
    cases.push_back({"matmul_nt", [=] { return probe(matmul_nt(a, b)); }, {a, b}});
  }
  {
    Tensor a = T({3, 4});
    cases.push_back({"transpose", [=] { return probe(transpose(a)); }, {a}});
  }
  {
    Tensor a = T({2, 3}), b = T({2, 3});
    cases.push_back({"add", [=] { return probe(add(a, b)); }, {a, b}});
    cases.push_back({"sub", [=] { return probe(sub(a, b)); }, {a, b}});
    cases.push_back({"mul", [=] { return probe(mul(a, b)); }, {a, b}});
  }
  {
    Tensor a = T({2, 3}), b = P({2, 3});
    cases.push_back({"div", [=] { return probe(div(a, b)); }, {a, b}});
  }
  {
    Tensor a = T({2, 3});
    Tensor b = add(a, rand_away_from_zero({2, 3}, rng)).detach();
    cases.push_back({"minimum", [=] { return probe(minimum(a, b)); }, {a, b}});
    cases.push_back({"maximum", [=] { return probe(maximum(a, b)); }, {a, b}});
  }
  {
    Tensor x = T({3, 4}), bias = T({4});
    cases.push_back({"add_bias", [=] { return probe(add_bias(x, bias)); }, {x, bias}});
  }
  {
    Tensor x = T({2, 3}), s = T({}), r = T({2});
    cases.push_back({"scale", [=] { return probe(scale(x, Real(-1.7))); }, {x}});
    cases.push_back({"add_scalar", [=] { return probe(add_scalar(x, Real(0.3))); }, {x}});
    cases.push_back({"mul_scalar", [=] { return probe(mul_scalar(x, s)); }, {x, s}});
    cases.push_back({"scale_rows", [=] { return probe(scale_rows(x, r)); }, {x, r}});
    cases.push_back({"neg", [=] { return probe(neg(x)); }, {x}});
    cases.push_back({"sigmoid", [=] { return probe(sigmoid(x)); }, {x}});
    cases.push_back({"exp", [=] { return probe(exp(x)); }, {x}});
    cases.push_back({"log1p_exp", [=] { return probe(log1p_exp(scale(x, 4))); }, {x}});
  }
  {
    Tensor z = Z({2, 3});
    cases.push_back({"relu", [=] { return probe(relu(z)); }, {z}});
    cases.push_back({"abs", [=] { return probe(abs(z)); }, {z}});
    cases.push_back({"reciprocal", [=] { return probe(reciprocal(z)); }, {z}});
  }
  {
    Tensor p = P({2, 3});
    cases.push_back({"log", [=] { return probe(log(p)); }, {p}});
  }
  {
    Tensor u = rand_tensor({2, 3}, rng, Real(0.05), Real(0.95));
    cases.push_back({"inverse_sigmoid", [=] { return probe(inverse_sigmoid(u)); }, {u}});
  }
  {
    Tensor x = T({3, 5});
    const Mask row_mask = {1, 1, 0, 1, 0};
    cases.push_back({"softmax_lastdim", [=] { return probe(softmax_lastdim(x)); }, {x}});
    cases.push_back({"softmax_lastdim_masked", [=] { return probe(softmax_lastdim(x, &row_mask)); }, {x}});
    cases.push_back({"log_softmax_lastdim", [=] { return probe(log_softmax_lastdim(x)); }, {x}});
  }
  {
    Tensor x = T({3, 4}), g = T({4}), b = T({4});
    cases.push_back({"layer_norm", [=] { return probe(layer_norm(x, g, b, Real(1e-5))); }, {x, g, b}});
  }
  {
    Tensor x = T({3, 4});
    cases.push_back({"dropout", [=] {
                       std::mt19937_64 r(3);
                       return probe(dropout(x, Real(0.3), r));
                     },
                     {x}});
    cases.push_back({"sum", [=] { return probe(sum(x)); }, {x}});
    cases.push_back({"mean", [=] { return probe(mean(x)); }, {x}});
    cases.push_back({"reshape", [=] { return probe(reshape(x, {2, 6})); }, {x}});
    cases.push_back({"slice_rows", [=] { return probe(slice_rows(x, 1, 2)); }, {x}});
    cases.push_back({"slice_cols", [=] { return probe(slice_cols(x, 1, 2)); }, {x}});
    cases.push_back({"select", [=] { return probe(select(x, 5)); }, {x}});
    cases.push_back({"gather", [=] { return probe(gather(x, {0, 5, 5, 11})); }, {x}});
  }
  {
    Tensor v = T({6});
    const Mask m = {1, 0, 1, 1, 0, 1};
    cases.push_back({"logsumexp", [=] { return probe(logsumexp(v)); }, {v}});
    cases.push_back({"logsumexp_masked", [=] { return probe(logsumexp(v, &m)); }, {v}});
  }
  {
    Tensor a = T({2, 3}), b = T({1, 3}), c = T({2, 2});
    cases.push_back({"concat_rows", [=] { return probe(concat_rows({a, b})); }, {a, b}});
    cases.push_back({"concat_cols", [=] { return probe(concat_cols({a, c})); }, {a, c}});
  }
  {
    Tensor a = T({3}), b = T({2});
    cases.push_back({"concat", [=] { return probe(concat({a, b})); }, {a, b}});
  }
  {
    Tensor s1 = T({}), s2 = T({});
    cases.push_back({"stack_scalars", [=] { return probe(stack_scalars({s1, s2})); }, {s1, s2}});
  }
  {
    Tensor pos = rand_tensor({3}, rng, Real(0.05), Real(0.95));
    cases.push_back({"sinusoidal_embedding", [=] { return probe(sinusoidal_embedding(pos, 8)); }, {pos}});
  }
  return cases;
}

// Tiny configuration used by the full-model gradient check.
inline ModelConfig tiny_model_config(AblationFlags flags = {}) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 1;
  c.n_cross_layers = 1;
  c.n_self_layers = 1;
  c.n_decoder_layers = 1;
  c.n_moment_queries = 2;
  c.ffn_dim = 16;
  c.video_in_dim = 5;
  c.text_in_dim = 6;
  c.flags = flags;
  return c;
}

// Moves every parameter off its initial value. Zero biases make the decoder's
// first layer norm see an all-zero row, where finite differences are badly
// conditioned; the check is meant for a generic point.
inline void jitter_params(QDDetr& model, std::uint64_t seed = 17, Real amount = Real(0.1)) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amount, amount);
  for (Tensor t : model.params().tensors())
    for (auto& v : t.data()) v += static_cast<Real>(u(rng));
}

struct TinyProblem {
  Tensor video, text, neg_text;
  Mask video_mask, text_mask;
  SampleTargets target;
};

inline TinyProblem tiny_problem(const ModelConfig& c, std::uint64_t seed = 11) {
  std::mt19937_64 rng(seed);
  TinyProblem p;
  p.video = rand_tensor({4, c.video_in_dim}, rng);
  p.text = rand_tensor({3, c.text_in_dim}, rng);
  p.neg_text = rand_tensor({3, c.text_in_dim}, rng);
  p.video_mask = Mask(4, 1);
  p.text_mask = Mask(3, 1);
  p.target.gts = {Moment{Real(0.45), Real(0.4)}};
  p.target.clip_ranks = {-1, 1, 3, -1};
  p.target.clip_mask = p.video_mask;
  return p;
}

// Full objective (all four loss families) through the whole model.
inline Tensor tiny_full_loss(const QDDetr& model, const TinyProblem& p, const LossWeights& w = {}) {
  const ModelOutput out = model.forward(p.video, p.video_mask, p.text, p.text_mask);
  const EncoderOutput neg_enc = model.encode(p.video, p.video_mask, p.neg_text, p.text_mask);
  const Tensor neg = model.saliency_scores(neg_enc);
  std::mt19937_64 rng(5);
  return sample_loss(out, &neg, p.target, w, rng).total;
}

}  // namespace qdtest
