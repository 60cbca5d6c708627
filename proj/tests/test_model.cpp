#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "support.hpp"

using namespace qd;

namespace {

void fill(Tensor t, Real v) {
  for (auto& x : t.data()) x = v;
}

void set_identity(Tensor w) {
  fill(w, 0);
  const std::size_t n = std::min(w.dim(0), w.dim(1));
  for (std::size_t i = 0; i < n; ++i) w.data()[i * w.dim(1) + i] = 1;
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_moment_queries = 4;
  c.ffn_dim = 32;
  c.video_in_dim = 6;
  c.text_in_dim = 5;
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation names the field") {
  ModelConfig c = small_config();
  c.n_heads = 3;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_heads"), ContractError);
  c = small_config();
  c.n_self_layers = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_self_layers"), ContractError);
  CHECK(small_config().hash() == small_config().hash());
  c = small_config();
  c.flags.use_dam = false;
  CHECK(c.hash() != small_config().hash());
}

TEST_CASE("cross attention over a single text token") {
  std::mt19937_64 rng(1);
  nn::ParamStore ps;
  ModelConfig cfg = small_config();
  CrossAttentionBlock block(ps, "x", cfg, rng);
  const Tensor video = qdtest::rand_tensor({5, 16}, rng);
  const Tensor text = qdtest::rand_tensor({1, 16}, rng);
  nn::AttentionTrace tr;
  const Tensor pre = block.attn(video, text, text, nullptr, nullptr, &tr);
  for (const Tensor& w : tr.weights)
    for (Real v : w.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
  // Every clip receives the projected value of the one token.
  const Tensor expect = block.attn.out_proj(block.attn.v_proj(text));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 16; ++c) CHECK(pre.at(r, c) == doctest::Approx(expect.at(0, c)).epsilon(1e-12));
}

TEST_CASE("cross attention maps identical clips to identical rows") {
  std::mt19937_64 rng(2);
  nn::ParamStore ps;
  CrossAttentionBlock block(ps, "x", small_config(), rng);
  const Tensor row = qdtest::rand_tensor({1, 16}, rng);
  const Tensor video = concat_rows({row, row});
  const Tensor text = qdtest::rand_tensor({3, 16}, rng);
  const Mask tm = {1, 1, 1};
  const Tensor y = block(video, text, tm, {});
  for (std::size_t c = 0; c < 16; ++c) CHECK(y.at(0, c) == y.at(1, c));
}

TEST_CASE("cross attention weights match a scalar softmax oracle") {
  ModelConfig cfg = small_config();
  cfg.d_model = 2;
  cfg.n_heads = 1;
  cfg.ffn_dim = 2;
  std::mt19937_64 rng(3);
  nn::ParamStore ps;
  CrossAttentionBlock block(ps, "x", cfg, rng);
  for (nn::Linear* l : {&block.attn.q_proj, &block.attn.k_proj, &block.attn.v_proj, &block.attn.out_proj}) {
    set_identity(l->weight);
    fill(l->bias, 0);
  }
  const double v[2][2] = {{0.3, -1.2}, {0.8, 0.5}};
  const double t[2][2] = {{1.0, 0.4}, {-0.7, 2.0}};
  const Tensor video = Tensor::from({2, 2}, {v[0][0], v[0][1], v[1][0], v[1][1]});
  const Tensor text = Tensor::from({2, 2}, {t[0][0], t[0][1], t[1][0], t[1][1]});
  const Mask tm = {1, 1};
  nn::AttentionTrace tr;
  block(video, text, tm, {}, &tr);
  REQUIRE(tr.weights.size() == 1);
  for (int i = 0; i < 2; ++i) {
    double s[2];
    for (int j = 0; j < 2; ++j) s[j] = (v[i][0] * t[j][0] + v[i][1] * t[j][1]) / std::sqrt(2.0);
    const double z = std::exp(s[0]) + std::exp(s[1]);
    for (int j = 0; j < 2; ++j) CHECK(std::abs(tr.weights[0].at(i, j) - std::exp(s[j]) / z) < 1e-6);
  }
}

TEST_CASE("encoder output shapes with default dimensions") {
  ModelConfig cfg;
  cfg.video_in_dim = 12;
  cfg.text_in_dim = 10;
  cfg.n_decoder_layers = 1;
  QDDetr model(cfg, 4);
  std::mt19937_64 rng(4);
  const EncoderOutput enc = model.encode(qdtest::rand_tensor({7, 12}, rng), Mask(7, 1),
                                         qdtest::rand_tensor({3, 10}, rng), Mask(3, 1));
  CHECK(enc.video_tokens.shape() == Shape{7, 256});
  CHECK(enc.saliency_token.shape() == Shape{256});
}

TEST_CASE("zero attention and feed-forward weights collapse to normalized projections") {
  ModelConfig cfg = small_config();
  QDDetr model(cfg, 5);
  for (auto& [name, t] : model.params().items()) {
    if (name.find("attn") != std::string::npos || name.find("ffn") != std::string::npos) fill(t, 0);
  }
  std::mt19937_64 rng(5);
  const Tensor video = qdtest::rand_tensor({6, cfg.video_in_dim}, rng);
  const Tensor text = qdtest::rand_tensor({3, cfg.text_in_dim}, rng);
  const EncoderOutput enc = model.encode(video, Mask(6, 1), text, Mask(3, 1));
  const Tensor expect = layer_norm(model.video_proj(video), Tensor::full({16}, 1), Tensor::zeros({16}));
  CHECK(max_abs_diff(enc.video_tokens, expect) < 1e-4);
}

TEST_CASE("video tokens depend on the text") {
  QDDetr model(small_config(), 6);
  std::mt19937_64 rng(6);
  const Tensor video = qdtest::rand_tensor({6, 6}, rng);
  const Tensor t1 = qdtest::rand_tensor({3, 5}, rng), t2 = qdtest::rand_tensor({3, 5}, rng);
  const auto e1 = model.encode(video, Mask(6, 1), t1, Mask(3, 1));
  const auto e2 = model.encode(video, Mask(6, 1), t2, Mask(3, 1));
  CHECK(max_abs_diff(e1.video_tokens, e2.video_tokens) > 1e-3);
}

TEST_CASE("saliency score arithmetic") {
  ModelConfig cfg = small_config();
  cfg.d_model = 4;
  cfg.n_heads = 1;
  QDDetr model(cfg, 7);
  set_identity(model.saliency_w_token.weight);
  set_identity(model.saliency_w_video.weight);
  EncoderOutput enc;
  enc.saliency_token = Tensor::from({4}, {2, 0, 0, 0});
  enc.video_tokens = Tensor::from({2, 4}, {3, 0, 0, 0, 1, 5, 5, 5});
  enc.clip_mask = {1, 1};
  const Tensor s = model.saliency_scores(enc);
  CHECK(s[0] == 3.0);  // 2·3/√4
  CHECK(s[1] == 1.0);

  enc.saliency_token = Tensor::from({4}, {4, 0, 0, 0});
  const Tensor doubled = model.saliency_scores(enc);
  CHECK(doubled[0] == 2 * s[0]);
  CHECK(doubled[1] == 2 * s[1]);

  fill(model.saliency_w_token.weight, 0);
  for (Real v : model.saliency_scores(enc).data()) CHECK(v == 0);
}

TEST_CASE("anchor refinement") {
  const Tensor half = sigmoid(add_scalar(inverse_sigmoid(Tensor::from({1}, {0.5})), 0));
  CHECK(half[0] == 0.5);

  ModelConfig cfg = small_config();
  cfg.n_decoder_layers = 3;
  QDDetr model(cfg, 8);
  std::mt19937_64 rng(8);
  const Tensor video = qdtest::rand_tensor({6, 6}, rng), text = qdtest::rand_tensor({3, 5}, rng);
  const EncoderOutput enc = model.encode(video, Mask(6, 1), text, Mask(3, 1));

  // Zero-initialised refinement: the first layer reproduces the anchors.
  const DecoderOutput d0 = model.decode(enc);
  const Tensor a0 = sigmoid(model.anchor_logits);
  CHECK(max_abs_diff(d0.anchors[0], a0) < 1e-12);
  const auto anchors = model.anchors();
  REQUIRE(anchors.size() == cfg.n_moment_queries);
  CHECK(anchors[0].width == doctest::Approx(cfg.anchor_init_width));

  // Large offsets keep every layer inside (0, 1).
  std::uniform_real_distribution<double> u(-15, 15);
  for (int trial = 0; trial < 20; ++trial) {
    for (auto& v : model.moment_head.fc2.bias.data()) v = u(rng);
    for (auto& v : model.moment_head.fc2.weight.data()) v = u(rng) / 10;
    const DecoderOutput d = model.decode(enc);
    for (const Tensor& a : d.anchors) {
      for (std::size_t q = 0; q < cfg.n_moment_queries; ++q) {
        CHECK(a.at(q, 0) > 0);
        CHECK(a.at(q, 0) < 1);
        CHECK(a.at(q, 1) > 0);
        CHECK(a.at(q, 1) < 1);
      }
    }
  }
}

TEST_CASE("width-modulated positional logits match a scalar oracle") {
  ModelConfig cfg = small_config();
  cfg.d_model = 4;
  cfg.n_heads = 1;
  cfg.n_decoder_layers = 1;
  cfg.n_moment_queries = 1;
  cfg.ffn_dim = 4;
  QDDetr model(cfg, 9);
  std::mt19937_64 rng(9);
  const Tensor video = qdtest::rand_tensor({2, 6}, rng), text = qdtest::rand_tensor({2, 5}, rng);
  const EncoderOutput enc = model.encode(video, Mask(2, 1), text, Mask(2, 1));
  DecoderTrace tr;
  model.decode(enc, {}, &tr);
  REQUIRE(tr.position_logits.size() == 1);
  const Tensor logits = tr.position_logits[0][0];
  REQUIRE(logits.shape() == Shape{1, 2});

  const auto pe = [](double x) {
    std::vector<double> e(4);
    for (int k = 0; k < 2; ++k) {
      const double f = 2 * std::numbers::pi / std::pow(10000.0, 2.0 * k / 4);
      e[2 * k] = std::sin(x * f);
      e[2 * k + 1] = std::cos(x * f);
    }
    return e;
  };
  const auto project = [](const std::vector<double>& v, const Tensor& w) {
    std::vector<double> out(w.dim(1), 0.0);
    for (std::size_t i = 0; i < w.dim(0); ++i)
      for (std::size_t j = 0; j < w.dim(1); ++j) out[j] += v[i] * w.at(i, j);
    return out;
  };
  const double c = 1 / (1 + std::exp(-double(model.anchor_logits[0])));
  const double w = 1 / (1 + std::exp(-double(model.anchor_logits[1])));
  const auto q = project(pe(c), model.decoder_layers[0].pos_query.weight);
  for (int i = 0; i < 2; ++i) {
    const auto k = project(pe((i + 0.5) / 2), model.decoder_layers[0].pos_key.weight);
    double dot = 0;
    for (int j = 0; j < 4; ++j) dot += q[j] * k[j];
    const double expect = (cfg.reference_width / w) * dot / std::sqrt(4.0);
    CHECK(std::abs(logits.at(0, i) - expect) < 1e-6);
  }

  // Wider anchors flatten the positional term.
  const Tensor narrow = width_modulated_logits(Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 2}, {1, 0, 0, 1}),
                                               Tensor::from({1}, {0.05}), Real(0.1));
  const Tensor wide = width_modulated_logits(Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 2}, {1, 0, 0, 1}),
                                             Tensor::from({1}, {0.5}), Real(0.1));
  CHECK(narrow.at(0, 0) - narrow.at(0, 1) > wide.at(0, 0) - wide.at(0, 1));
}

TEST_CASE("prediction heads") {
  ModelConfig cfg = small_config();
  cfg.n_decoder_layers = 3;
  QDDetr model(cfg, 10);
  std::mt19937_64 rng(10);
  const Tensor video = qdtest::rand_tensor({6, 6}, rng), text = qdtest::rand_tensor({3, 5}, rng);
  ModelOutput out = model.forward(video, Mask(6, 1), text, Mask(3, 1));
  REQUIRE(out.layers.size() == cfg.n_decoder_layers);
  std::size_t entries = 0;
  for (const auto& l : out.layers) {
    entries += l.moments.dim(0);
    const Tensor p = softmax_lastdim(l.logits);
    for (std::size_t q = 0; q < p.dim(0); ++q) CHECK(p.at(q, 0) + p.at(q, 1) == doctest::Approx(1.0).epsilon(1e-15));
  }
  CHECK(entries == cfg.n_decoder_layers * cfg.n_moment_queries);

  fill(model.class_head.weight, 0);
  fill(model.class_head.bias, 0);
  out = model.forward(video, Mask(6, 1), text, Mask(3, 1));
  for (const auto& l : out.layers) {
    const Tensor p = softmax_lastdim(l.logits);
    for (std::size_t q = 0; q < p.dim(0); ++q) CHECK(p.at(q, 0) == 0.5);
  }
}

TEST_CASE("empty text is rejected") {
  QDDetr model(small_config(), 11);
  std::mt19937_64 rng(11);
  const Tensor video = qdtest::rand_tensor({4, 6}, rng), text = qdtest::rand_tensor({2, 5}, rng);
  CHECK_THROWS_AS(model.encode(video, Mask(4, 1), text, Mask(2, 0)), MaskError);
  CHECK_THROWS_AS(model.encode(video, Mask(4, 1), qdtest::rand_tensor({2, 3}, rng), Mask(2, 1)), ShapeError);
}

TEST_CASE("padded positions get zero attention and change nothing") {
  for (AblationFlags flags : {AblationFlags{}, AblationFlags{false, false, false, false}}) {
    ModelConfig cfg = small_config();
    cfg.flags = flags;
    QDDetr model(cfg, 12);
    std::mt19937_64 rng(12);
    const Tensor video = qdtest::rand_tensor({5, 6}, rng), text = qdtest::rand_tensor({3, 5}, rng);
    const Tensor pv = concat_rows({video, qdtest::rand_tensor({4, 6}, rng, -9, 9)});
    const Tensor pt = concat_rows({text, qdtest::rand_tensor({3, 5}, rng, -9, 9)});
    Mask vm(9, 0), tm(6, 0);
    std::fill(vm.begin(), vm.begin() + 5, 1);
    std::fill(tm.begin(), tm.begin() + 3, 1);

    if (flags.use_cate) {
      EncoderTrace tr;
      model.encode(pv, vm, pt, tm, {}, &tr);
      for (const auto& layer : tr.cross)
        for (const Tensor& w : layer.weights)
          for (std::size_t r = 0; r < w.dim(0); ++r)
            for (std::size_t c = 3; c < 6; ++c) CHECK(w.at(r, c) == 0.0);
    }

    const ModelOutput a = model.forward(video, Mask(5, 1), text, Mask(3, 1));
    const ModelOutput b = model.forward(pv, vm, pt, tm);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(a.saliency[i] - b.saliency[i]) <= 1e-6);
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
      CHECK(max_abs_diff(a.layers[l].moments, b.layers[l].moments) <= 1e-6);
      CHECK(max_abs_diff(a.layers[l].logits, b.layers[l].logits) <= 1e-6);
    }
  }
}

TEST_CASE("ablation flags change the architecture") {
  const auto count = [](AblationFlags f) {
    ModelConfig c = small_config();
    c.flags = f;
    return QDDetr(c, 1).params().count();
  };
  const std::size_t full = count({});
  CHECK(count({false, true, true, true}) < full);  // no cross blocks
  CHECK(count({true, false, true, true}) == full);  // training-only switch
  CHECK(count({true, true, false, true}) != full);
  CHECK(count({true, true, true, false}) != full);
}

TEST_CASE("full tiny model passes the finite-difference check") {
  for (AblationFlags flags : {AblationFlags{}, AblationFlags{false, false, false, false}}) {
    const ModelConfig cfg = qdtest::tiny_model_config(flags);
    QDDetr model(cfg, 13);
    qdtest::jitter_params(model);
    const qdtest::TinyProblem p = qdtest::tiny_problem(cfg);
    LossWeights w;
    if (!flags.use_neg_pair) w.lambda_neg = 0;
    const auto rep = grad_check([&] { return qdtest::tiny_full_loss(model, p, w); }, model.params().tensors(),
                                1e-5, 1e-3);
    CHECK(rep.checked == model.params().count());
    CHECK(rep.max_rel_error <= 1e-3);
  }
}

TEST_CASE("forward is deterministic for a seed") {
  QDDetr a(small_config(), 14), b(small_config(), 14);
  std::mt19937_64 rng(14);
  const Tensor video = qdtest::rand_tensor({6, 6}, rng), text = qdtest::rand_tensor({3, 5}, rng);
  const ModelOutput oa = a.forward(video, Mask(6, 1), text, Mask(3, 1));
  const ModelOutput ob = b.forward(video, Mask(6, 1), text, Mask(3, 1));
  CHECK(oa.saliency.to_vector() == ob.saliency.to_vector());
  CHECK(oa.layers.back().moments.to_vector() == ob.layers.back().moments.to_vector());
}

}  // TEST_SUITE
