#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "reference.hpp"
#include "support.hpp"

using namespace qd;
using qdref::assignment_cost;
using qdref::brute_force_min;

namespace {

LayerPrediction layer(std::vector<Real> moments, std::vector<Real> logits) {
  const std::size_t q = moments.size() / 2;
  return {Tensor::from({q, 2}, std::move(moments)), Tensor::from({q, 2}, std::move(logits))};
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("gIoU examples and properties") {
  CHECK(temporal_giou(Moment{0.4, 0.2}, Moment{0.4, 0.2}) == doctest::Approx(1.0));
  // [0,1] vs [2,3]: IoU 0, hull 3, gap 1.
  CHECK(std::abs(temporal_giou(Moment::from_interval(0, 1), Moment::from_interval(2, 3)) + 1.0 / 3) < 1e-6);
  CHECK(std::abs(temporal_giou(Moment::from_interval(0, 10), Moment::from_interval(5, 15)) - 1.0 / 3) < 1e-6);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> c(0, 1), w(0.01, 1);
  for (int trial = 0; trial < 500; ++trial) {
    const Moment a{Real(c(rng)), Real(w(rng))}, b{Real(c(rng)), Real(w(rng))};
    const Real g = temporal_giou(a, b);
    CHECK(g == doctest::Approx(temporal_giou(b, a)).epsilon(1e-12));
    CHECK(g > -1);
    CHECK(g <= 1);
    // Differentiable version agrees with the scalar one.
    const Tensor gt = temporal_giou(Tensor::from({1, 2}, {a.center, a.width}), Tensor::from({1, 2}, {b.center, b.width}));
    CHECK(gt[0] == doctest::Approx(g).epsilon(1e-12));
  }
}

TEST_CASE("Hungarian examples") {
  const std::vector<std::vector<double>> c = {{1, 2}, {3, 1}};
  const auto a = solve_assignment(c);
  CHECK(a == std::vector<long>{0, 1});
  CHECK(assignment_cost(c, a) == 2);

  LossWeights w;
  const auto m = hungarian_match({Moment{0.9, 0.1}}, {Real(0.01)}, {Moment{0.1, 0.1}}, w);
  REQUIRE(m.pairs.size() == 1);
  CHECK(m.pairs[0] == std::pair<std::size_t, std::size_t>{0, 0});
  CHECK(m.unmatched.empty());
}

TEST_CASE("Hungarian equals the brute-force optimum") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-5, 5);
  for (std::size_t n = 2; n <= 6; ++n) {
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<std::vector<double>> c(n, std::vector<double>(n));
      for (auto& row : c)
        for (auto& v : row) v = trial % 5 == 0 ? std::round(u(rng)) : u(rng);  // ties included
      const auto a = solve_assignment(c);
      std::vector<long> seen = a;
      std::sort(seen.begin(), seen.end());
      CHECK(std::adjacent_find(seen.begin(), seen.end()) == seen.end());
      CHECK(std::abs(assignment_cost(c, a) - brute_force_min(c)) < 1e-9);
    }
  }
  // Rectangular in both directions.
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t r = 1 + trial % 5, k = 1 + (trial / 5) % 5;
    std::vector<std::vector<double>> c(r, std::vector<double>(k));
    for (auto& row : c)
      for (auto& v : row) v = u(rng);
    const auto a = solve_assignment(c);
    std::size_t assigned = 0;
    for (long v : a) assigned += v >= 0 ? 1 : 0;
    CHECK(assigned == std::min(r, k));
    CHECK(std::abs(assignment_cost(c, a) - brute_force_min(c)) < 1e-9);
  }
}

TEST_CASE("non-finite costs are rejected instead of looping") {
  CHECK_THROWS_AS(solve_assignment({{1, std::nan("")}, {0, 2}}), ContractError);
  CHECK_THROWS_AS(solve_assignment({{1, 2}, {INFINITY, 2}}), ContractError);
}

TEST_CASE("match results are injective with min(Q, G) pairs") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> c(0.1, 0.9), w(0.05, 0.3), p(0, 1);
  LossWeights lw;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t q = 1 + trial % 6, g = 1 + (trial / 6) % 4;
    std::vector<Moment> preds, gts;
    std::vector<Real> fg;
    for (std::size_t i = 0; i < q; ++i) {
      preds.push_back({Real(c(rng)), Real(w(rng))});
      fg.push_back(Real(p(rng)));
    }
    for (std::size_t j = 0; j < g; ++j) gts.push_back({Real(c(rng)), Real(w(rng))});
    const auto m = hungarian_match(preds, fg, gts, lw);
    CHECK(m.pairs.size() == std::min(q, g));
    CHECK(m.pairs.size() + m.unmatched.size() == q);
    std::vector<std::size_t> ps, gs;
    for (auto [i, j] : m.pairs) {
      ps.push_back(i);
      gs.push_back(j);
    }
    std::sort(ps.begin(), ps.end());
    std::sort(gs.begin(), gs.end());
    CHECK(std::adjacent_find(ps.begin(), ps.end()) == ps.end());
    CHECK(std::adjacent_find(gs.begin(), gs.end()) == gs.end());
    // matching_cost reproduces the documented formula
    const auto cost = matching_cost(preds, fg, gts, lw);
    const double l1 = std::abs(preds[0].center - gts[0].center) + std::abs(preds[0].width - gts[0].width);
    const double expect = 10 * l1 + (1 - temporal_giou(preds[0], gts[0])) - 4 * fg[0];
    CHECK(cost[0][0] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("moment loss examples") {
  LossWeights w;
  const LayerPrediction pred = layer({0.5, 0.2}, {2, -2});
  const std::vector<Moment> gts = {{0.5, 0.4}};
  const MatchResult m = hungarian_match(pred, gts, w);
  const MomentLossParts parts = moment_loss(pred, m, gts, w);
  CHECK(parts.l1.item() == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(w.lambda_l1 * parts.l1.item() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(parts.giou.item() == doctest::Approx(1 - 0.5).epsilon(1e-12));

  // Perfect prediction with confident classes.
  const LayerPrediction perfect = layer({0.3, 0.2, 0.8, 0.1}, {40, -40, -40, 40});
  const std::vector<Moment> one = {{0.3, 0.2}};
  const auto pm = moment_loss(perfect, hungarian_match(perfect, one, w), one, w);
  CHECK(pm.l1.item() == doctest::Approx(0.0));
  CHECK(pm.giou.item() == doctest::Approx(0.0));
  CHECK(pm.ce.item() < 1e-12);

  // No ground truth: only the background cross-entropy remains.
  const MatchResult none = hungarian_match(perfect, {}, w);
  CHECK(none.pairs.empty());
  CHECK(none.unmatched.size() == 2);
  const auto nm = moment_loss(perfect, none, {}, w);
  CHECK(nm.l1.item() == 0);
  CHECK(nm.giou.item() == 0);
  CHECK(nm.total.item() == doctest::Approx(w.lambda_ce * nm.ce.item()));
  CHECK(nm.ce.item() == doctest::Approx(0.5 * std::log1p(std::exp(80.0))).epsilon(1e-9));
}

TEST_CASE("moment loss ignores GT order") {
  LossWeights w;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> c(0.1, 0.9), wd(0.05, 0.3), l(-2, 2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Real> mom, logit;
    for (int q = 0; q < 4; ++q) {
      mom.push_back(Real(c(rng)));
      mom.push_back(Real(wd(rng)));
      logit.push_back(Real(l(rng)));
      logit.push_back(Real(l(rng)));
    }
    const LayerPrediction pred = layer(mom, logit);
    std::vector<Moment> gts = {{Real(c(rng)), Real(wd(rng))}, {Real(c(rng)), Real(wd(rng))}, {Real(c(rng)), Real(wd(rng))}};
    const Real a = moment_loss(pred, hungarian_match(pred, gts, w), gts, w).total.item();
    std::reverse(gts.begin(), gts.end());
    const Real b = moment_loss(pred, hungarian_match(pred, gts, w), gts, w).total.item();
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
  }
}

TEST_CASE("margin hinge examples") {
  CHECK(margin_hinge(Tensor::scalar(0.9), Tensor::scalar(0.3), Real(0.2)).item() == 0);
  CHECK(margin_hinge(Tensor::scalar(0.4), Tensor::scalar(0.3), Real(0.2)).item() == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(margin_hinge(Tensor::scalar(0.7), Tensor::scalar(0.7), Real(0.2)).item() == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("margin loss pair handling") {
  std::mt19937_64 rng(5);
  // One inside clip, one outside: only the inside/outside hinge applies.
  const Tensor s = Tensor::from({2}, {0.4, 0.3});
  CHECK(margin_loss(s, {0, -1}, {1, 1}, Real(0.2), rng).item() == doctest::Approx(0.1).epsilon(1e-12));
  // No outside clip and a single rank: nothing to compare.
  CHECK(margin_loss(s, {2, 2}, {1, 1}, Real(0.2), rng).item() == 0);
  // Padded clips never take part.
  CHECK(margin_loss(Tensor::from({3}, {0.4, 0.3, 9}), {0, -1, -1}, {1, 1, 0}, Real(0.2), rng).item() ==
        doctest::Approx(0.1).epsilon(1e-12));
  // Both hinges: ranks 3 > 1 inside, each pair sampled from a single option.
  const Tensor t = Tensor::from({3}, {0.5, 0.45, 0.0});
  CHECK(margin_loss(t, {3, 1, -1}, {1, 1, 1}, Real(0.2), rng).item() ==
        doctest::Approx(0.15 + 0.0).epsilon(1e-12));
}

TEST_CASE("rank contrastive examples") {
  const double expect = -std::log(std::exp(4.0) / (std::exp(4.0) + 1));
  CHECK(std::abs(expect - 0.01815) < 1e-4);
  const Tensor s = Tensor::from({2}, {2.0, 0.0});
  const Real v = rank_contrastive_loss(s, {1, 0}, {1, 1}, nullptr, nullptr, Real(0.5), 2).item();
  CHECK(std::abs(v - 0.01815) < 1e-4);
  CHECK(v == doctest::Approx(expect).epsilon(1e-12));

  // Negative-pair clips join the negative set.
  const Tensor neg = Tensor::from({1}, {0.0});
  const Mask nm = {1};
  const Real with_neg = rank_contrastive_loss(Tensor::from({1}, {2.0}), {1}, {1}, &neg, &nm, Real(0.5), 2).item();
  CHECK(with_neg == doctest::Approx(expect).epsilon(1e-12));

  // Empty negative set.
  CHECK(rank_contrastive_loss(Tensor::from({2}, {1.0, 3.0}), {3, 3}, {1, 1}, nullptr, nullptr, Real(0.5), 4).item() ==
        doctest::Approx(0.0));

  // Shift invariance.
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = qdtest::rand_tensor({6}, rng, -3, 3);
    const std::vector<int> ranks = {-1, 0, 1, 3, 2, -1};
    const Mask m(6, 1);
    const Real a = rank_contrastive_loss(x, ranks, m, nullptr, nullptr, Real(0.5), 4).item();
    const Real b = rank_contrastive_loss(add_scalar(x, Real(7.5)), ranks, m, nullptr, nullptr, Real(0.5), 4).item();
    CHECK(a == doctest::Approx(b).epsilon(1e-9));
    CHECK(a >= 0);
  }
}

TEST_CASE("negative pair loss examples") {
  const Mask m = {1};
  CHECK(std::abs(negative_pair_loss(Tensor::from({1}, {0.0}), m).item() - 0.6931) < 1e-4);
  CHECK(negative_pair_loss(Tensor::from({1}, {-60.0}), m).item() < 1e-20);
  double prev = -1;
  for (double s = -10; s <= 10; s += 0.5) {
    const double v = negative_pair_loss(Tensor::from({1}, {s}), m).item();
    CHECK(v > prev);
    prev = v;
  }
  // mean over real clips only
  const Mask pm = {1, 0};
  CHECK(negative_pair_loss(Tensor::from({2}, {0.0, 50.0}), pm).item() == doctest::Approx(std::log(2.0)));
}

TEST_CASE("total loss arithmetic") {
  LossWeights w;
  const LossParts zero{Tensor::scalar(0), Tensor::scalar(0), Tensor::scalar(0), Tensor::scalar(0)};
  CHECK(total_loss(zero, w).item() == 0);
  const LossParts unit{Tensor::scalar(1), Tensor::scalar(1), Tensor::scalar(1), Tensor::scalar(1)};
  CHECK(total_loss(unit, w).item() == 4);
  w.lambda_neg = 0;
  CHECK(total_loss(unit, w).item() == 3);
}

TEST_CASE("loss weights validation") {
  LossWeights w;
  CHECK_NOTHROW(w.validate());
  w.tau = 0;
  CHECK_THROWS(w.validate());
  w = {};
  w.margin_delta = 1;
  CHECK_THROWS(w.validate());
  w = {};
  w.lambda_ce = -1;
  CHECK_THROWS(w.validate());
}

TEST_CASE("saliency losses pass finite-difference checks") {
  std::mt19937_64 rng(7);
  Tensor s = qdtest::rand_tensor({6}, rng, -2, 2), neg = qdtest::rand_tensor({6}, rng, -2, 2);
  const std::vector<int> ranks = {-1, 1, 3, 2, 0, -1};
  const Mask m = {1, 1, 1, 1, 1, 0};
  CHECK(grad_check([&] { return rank_contrastive_loss(s, ranks, m, &neg, &m, Real(0.5), 4); }, {s, neg}).passed);
  CHECK(grad_check([&] { return negative_pair_loss(neg, m); }, {neg}).passed);
  CHECK(grad_check([&] {
          std::mt19937_64 r(1);
          return margin_loss(s, ranks, m, Real(0.2), r);
        },
        {s}).passed);
  Tensor a = Tensor::from({3, 2}, {0.3, 0.2, 0.5, 0.4, 0.7, 0.1}), b = Tensor::from({3, 2}, {0.35, 0.12, 0.1, 0.1, 0.6, 0.5});
  CHECK(grad_check([&] { return qdtest::probe(temporal_giou(a, b)); }, {a, b}).passed);
}

TEST_CASE("sample loss is finite and non-negative") {
  const ModelConfig cfg = qdtest::tiny_model_config();
  QDDetr model(cfg, 8);
  const auto p = qdtest::tiny_problem(cfg);
  const ModelOutput out = model.forward(p.video, p.video_mask, p.text, p.text_mask);
  const Tensor neg = model.saliency_scores(model.encode(p.video, p.video_mask, p.neg_text, p.text_mask));
  std::mt19937_64 rng(1);
  const SampleLoss sl = sample_loss(out, &neg, p.target, LossWeights{}, rng);
  for (const Tensor& t : {sl.parts.mr, sl.parts.margin, sl.parts.cont, sl.parts.neg, sl.total}) {
    CHECK(std::isfinite(t.item()));
    CHECK(t.item() >= 0);
  }
  CHECK(sl.total.item() == doctest::Approx(total_loss(sl.parts, LossWeights{}).item()));
  // Without a negative pair the negative term vanishes.
  const SampleLoss plain = sample_loss(out, nullptr, p.target, LossWeights{}, rng);
  CHECK(plain.parts.neg.item() == 0);
}

}  // TEST_SUITE
