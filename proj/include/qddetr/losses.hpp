#pragma once

#include <random>
#include <utility>
#include <vector>

#include "qddetr/model.hpp"
#include "qddetr/tensor.hpp"

namespace qd {

struct LossWeights {
  Real lambda_l1 = 10;
  Real lambda_giou = 1;
  Real lambda_ce = 4;
  Real lambda_margin = 1;
  Real lambda_cont = 1;
  Real lambda_neg = 1;
  Real tau = Real(0.5);
  Real margin_delta = Real(0.2);
  int max_rank = 4;  // R: ranks live in [0, R)

  void validate() const;
};

struct MatchResult {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (prediction, ground truth)
  std::vector<std::size_t> unmatched;                       // background predictions
};

// 1D generalized IoU of the intervals [c - w/2, c + w/2].
Real temporal_giou(const Moment& a, const Moment& b);

// Row-wise differentiable gIoU for [K×2] (center, width) tensors -> [K].
Tensor temporal_giou(const Tensor& a, const Tensor& b);

// Exact minimum-cost assignment for a rectangular cost matrix (Kuhn–Munkres
// with potentials). Returns, for every row, the assigned column or -1 when
// there are more rows than columns.
std::vector<long> solve_assignment(const std::vector<std::vector<double>>& cost);

// cost(i,j) = λ_L1·|m̂_i − m_j|₁ + λ_gIoU·(1 − gIoU) − λ_CE·fg_prob_i
std::vector<std::vector<double>> matching_cost(const std::vector<Moment>& preds, const std::vector<Real>& fg_prob,
                                               const std::vector<Moment>& gts, const LossWeights& w);

MatchResult hungarian_match(const std::vector<Moment>& preds, const std::vector<Real>& fg_prob,
                            const std::vector<Moment>& gts, const LossWeights& w);

// Convenience: matching straight from one decoder layer's outputs.
MatchResult hungarian_match(const LayerPrediction& pred, const std::vector<Moment>& gts, const LossWeights& w);

struct MomentLossParts {
  Tensor l1;    // unweighted, summed over (center, width), averaged over GT
  Tensor giou;  // unweighted mean of 1 - gIoU over matched pairs
  Tensor ce;    // unweighted mean cross-entropy over queries
  Tensor total; // λ-weighted sum
};

MomentLossParts moment_loss(const LayerPrediction& pred, const MatchResult& match, const std::vector<Moment>& gts,
                            const LossWeights& w);

// max(0, Δ + S_low − S_high)
Tensor margin_hinge(const Tensor& s_high, const Tensor& s_low, Real delta);

// Two hinge terms: a (higher-rank, lower-rank) pair inside the GT moments and
// an (inside, outside) pair, each drawn uniformly. `ranks` holds -1 outside
// the moments. Unavailable pairs contribute zero.
Tensor margin_loss(const Tensor& scores, const std::vector<int>& ranks, const Mask& clip_mask, Real delta,
                   std::mt19937_64& rng);

// Rank-aware contrastive loss, summed over r = 1..R. Negative-pair clip
// scores (if any) join every negative set.
Tensor rank_contrastive_loss(const Tensor& scores, const std::vector<int>& ranks, const Mask& clip_mask,
                             const Tensor* neg_scores, const Mask* neg_mask, Real tau, int max_rank);

// Mean over real clips of −log(1 − σ(S)).
Tensor negative_pair_loss(const Tensor& neg_scores, const Mask& mask);

struct LossParts {
  Tensor mr;      // pre-weighted moment retrieval loss (summed over decoder layers)
  Tensor margin;
  Tensor cont;
  Tensor neg;
};

// L_hl = λ_margin·margin + λ_cont·cont; L_total = L_hl + L_mr + λ_neg·neg.
Tensor total_loss(const LossParts& parts, const LossWeights& w);

struct SampleTargets {
  std::vector<Moment> gts;
  std::vector<int> clip_ranks;  // -1 outside the GT moments
  Mask clip_mask;
};

struct SampleLoss {
  LossParts parts;
  Tensor total;
  // Unweighted moment-loss components of the final decoder layer.
  Real l1 = 0, giou = 0, ce = 0;
};

// Full objective for one sample. `neg_saliency` is the saliency of the same
// video under a mismatched query (nullptr disables negative-pair terms).
SampleLoss sample_loss(const ModelOutput& out, const Tensor* neg_saliency, const SampleTargets& target,
                       const LossWeights& w, std::mt19937_64& rng);

}  // namespace qd
