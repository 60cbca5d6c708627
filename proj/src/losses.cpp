#include "qddetr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace qd {

namespace {

Tensor column(const Tensor& x, std::size_t c) { return reshape(slice_cols(x, c, 1), {x.dim(0)}); }

Tensor zero_scalar() { return Tensor::scalar(0); }

}  // namespace

void LossWeights::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ContractError("loss weights: " + field + " " + why);
  };
  const std::pair<const char*, Real> lambdas[] = {{"lambda_l1", lambda_l1},         {"lambda_giou", lambda_giou},
                                                  {"lambda_ce", lambda_ce},         {"lambda_margin", lambda_margin},
                                                  {"lambda_cont", lambda_cont},     {"lambda_neg", lambda_neg}};
  for (const auto& [name, v] : lambdas) {
    if (!(v >= 0) || !std::isfinite(v)) fail(name, "must be finite and non-negative");
  }
  if (!(tau > 0)) fail("tau", "must be positive");
  if (!(margin_delta > 0 && margin_delta < 1)) fail("margin_delta", "must be in (0, 1)");
  if (max_rank < 1) fail("max_rank", "must be >= 1");
}

Real temporal_giou(const Moment& a, const Moment& b) {
  const Real s1 = a.start(), e1 = a.end(), s2 = b.start(), e2 = b.end();
  const Real inter = std::max(Real(0), std::min(e1, e2) - std::max(s1, s2));
  const Real uni = (e1 - s1) + (e2 - s2) - inter;
  const Real enclose = std::max(e1, e2) - std::min(s1, s2);
  const Real iou = uni > 0 ? inter / uni : Real(0);
  if (enclose <= 0) return iou;
  return iou - (enclose - uni) / enclose;
}

Tensor temporal_giou(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.dim(1) != 2 || a.shape() != b.shape()) {
    throw ShapeError("temporal_giou: expected matching [K×2], got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const Tensor ca = column(a, 0), wa = column(a, 1);
  const Tensor cb = column(b, 0), wb = column(b, 1);
  const Tensor sa = sub(ca, scale(wa, Real(0.5))), ea = add(ca, scale(wa, Real(0.5)));
  const Tensor sb = sub(cb, scale(wb, Real(0.5))), eb = add(cb, scale(wb, Real(0.5)));
  const Tensor inter = relu(sub(minimum(ea, eb), maximum(sa, sb)));
  const Tensor uni = sub(add(wa, wb), inter);
  const Tensor enclose = sub(maximum(ea, eb), minimum(sa, sb));
  const Tensor iou = div(inter, uni);
  return sub(iou, div(sub(enclose, uni), enclose));
}

std::vector<long> solve_assignment(const std::vector<std::vector<double>>& cost) {
  const std::size_t rows = cost.size();
  if (rows == 0) return {};
  const std::size_t cols = cost.front().size();
  for (const auto& r : cost) {
    if (r.size() != cols) throw ShapeError("solve_assignment: ragged cost matrix");
    // a NaN never compares below delta and the augmenting search would not end
    for (double c : r) {
      if (!std::isfinite(c)) throw ContractError("solve_assignment: non-finite cost");
    }
  }
  if (cols == 0) return std::vector<long>(rows, -1);
  if (rows > cols) {
    std::vector<std::vector<double>> t(cols, std::vector<double>(rows));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) t[j][i] = cost[i][j];
    const auto tr = solve_assignment(t);
    std::vector<long> out(rows, -1);
    for (std::size_t j = 0; j < cols; ++j) out[static_cast<std::size_t>(tr[j])] = static_cast<long>(j);
    return out;
  }

  // Shortest augmenting paths with row/column potentials, 1-based indices.
  const std::size_t n = rows, m = cols;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0), v(m + 1, 0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<long> out(n, -1);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) out[p[j] - 1] = static_cast<long>(j - 1);
  }
  return out;
}

std::vector<std::vector<double>> matching_cost(const std::vector<Moment>& preds, const std::vector<Real>& fg_prob,
                                               const std::vector<Moment>& gts, const LossWeights& w) {
  if (fg_prob.size() != preds.size()) throw ShapeError("matching_cost: fg_prob size differs from predictions");
  std::vector<std::vector<double>> cost(preds.size(), std::vector<double>(gts.size()));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (std::size_t j = 0; j < gts.size(); ++j) {
      const double l1 = std::abs(preds[i].center - gts[j].center) + std::abs(preds[i].width - gts[j].width);
      cost[i][j] = w.lambda_l1 * l1 + w.lambda_giou * (1 - temporal_giou(preds[i], gts[j])) -
                   w.lambda_ce * fg_prob[i];
    }
  }
  return cost;
}

MatchResult hungarian_match(const std::vector<Moment>& preds, const std::vector<Real>& fg_prob,
                            const std::vector<Moment>& gts, const LossWeights& w) {
  MatchResult out;
  const auto assign = gts.empty() ? std::vector<long>(preds.size(), -1)
                                  : solve_assignment(matching_cost(preds, fg_prob, gts, w));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (assign[i] >= 0) {
      out.pairs.emplace_back(i, static_cast<std::size_t>(assign[i]));
    } else {
      out.unmatched.push_back(i);
    }
  }
  return out;
}

MatchResult hungarian_match(const LayerPrediction& pred, const std::vector<Moment>& gts, const LossWeights& w) {
  const std::size_t Q = pred.moments.dim(0);
  std::vector<Moment> moments(Q);
  std::vector<Real> fg(Q);
  for (std::size_t q = 0; q < Q; ++q) {
    moments[q] = {pred.moments.at(q, 0), pred.moments.at(q, 1)};
    const Real a = pred.logits.at(q, 0), b = pred.logits.at(q, 1);
    fg[q] = Real(1) / (Real(1) + std::exp(b - a));
  }
  return hungarian_match(moments, fg, gts, w);
}

MomentLossParts moment_loss(const LayerPrediction& pred, const MatchResult& match, const std::vector<Moment>& gts,
                            const LossWeights& w) {
  const std::size_t Q = pred.moments.dim(0);
  MomentLossParts parts;

  // Class 0 = foreground, 1 = background.
  std::vector<std::size_t> target(Q, 1);
  for (const auto& [p, g] : match.pairs) target[p] = 0;
  std::vector<std::size_t> flat(Q);
  for (std::size_t q = 0; q < Q; ++q) flat[q] = q * 2 + target[q];
  parts.ce = neg(mean(gather(log_softmax_lastdim(pred.logits), flat)));

  if (match.pairs.empty() || gts.empty()) {
    parts.l1 = zero_scalar();
    parts.giou = zero_scalar();
    parts.total = scale(parts.ce, w.lambda_ce);
    return parts;
  }
  const std::size_t K = match.pairs.size();
  std::vector<std::size_t> rows;
  std::vector<Real> gt_vals;
  for (const auto& [p, g] : match.pairs) {
    rows.push_back(2 * p);
    rows.push_back(2 * p + 1);
    gt_vals.push_back(gts.at(g).center);
    gt_vals.push_back(gts.at(g).width);
  }
  const Tensor matched = reshape(gather(pred.moments, rows), {K, 2});
  const Tensor target_m = Tensor::from({K, 2}, gt_vals);
  const Real inv_n = Real(1) / static_cast<Real>(gts.size());
  parts.l1 = scale(sum(abs(sub(matched, target_m))), inv_n);
  parts.giou = scale(sum(add_scalar(neg(temporal_giou(matched, target_m)), 1)), inv_n);
  parts.total = add(add(scale(parts.l1, w.lambda_l1), scale(parts.giou, w.lambda_giou)), scale(parts.ce, w.lambda_ce));
  return parts;
}

Tensor margin_hinge(const Tensor& s_high, const Tensor& s_low, Real delta) {
  return relu(add_scalar(sub(s_low, s_high), delta));
}

Tensor margin_loss(const Tensor& scores, const std::vector<int>& ranks, const Mask& clip_mask, Real delta,
                   std::mt19937_64& rng) {
  const std::size_t L = scores.numel();
  if (ranks.size() != L || clip_mask.size() != L) throw ShapeError("margin_loss: ranks/mask length differs from scores");
  std::vector<std::size_t> inside, outside;
  std::vector<std::pair<std::size_t, std::size_t>> ordered;  // (higher rank, lower rank), both inside
  for (std::size_t i = 0; i < L; ++i) {
    if (!clip_mask[i]) continue;
    (ranks[i] >= 0 ? inside : outside).push_back(i);
  }
  for (std::size_t a : inside) {
    for (std::size_t b : inside) {
      if (ranks[a] > ranks[b]) ordered.emplace_back(a, b);
    }
  }
  Tensor total = zero_scalar();
  if (!ordered.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, ordered.size() - 1);
    const auto [hi, lo] = ordered[pick(rng)];
    total = add(total, margin_hinge(select(scores, hi), select(scores, lo), delta));
  }
  if (!inside.empty() && !outside.empty()) {
    std::uniform_int_distribution<std::size_t> pi(0, inside.size() - 1), po(0, outside.size() - 1);
    const std::size_t hi = inside[pi(rng)];
    const std::size_t lo = outside[po(rng)];
    total = add(total, margin_hinge(select(scores, hi), select(scores, lo), delta));
  }
  return total;
}

Tensor rank_contrastive_loss(const Tensor& scores, const std::vector<int>& ranks, const Mask& clip_mask,
                             const Tensor* neg_scores, const Mask* neg_mask, Real tau, int max_rank) {
  const std::size_t L = scores.numel();
  if (ranks.size() != L || clip_mask.size() != L) {
    throw ShapeError("rank_contrastive_loss: ranks/mask length differs from scores");
  }
  Tensor z = scores;
  Mask valid = clip_mask;
  std::vector<int> all_ranks = ranks;
  if (neg_scores) {
    const std::size_t M = neg_scores->numel();
    if (!neg_mask || neg_mask->size() != M) throw MaskError("rank_contrastive_loss: negative mask missing or sized wrong");
    z = concat({scores, *neg_scores});
    valid.insert(valid.end(), neg_mask->begin(), neg_mask->end());
    all_ranks.insert(all_ranks.end(), M, -1);
  }
  z = scale(z, Real(1) / tau);
  Tensor total = zero_scalar();
  for (int r = 1; r <= max_rank; ++r) {
    Mask pos(valid.size(), 0);
    bool any = false;
    for (std::size_t i = 0; i < valid.size(); ++i) {
      if (valid[i] && all_ranks[i] >= r) {
        pos[i] = 1;
        any = true;
      }
    }
    if (!any) continue;
    total = add(total, sub(logsumexp(z, &valid), logsumexp(z, &pos)));
  }
  return total;
}

Tensor negative_pair_loss(const Tensor& neg_scores, const Mask& mask) {
  const std::size_t n = neg_scores.numel();
  if (mask.size() != n) throw MaskError("negative_pair_loss: mask length differs from scores");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i]) idx.push_back(i);
  }
  if (idx.empty()) return zero_scalar();
  // −log(1 − σ(S)) = log(1 + e^S)
  return mean(log1p_exp(gather(neg_scores, idx)));
}

Tensor total_loss(const LossParts& parts, const LossWeights& w) {
  const Tensor hl = add(scale(parts.margin, w.lambda_margin), scale(parts.cont, w.lambda_cont));
  return add(add(hl, parts.mr), scale(parts.neg, w.lambda_neg));
}

SampleLoss sample_loss(const ModelOutput& out, const Tensor* neg_saliency, const SampleTargets& target,
                       const LossWeights& w, std::mt19937_64& rng) {
  SampleLoss res;
  Tensor mr = zero_scalar();
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    const auto& layer = out.layers[l];
    const MatchResult match = hungarian_match(layer, target.gts, w);
    const MomentLossParts parts = moment_loss(layer, match, target.gts, w);
    mr = add(mr, parts.total);
    if (l + 1 == out.layers.size()) {
      res.l1 = parts.l1.item();
      res.giou = parts.giou.item();
      res.ce = parts.ce.item();
    }
  }
  res.parts.mr = mr;
  res.parts.margin = margin_loss(out.saliency, target.clip_ranks, target.clip_mask, w.margin_delta, rng);
  const Mask* neg_mask = neg_saliency ? &target.clip_mask : nullptr;
  res.parts.cont = rank_contrastive_loss(out.saliency, target.clip_ranks, target.clip_mask, neg_saliency, neg_mask,
                                         w.tau, w.max_rank);
  res.parts.neg = neg_saliency ? negative_pair_loss(*neg_saliency, target.clip_mask) : zero_scalar();
  res.total = total_loss(res.parts, w);
  return res;
}

}  // namespace qd
