#include "qddetr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "qddetr/data.hpp"

namespace qd {

using nlohmann::json;

double temporal_iou(double s1, double e1, double s2, double e2) {
  const double inter = std::max(0.0, std::min(e1, e2) - std::max(s1, s2));
  const double uni = (e1 - s1) + (e2 - s2) - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace {

double best_iou(const ScoredWindow& w, const std::vector<std::array<double, 2>>& gts) {
  double best = 0;
  for (const auto& g : gts) best = std::max(best, temporal_iou(w.start, w.end, g[0], g[1]));
  return best;
}

std::unordered_map<std::string, const Prediction*> index_predictions(const std::vector<Prediction>& preds) {
  std::unordered_map<std::string, const Prediction*> idx;
  for (const auto& p : preds) {
    if (!idx.emplace(p.qid, &p).second) throw DataError("duplicate prediction for qid " + p.qid);
  }
  return idx;
}

const Prediction& find_prediction(const std::unordered_map<std::string, const Prediction*>& idx,
                                  const std::string& qid) {
  auto it = idx.find(qid);
  if (it == idx.end()) throw DataError("no prediction for qid " + qid);
  return *it->second;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string threshold_key(double t) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%g", t);
  return buf;
}

}  // namespace

double recall_at_1(const std::vector<Prediction>& preds, const std::vector<GroundTruth>& gts, double theta) {
  const auto idx = index_predictions(preds);
  std::size_t n = 0, hits = 0;
  for (const auto& g : gts) {
    if (g.windows.empty()) continue;
    ++n;
    const auto& p = find_prediction(idx, g.qid);
    if (p.windows.empty()) continue;
    const double iou = best_iou(p.windows.front(), g.windows);
    if (theta <= 0 ? iou > 0 : iou >= theta) ++hits;
  }
  return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
}

double ranked_ap(const std::vector<bool>& hits, std::size_t n_positive) {
  if (n_positive == 0) return 0.0;
  const std::size_t n = hits.size();
  std::vector<double> prec(n);
  std::size_t tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tp += hits[k] ? 1 : 0;
    prec[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  // Precision envelope: best precision at this recall or beyond.
  for (std::size_t k = n; k-- > 1;) prec[k - 1] = std::max(prec[k - 1], prec[k]);
  double ap = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (hits[k]) ap += prec[k];
  }
  return ap / static_cast<double>(n_positive);
}

double average_precision(const std::vector<ScoredWindow>& ranked, const std::vector<std::array<double, 2>>& gts,
                         double theta) {
  std::vector<std::size_t> order(ranked.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return ranked[a].score > ranked[b].score; });
  std::vector<bool> used(gts.size(), false);
  std::vector<bool> hits;
  hits.reserve(ranked.size());
  for (std::size_t i : order) {
    const auto& w = ranked[i];
    double best = -1;
    std::size_t best_j = gts.size();
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[j]) continue;
      const double iou = temporal_iou(w.start, w.end, gts[j][0], gts[j][1]);
      if (iou > best) {
        best = iou;
        best_j = j;
      }
    }
    const bool hit = best_j < gts.size() && best >= theta;
    if (hit) used[best_j] = true;
    hits.push_back(hit);
  }
  return ranked_ap(hits, gts.size());
}

std::vector<double> map_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

std::map<double, double> moment_map(const std::vector<Prediction>& preds, const std::vector<GroundTruth>& gts,
                                    const std::vector<double>& thresholds) {
  const auto idx = index_predictions(preds);
  std::map<double, double> out;
  std::size_t n = 0;
  for (double t : thresholds) out[t] = 0;
  for (const auto& g : gts) {
    if (g.windows.empty()) continue;
    ++n;
    const auto& p = find_prediction(idx, g.qid);
    for (double t : thresholds) out[t] += average_precision(p.windows, g.windows, t);
  }
  double avg = 0;
  for (double t : thresholds) {
    if (n) out[t] /= static_cast<double>(n);
    avg += out[t];
  }
  out[-1] = thresholds.empty() ? 0.0 : avg / static_cast<double>(thresholds.size());
  return out;
}

HighlightScores highlight_metrics(const std::vector<double>& scores, const std::vector<std::vector<int>>& labels,
                                  int positive_label) {
  HighlightScores out;
  if (labels.empty()) return out;
  const std::size_t L = scores.size();
  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap_sum = 0, hit_sum = 0;
  std::size_t ap_n = 0;
  for (const auto& ann : labels) {
    if (ann.size() != L) throw ShapeError("highlight_metrics: label row length differs from scores");
    std::vector<bool> hits(L);
    std::size_t npos = 0;
    for (std::size_t k = 0; k < L; ++k) {
      hits[k] = ann[order[k]] >= positive_label;
      npos += hits[k] ? 1 : 0;
    }
    hit_sum += (L > 0 && hits[0]) ? 1.0 : 0.0;
    if (npos > 0) {
      ap_sum += ranked_ap(hits, npos);
      ++ap_n;
    }
  }
  out.hit_at_1 = hit_sum / static_cast<double>(labels.size());
  out.has_ap = ap_n > 0;
  out.hd_map = ap_n ? ap_sum / static_cast<double>(ap_n) : 0.0;
  return out;
}

std::string EvalReport::format() const {
  std::ostringstream os;
  auto get = [](const std::map<double, double>& m, double k) {
    auto it = m.find(k);
    return it == m.end() ? 0.0 : it->second;
  };
  os << "R1@0.5: " << fmt(get(r1_at, 0.5)) << '\n';
  os << "R1@0.7: " << fmt(get(r1_at, 0.7)) << '\n';
  os << "mAP@0.5: " << fmt(get(map_at, 0.5)) << '\n';
  os << "mAP@0.75: " << fmt(get(map_at, 0.75)) << '\n';
  os << "mAP-Avg: " << fmt(map_avg) << '\n';
  os << "HD-mAP: " << fmt(hd_map) << '\n';
  os << "HIT@1: " << fmt(hit_at_1) << '\n';
  return os.str();
}

std::string EvalReport::to_json() const {
  json j;
  for (const auto& [t, v] : r1_at) j["r1_at"][threshold_key(t)] = v;
  for (const auto& [t, v] : map_at) j["map_at"][threshold_key(t)] = v;
  j["map_avg"] = map_avg;
  j["hd_map"] = hd_map;
  j["hit_at_1"] = hit_at_1;
  j["n_queries"] = n_queries;
  j["records"] = json::array();
  for (const auto& r : records) {
    j["records"].push_back({{"qid", r.qid}, {"top1_iou", r.top1_iou}, {"hd_ap", r.hd_ap}, {"hit_at_1", r.hit_at_1}});
  }
  return j.dump(2);
}

EvalReport evaluate_predictions(const std::vector<Prediction>& preds, const std::vector<GroundTruth>& gts) {
  EvalReport rep;
  rep.r1_at[0.5] = recall_at_1(preds, gts, 0.5);
  rep.r1_at[0.7] = recall_at_1(preds, gts, 0.7);
  auto thresholds = map_thresholds();
  auto m = moment_map(preds, gts, thresholds);
  rep.map_avg = m[-1];
  m.erase(-1);
  rep.map_at = std::move(m);

  const auto idx = index_predictions(preds);
  double hd_sum = 0, hit_sum = 0;
  std::size_t hd_n = 0, hit_n = 0;
  for (const auto& g : gts) {
    const auto& p = find_prediction(idx, g.qid);
    SampleRecord rec;
    rec.qid = g.qid;
    if (!p.windows.empty() && !g.windows.empty()) rec.top1_iou = best_iou(p.windows.front(), g.windows);
    if (!g.labels.empty()) {
      const auto hs = highlight_metrics(p.saliency, g.labels);
      rec.hd_ap = hs.hd_map;
      rec.hit_at_1 = hs.hit_at_1;
      hit_sum += hs.hit_at_1;
      ++hit_n;
      if (hs.has_ap) {
        hd_sum += hs.hd_map;
        ++hd_n;
      }
    }
    rep.records.push_back(rec);
  }
  rep.hd_map = hd_n ? hd_sum / static_cast<double>(hd_n) : 0.0;
  rep.hit_at_1 = hit_n ? hit_sum / static_cast<double>(hit_n) : 0.0;
  rep.n_queries = gts.size();
  return rep;
}

void save_predictions(const std::filesystem::path& path, const std::vector<Prediction>& preds) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write predictions to " + path.string());
  for (const auto& p : preds) {
    json j;
    j["qid"] = p.qid;
    j["vid"] = p.vid;
    j["pred_relevant_windows"] = json::array();
    for (const auto& w : p.windows) j["pred_relevant_windows"].push_back({w.start, w.end, w.score});
    j["pred_saliency_scores"] = p.saliency;
    os << j.dump() << '\n';
  }
}

std::vector<Prediction> load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open predictions file " + path.string());
  std::vector<Prediction> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(text);
      Prediction p;
      p.qid = j.at("qid").is_string() ? j.at("qid").get<std::string>() : std::to_string(j.at("qid").get<long long>());
      if (j.contains("vid")) p.vid = j["vid"].is_string() ? j["vid"].get<std::string>() : j["vid"].dump();
      for (const auto& w : j.at("pred_relevant_windows")) {
        p.windows.push_back({w.at(0).get<double>(), w.at(1).get<double>(), w.at(2).get<double>()});
      }
      if (j.contains("pred_saliency_scores")) p.saliency = j["pred_saliency_scores"].get<std::vector<double>>();
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw DataError(path.string() + ": " + e.what(), line);
    }
  }
  return out;
}

}  // namespace qd
