#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "qddetr/tensor.hpp"

namespace qd {

struct ScoredWindow {
  double start = 0;  // seconds
  double end = 0;
  double score = 0;
};

// One query's predictions, windows in descending score order.
struct Prediction {
  std::string qid;
  std::string vid;
  std::vector<ScoredWindow> windows;
  std::vector<double> saliency;  // per clip
};

struct GroundTruth {
  std::string qid;
  double duration = 0;
  std::vector<std::array<double, 2>> windows;  // seconds
  std::vector<std::vector<int>> labels;         // [annotators × clips], 0..4
};

double temporal_iou(double s1, double e1, double s2, double e2);

// Fraction of queries whose top-1 window reaches IoU >= theta with any GT.
double recall_at_1(const std::vector<Prediction>& preds, const std::vector<GroundTruth>& gts, double theta);

// Greedy one-to-one matching of the ranked windows, then all-point
// interpolated AP. Ties in score keep the given order.
double average_precision(const std::vector<ScoredWindow>& ranked, const std::vector<std::array<double, 2>>& gts,
                         double theta);

// All-point AP from a ranked list of binary hits.
double ranked_ap(const std::vector<bool>& hits, std::size_t n_positive);

std::vector<double> map_thresholds();  // 0.50, 0.55, ..., 0.95

// mAP per threshold; key -1 holds the average over map_thresholds().
std::map<double, double> moment_map(const std::vector<Prediction>& preds, const std::vector<GroundTruth>& gts,
                                    const std::vector<double>& thresholds);

struct HighlightScores {
  double hd_map = 0;
  double hit_at_1 = 0;
  bool has_ap = false;  // false when no annotator has a positive clip
};

// Clip ranking by score (ties to the lower index) against each annotator's
// labels binarized at >= positive_label; averaged over annotators.
HighlightScores highlight_metrics(const std::vector<double>& scores, const std::vector<std::vector<int>>& labels,
                                  int positive_label = 3);

struct SampleRecord {
  std::string qid;
  double top1_iou = 0;
  double hd_ap = 0;
  double hit_at_1 = 0;
};

struct EvalReport {
  std::map<double, double> r1_at;   // 0.5, 0.7
  std::map<double, double> map_at;  // 0.5, 0.75 and every averaged threshold
  double map_avg = 0;
  double hd_map = 0;
  double hit_at_1 = 0;
  std::size_t n_queries = 0;
  std::vector<SampleRecord> records;

  // The metric block, one "key: value" line each.
  std::string format() const;
  std::string to_json() const;
};

// Predictions are matched to ground truth by qid.
EvalReport evaluate_predictions(const std::vector<Prediction>& preds, const std::vector<GroundTruth>& gts);

void save_predictions(const std::filesystem::path& path, const std::vector<Prediction>& preds);
std::vector<Prediction> load_predictions(const std::filesystem::path& path);

}  // namespace qd
