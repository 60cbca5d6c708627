#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "qddetr/data.hpp"
#include "qddetr/metrics.hpp"
#include "reference.hpp"

using namespace qd;
using qdref::reference_ap;
using qdref::reference_iou;
using qdref::reference_window_ap;

namespace {

Prediction one_window(const std::string& qid, double s, double e) {
  Prediction p;
  p.qid = qid;
  p.windows.push_back({s, e, 1.0});
  return p;
}

GroundTruth gt(const std::string& qid, std::vector<std::array<double, 2>> w) {
  GroundTruth g;
  g.qid = qid;
  g.duration = 150;
  g.windows = std::move(w);
  return g;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("temporal IoU examples") {
  CHECK(temporal_iou(2, 8, 2, 8) == 1);
  CHECK(temporal_iou(0, 1, 2, 3) == 0);
  CHECK(std::abs(temporal_iou(0, 10, 5, 15) - 1.0 / 3) < 1e-6);
  CHECK(temporal_iou(3, 3, 3, 3) == 0);
}

TEST_CASE("recall at 1 examples") {
  const std::vector<GroundTruth> gts = {gt("a", {{0, 10}}), gt("b", {{20, 30}})};
  CHECK(recall_at_1({one_window("a", 0, 10), one_window("b", 20, 30)}, gts, 0.7) == 1.0);
  CHECK(recall_at_1({one_window("a", 50, 60), one_window("b", 70, 80)}, gts, 0.5) == 0.0);
  CHECK(recall_at_1({one_window("a", 0, 10), one_window("b", 70, 80)}, gts, 0.5) == 0.5);
  // theta = 0 counts any overlap
  CHECK(recall_at_1({one_window("a", 9, 40), one_window("b", 29, 31)}, gts, 0) == 1.0);
}

TEST_CASE("window AP examples") {
  const std::vector<std::array<double, 2>> g = {{0, 10}};
  CHECK(average_precision({{0, 10, 0.9}, {30, 40, 0.1}}, g, 0.5) == 1.0);
  CHECK(average_precision({{30, 40, 0.9}, {0, 10, 0.1}}, g, 0.5) == 0.5);
  // A GT is matched once only.
  CHECK(average_precision({{0, 10, 0.9}, {0, 10, 0.8}}, g, 0.5) == 1.0);
}

TEST_CASE("moment mAP equals the exhaustive reference") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 100), sc(0, 1);
  std::uniform_int_distribution<int> npred(1, 8), ngt(1, 3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<Prediction> preds;
    std::vector<GroundTruth> gts;
    std::vector<double> expect(map_thresholds().size(), 0.0);
    for (int q = 0; q < 3; ++q) {
      Prediction p;
      p.qid = std::to_string(q);
      const int np = npred(rng);
      for (int i = 0; i < np; ++i) {
        double a = u(rng), b = u(rng);
        if (a > b) std::swap(a, b);
        // coarse scores so ties occur
        p.windows.push_back({a, b + 1, trial % 3 == 0 ? std::round(sc(rng) * 3) : sc(rng)});
      }
      GroundTruth g;
      g.qid = p.qid;
      const int ng = ngt(rng);
      for (int j = 0; j < ng; ++j) {
        double a = u(rng), b = u(rng);
        if (a > b) std::swap(a, b);
        g.windows.push_back({a, b + 1});
      }
      // Reuse some GT windows as predictions so matches happen.
      if (trial % 2 == 0) p.windows.push_back({g.windows[0][0], g.windows[0][1], sc(rng)});
      const auto th = map_thresholds();
      for (std::size_t t = 0; t < th.size(); ++t) {
        const double mine = average_precision(p.windows, g.windows, th[t]);
        const double ref = reference_window_ap(p.windows, g.windows, th[t]);
        CHECK(std::abs(mine - ref) < 1e-9);
        expect[t] += ref / 3;
      }
      preds.push_back(p);
      gts.push_back(g);
    }
    const auto m = moment_map(preds, gts, map_thresholds());
    double avg = 0;
    for (std::size_t t = 0; t < expect.size(); ++t) {
      CHECK(std::abs(m.at(map_thresholds()[t]) - expect[t]) < 1e-9);
      avg += expect[t] / double(expect.size());
    }
    CHECK(std::abs(m.at(-1) - avg) < 1e-9);
  }
}

TEST_CASE("highlight metric examples") {
  auto hs = highlight_metrics({0.1, 0.9, 0.8, 0.2}, {{0, 3, 4, 1}});
  CHECK(hs.hd_map == 1.0);
  CHECK(hs.hit_at_1 == 1.0);
  CHECK(reference_ap({true, true, false, false}, 2) == 1.0);

  hs = highlight_metrics({0.9, 0.1, 0.8}, {{0, 4, 4}, {4, 4, 0}});
  CHECK(hs.hit_at_1 == 0.5);

  // Annotator without positives: skipped for AP, counted for HIT@1.
  hs = highlight_metrics({0.9, 0.1}, {{4, 0}, {0, 0}});
  CHECK(hs.hd_map == 1.0);
  CHECK(hs.hit_at_1 == 0.5);
  CHECK(highlight_metrics({0.9, 0.1}, {{0, 0}}).has_ap == false);
}

TEST_CASE("highlight AP equals the exhaustive reference") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> lab(0, 4), len(1, 8);
  std::uniform_real_distribution<double> sc(0, 1);
  for (int trial = 0; trial < 500; ++trial) {
    const int L = len(rng);
    std::vector<double> s(L);
    for (auto& v : s) v = trial % 4 == 0 ? std::round(sc(rng) * 2) : sc(rng);
    std::vector<std::vector<int>> labels(3, std::vector<int>(L));
    for (auto& row : labels)
      for (auto& v : row) v = lab(rng);

    std::vector<std::size_t> order(L);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return s[a] > s[b]; });
    double ap = 0, hit = 0;
    int with_pos = 0;
    for (const auto& row : labels) {
      std::vector<bool> hits;
      std::size_t npos = 0;
      for (auto i : order) {
        hits.push_back(row[i] >= 3);
        npos += row[i] >= 3;
      }
      hit += hits[0];
      if (npos) {
        ap += reference_ap(hits, npos);
        ++with_pos;
      }
    }
    const auto hs = highlight_metrics(s, labels);
    CHECK(std::abs(hs.hit_at_1 - hit / 3) < 1e-12);
    if (with_pos) CHECK(std::abs(hs.hd_map - ap / with_pos) < 1e-9);
  }
}

TEST_CASE("metrics depend only on score ranks") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> sc(-2, 2);
  std::uniform_int_distribution<int> lab(0, 4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(10), t(10);
    std::vector<std::vector<int>> labels(2, std::vector<int>(10));
    for (auto& row : labels)
      for (auto& v : row) v = lab(rng);
    for (int i = 0; i < 10; ++i) {
      s[i] = sc(rng);
      t[i] = std::exp(3 * s[i]) + 5;
    }
    const auto a = highlight_metrics(s, labels), b = highlight_metrics(t, labels);
    CHECK(a.hd_map == b.hd_map);
    CHECK(a.hit_at_1 == b.hit_at_1);

    std::vector<ScoredWindow> w, v;
    for (int i = 0; i < 6; ++i) {
      const double st = i * 10 + sc(rng);
      w.push_back({st, st + 12, s[i]});
      v.push_back({st, st + 12, std::atan(s[i]) - 1});
    }
    const std::vector<std::array<double, 2>> g = {{8, 20}, {30, 45}};
    CHECK(average_precision(w, g, 0.5) == average_precision(v, g, 0.5));
  }
}

TEST_CASE("evaluation report") {
  std::vector<Prediction> preds = {one_window("a", 0, 10), one_window("b", 20, 30)};
  preds[0].saliency = {0.9, 0.1};
  preds[1].saliency = {0.1, 0.9};
  std::vector<GroundTruth> gts = {gt("a", {{0, 10}}), gt("b", {{20, 30}})};
  gts[0].labels = {{4, 0}};
  gts[1].labels = {{0, 4}};
  const EvalReport rep = evaluate_predictions(preds, gts);
  CHECK(rep.r1_at.at(0.5) == 1);
  CHECK(rep.r1_at.at(0.7) == 1);
  CHECK(rep.map_avg == 1);
  CHECK(rep.hd_map == 1);
  CHECK(rep.hit_at_1 == 1);
  CHECK(rep.n_queries == 2);
  const std::string text = rep.format();
  for (const char* key : {"R1@0.5: ", "R1@0.7: ", "mAP@0.5: ", "mAP@0.75: ", "mAP-Avg: ", "HD-mAP: ", "HIT@1: "})
    CHECK(("\n" + text).find(std::string("\n") + key) != std::string::npos);
  CHECK(rep.to_json().find("\"map_avg\"") != std::string::npos);

  // Values stay in [0, 1].
  for (const auto& [k, v] : rep.map_at) {
    CHECK(v >= 0);
    CHECK(v <= 1);
  }

  CHECK_THROWS_AS(evaluate_predictions({preds[0]}, gts), DataError);
  CHECK_THROWS_AS(evaluate_predictions({preds[0], preds[0], preds[1]}, gts), DataError);
}

TEST_CASE("prediction dump round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "qd_metrics_test";
  std::filesystem::create_directories(dir);
  Prediction p;
  p.qid = "q1";
  p.vid = "v1";
  p.windows = {{1.25, 7.5, 0.875}, {0, 150, 0.1234567890123}};
  p.saliency = {0.1, -2.5, 3.25};
  save_predictions(dir / "p.jsonl", {p});
  const auto back = load_predictions(dir / "p.jsonl");
  REQUIRE(back.size() == 1);
  CHECK(back[0].qid == "q1");
  CHECK(back[0].vid == "v1");
  REQUIRE(back[0].windows.size() == 2);
  CHECK(back[0].windows[1].score == p.windows[1].score);
  CHECK(back[0].saliency == p.saliency);

  std::ofstream(dir / "bad.jsonl") << "{\"qid\": \"a\", \"pred_relevant_windows\": []}\n{oops\n";
  try {
    load_predictions(dir / "bad.jsonl");
    CHECK(false);
  } catch (const DataError& e) {
    CHECK(e.line == 2);
  }
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
