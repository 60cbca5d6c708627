#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "qddetr/data.hpp"
#include "qddetr/engine.hpp"
#include "qddetr/model.hpp"

namespace qd {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitCheckpoint = 4,
};

// Entry point behind the `qddetr` binary: train | eval | predict | synth | analyze-saliency.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Settings used when training on the synthetic task (small model, larger lr).
void apply_synthetic_preset(TrainConfig& cfg);

struct SaliencyAnalysis {
  std::vector<double> positive;  // per sample: mean in-GT saliency under its own query
  std::vector<double> negative;  // same clips under the next sample's query
  double positive_mean = 0;
  double negative_mean = 0;
  double gap = 0;  // positive_mean - negative_mean
};

SaliencyAnalysis analyze_saliency(const QDDetr& model, const std::vector<Sample>& data);

struct Histogram {
  double lo = 0, hi = 1;
  std::vector<std::size_t> positive, negative;
};

Histogram saliency_histogram(const SaliencyAnalysis& a, std::size_t bins = 30);
std::string histogram_csv(const Histogram& h);
std::string histogram_svg(const Histogram& h, const SaliencyAnalysis& a);

}  // namespace qd
