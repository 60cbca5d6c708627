#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qddetr/data.hpp"
#include "qddetr/losses.hpp"
#include "qddetr/metrics.hpp"
#include "qddetr/model.hpp"

namespace qd {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Raised when a training step produces a non-finite loss.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  Real lr = Real(1e-4);
  std::size_t lr_drop = 0;  // epoch from which lr is scaled by 0.1; 0 keeps it constant
  Real weight_decay = Real(1e-4);
  Real grad_clip_norm = Real(0.1);
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  NegativeMode neg_mode = NegativeMode::roll;
  LossWeights loss;
  ModelConfig model;
  // Data source.
  std::string data_root;
  std::string out_dir = "runs";
  bool synthetic = false;
  SynthConfig synth;

  void validate() const;  // throws ConfigError naming the field
};

// Sets one field from its flat-file key. Throws ConfigError for unknown keys
// or unparsable values.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();
// Parses `key = value` lines; '#' starts a comment; optional quotes around values.
void apply_config_text(TrainConfig& cfg, const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string config_to_text(const TrainConfig& cfg);
// Rebuilds a ModelConfig from ModelConfig::canonical().
ModelConfig parse_model_canonical(const std::string& canonical);

struct AdamConfig {
  Real lr = Real(1e-4);
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
  Real weight_decay = Real(1e-4);
};

struct AdamState {
  std::uint64_t t = 0;
  std::vector<std::vector<Real>> m, v;
};

// Adam with bias correction; weight decay is decoupled (p -= lr·wd·p).
void adam_step(const std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg);

// Scales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
Real clip_grad_norm(const std::vector<Tensor>& params, Real max_norm);

struct StepStats {
  Real total = 0, mr = 0, margin = 0, cont = 0, neg = 0;
  Real l1 = 0, giou = 0, ce = 0;
  Real grad_norm = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  std::size_t steps = 0;
  StepStats mean;
};

// Counter-based seed mixing (splitmix64 over the inputs).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

class Trainer {
 public:
  Trainer(QDDetr& model, TrainConfig cfg);

  // One optimizer step on the next batch of the current epoch's order.
  StepStats step(const std::vector<Sample>& data);
  EpochStats train_epoch(const std::vector<Sample>& data);
  // Forward + loss for one batch without touching parameters.
  StepStats compute_loss(const Batch& batch, std::uint64_t step_id, bool do_backward);

  std::size_t epoch() const { return epoch_; }
  std::size_t cursor() const { return cursor_; }
  std::uint64_t global_step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  QDDetr& model() { return model_; }
  AdamState& optimizer_state() { return adam_; }
  void set_position(std::size_t epoch, std::size_t cursor, std::uint64_t step);
  Real current_lr() const;

  std::vector<std::size_t> epoch_order(std::size_t n, std::size_t epoch) const;

 private:
  QDDetr& model_;
  TrainConfig cfg_;
  AdamState adam_;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;  // batches already consumed this epoch
  std::uint64_t step_ = 0;
};

// Deterministic inference. Windows are ranked by foreground probability and
// reported in seconds, clamped to [0, duration].
Prediction predict_sample(const QDDetr& model, const Sample& s);
std::vector<Prediction> predict(const QDDetr& model, const std::vector<Sample>& data);
GroundTruth ground_truth(const Sample& s);
std::vector<GroundTruth> ground_truths(const std::vector<Sample>& data);
EvalReport evaluate(const QDDetr& model, const std::vector<Sample>& data);

struct CheckpointMeta {
  std::size_t epoch = 0;
  std::size_t cursor = 0;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::string model_canonical;
  std::string train_config;  // config_to_text of the run
};

void save_checkpoint(const std::filesystem::path& path, const QDDetr& model, const AdamState& adam,
                     const CheckpointMeta& meta);
// Reads the header only.
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);
// Restores parameters (and optimizer state when `adam` is non-null). Rejects
// files whose model configuration hash differs from `model`'s.
CheckpointMeta load_checkpoint(const std::filesystem::path& path, QDDetr& model, AdamState* adam);

void save_trainer(const std::filesystem::path& path, Trainer& trainer);
void load_trainer(const std::filesystem::path& path, Trainer& trainer);

}  // namespace qd
