#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "qddetr/losses.hpp"
#include "qddetr/model.hpp"
#include "qddetr/tensor.hpp"

namespace qd {

// Bad or missing input data. `line` is 1-based, 0 when not line-oriented.
struct DataError : std::runtime_error {
  DataError(const std::string& what, std::size_t line = 0);
  std::size_t line;
};

// Malformed feature file; `offset` is the byte offset where reading failed.
struct FormatError : DataError {
  FormatError(const std::string& what, std::size_t offset);
  std::size_t offset;
};

struct Annotation {
  std::string qid;
  std::string query;
  std::string vid;
  Real duration = 0;
  std::vector<std::array<Real, 2>> relevant_windows;  // seconds
  std::vector<int> relevant_clip_ids;
  std::vector<std::vector<int>> saliency_scores;  // per relevant clip, per annotator (0..4)
  Real clip_len = 2;

  std::size_t num_clips() const;
  std::vector<Moment> moments() const;  // normalized by duration
  bool clip_in_moment(std::size_t clip) const;
  // Training rank per clip, -1 outside the moments. Annotator labels are
  // averaged, rounded half-up and clamped to [0, max_rank). Clips inside a
  // moment with no saliency annotation at all get max_rank - 1.
  std::vector<int> clip_ranks(int max_rank) const;
  // Raw labels [A×L], 0 for clips without a label.
  std::vector<std::vector<int>> annotator_labels() const;
};

std::vector<Annotation> parse_annotations(std::istream& in, Real clip_len = 2);
std::vector<Annotation> load_annotations(const std::filesystem::path& path, Real clip_len = 2);
std::string annotation_to_json(const Annotation& a);

// QDFT: "QDFT", u32 version 1, u32 rows, u32 cols, rows·cols f32, all little-endian.
Tensor load_feature_matrix(const std::filesystem::path& path);
void save_feature_matrix(const std::filesystem::path& path, const Tensor& m);
Tensor parse_feature_csv(std::istream& in);

struct Sample {
  std::string qid;
  std::string vid;
  Tensor video;  // [L×Dv]
  Tensor text;   // [N×Dt]
  std::vector<Moment> gts;
  std::vector<std::array<Real, 2>> windows;  // the same moments in seconds
  std::vector<int> clip_ranks;  // -1 outside the moments
  std::vector<std::vector<int>> annotator_labels;  // [A×L]
  Real duration = 0;
  Real clip_len = 2;

  std::size_t num_clips() const { return video.dim(0); }
};

Sample make_sample(const Annotation& a, Tensor video, Tensor text, int max_rank);

// Reads <root>/annotations.jsonl, <root>/features/<vid>.qdft and
// <root>/queries/<qid>.qdft (a .csv file is accepted in place of .qdft).
// When <root>/audio/ exists, <root>/audio/<vid>.qdft is appended to the video
// channels; it must have the same number of rows.
std::vector<Sample> load_dataset(const std::filesystem::path& root, int max_rank, Real clip_len = 2);
void write_dataset(const std::filesystem::path& root, const std::vector<Annotation>& anns,
                   const std::vector<Sample>& samples);

enum class NegativeMode { roll, random_derangement };

struct Batch {
  Tensor video;  // [B×L_max×Dv]
  Tensor text;   // [B×N_max×Dt]
  std::vector<Mask> video_mask;  // per sample, length L_max
  std::vector<Mask> text_mask;   // per sample, length N_max
  std::vector<SampleTargets> targets;
  std::optional<std::vector<std::size_t>> neg_text_index;  // derangement, B >= 2 only

  std::size_t size() const { return targets.size(); }
  Tensor video_of(std::size_t b) const;  // [L_max×Dv]
  Tensor text_of(std::size_t b) const;   // [N_max×Dt]
};

Batch build_batch(const std::vector<const Sample*>& samples, NegativeMode mode = NegativeMode::roll,
                  std::mt19937_64* rng = nullptr);

// (video index, text index) pairs; empty when B = 1.
std::vector<std::pair<std::size_t, std::size_t>> sample_negative_pairs(const Batch& batch);

struct SynthConfig {
  std::size_t n_train = 500;
  std::size_t n_val = 100;
  std::size_t n_clips = 32;
  std::size_t n_words = 8;
  std::size_t video_dim = 16;
  std::size_t text_dim = 16;
  std::size_t min_window = 3;   // clips
  std::size_t max_window = 8;   // clips
  bool distractor = true;       // second window planted with an unrelated prototype
  Real signal_strength = 1;
  Real video_noise = Real(0.5);
  Real text_noise = Real(0.5);
  Real clip_len = 2;
  int annotators = 3;
  std::uint64_t seed = 0;
};

struct SynthExample {
  Annotation ann;
  Sample sample;
};

struct SynthDataset {
  std::vector<SynthExample> train;
  std::vector<SynthExample> val;
};

SynthDataset synth_dataset(const SynthConfig& cfg, int max_rank = 4);

// Task-solvability oracle: scores clips by correlation with the mean word
// vector and returns the maximum-sum contiguous run of centered scores.
Moment correlation_detector(const Sample& s);

}  // namespace qd
