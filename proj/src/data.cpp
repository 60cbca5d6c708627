#include "qddetr/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace qd {

using nlohmann::json;

namespace {

std::string located(const std::string& what, std::size_t line) {
  return line ? "line " + std::to_string(line) + ": " + what : what;
}

Real number_field(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw DataError(std::string("missing key '") + key + "'", line);
  if (!it->is_number()) throw DataError(std::string("key '") + key + "' must be a number", line);
  return it->get<Real>();
}

std::string id_field(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw DataError(std::string("missing key '") + key + "'", line);
  if (it->is_string()) return it->get<std::string>();
  if (it->is_number_integer()) return std::to_string(it->get<long long>());
  throw DataError(std::string("key '") + key + "' must be a string or integer", line);
}

Annotation parse_line(const json& obj, std::size_t line, Real clip_len) {
  if (!obj.is_object()) throw DataError("expected a JSON object", line);
  Annotation a;
  a.clip_len = clip_len;
  a.qid = id_field(obj, "qid", line);
  a.vid = id_field(obj, "vid", line);
  auto q = obj.find("query");
  if (q == obj.end() || !q->is_string()) throw DataError("missing or non-string 'query'", line);
  a.query = q->get<std::string>();
  a.duration = number_field(obj, "duration", line);
  if (!(a.duration > 0) || !std::isfinite(a.duration)) throw DataError("duration must be positive", line);

  if (auto w = obj.find("relevant_windows"); w != obj.end()) {
    if (!w->is_array()) throw DataError("'relevant_windows' must be an array", line);
    for (const auto& win : *w) {
      if (!win.is_array() || win.size() != 2 || !win[0].is_number() || !win[1].is_number()) {
        throw DataError("each relevant window must be [start, end]", line);
      }
      const Real s = win[0].get<Real>(), e = win[1].get<Real>();
      if (!(s < e)) {
        throw DataError("window [" + std::to_string(s) + ", " + std::to_string(e) + "] has start >= end", line);
      }
      if (s < 0 || e > a.duration) {
        throw DataError("window [" + std::to_string(s) + ", " + std::to_string(e) + "] outside duration " +
                            std::to_string(a.duration),
                        line);
      }
      a.relevant_windows.push_back({s, e});
    }
  }
  if (auto ids = obj.find("relevant_clip_ids"); ids != obj.end()) {
    if (!ids->is_array()) throw DataError("'relevant_clip_ids' must be an array", line);
    for (const auto& v : *ids) {
      if (!v.is_number_integer()) throw DataError("clip ids must be integers", line);
      const long long id = v.get<long long>();
      if (id < 0 || static_cast<std::size_t>(id) >= a.num_clips()) {
        throw DataError("clip id " + std::to_string(id) + " outside [0, " + std::to_string(a.num_clips()) + ")",
                        line);
      }
      if (!a.clip_in_moment(static_cast<std::size_t>(id))) {
        throw DataError("clip id " + std::to_string(id) + " not covered by any relevant window", line);
      }
      a.relevant_clip_ids.push_back(static_cast<int>(id));
    }
  }
  if (auto sc = obj.find("saliency_scores"); sc != obj.end()) {
    if (!sc->is_array()) throw DataError("'saliency_scores' must be an array", line);
    for (const auto& row : *sc) {
      std::vector<int> labels;
      const auto push = [&](const json& v) {
        if (!v.is_number_integer() || v.get<int>() < 0 || v.get<int>() > 4) {
          throw DataError("saliency labels must be integers in [0, 4]", line);
        }
        labels.push_back(v.get<int>());
      };
      if (row.is_array()) {
        for (const auto& v : row) push(v);
      } else {
        push(row);
      }
      if (!a.saliency_scores.empty() && labels.size() != a.saliency_scores.front().size()) {
        throw DataError("saliency rows have differing annotator counts", line);
      }
      a.saliency_scores.push_back(std::move(labels));
    }
    if (a.saliency_scores.size() != a.relevant_clip_ids.size()) {
      throw DataError("saliency_scores has " + std::to_string(a.saliency_scores.size()) + " rows for " +
                          std::to_string(a.relevant_clip_ids.size()) + " relevant clips",
                      line);
    }
  }
  return a;
}

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::filesystem::path feature_path(const std::filesystem::path& dir, const std::string& stem) {
  auto p = dir / (stem + ".qdft");
  if (std::filesystem::exists(p)) return p;
  auto csv = dir / (stem + ".csv");
  if (std::filesystem::exists(csv)) return csv;
  return p;
}

std::vector<Real> normal_vector(std::mt19937_64& rng, std::size_t n, Real stddev) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<Real> v(n);
  for (auto& x : v) x = static_cast<Real>(nd(rng)) * stddev;
  return v;
}

}  // namespace

DataError::DataError(const std::string& what, std::size_t line_)
    : std::runtime_error(located(what, line_)), line(line_) {}

FormatError::FormatError(const std::string& what, std::size_t offset_)
    : DataError(what + " (byte offset " + std::to_string(offset_) + ")"), offset(offset_) {}

// ---- annotations -------------------------------------------------------------

std::size_t Annotation::num_clips() const {
  return static_cast<std::size_t>(std::ceil(duration / clip_len - Real(1e-9)));
}

std::vector<Moment> Annotation::moments() const {
  std::vector<Moment> out;
  for (const auto& w : relevant_windows) out.push_back(Moment::from_interval(w[0] / duration, w[1] / duration));
  return out;
}

bool Annotation::clip_in_moment(std::size_t clip) const {
  const Real s = static_cast<Real>(clip) * clip_len;
  const Real e = s + clip_len;
  for (const auto& w : relevant_windows) {
    if (std::min(e, w[1]) - std::max(s, w[0]) > 0) return true;
  }
  return false;
}

std::vector<int> Annotation::clip_ranks(int max_rank) const {
  const std::size_t L = num_clips();
  std::vector<int> ranks(L, -1);
  const bool labelled = !saliency_scores.empty();
  for (std::size_t i = 0; i < L; ++i) {
    if (clip_in_moment(i)) ranks[i] = labelled ? 0 : max_rank - 1;
  }
  for (std::size_t k = 0; k < relevant_clip_ids.size() && k < saliency_scores.size(); ++k) {
    const auto& labels = saliency_scores[k];
    if (labels.empty()) continue;
    const double m = std::accumulate(labels.begin(), labels.end(), 0.0) / static_cast<double>(labels.size());
    const int r = static_cast<int>(std::floor(m + 0.5));
    ranks[static_cast<std::size_t>(relevant_clip_ids[k])] = std::clamp(r, 0, max_rank - 1);
  }
  return ranks;
}

std::vector<std::vector<int>> Annotation::annotator_labels() const {
  const std::size_t L = num_clips();
  const std::size_t A = saliency_scores.empty() ? 0 : saliency_scores.front().size();
  std::vector<std::vector<int>> out(A, std::vector<int>(L, 0));
  for (std::size_t k = 0; k < relevant_clip_ids.size() && k < saliency_scores.size(); ++k) {
    for (std::size_t a = 0; a < A; ++a) out[a][static_cast<std::size_t>(relevant_clip_ids[k])] = saliency_scores[k][a];
  }
  return out;
}

std::vector<Annotation> parse_annotations(std::istream& in, Real clip_len) {
  if (!(clip_len > 0)) throw ContractError("clip_len must be positive");
  std::vector<Annotation> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::parse_error& e) {
      throw DataError(std::string("malformed JSON: ") + e.what(), line);
    }
    out.push_back(parse_line(obj, line, clip_len));
  }
  return out;
}

std::vector<Annotation> load_annotations(const std::filesystem::path& path, Real clip_len) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotations file " + path.string());
  try {
    return parse_annotations(in, clip_len);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what(), e.line);
  }
}

std::string annotation_to_json(const Annotation& a) {
  json j;
  j["qid"] = a.qid;
  j["query"] = a.query;
  j["vid"] = a.vid;
  j["duration"] = a.duration;
  j["relevant_windows"] = json::array();
  for (const auto& w : a.relevant_windows) j["relevant_windows"].push_back({w[0], w[1]});
  j["relevant_clip_ids"] = a.relevant_clip_ids;
  j["saliency_scores"] = a.saliency_scores;
  return j.dump();
}

// ---- feature files -----------------------------------------------------------

Tensor load_feature_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path.string());
  if (path.extension() == ".csv") return parse_feature_csv(in);

  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto fail = [&](const std::string& what, std::size_t off) {
    throw FormatError(path.string() + ": " + what, off);
  };
  if (bytes.size() < 4) fail("truncated header", bytes.size());
  if (std::memcmp(bytes.data(), "QDFT", 4) != 0) fail("bad magic, expected QDFT", 0);
  if (bytes.size() < 16) fail("truncated header", bytes.size());
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != 1) fail("unsupported version " + std::to_string(version), 4);
  const std::size_t rows = get_u32(bytes.data() + 8);
  const std::size_t cols = get_u32(bytes.data() + 12);
  const std::size_t need = 16 + rows * cols * 4;
  if (bytes.size() < need) fail("truncated data: need " + std::to_string(need) + " bytes", bytes.size());
  if (bytes.size() > need) fail("trailing bytes after data", need);
  std::vector<Real> values(rows * cols);
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = static_cast<Real>(std::bit_cast<float>(get_u32(bytes.data() + 16 + 4 * i)));
  }
  return Tensor::from({rows, cols}, std::move(values));
}

void save_feature_matrix(const std::filesystem::path& path, const Tensor& m) {
  if (m.rank() != 2) throw ShapeError("save_feature_matrix: expected a matrix, got " + shape_str(m.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write feature file " + path.string());
  os.write("QDFT", 4);
  put_u32(os, 1);
  put_u32(os, static_cast<std::uint32_t>(m.dim(0)));
  put_u32(os, static_cast<std::uint32_t>(m.dim(1)));
  for (Real v : m.data()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!os) throw DataError("write failed for " + path.string());
}

Tensor parse_feature_csv(std::istream& in) {
  std::vector<Real> values;
  std::size_t cols = 0, rows = 0, offset = 0;
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::size_t n = 0, pos = 0;
    while (pos <= line.size()) {
      const std::size_t comma = std::min(line.find(',', pos), line.size());
      const std::string cell = line.substr(pos, comma - pos);
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || cell.find_first_not_of(" \t", used) != std::string::npos) {
        throw FormatError("csv: non-numeric cell '" + cell + "'", line_start + pos);
      }
      values.push_back(static_cast<Real>(v));
      ++n;
      pos = comma + 1;
    }
    if (rows == 0) cols = n;
    if (n != cols) throw FormatError("csv: row " + std::to_string(rows + 1) + " has " + std::to_string(n) +
                                         " columns, expected " + std::to_string(cols),
                                     line_start);
    ++rows;
  }
  return Tensor::from({rows, cols}, std::move(values));
}

// ---- samples -----------------------------------------------------------------

Sample make_sample(const Annotation& a, Tensor video, Tensor text, int max_rank) {
  if (video.rank() != 2 || text.rank() != 2) throw DataError("features for " + a.qid + " must be matrices");
  const std::size_t L = a.num_clips();
  if (video.dim(0) != L) {
    throw DataError("video " + a.vid + " has " + std::to_string(video.dim(0)) + " clips, annotation implies " +
                    std::to_string(L));
  }
  if (text.dim(0) == 0) throw DataError("query " + a.qid + " has no text tokens");
  Sample s;
  s.qid = a.qid;
  s.vid = a.vid;
  s.video = std::move(video);
  s.text = std::move(text);
  s.gts = a.moments();
  s.windows = a.relevant_windows;
  s.clip_ranks = a.clip_ranks(max_rank);
  s.annotator_labels = a.annotator_labels();
  s.duration = a.duration;
  s.clip_len = a.clip_len;
  return s;
}

std::vector<Sample> load_dataset(const std::filesystem::path& root, int max_rank, Real clip_len) {
  const auto ann_path = root / "annotations.jsonl";
  if (!std::filesystem::exists(ann_path)) throw DataError("missing annotations file " + ann_path.string());
  const auto anns = load_annotations(ann_path, clip_len);
  // an audio/ directory switches on channel concatenation for every video
  const bool has_audio = std::filesystem::is_directory(root / "audio");
  std::vector<Sample> out;
  out.reserve(anns.size());
  for (const auto& a : anns) {
    const auto vp = feature_path(root / "features", a.vid);
    const auto tp = feature_path(root / "queries", a.qid);
    Tensor video = load_feature_matrix(vp);
    if (has_audio) {
      const Tensor audio = load_feature_matrix(feature_path(root / "audio", a.vid));
      if (audio.rank() != 2 || video.rank() != 2 || audio.dim(0) != video.dim(0)) {
        throw DataError("audio features for " + a.vid + " have " + shape_str(audio.shape()) + ", video has " +
                        shape_str(video.shape()));
      }
      NoGradGuard ng;
      video = concat_cols({video, audio});
    }
    out.push_back(make_sample(a, std::move(video), load_feature_matrix(tp), max_rank));
  }
  return out;
}

void write_dataset(const std::filesystem::path& root, const std::vector<Annotation>& anns,
                   const std::vector<Sample>& samples) {
  if (anns.size() != samples.size()) throw ContractError("write_dataset: annotation/sample count mismatch");
  std::filesystem::create_directories(root / "features");
  std::filesystem::create_directories(root / "queries");
  std::ofstream os(root / "annotations.jsonl");
  if (!os) throw DataError("cannot write " + (root / "annotations.jsonl").string());
  for (std::size_t i = 0; i < anns.size(); ++i) {
    os << annotation_to_json(anns[i]) << '\n';
    save_feature_matrix(root / "features" / (anns[i].vid + ".qdft"), samples[i].video);
    save_feature_matrix(root / "queries" / (anns[i].qid + ".qdft"), samples[i].text);
  }
}

// ---- batching ----------------------------------------------------------------

Tensor Batch::video_of(std::size_t b) const {
  const std::size_t L = video.dim(1), D = video.dim(2);
  auto src = video.data().subspan(b * L * D, L * D);
  return Tensor::from({L, D}, std::vector<Real>(src.begin(), src.end()));
}

Tensor Batch::text_of(std::size_t b) const {
  const std::size_t N = text.dim(1), D = text.dim(2);
  auto src = text.data().subspan(b * N * D, N * D);
  return Tensor::from({N, D}, std::vector<Real>(src.begin(), src.end()));
}

Batch build_batch(const std::vector<const Sample*>& samples, NegativeMode mode, std::mt19937_64* rng) {
  if (samples.empty()) throw ContractError("build_batch: empty batch");
  const std::size_t B = samples.size();
  const std::size_t Dv = samples.front()->video.dim(1), Dt = samples.front()->text.dim(1);
  std::size_t Lmax = 0, Nmax = 0;
  for (const Sample* s : samples) {
    if (s->video.dim(1) != Dv || s->text.dim(1) != Dt) throw DataError("build_batch: inconsistent feature widths");
    Lmax = std::max(Lmax, s->video.dim(0));
    Nmax = std::max(Nmax, s->text.dim(0));
  }
  Batch batch;
  batch.video = Tensor::zeros({B, Lmax, Dv});
  batch.text = Tensor::zeros({B, Nmax, Dt});
  auto vd = batch.video.data();
  auto td = batch.text.data();
  for (std::size_t b = 0; b < B; ++b) {
    const Sample& s = *samples[b];
    const std::size_t L = s.video.dim(0), N = s.text.dim(0);
    std::copy(s.video.data().begin(), s.video.data().end(), vd.begin() + static_cast<std::ptrdiff_t>(b * Lmax * Dv));
    std::copy(s.text.data().begin(), s.text.data().end(), td.begin() + static_cast<std::ptrdiff_t>(b * Nmax * Dt));
    Mask vm(Lmax, 0), tm(Nmax, 0);
    std::fill_n(vm.begin(), L, 1);
    std::fill_n(tm.begin(), N, 1);
    SampleTargets t;
    t.gts = s.gts;
    t.clip_ranks = s.clip_ranks;
    t.clip_ranks.resize(Lmax, -1);
    t.clip_mask = vm;
    batch.video_mask.push_back(std::move(vm));
    batch.text_mask.push_back(std::move(tm));
    batch.targets.push_back(std::move(t));
  }
  if (B >= 2) {
    std::vector<std::size_t> idx(B);
    if (mode == NegativeMode::roll || rng == nullptr) {
      for (std::size_t i = 0; i < B; ++i) idx[i] = (i + 1) % B;
    } else {
      // Sattolo's algorithm: a uniformly random single cycle, hence no fixed point.
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      for (std::size_t i = B - 1; i > 0; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(idx[i], idx[pick(*rng)]);
      }
    }
    batch.neg_text_index = std::move(idx);
  }
  return batch;
}

std::vector<std::pair<std::size_t, std::size_t>> sample_negative_pairs(const Batch& batch) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (!batch.neg_text_index) return out;
  for (std::size_t i = 0; i < batch.size(); ++i) out.emplace_back(i, (*batch.neg_text_index)[i]);
  return out;
}

// ---- synthetic planted-moment data -------------------------------------------

namespace {

SynthExample synth_one(const SynthConfig& cfg, int max_rank, std::mt19937_64& rng, const std::string& id) {
  const std::size_t L = cfg.n_clips, N = cfg.n_words, Dv = cfg.video_dim, Dt = cfg.text_dim;
  // Video and text share the leading min(Dv, Dt) coordinates of the prototype.
  const auto proto = normal_vector(rng, Dv, 1);
  const auto distract = normal_vector(rng, Dv, 1);

  std::uniform_int_distribution<std::size_t> wdist(cfg.min_window, cfg.max_window);
  const std::size_t w = std::min(wdist(rng), L);
  std::uniform_int_distribution<std::size_t> sdist(0, L - w);
  const std::size_t start = sdist(rng);

  std::size_t dstart = L, dw = 0;
  if (cfg.distractor) {
    dw = std::min(wdist(rng), L);
    std::vector<std::size_t> options;
    for (std::size_t s = 0; s + dw <= L; ++s) {
      if (s + dw <= start || s >= start + w) options.push_back(s);
    }
    if (!options.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, options.size() - 1);
      dstart = options[pick(rng)];
    } else {
      dw = 0;
    }
  }

  // Grade 1..4, peaked at the window center.
  const auto grade_of = [](std::size_t k, std::size_t width) {
    const double half = static_cast<double>(width) / 2;
    const double t = std::abs(static_cast<double>(k) + 0.5 - half) / half;
    return 4 - std::min(3, static_cast<int>(std::floor(t * 4)));
  };
  const auto amplitude = [](int grade) { return Real(0.6) + Real(0.2) * static_cast<Real>(grade - 1); };

  std::vector<Real> video(L * Dv);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : video) v = static_cast<Real>(nd(rng)) * cfg.video_noise;
  for (std::size_t k = 0; k < w; ++k) {
    const Real a = cfg.signal_strength * amplitude(grade_of(k, w));
    for (std::size_t c = 0; c < Dv; ++c) video[(start + k) * Dv + c] += a * proto[c];
  }
  for (std::size_t k = 0; k < dw; ++k) {
    const Real a = cfg.signal_strength * amplitude(grade_of(k, dw));
    for (std::size_t c = 0; c < Dv; ++c) video[(dstart + k) * Dv + c] += a * distract[c];
  }

  std::vector<Real> text(N * Dt);
  for (std::size_t j = 0; j < N; ++j) {
    for (std::size_t c = 0; c < Dt; ++c) {
      const Real base = c < Dv ? proto[c] : Real(0);
      text[j * Dt + c] = cfg.signal_strength * base + static_cast<Real>(nd(rng)) * cfg.text_noise;
    }
  }

  Annotation a;
  a.qid = id;
  a.vid = "v" + id;
  a.query = "synthetic query " + id;
  a.clip_len = cfg.clip_len;
  a.duration = static_cast<Real>(L) * cfg.clip_len;
  a.relevant_windows.push_back({static_cast<Real>(start) * cfg.clip_len, static_cast<Real>(start + w) * cfg.clip_len});
  for (std::size_t k = 0; k < w; ++k) {
    a.relevant_clip_ids.push_back(static_cast<int>(start + k));
    a.saliency_scores.emplace_back(static_cast<std::size_t>(cfg.annotators), grade_of(k, w));
  }
  Sample s = make_sample(a, Tensor::from({L, Dv}, std::move(video)), Tensor::from({N, Dt}, std::move(text)),
                         max_rank);
  return {std::move(a), std::move(s)};
}

}  // namespace

SynthDataset synth_dataset(const SynthConfig& cfg, int max_rank) {
  if (!(cfg.signal_strength >= 0)) throw ContractError("synth: signal_strength must be >= 0");
  if (cfg.n_clips == 0 || cfg.n_words == 0 || cfg.video_dim == 0 || cfg.text_dim == 0) {
    throw ContractError("synth: sizes must be positive");
  }
  if (cfg.min_window == 0 || cfg.min_window > cfg.max_window || cfg.max_window > cfg.n_clips) {
    throw ContractError("synth: window range must satisfy 1 <= min <= max <= n_clips");
  }
  if (cfg.annotators < 1) throw ContractError("synth: annotators must be >= 1");
  SynthDataset ds;
  std::mt19937_64 rng(cfg.seed);
  for (std::size_t i = 0; i < cfg.n_train; ++i) ds.train.push_back(synth_one(cfg, max_rank, rng, "t" + std::to_string(i)));
  for (std::size_t i = 0; i < cfg.n_val; ++i) ds.val.push_back(synth_one(cfg, max_rank, rng, "e" + std::to_string(i)));
  return ds;
}

Moment correlation_detector(const Sample& s) {
  const std::size_t L = s.video.dim(0), Dv = s.video.dim(1);
  const std::size_t N = s.text.dim(0), Dt = s.text.dim(1);
  const std::size_t D = std::min(Dv, Dt);
  std::vector<double> q(D, 0.0);
  for (std::size_t j = 0; j < N; ++j)
    for (std::size_t c = 0; c < D; ++c) q[c] += s.text.at(j, c) / static_cast<double>(N);
  std::vector<double> score(L, 0.0);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t c = 0; c < D; ++c) score[i] += s.video.at(i, c) * q[c];
  std::vector<double> sorted = score;
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[L / 2];
  const double thr = median + 0.25 * (sorted.back() - median);
  // Kadane over thresholded scores.
  double best = -1e300, cur = 0;
  std::size_t best_s = 0, best_e = 0, cur_s = 0;
  for (std::size_t i = 0; i < L; ++i) {
    if (cur <= 0) {
      cur = 0;
      cur_s = i;
    }
    cur += score[i] - thr;
    if (cur > best) {
      best = cur;
      best_s = cur_s;
      best_e = i + 1;
    }
  }
  return Moment::from_interval(static_cast<Real>(best_s) / static_cast<Real>(L),
                               static_cast<Real>(best_e) / static_cast<Real>(L));
}

}  // namespace qd
