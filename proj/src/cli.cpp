#include "qddetr/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "qddetr/metrics.hpp"

namespace qd {

namespace {

// Command-line values that override the config file. Unset optionals keep the
// file (or default) value.
struct Overrides {
  std::string config_path;
  std::optional<std::string> data_root, val_root, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size, lr_drop;
  std::vector<std::uint64_t> seeds;
  std::optional<double> lr, lambda_neg, lambda_cont, lambda_margin, lambda_l1, lambda_giou, lambda_ce, tau,
      margin_delta, signal_strength;
  bool no_cate = false, no_neg_pair = false, no_saliency_token = false, no_dam = false;
  bool synthetic = false;
};

void add_common_flags(CLI::App& app, Overrides& o) {
  app.add_option("--config", o.config_path, "flat key = value config file");
  auto* root = app.add_option("--data-root", o.data_root, "dataset root (falls back to $QD_DATA_ROOT)");
  app.add_option("--out-dir", o.out_dir, "output directory");
  app.add_option("--seed", o.seed, "random seed");
  auto* syn = app.add_flag("--synthetic", o.synthetic, "use the synthetic planted-moment task");
  syn->excludes(root);
  app.add_option("--signal-strength", o.signal_strength, "synthetic signal strength");
}

void add_train_flags(CLI::App& app, Overrides& o) {
  app.add_option("--epochs", o.epochs);
  app.add_option("--batch-size", o.batch_size);
  app.add_option("--lr", o.lr);
  app.add_option("--lr-drop", o.lr_drop, "epoch from which lr is scaled by 0.1 (0 = constant)");
  app.add_option("--seeds", o.seeds, "train one run per seed and report the mean")->delimiter(',');
  app.add_option("--lambda-neg", o.lambda_neg);
  app.add_option("--lambda-cont", o.lambda_cont);
  app.add_option("--lambda-margin", o.lambda_margin);
  app.add_option("--lambda-l1", o.lambda_l1);
  app.add_option("--lambda-giou", o.lambda_giou);
  app.add_option("--lambda-ce", o.lambda_ce);
  app.add_option("--tau", o.tau);
  app.add_option("--margin-delta", o.margin_delta);
  app.add_flag("--no-cate", o.no_cate, "disable the cross-attentive encoder");
  app.add_flag("--no-neg-pair", o.no_neg_pair, "disable negative-pair training");
  app.add_flag("--no-saliency-token", o.no_saliency_token, "use a linear saliency head");
  app.add_flag("--no-dam", o.no_dam, "use plain learnable decoder queries");
  app.add_option("--val-root", o.val_root, "validation dataset root");
}

bool config_file_sets_synthetic(const std::string& path) {
  if (path.empty()) return false;
  TrainConfig probe = load_config(path);
  return probe.synthetic;
}

TrainConfig resolve_config(const Overrides& o) {
  TrainConfig cfg;
  const bool synthetic = o.synthetic || config_file_sets_synthetic(o.config_path);
  if (synthetic) apply_synthetic_preset(cfg);
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw ConfigError("cannot open config file " + o.config_path);
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str());
  }
  if (o.synthetic) cfg.synthetic = true;
  if (o.data_root) cfg.data_root = *o.data_root;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.seed) cfg.seed = *o.seed;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.batch_size) cfg.batch_size = *o.batch_size;
  if (o.lr) cfg.lr = Real(*o.lr);
  if (o.lr_drop) cfg.lr_drop = *o.lr_drop;
  if (o.lambda_neg) cfg.loss.lambda_neg = Real(*o.lambda_neg);
  if (o.lambda_cont) cfg.loss.lambda_cont = Real(*o.lambda_cont);
  if (o.lambda_margin) cfg.loss.lambda_margin = Real(*o.lambda_margin);
  if (o.lambda_l1) cfg.loss.lambda_l1 = Real(*o.lambda_l1);
  if (o.lambda_giou) cfg.loss.lambda_giou = Real(*o.lambda_giou);
  if (o.lambda_ce) cfg.loss.lambda_ce = Real(*o.lambda_ce);
  if (o.tau) cfg.loss.tau = Real(*o.tau);
  if (o.margin_delta) cfg.loss.margin_delta = Real(*o.margin_delta);
  if (o.signal_strength) cfg.synth.signal_strength = Real(*o.signal_strength);
  if (o.no_cate) cfg.model.flags.use_cate = false;
  if (o.no_neg_pair) cfg.model.flags.use_neg_pair = false;
  if (o.no_saliency_token) cfg.model.flags.use_saliency_token = false;
  if (o.no_dam) cfg.model.flags.use_dam = false;
  if (cfg.data_root.empty() && !cfg.synthetic) {
    if (const char* env = std::getenv("QD_DATA_ROOT")) cfg.data_root = env;
  }
  if (cfg.synthetic) {
    cfg.model.video_in_dim = cfg.synth.video_dim;
    cfg.model.text_in_dim = cfg.synth.text_dim;
  }
  return cfg;
}

std::vector<Sample> samples_of(const std::vector<SynthExample>& ex) {
  std::vector<Sample> out;
  out.reserve(ex.size());
  for (const auto& e : ex) out.push_back(e.sample);
  return out;
}

struct Datasets {
  std::vector<Sample> train, val;
};

Datasets load_data(TrainConfig& cfg, const std::optional<std::string>& val_root) {
  Datasets d;
  if (cfg.synthetic) {
    const auto ds = synth_dataset(cfg.synth, cfg.loss.max_rank);
    d.train = samples_of(ds.train);
    d.val = samples_of(ds.val);
    return d;
  }
  if (cfg.data_root.empty()) throw ConfigError("no data root: pass --data-root, set QD_DATA_ROOT or use --synthetic");
  d.train = load_dataset(cfg.data_root, cfg.loss.max_rank);
  if (val_root) d.val = load_dataset(*val_root, cfg.loss.max_rank);
  if (d.train.empty()) throw DataError("no samples in " + cfg.data_root);
  if (cfg.model.video_in_dim == 0) cfg.model.video_in_dim = d.train.front().video.dim(1);
  if (cfg.model.text_in_dim == 0) cfg.model.text_in_dim = d.train.front().text.dim(1);
  return d;
}

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

// ---- train -------------------------------------------------------------------

EvalReport train_once(TrainConfig cfg, const std::optional<std::string>& val_root,
                      const std::optional<std::string>& resume, std::ostream& out) {
  Datasets data = load_data(cfg, val_root);
  cfg.validate();
  const std::filesystem::path dir = cfg.out_dir;
  std::filesystem::create_directories(dir);
  {
    std::ofstream c(dir / "config.txt");
    c << config_to_text(cfg);
  }
  QDDetr model(cfg.model, cfg.seed);
  Trainer trainer(model, cfg);
  if (resume) load_trainer(*resume, trainer);
  const auto& eval_set = data.val.empty() ? data.train : data.val;

  std::ofstream log(dir / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
  double best = -1;
  const auto t0 = std::chrono::steady_clock::now();
  while (trainer.epoch() < cfg.epochs) {
    const EpochStats es = trainer.train_epoch(data.train);
    nlohmann::json j;
    j["epoch"] = es.epoch + 1;
    j["steps"] = es.steps;
    j["loss"] = es.mean.total;
    j["loss_mr"] = es.mean.mr;
    j["loss_margin"] = es.mean.margin;
    j["loss_cont"] = es.mean.cont;
    j["loss_neg"] = es.mean.neg;
    j["grad_norm"] = es.mean.grad_norm;
    j["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool last = trainer.epoch() == cfg.epochs;
    if ((es.epoch + 1) % cfg.eval_every == 0 || last) {
      const EvalReport rep = evaluate(model, eval_set);
      j["R1@0.5"] = rep.r1_at.at(0.5);
      j["R1@0.7"] = rep.r1_at.at(0.7);
      j["mAP-Avg"] = rep.map_avg;
      j["HD-mAP"] = rep.hd_map;
      j["HIT@1"] = rep.hit_at_1;
      if (rep.map_avg > best) {
        best = rep.map_avg;
        save_trainer(dir / "best.ckpt", trainer);
      }
    }
    log << j.dump() << '\n';
    log.flush();
    out << "epoch: " << es.epoch + 1 << " loss: " << fixed(es.mean.total) << '\n';
  }
  save_trainer(dir / "last.ckpt", trainer);
  const EvalReport rep = evaluate(model, eval_set);
  out << rep.format();
  out << "checkpoint: " << (dir / "last.ckpt").string() << '\n';
  return rep;
}

EvalReport mean_report(const std::vector<EvalReport>& reps) {
  EvalReport m;
  const double n = double(reps.size());
  for (const auto& r : reps) {
    for (const auto& [k, v] : r.r1_at) m.r1_at[k] += v / n;
    for (const auto& [k, v] : r.map_at) m.map_at[k] += v / n;
    m.map_avg += r.map_avg / n;
    m.hd_map += r.hd_map / n;
    m.hit_at_1 += r.hit_at_1 / n;
  }
  return m;
}

int cmd_train(const Overrides& o, const std::optional<std::string>& resume, std::ostream& out) {
  const TrainConfig cfg = resolve_config(o);
  if (o.seeds.empty()) {
    train_once(cfg, o.val_root, resume, out);
    return kExitOk;
  }
  if (resume) throw ConfigError("--resume cannot be combined with --seeds");
  std::vector<EvalReport> reps;
  for (std::uint64_t seed : o.seeds) {
    TrainConfig run = cfg;
    run.seed = seed;
    run.out_dir = (std::filesystem::path(cfg.out_dir) / ("seed_" + std::to_string(seed))).string();
    out << "seed: " << seed << '\n';
    reps.push_back(train_once(run, o.val_root, std::nullopt, out));
  }
  out << "runs: " << reps.size() << '\n';
  out << mean_report(reps).format();
  return kExitOk;
}

// ---- checkpoint-based commands --------------------------------------------------

struct Loaded {
  TrainConfig cfg;
  std::unique_ptr<QDDetr> model;
};

Loaded load_model(const std::string& ckpt, const Overrides& o) {
  const CheckpointMeta meta = read_checkpoint_meta(ckpt);
  Loaded l;
  apply_config_text(l.cfg, meta.train_config);
  l.cfg.model = parse_model_canonical(meta.model_canonical);
  if (!o.config_path.empty()) {
    // An explicit config must describe the same architecture.
    Overrides only_file;
    only_file.config_path = o.config_path;
    TrainConfig file_cfg = resolve_config(only_file);
    if (file_cfg.synthetic) {
      file_cfg.model.video_in_dim = file_cfg.synth.video_dim;
      file_cfg.model.text_in_dim = file_cfg.synth.text_dim;
    }
    if (file_cfg.model.video_in_dim == 0) file_cfg.model.video_in_dim = l.cfg.model.video_in_dim;
    if (file_cfg.model.text_in_dim == 0) file_cfg.model.text_in_dim = l.cfg.model.text_in_dim;
    if (file_cfg.model.hash() != l.cfg.model.hash()) {
      throw CheckpointError("config " + o.config_path + " describes [" + file_cfg.model.canonical() +
                            "] but checkpoint holds [" + l.cfg.model.canonical() + "]");
    }
  }
  if (o.synthetic) l.cfg.synthetic = true;
  if (o.data_root) {
    l.cfg.data_root = *o.data_root;
    l.cfg.synthetic = false;
  }
  if (o.signal_strength) l.cfg.synth.signal_strength = Real(*o.signal_strength);
  if (o.seed) l.cfg.synth.seed = *o.seed;
  if (o.out_dir) l.cfg.out_dir = *o.out_dir;
  if (!l.cfg.synthetic && l.cfg.data_root.empty()) {
    if (const char* env = std::getenv("QD_DATA_ROOT")) l.cfg.data_root = env;
  }
  l.model = std::make_unique<QDDetr>(l.cfg.model, l.cfg.seed);
  load_checkpoint(ckpt, *l.model, nullptr);
  return l;
}

// Evaluation split: synthetic val, or the samples under the data root.
std::vector<Sample> eval_samples(TrainConfig& cfg) {
  if (cfg.synthetic) return samples_of(synth_dataset(cfg.synth, cfg.loss.max_rank).val);
  if (cfg.data_root.empty()) throw ConfigError("no data root: pass --data-root, set QD_DATA_ROOT or use --synthetic");
  return load_dataset(cfg.data_root, cfg.loss.max_rank);
}

std::vector<GroundTruth> ground_truth_from_annotations(const std::filesystem::path& root) {
  const auto anns = load_annotations(root / "annotations.jsonl");
  std::vector<GroundTruth> out;
  for (const auto& a : anns) {
    GroundTruth g;
    g.qid = a.qid;
    g.duration = a.duration;
    for (const auto& w : a.relevant_windows) g.windows.push_back({double(w[0]), double(w[1])});
    g.labels = a.annotator_labels();
    out.push_back(std::move(g));
  }
  return out;
}

int cmd_eval(const Overrides& o, const std::optional<std::string>& ckpt, const std::optional<std::string>& preds_path,
             std::ostream& out) {
  EvalReport rep;
  std::optional<std::filesystem::path> out_dir = o.out_dir ? std::optional<std::filesystem::path>(*o.out_dir)
                                                           : std::nullopt;
  if (preds_path) {
    // Score a prediction dump against ground truth.
    std::vector<GroundTruth> gts;
    if (o.synthetic || (!o.data_root && ckpt)) {
      if (!ckpt) throw ConfigError("scoring a dump against synthetic data needs --checkpoint for the task settings");
      Loaded l = load_model(*ckpt, o);
      gts = ground_truths(eval_samples(l.cfg));
    } else {
      std::string root = o.data_root.value_or("");
      if (root.empty()) {
        if (const char* env = std::getenv("QD_DATA_ROOT")) root = env;
      }
      if (root.empty()) throw ConfigError("no data root for ground truth");
      gts = ground_truth_from_annotations(root);
    }
    rep = evaluate_predictions(load_predictions(*preds_path), gts);
  } else {
    if (!ckpt) throw ConfigError("eval needs --checkpoint or --predictions");
    Loaded l = load_model(*ckpt, o);
    rep = evaluate(*l.model, eval_samples(l.cfg));
  }
  out << rep.format();
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    std::ofstream(*out_dir / "report.json") << rep.to_json() << '\n';
  }
  return kExitOk;
}

int cmd_predict(const Overrides& o, const std::string& ckpt, const std::optional<std::string>& out_file,
                std::ostream& out) {
  Loaded l = load_model(ckpt, o);
  const auto samples = eval_samples(l.cfg);
  const auto preds = predict(*l.model, samples);
  std::filesystem::path path;
  if (out_file) {
    path = *out_file;
  } else {
    std::filesystem::create_directories(l.cfg.out_dir);
    path = std::filesystem::path(l.cfg.out_dir) / "predictions.jsonl";
  }
  save_predictions(path, preds);
  out << "predictions: " << path.string() << '\n';
  out << "queries: " << preds.size() << '\n';
  return kExitOk;
}

int cmd_synth(const Overrides& o, std::ostream& out) {
  TrainConfig cfg;
  apply_synthetic_preset(cfg);
  if (!o.config_path.empty()) cfg = resolve_config(o);
  if (o.signal_strength) cfg.synth.signal_strength = Real(*o.signal_strength);
  if (o.seed) cfg.synth.seed = *o.seed;
  const std::filesystem::path dir = o.out_dir.value_or("synthetic");
  const auto ds = synth_dataset(cfg.synth, cfg.loss.max_rank);
  auto write = [](const std::filesystem::path& root, const std::vector<SynthExample>& ex) {
    std::vector<Annotation> anns;
    std::vector<Sample> samples;
    for (const auto& e : ex) {
      anns.push_back(e.ann);
      samples.push_back(e.sample);
    }
    write_dataset(root, anns, samples);
  };
  write(dir / "train", ds.train);
  write(dir / "val", ds.val);
  out << "train: " << (dir / "train").string() << " (" << ds.train.size() << " samples)\n";
  out << "val: " << (dir / "val").string() << " (" << ds.val.size() << " samples)\n";
  return kExitOk;
}

int cmd_analyze(const Overrides& o, const std::string& ckpt, std::ostream& out) {
  Loaded l = load_model(ckpt, o);
  const auto samples = eval_samples(l.cfg);
  const SaliencyAnalysis a = analyze_saliency(*l.model, samples);
  const Histogram h = saliency_histogram(a);
  const std::filesystem::path dir = l.cfg.out_dir;
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "saliency_hist.csv") << histogram_csv(h);
  std::ofstream(dir / "saliency_hist.svg") << histogram_svg(h, a);
  out << "samples: " << a.positive.size() << '\n';
  out << "positive_mean: " << fixed(a.positive_mean) << '\n';
  out << "negative_mean: " << fixed(a.negative_mean) << '\n';
  out << "gap: " << fixed(a.gap) << '\n';
  out << "csv: " << (dir / "saliency_hist.csv").string() << '\n';
  out << "svg: " << (dir / "saliency_hist.svg").string() << '\n';
  return kExitOk;
}

}  // namespace

void apply_synthetic_preset(TrainConfig& cfg) {
  cfg.synthetic = true;
  cfg.epochs = 90;
  cfg.lr_drop = 60;
  cfg.batch_size = 16;
  cfg.lr = Real(1e-3);
  cfg.model.d_model = 32;
  cfg.model.n_heads = 4;
  cfg.model.ffn_dim = 64;
  cfg.model.video_in_dim = cfg.synth.video_dim;
  cfg.model.text_in_dim = cfg.synth.text_dim;
  cfg.eval_every = 5;
}

SaliencyAnalysis analyze_saliency(const QDDetr& model, const std::vector<Sample>& data) {
  SaliencyAnalysis a;
  const std::size_t n = data.size();
  if (n < 2) throw DataError("saliency analysis needs at least two samples");
  NoGradGuard ng;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = data[i];
    const Sample& other = data[(i + 1) % n];
    const Mask vm(s.video.dim(0), 1);
    const Tensor pos = model.saliency_scores(model.encode(s.video, vm, s.text, Mask(s.text.dim(0), 1)));
    const Tensor neg = model.saliency_scores(model.encode(s.video, vm, other.text, Mask(other.text.dim(0), 1)));
    double ps = 0, ns = 0;
    std::size_t k = 0;
    for (std::size_t c = 0; c < s.clip_ranks.size(); ++c) {
      if (s.clip_ranks[c] < 0) continue;
      ps += pos[c];
      ns += neg[c];
      ++k;
    }
    if (k == 0) continue;
    a.positive.push_back(ps / double(k));
    a.negative.push_back(ns / double(k));
  }
  if (a.positive.empty()) throw DataError("saliency analysis: no sample has a ground-truth moment");
  for (std::size_t i = 0; i < a.positive.size(); ++i) {
    a.positive_mean += a.positive[i];
    a.negative_mean += a.negative[i];
  }
  a.positive_mean /= double(a.positive.size());
  a.negative_mean /= double(a.negative.size());
  a.gap = a.positive_mean - a.negative_mean;
  return a;
}

Histogram saliency_histogram(const SaliencyAnalysis& a, std::size_t bins) {
  Histogram h;
  if (bins == 0) bins = 1;
  double lo = 0, hi = 0;
  bool first = true;
  for (const auto* v : {&a.positive, &a.negative}) {
    for (double x : *v) {
      lo = first ? x : std::min(lo, x);
      hi = first ? x : std::max(hi, x);
      first = false;
    }
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  h.lo = lo;
  h.hi = hi;
  h.positive.assign(bins, 0);
  h.negative.assign(bins, 0);
  auto bin = [&](double x) {
    const auto b = static_cast<std::size_t>((x - lo) / (hi - lo) * double(bins));
    return std::min(b, bins - 1);
  };
  for (double x : a.positive) ++h.positive[bin(x)];
  for (double x : a.negative) ++h.negative[bin(x)];
  return h;
}

std::string histogram_csv(const Histogram& h) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,positive,negative\n";
  const std::size_t n = h.positive.size();
  const double w = (h.hi - h.lo) / double(n);
  for (std::size_t i = 0; i < n; ++i) {
    os << h.lo + w * double(i) << ',' << h.lo + w * double(i + 1) << ',' << h.positive[i] << ',' << h.negative[i]
       << '\n';
  }
  return os.str();
}

std::string histogram_svg(const Histogram& h, const SaliencyAnalysis& a) {
  const double W = 640, H = 360, ml = 50, mr = 20, mt = 30, mb = 40;
  const double pw = W - ml - mr, ph = H - mt - mb;
  const std::size_t n = h.positive.size();
  std::size_t peak = 1;
  for (std::size_t i = 0; i < n; ++i) peak = std::max({peak, h.positive[i], h.negative[i]});
  const double bw = pw / double(n);
  auto x_of = [&](double v) { return ml + (v - h.lo) / (h.hi - h.lo) * pw; };

  std::ostringstream os;
  os.precision(6);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  os << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  os << "<text x=\"" << ml << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">Mean in-moment saliency: "
     << "positive vs negative query</text>\n";
  const auto bars = [&](const std::vector<std::size_t>& counts, const char* color) {
    for (std::size_t i = 0; i < n; ++i) {
      if (counts[i] == 0) continue;
      const double bh = ph * double(counts[i]) / double(peak);
      os << "<rect x=\"" << ml + bw * double(i) << "\" y=\"" << mt + ph - bh << "\" width=\"" << bw << "\" height=\""
         << bh << "\" fill=\"" << color << "\" fill-opacity=\"0.5\"/>\n";
    }
  };
  bars(h.positive, "#1f77b4");
  bars(h.negative, "#d62728");
  const auto mean_line = [&](double v, const char* color) {
    const double x = x_of(v);
    os << "<line x1=\"" << x << "\" y1=\"" << mt << "\" x2=\"" << x << "\" y2=\"" << mt + ph << "\" stroke=\"" << color
       << "\" stroke-width=\"2\" stroke-dasharray=\"4 3\"/>\n";
  };
  mean_line(a.positive_mean, "#1f77b4");
  mean_line(a.negative_mean, "#d62728");
  os << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << ml << "\" y=\"" << H - 12 << "\" font-family=\"sans-serif\" font-size=\"11\">" << h.lo
     << "</text>\n";
  os << "<text x=\"" << ml + pw - 40 << "\" y=\"" << H - 12 << "\" font-family=\"sans-serif\" font-size=\"11\">"
     << h.hi << "</text>\n";
  os << "<text x=\"" << ml + pw - 200 << "\" y=\"" << mt + 14
     << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#1f77b4\">positive mean " << a.positive_mean
     << "</text>\n";
  os << "<text x=\"" << ml + pw - 200 << "\" y=\"" << mt + 28
     << "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#d62728\">negative mean " << a.negative_mean
     << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Query-dependent moment retrieval and highlight detection"};
  app.require_subcommand(1);
  Overrides o;
  std::optional<std::string> resume, checkpoint, predictions, out_file;
  std::string ckpt_required;

  auto* train = app.add_subcommand("train", "train a model");
  add_common_flags(*train, o);
  add_train_flags(*train, o);
  train->add_option("--resume", resume, "resume from a checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or score a prediction dump");
  add_common_flags(*eval, o);
  eval->add_option("--checkpoint", checkpoint);
  eval->add_option("--predictions", predictions, "prediction JSONL to score");

  auto* pred = app.add_subcommand("predict", "write a prediction dump");
  add_common_flags(*pred, o);
  pred->add_option("--checkpoint", ckpt_required)->required();
  pred->add_option("--out", out_file, "output JSONL path");

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset to disk");
  synth->add_option("--config", o.config_path);
  synth->add_option("--out-dir", o.out_dir);
  synth->add_option("--seed", o.seed);
  synth->add_option("--signal-strength", o.signal_strength);

  auto* analyze = app.add_subcommand("analyze-saliency", "positive vs negative query saliency histograms");
  add_common_flags(*analyze, o);
  analyze->add_option("--checkpoint", ckpt_required)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*train) return cmd_train(o, resume, out);
    if (*eval) return cmd_eval(o, checkpoint, predictions, out);
    if (*pred) return cmd_predict(o, ckpt_required, out_file, out);
    if (*synth) return cmd_synth(o, out);
    if (*analyze) return cmd_analyze(o, ckpt_required, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ContractError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitCheckpoint;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("qddetr");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace qd
