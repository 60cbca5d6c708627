#include "qddetr/engine.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace qd {

// ---- configuration -----------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& want) {
  throw ConfigError("config field '" + key + "': cannot parse '" + value + "' as " + want);
}

double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d)) bad_value(key, v, "a finite number");
  return d;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  bad_value(key, v, "a boolean");
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const TrainConfig&)>;

struct Field {
  Setter set;
  Getter get;
};

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class T>
Field real_field(T TrainConfig::*outer, Real T::*member) {
  return {[=](TrainConfig& c, const std::string& k, const std::string& v) {
            (c.*outer).*member = static_cast<Real>(parse_real(k, v));
          },
          [=](const TrainConfig& c) { return num((c.*outer).*member); }};
}

template <class T>
Field size_field(T TrainConfig::*outer, std::size_t T::*member) {
  return {[=](TrainConfig& c, const std::string& k, const std::string& v) {
            (c.*outer).*member = static_cast<std::size_t>(parse_uint(k, v));
          },
          [=](const TrainConfig& c) { return std::to_string((c.*outer).*member); }};
}

Field flag_field(bool AblationFlags::*member) {
  return {[=](TrainConfig& c, const std::string& k, const std::string& v) { c.model.flags.*member = parse_bool(k, v); },
          [=](const TrainConfig& c) { return std::string(c.model.flags.*member ? "true" : "false"); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["epochs"] = {[](TrainConfig& c, const std::string& k, const std::string& v) { c.epochs = parse_uint(k, v); },
                   [](const TrainConfig& c) { return std::to_string(c.epochs); }};
    t["batch_size"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.batch_size = parse_uint(k, v); },
        [](const TrainConfig& c) { return std::to_string(c.batch_size); }};
    t["lr"] = {[](TrainConfig& c, const std::string& k, const std::string& v) { c.lr = Real(parse_real(k, v)); },
               [](const TrainConfig& c) { return num(c.lr); }};
    t["lr_drop"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.lr_drop = parse_uint(k, v); },
        [](const TrainConfig& c) { return std::to_string(c.lr_drop); }};
    t["weight_decay"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.weight_decay = Real(parse_real(k, v)); },
        [](const TrainConfig& c) { return num(c.weight_decay); }};
    t["grad_clip_norm"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.grad_clip_norm = Real(parse_real(k, v)); },
        [](const TrainConfig& c) { return num(c.grad_clip_norm); }};
    t["seed"] = {[](TrainConfig& c, const std::string& k, const std::string& v) { c.seed = parse_uint(k, v); },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }};
    t["eval_every"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.eval_every = parse_uint(k, v); },
        [](const TrainConfig& c) { return std::to_string(c.eval_every); }};
    t["neg_mode"] = {[](TrainConfig& c, const std::string& k, const std::string& v) {
                       if (v == "roll") {
                         c.neg_mode = NegativeMode::roll;
                       } else if (v == "random") {
                         c.neg_mode = NegativeMode::random_derangement;
                       } else {
                         bad_value(k, v, "'roll' or 'random'");
                       }
                     },
                     [](const TrainConfig& c) {
                       return std::string(c.neg_mode == NegativeMode::roll ? "roll" : "random");
                     }};

    t["lambda_l1"] = real_field(&TrainConfig::loss, &LossWeights::lambda_l1);
    t["lambda_giou"] = real_field(&TrainConfig::loss, &LossWeights::lambda_giou);
    t["lambda_ce"] = real_field(&TrainConfig::loss, &LossWeights::lambda_ce);
    t["lambda_margin"] = real_field(&TrainConfig::loss, &LossWeights::lambda_margin);
    t["lambda_cont"] = real_field(&TrainConfig::loss, &LossWeights::lambda_cont);
    t["lambda_neg"] = real_field(&TrainConfig::loss, &LossWeights::lambda_neg);
    t["tau"] = real_field(&TrainConfig::loss, &LossWeights::tau);
    t["margin_delta"] = real_field(&TrainConfig::loss, &LossWeights::margin_delta);
    t["max_rank"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.loss.max_rank = int(parse_uint(k, v)); },
        [](const TrainConfig& c) { return std::to_string(c.loss.max_rank); }};

    t["d_model"] = size_field(&TrainConfig::model, &ModelConfig::d_model);
    t["n_heads"] = size_field(&TrainConfig::model, &ModelConfig::n_heads);
    t["n_cross_layers"] = size_field(&TrainConfig::model, &ModelConfig::n_cross_layers);
    t["n_self_layers"] = size_field(&TrainConfig::model, &ModelConfig::n_self_layers);
    t["n_decoder_layers"] = size_field(&TrainConfig::model, &ModelConfig::n_decoder_layers);
    t["n_moment_queries"] = size_field(&TrainConfig::model, &ModelConfig::n_moment_queries);
    t["ffn_dim"] = size_field(&TrainConfig::model, &ModelConfig::ffn_dim);
    t["video_in_dim"] = size_field(&TrainConfig::model, &ModelConfig::video_in_dim);
    t["text_in_dim"] = size_field(&TrainConfig::model, &ModelConfig::text_in_dim);
    t["dropout"] = real_field(&TrainConfig::model, &ModelConfig::dropout);
    t["anchor_init_width"] = real_field(&TrainConfig::model, &ModelConfig::anchor_init_width);
    t["reference_width"] = real_field(&TrainConfig::model, &ModelConfig::reference_width);
    t["use_cate"] = flag_field(&AblationFlags::use_cate);
    t["use_neg_pair"] = flag_field(&AblationFlags::use_neg_pair);
    t["use_saliency_token"] = flag_field(&AblationFlags::use_saliency_token);
    t["use_dam"] = flag_field(&AblationFlags::use_dam);

    t["data_root"] = {[](TrainConfig& c, const std::string&, const std::string& v) { c.data_root = v; },
                      [](const TrainConfig& c) { return c.data_root; }};
    t["out_dir"] = {[](TrainConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
                    [](const TrainConfig& c) { return c.out_dir; }};
    t["synthetic"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.synthetic = parse_bool(k, v); },
        [](const TrainConfig& c) { return std::string(c.synthetic ? "true" : "false"); }};
    t["signal_strength"] = real_field(&TrainConfig::synth, &SynthConfig::signal_strength);
    t["synth_train"] = size_field(&TrainConfig::synth, &SynthConfig::n_train);
    t["synth_val"] = size_field(&TrainConfig::synth, &SynthConfig::n_val);
    t["synth_clips"] = size_field(&TrainConfig::synth, &SynthConfig::n_clips);
    t["synth_words"] = size_field(&TrainConfig::synth, &SynthConfig::n_words);
    t["synth_video_dim"] = size_field(&TrainConfig::synth, &SynthConfig::video_dim);
    t["synth_text_dim"] = size_field(&TrainConfig::synth, &SynthConfig::text_dim);
    t["synth_min_window"] = size_field(&TrainConfig::synth, &SynthConfig::min_window);
    t["synth_max_window"] = size_field(&TrainConfig::synth, &SynthConfig::max_window);
    t["synth_video_noise"] = real_field(&TrainConfig::synth, &SynthConfig::video_noise);
    t["synth_text_noise"] = real_field(&TrainConfig::synth, &SynthConfig::text_noise);
    t["synth_distractor"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.synth.distractor = parse_bool(k, v); },
        [](const TrainConfig& c) { return std::string(c.synth.distractor ? "true" : "false"); }};
    t["synth_seed"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) { c.synth.seed = parse_uint(k, v); },
        [](const TrainConfig& c) { return std::to_string(c.synth.seed); }};
    return t;
  }();
  return table;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("config field '" + field + "' " + why);
  };
  if (epochs == 0) fail("epochs", "must be positive");
  if (batch_size == 0) fail("batch_size", "must be positive");
  if (!(lr >= 0)) fail("lr", "must be non-negative");
  if (!(weight_decay >= 0)) fail("weight_decay", "must be non-negative");
  if (!(grad_clip_norm >= 0)) fail("grad_clip_norm", "must be non-negative (0 disables clipping)");
  if (eval_every == 0) fail("eval_every", "must be positive");
  try {
    loss.validate();
    model.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const auto& t = fields();
  auto it = t.find(key);
  if (it == t.end()) throw ConfigError("unknown config field '" + key + "'");
  it->second.set(cfg, key, value);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : fields()) out.push_back(k);
  return out;
}

void apply_config_text(TrainConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(n) + ": " + e.what());
    }
  }
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  TrainConfig cfg;
  apply_config_text(cfg, ss.str());
  return cfg;
}

std::string config_to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [k, f] : fields()) {
    const std::string v = f.get(cfg);
    out += k + " = " + (v.empty() || v.find_first_of(" #") != std::string::npos ? "\"" + v + "\"" : v) + "\n";
  }
  return out;
}

ModelConfig parse_model_canonical(const std::string& canonical) {
  TrainConfig tmp;
  std::istringstream in(canonical);
  std::string item;
  while (std::getline(in, item, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("bad model descriptor entry '" + item + "'");
    const std::string key = item.substr(0, eq);
    if (key == "real_bytes") continue;
    set_config_value(tmp, key, item.substr(eq + 1));
  }
  return tmp.model;
}

// ---- optimizer ---------------------------------------------------------------

void adam_step(const std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), Real(0));
      state.v[i].assign(params[i].numel(), Real(0));
    }
  }
  ++state.t;
  const Real bc1 = Real(1) - static_cast<Real>(std::pow(double(cfg.beta1), double(state.t)));
  const Real bc2 = Real(1) - static_cast<Real>(std::pow(double(cfg.beta2), double(state.t)));
  const Real decay = Real(1) - cfg.lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto d = p.data();
    const bool has = p.has_grad();
    auto g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != d.size()) throw ContractError("adam_step: optimizer state does not match parameter shapes");
    for (std::size_t k = 0; k < d.size(); ++k) {
      const Real gk = has ? g[k] : Real(0);
      if (cfg.weight_decay != 0) d[k] *= decay;
      m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * gk;
      v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * gk * gk;
      const Real mhat = m[k] / bc1;
      const Real vhat = v[k] / bc2;
      d[k] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

Real clip_grad_norm(const std::vector<Tensor>& params, Real max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad()) sq += double(g) * double(g);
  }
  const Real norm = static_cast<Real>(std::sqrt(sq));
  if (max_norm > 0 && norm > max_norm) {
    const Real s = max_norm / (norm + Real(1e-6));
    for (auto p : params) {
      if (!p.has_grad()) continue;
      for (Real& g : p.mutable_grad()) g *= s;
    }
  }
  return norm;
}

// ---- training ----------------------------------------------------------------

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

Trainer::Trainer(QDDetr& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (cfg_.model.hash() != model_.config().hash()) {
    throw ConfigError("trainer: model configuration differs from the training configuration");
  }
}

Real Trainer::current_lr() const {
  if (cfg_.lr_drop > 0 && epoch_ >= cfg_.lr_drop) return cfg_.lr * Real(0.1);
  return cfg_.lr;
}

void Trainer::set_position(std::size_t epoch, std::size_t cursor, std::uint64_t step) {
  epoch_ = epoch;
  cursor_ = cursor;
  step_ = step;
}

std::vector<std::size_t> Trainer::epoch_order(std::size_t n, std::size_t epoch) const {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(cfg_.seed, epoch, 0x6f72646572ULL));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

StepStats Trainer::compute_loss(const Batch& batch, std::uint64_t step_id, bool do_backward) {
  Tape::current().reset();
  model_.params().zero_grad();
  std::mt19937_64 drop_rng(mix_seed(cfg_.seed, step_id, 0x64726f70ULL));
  nn::ForwardContext ctx{true, cfg_.model.dropout, &drop_rng};
  const bool use_neg = cfg_.model.flags.use_neg_pair && batch.neg_text_index.has_value();

  const std::size_t B = batch.size();
  StepStats stats;
  Tensor total;
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor video = batch.video_of(b);
    const ModelOutput out = model_.forward(video, batch.video_mask[b], batch.text_of(b), batch.text_mask[b], ctx);
    for (const auto& layer : out.layers) {
      for (const Tensor* t : {&layer.moments, &layer.logits}) {
        for (Real v : t->data()) {
          if (!std::isfinite(v)) {
            Tape::current().reset();
            throw TrainingError("non-finite loss at step " + std::to_string(step_id) + " (epoch " +
                                std::to_string(epoch_) + ", batch " + std::to_string(cursor_) + ", sample " +
                                std::to_string(b) + "): model produced non-finite moment predictions");
          }
        }
      }
    }
    Tensor neg_sal;
    if (use_neg) {
      const std::size_t j = (*batch.neg_text_index)[b];
      const EncoderOutput enc = model_.encode(video, batch.video_mask[b], batch.text_of(j), batch.text_mask[j], ctx);
      neg_sal = model_.saliency_scores(enc);
    }
    std::mt19937_64 pair_rng(mix_seed(cfg_.seed, step_id, 0x70616972ULL + b));
    const SampleLoss sl = sample_loss(out, use_neg ? &neg_sal : nullptr, batch.targets[b], cfg_.loss, pair_rng);
    total = total.defined() ? add(total, sl.total) : sl.total;
    stats.mr += sl.parts.mr.item();
    stats.margin += sl.parts.margin.item();
    stats.cont += sl.parts.cont.item();
    stats.neg += sl.parts.neg.item();
    stats.l1 += sl.l1;
    stats.giou += sl.giou;
    stats.ce += sl.ce;
  }
  const Real invB = Real(1) / static_cast<Real>(B);
  total = scale(total, invB);
  for (Real* v : {&stats.mr, &stats.margin, &stats.cont, &stats.neg, &stats.l1, &stats.giou, &stats.ce}) *v *= invB;
  stats.total = total.item();
  if (!std::isfinite(stats.total)) {
    std::ostringstream os;
    os << "non-finite loss at step " << step_id << " (epoch " << epoch_ << ", batch " << cursor_
       << "): total=" << stats.total << " mr=" << stats.mr << " margin=" << stats.margin << " cont=" << stats.cont
       << " neg=" << stats.neg;
    Tape::current().reset();
    throw TrainingError(os.str());
  }
  if (do_backward) backward(total);
  return stats;
}

StepStats Trainer::step(const std::vector<Sample>& data) {
  if (data.empty()) throw ContractError("train: empty dataset");
  const std::size_t n = data.size();
  const std::size_t bs = cfg_.batch_size;
  const std::size_t n_batches = (n + bs - 1) / bs;
  const auto order = epoch_order(n, epoch_);
  std::vector<const Sample*> chunk;
  for (std::size_t k = cursor_ * bs; k < std::min(n, (cursor_ + 1) * bs); ++k) chunk.push_back(&data[order[k]]);
  std::mt19937_64 neg_rng(mix_seed(cfg_.seed, step_, 0x6e6567ULL));
  const Batch batch = build_batch(chunk, cfg_.neg_mode, &neg_rng);

  StepStats stats = compute_loss(batch, step_, true);
  const auto params = model_.params().tensors();
  stats.grad_norm = clip_grad_norm(params, cfg_.grad_clip_norm);
  adam_step(params, adam_, {current_lr(), Real(0.9), Real(0.999), Real(1e-8), cfg_.weight_decay});
  Tape::current().reset();

  ++step_;
  if (++cursor_ >= n_batches) {
    cursor_ = 0;
    ++epoch_;
  }
  return stats;
}

EpochStats Trainer::train_epoch(const std::vector<Sample>& data) {
  EpochStats es;
  es.epoch = epoch_;
  const std::size_t start_epoch = epoch_;
  while (epoch_ == start_epoch) {
    const StepStats s = step(data);
    ++es.steps;
    es.mean.total += s.total;
    es.mean.mr += s.mr;
    es.mean.margin += s.margin;
    es.mean.cont += s.cont;
    es.mean.neg += s.neg;
    es.mean.l1 += s.l1;
    es.mean.giou += s.giou;
    es.mean.ce += s.ce;
    es.mean.grad_norm += s.grad_norm;
  }
  const Real inv = Real(1) / static_cast<Real>(es.steps);
  for (Real* v : {&es.mean.total, &es.mean.mr, &es.mean.margin, &es.mean.cont, &es.mean.neg, &es.mean.l1,
                  &es.mean.giou, &es.mean.ce, &es.mean.grad_norm}) {
    *v *= inv;
  }
  return es;
}

// ---- inference ---------------------------------------------------------------

Prediction predict_sample(const QDDetr& model, const Sample& s) {
  NoGradGuard ng;
  const std::size_t L = s.video.dim(0);
  const Mask vm(L, 1), tm(s.text.dim(0), 1);
  const ModelOutput out = model.forward(s.video, vm, s.text, tm);
  const LayerPrediction& last = out.layers.back();
  Prediction p;
  p.qid = s.qid;
  p.vid = s.vid;
  const std::size_t Q = last.moments.dim(0);
  const double dur = s.duration;
  for (std::size_t q = 0; q < Q; ++q) {
    const double c = last.moments.at(q, 0), w = last.moments.at(q, 1);
    const double fg = 1.0 / (1.0 + std::exp(double(last.logits.at(q, 1)) - double(last.logits.at(q, 0))));
    const double st = std::clamp(c - w / 2, 0.0, 1.0) * dur;
    const double en = std::clamp(c + w / 2, 0.0, 1.0) * dur;
    p.windows.push_back({st, en, fg});
  }
  std::stable_sort(p.windows.begin(), p.windows.end(),
                   [](const ScoredWindow& a, const ScoredWindow& b) { return a.score > b.score; });
  p.saliency.assign(out.saliency.data().begin(), out.saliency.data().end());
  return p;
}

std::vector<Prediction> predict(const QDDetr& model, const std::vector<Sample>& data) {
  std::vector<Prediction> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(predict_sample(model, s));
  return out;
}

GroundTruth ground_truth(const Sample& s) {
  GroundTruth g;
  g.qid = s.qid;
  g.duration = s.duration;
  for (const auto& w : s.windows) g.windows.push_back({double(w[0]), double(w[1])});
  g.labels = s.annotator_labels;
  return g;
}

std::vector<GroundTruth> ground_truths(const std::vector<Sample>& data) {
  std::vector<GroundTruth> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(ground_truth(s));
  return out;
}

EvalReport evaluate(const QDDetr& model, const std::vector<Sample>& data) {
  return evaluate_predictions(predict(model, data), ground_truths(data));
}

// ---- checkpoints ---------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'Q', 'D', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <class T>
  void pod(const T& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint64_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void reals(const std::vector<Real>& v) {
    pod(static_cast<std::uint64_t>(v.size()));
    os_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(Real)));
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  template <class T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check();
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ULL << 24)) fail("implausible string length");
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }
  std::vector<Real> reals() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ULL << 32)) fail("implausible tensor size");
    std::vector<Real> v(n);
    is_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(Real)));
    check();
    return v;
  }
  [[noreturn]] void fail(const std::string& what) {
    throw CheckpointError(path_ + ": corrupt checkpoint (" + what + ")");
  }

 private:
  void check() {
    if (!is_) fail("truncated");
  }
  std::istream& is_;
  std::string path_;
};

CheckpointMeta read_header(Reader& r, std::uint64_t& hash) {
  char magic[4];
  for (char& c : magic) c = r.pod<char>();
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) r.fail("bad magic");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const auto real_bytes = r.pod<std::uint32_t>();
  if (real_bytes != sizeof(Real)) {
    throw CheckpointError("checkpoint stores " + std::to_string(real_bytes) + "-byte reals, this build uses " +
                          std::to_string(sizeof(Real)));
  }
  CheckpointMeta meta;
  hash = r.pod<std::uint64_t>();
  meta.model_canonical = r.str();
  meta.train_config = r.str();
  meta.epoch = r.pod<std::uint64_t>();
  meta.cursor = r.pod<std::uint64_t>();
  meta.step = r.pod<std::uint64_t>();
  meta.seed = r.pod<std::uint64_t>();
  return meta;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const QDDetr& model, const AdamState& adam,
                     const CheckpointMeta& meta) {
  std::ostringstream buf(std::ios::binary);
  Writer w(buf);
  buf.write(kCheckpointMagic, 4);
  w.pod(kCheckpointVersion);
  w.pod(static_cast<std::uint32_t>(sizeof(Real)));
  w.pod(model.config().hash());
  w.str(model.config().canonical());
  w.str(meta.train_config);
  w.pod(static_cast<std::uint64_t>(meta.epoch));
  w.pod(static_cast<std::uint64_t>(meta.cursor));
  w.pod(meta.step);
  w.pod(meta.seed);
  const auto& items = model.params().items();
  w.pod(static_cast<std::uint64_t>(items.size()));
  for (const auto& [name, t] : items) {
    w.str(name);
    w.pod(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.pod(static_cast<std::uint64_t>(d));
    w.reals(t.to_vector());
  }
  w.pod(adam.t);
  w.pod(static_cast<std::uint64_t>(adam.m.size()));
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    w.reals(adam.m[i]);
    w.reals(adam.v[i]);
  }
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
    const std::string bytes = buf.str();
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(is, path.string());
  std::uint64_t hash = 0;
  return read_header(r, hash);
}

CheckpointMeta load_checkpoint(const std::filesystem::path& path, QDDetr& model, AdamState* adam) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(is, path.string());
  std::uint64_t hash = 0;
  const CheckpointMeta meta = read_header(r, hash);
  if (hash != model.config().hash()) {
    throw CheckpointError("model configuration hash mismatch: checkpoint has [" + meta.model_canonical +
                          "], model has [" + model.config().canonical() + "]");
  }

  auto& items = model.params().items();
  const auto count = r.pod<std::uint64_t>();
  if (count != items.size()) r.fail("parameter count " + std::to_string(count));
  std::vector<std::vector<Real>> values;
  values.reserve(count);
  for (const auto& [name, t] : items) {
    if (r.str() != name) r.fail("parameter order differs at " + name);
    const auto rank = r.pod<std::uint32_t>();
    if (rank != t.rank()) r.fail("rank of " + name);
    for (std::size_t k = 0; k < rank; ++k) {
      if (r.pod<std::uint64_t>() != t.dim(k)) r.fail("shape of " + name);
    }
    auto v = r.reals();
    if (v.size() != t.numel()) r.fail("size of " + name);
    values.push_back(std::move(v));
  }
  AdamState st;
  st.t = r.pod<std::uint64_t>();
  const auto n_moments = r.pod<std::uint64_t>();
  if (n_moments != 0 && n_moments != count) r.fail("optimizer state size");
  for (std::size_t i = 0; i < n_moments; ++i) {
    st.m.push_back(r.reals());
    st.v.push_back(r.reals());
    if (st.m.back().size() != values[i].size() || st.v.back().size() != values[i].size()) {
      r.fail("optimizer state shape");
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes");

  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor t = items[i].second;
    std::copy(values[i].begin(), values[i].end(), t.data().begin());
  }
  if (adam) *adam = std::move(st);
  return meta;
}

void save_trainer(const std::filesystem::path& path, Trainer& trainer) {
  CheckpointMeta meta;
  meta.epoch = trainer.epoch();
  meta.cursor = trainer.cursor();
  meta.step = trainer.global_step();
  meta.seed = trainer.config().seed;
  meta.train_config = config_to_text(trainer.config());
  save_checkpoint(path, trainer.model(), trainer.optimizer_state(), meta);
}

void load_trainer(const std::filesystem::path& path, Trainer& trainer) {
  const CheckpointMeta meta = load_checkpoint(path, trainer.model(), &trainer.optimizer_state());
  if (meta.seed != trainer.config().seed) {
    throw CheckpointError("checkpoint seed " + std::to_string(meta.seed) + " differs from run seed " +
                          std::to_string(trainer.config().seed));
  }
  trainer.set_position(meta.epoch, meta.cursor, meta.step);
}

}  // namespace qd
