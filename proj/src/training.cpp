#include "affmtl/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "affmtl/binary_io.hpp"
#include "affmtl/errors.hpp"
#include "affmtl/param_file.hpp"
#include "affmtl/rng.hpp"
#include "affmtl/text.hpp"

namespace affmtl {

using nlohmann::json;

// ---- optimizer ----------------------------------------------------------------------

void Adam::step(const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad())
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient in parameter '" + p.name + "' at optimizer step " +
                           std::to_string(t_ + 1));
  }
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& p : params) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    Tensor t = p.tensor;
    auto w = t.mutable_values();
    auto g = p.tensor.grad();
    auto& mom = moments_[p.name];
    if (mom.m.size() != w.size()) {
      mom.m.assign(w.size(), 0.0);
      mom.v.assign(w.size(), 0.0);
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      mom.m[i] = config_.beta1 * mom.m[i] + (1.0 - config_.beta1) * g[i];
      mom.v[i] = config_.beta2 * mom.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double m_hat = mom.m[i] / c1;
      const double v_hat = mom.v[i] / c2;
      w[i] -= config_.learning_rate * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

double clip_grad_norm(const std::vector<NamedParam>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.trainable)
      for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double k = max_norm / norm;
    for (const auto& p : params) {
      if (!p.trainable || !p.tensor.has_grad()) continue;
      for (auto& g : detail::grad_of(*p.tensor.data())) g *= k;
    }
  }
  return norm;
}

// ---- configuration ------------------------------------------------------------------

namespace {

const std::set<std::string>& task_names() {
  static const std::set<std::string> names{"AU", "EXPR", "V", "A", "VA"};
  return names;
}

std::string_view weight_mode_name(ClassWeightMode m) {
  return m == ClassWeightMode::Ones ? "ones" : "inverse_frequency";
}

std::string_view init_name(InitFrom i) { return i == InitFrom::Scratch ? "scratch" : "single"; }

}  // namespace

TaskSet TrainConfig::task_set() const { return TaskSet::parse(tasks); }

LossWeights TrainConfig::loss_weights() const {
  const TaskSet t = task_set();
  LossWeights w;
  w.au = lambda_au.value_or(t.contains(Task::AU) ? 1.0 : 0.0);
  w.expr = lambda_expr.value_or(t.contains(Task::EXPR) ? 1.0 : 0.0);
  w.va = lambda_va.value_or(t.has_va() ? 1.0 : 0.0);
  return w;
}

void TrainConfig::validate() const {
  if (tasks.empty()) throw ConfigError("tasks: at least one task is required");
  for (const auto& t : tasks)
    if (!task_names().count(t)) throw ConfigError("tasks: unknown task '" + t + "'");
  for (const auto& t : fusion_sources)
    if (!task_names().count(t)) throw ConfigError("fusion_sources: unknown task '" + t + "'");
  for (const auto& t : temporal_heads)
    if (!task_names().count(t)) throw ConfigError("temporal_heads: unknown task '" + t + "'");

  const TaskSet set = task_set();
  auto check_lambda = [&](const std::optional<double>& l, bool included, const char* key) {
    if (!l) return;
    if (!(*l >= 0.0) || !std::isfinite(*l))
      throw ConfigError(std::string(key) + ": must be a finite non-negative number");
    if (*l > 0.0 && !included)
      throw ConfigError(std::string(key) + ": positive weight for a task outside 'tasks'");
  };
  check_lambda(lambda_au, set.contains(Task::AU), "lambda_au");
  check_lambda(lambda_expr, set.contains(Task::EXPR), "lambda_expr");
  check_lambda(lambda_va, set.has_va(), "lambda_va");
  const LossWeights w = loss_weights();
  if (w.au == 0.0 && w.expr == 0.0 && w.va == 0.0)
    throw ConfigError("lambda_*: every task weight is zero");

  if (seq_len < 1) throw ConfigError("seq_len: must be at least 1");
  if (temporal && seq_len < 2) throw ConfigError("seq_len: temporal modelling needs seq_len >= 2");
  if (window_stride < 1 || window_stride > seq_len)
    throw ConfigError("window_stride: must lie in [1, seq_len]");
  if (batch_size < 1) throw ConfigError("batch_size: must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate: must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1: must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2: must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps: must be positive");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip: must be non-negative (0 disables)");
  if (feature_dim < 1 || encoder_hidden < 1)
    throw ConfigError("feature_dim / encoder_hidden: must be at least 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout: must lie in [0, 1)");
  if (!(leaky_slope >= 0.0)) throw ConfigError("leaky_slope: must be non-negative");
  if (!(au_threshold > 0.0 && au_threshold < 1.0))
    throw ConfigError("au_threshold: must lie in (0, 1)");
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("val_fraction: must lie in (0, 1)");
}

bool is_json_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

json config_to_json(const TrainConfig& c) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return json{
      {"tasks", c.tasks},
      {"lambda_au", opt(c.lambda_au)},
      {"lambda_expr", opt(c.lambda_expr)},
      {"lambda_va", opt(c.lambda_va)},
      {"fusion_sources", c.fusion_sources},
      {"fusion_passthrough", c.fusion_passthrough},
      {"temporal", c.temporal},
      {"seq_len", c.seq_len},
      {"window_stride", c.window_stride},
      {"temporal_heads", c.temporal_heads},
      {"batch_size", c.batch_size},
      {"learning_rate", c.learning_rate},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"adam_eps", c.adam_eps},
      {"grad_clip", c.grad_clip},
      {"max_epochs", c.max_epochs},
      {"patience", c.patience},
      {"seed", c.seed},
      {"shuffle", c.shuffle},
      {"class_weights", weight_mode_name(c.class_weights)},
      {"init_from", init_name(c.init_from)},
      {"feature_dim", c.feature_dim},
      {"encoder_hidden", c.encoder_hidden},
      {"leaky_slope", c.leaky_slope},
      {"dropout", c.dropout},
      {"au_threshold", c.au_threshold},
      {"absent_class_f1", to_string(c.absent_class_f1)},
      {"val_fraction", c.val_fraction},
  };
}

namespace {

class Reader {
 public:
  explicit Reader(const json& j) : j_(j) {}

  const json& at(const char* key) const { return j_.at(key); }

  std::size_t count(const char* key) const {
    const json& v = at(key);
    if (!is_json_count(v)) throw ConfigError(std::string(key) + ": expected a non-negative integer");
    return v.get<std::size_t>();
  }
  std::uint64_t u64(const char* key) const {
    const json& v = at(key);
    if (!is_json_count(v)) throw ConfigError(std::string(key) + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
  }
  double number(const char* key) const {
    const json& v = at(key);
    if (!v.is_number()) throw ConfigError(std::string(key) + ": expected a number");
    return v.get<double>();
  }
  std::optional<double> optional_number(const char* key) const {
    if (at(key).is_null()) return std::nullopt;
    return number(key);
  }
  bool boolean(const char* key) const {
    const json& v = at(key);
    if (!v.is_boolean()) throw ConfigError(std::string(key) + ": expected true or false");
    return v.get<bool>();
  }
  std::string string(const char* key) const {
    const json& v = at(key);
    if (!v.is_string()) throw ConfigError(std::string(key) + ": expected a string");
    return v.get<std::string>();
  }
  std::vector<std::string> strings(const char* key) const {
    const json& v = at(key);
    if (!v.is_array()) throw ConfigError(std::string(key) + ": expected a list of names");
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string()) throw ConfigError(std::string(key) + ": expected a list of names");
      out.push_back(e.get<std::string>());
    }
    return out;
  }

 private:
  const json& j_;
};

}  // namespace

TrainConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  json merged = config_to_json(TrainConfig{});
  for (const auto& [key, value] : j.items()) {
    if (!merged.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    merged[key] = value;
  }
  const Reader r(merged);
  TrainConfig c;
  c.tasks = r.strings("tasks");
  c.lambda_au = r.optional_number("lambda_au");
  c.lambda_expr = r.optional_number("lambda_expr");
  c.lambda_va = r.optional_number("lambda_va");
  c.fusion_sources = r.strings("fusion_sources");
  c.fusion_passthrough = r.boolean("fusion_passthrough");
  c.temporal = r.boolean("temporal");
  c.seq_len = r.count("seq_len");
  c.window_stride = r.count("window_stride");
  c.temporal_heads = r.strings("temporal_heads");
  c.batch_size = r.count("batch_size");
  c.learning_rate = r.number("learning_rate");
  c.beta1 = r.number("beta1");
  c.beta2 = r.number("beta2");
  c.adam_eps = r.number("adam_eps");
  c.grad_clip = r.number("grad_clip");
  c.max_epochs = r.count("max_epochs");
  c.patience = r.count("patience");
  c.seed = r.u64("seed");
  c.shuffle = r.boolean("shuffle");
  const std::string cw = r.string("class_weights");
  if (cw == "inverse_frequency")
    c.class_weights = ClassWeightMode::InverseFrequency;
  else if (cw == "ones")
    c.class_weights = ClassWeightMode::Ones;
  else
    throw ConfigError("class_weights: expected 'inverse_frequency' or 'ones', got '" + cw + "'");
  const std::string init = r.string("init_from");
  if (init == "single")
    c.init_from = InitFrom::Single;
  else if (init == "scratch")
    c.init_from = InitFrom::Scratch;
  else
    throw ConfigError("init_from: expected 'single' or 'scratch', got '" + init + "'");
  c.feature_dim = r.count("feature_dim");
  c.encoder_hidden = r.count("encoder_hidden");
  c.leaky_slope = r.number("leaky_slope");
  c.dropout = r.number("dropout");
  c.au_threshold = r.number("au_threshold");
  try {
    c.absent_class_f1 = parse_absent_rule(r.string("absent_class_f1"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("absent_class_f1: ") + e.what());
  }
  c.val_fraction = r.number("val_fraction");
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void apply_override(json& j, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  const std::string key(trim(assignment.substr(0, eq)));
  const std::string text(trim(assignment.substr(eq + 1)));
  const json defaults = config_to_json(TrainConfig{});
  if (!defaults.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) {
    if (defaults[key].is_array()) {
      value = json::array();
      for (const auto& part : split(text, ','))
        if (!trim(part).empty()) value.push_back(std::string(trim(part)));
    } else {
      value = text;
    }
  }
  j[key] = std::move(value);
}

std::string config_hash(const TrainConfig& config) {
  return hex64(fnv1a64(config_to_json(config).dump()));
}

std::vector<ConfigKeyDoc> config_key_docs() {
  static const std::vector<std::pair<std::string, std::string>> text = {
      {"tasks", "trained tasks (AU, EXPR, V, A, VA); the first selects the validation metric"},
      {"lambda_au", "AU loss weight; null = 1 when AU is trained, else 0"},
      {"lambda_expr", "EXPR loss weight; null = 1 when EXPR is trained, else 0"},
      {"lambda_va", "VA loss weight; null = 1 when V or A is trained, else 0"},
      {"fusion_sources", "feature banks summed into the fusion module (joint training)"},
      {"fusion_passthrough", "identity fusion weights, frozen, no dropout"},
      {"temporal", "enable the recurrent temporal module"},
      {"seq_len", "window length S"},
      {"window_stride", "stride W between window starts (1 <= W <= S)"},
      {"temporal_heads", "heads fed by the temporal module when it is on"},
      {"batch_size", "windows per batch"},
      {"learning_rate", "Adam step size"},
      {"beta1", "Adam first-moment decay"},
      {"beta2", "Adam second-moment decay"},
      {"adam_eps", "Adam denominator epsilon"},
      {"grad_clip", "global gradient-norm clip (0 disables)"},
      {"max_epochs", "training epochs"},
      {"patience", "stop after this many epochs without improvement"},
      {"seed", "initialisation, shuffling and dropout seed"},
      {"shuffle", "shuffle window order every epoch"},
      {"class_weights", "inverse_frequency or ones"},
      {"init_from", "joint training start: single (from --init) or scratch"},
      {"feature_dim", "encoder output width d"},
      {"encoder_hidden", "encoder hidden width"},
      {"leaky_slope", "negative slope of the leaky ReLUs"},
      {"dropout", "fusion-module dropout"},
      {"au_threshold", "AU decision threshold (strict >)"},
      {"absent_class_f1", "F1 of a class absent from predictions and targets: one or zero"},
      {"val_fraction", "share of videos held out for validation"},
  };
  const json defaults = config_to_json(TrainConfig{});
  std::vector<ConfigKeyDoc> out;
  for (const auto& [key, desc] : text) out.push_back({key, defaults.at(key).dump(), desc});
  return out;
}

std::optional<double> selection_score(const EvalReport& r, const std::string& task) {
  if (task == "AU") return r.au_f1_macro;
  if (task == "EXPR") return r.expr_f1_macro;
  if (task == "V") return r.ccc_valence;
  if (task == "A") return r.ccc_arousal;
  if (task == "VA") return r.mean_ccc;
  throw ConfigError("unknown task '" + task + "'");
}

// ---- feature banks ------------------------------------------------------------------

const std::vector<double>& FeatureBank::at(const FrameKey& key) const {
  auto it = vectors.find(key);
  if (it == vectors.end())
    throw ValidationError("feature bank " + source + " has no entry for " + to_string(key));
  return it->second;
}

std::string encode_bank(const FeatureBank& bank) {
  BinaryWriter w;
  w.u32(1);
  w.string(json{{"source", bank.source},
                {"provenance", bank.provenance},
                {"checkpoint_hash", bank.checkpoint_hash},
                {"dim", bank.dim}}
               .dump());
  w.u64(bank.vectors.size());
  for (const auto& [key, v] : bank.vectors) {
    if (v.size() != bank.dim) throw DimensionError("feature bank: ragged vector at " + to_string(key));
    w.string(key.video_id);
    w.u32(key.frame_index);
    for (double x : v) w.f64(x);
  }
  return w.bytes();
}

FeatureBank decode_bank(std::string_view bytes, const std::string& source) {
  BinaryReader r(bytes, source);
  if (r.u32() != 1) throw IoError(source + ": unsupported feature bank version");
  FeatureBank bank;
  try {
    const json h = json::parse(r.string());
    bank.source = h.at("source").get<std::string>();
    bank.provenance = h.at("provenance").get<std::string>();
    bank.checkpoint_hash = h.at("checkpoint_hash").get<std::string>();
    bank.dim = h.at("dim").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError(source + ": bad feature bank header: " + e.what());
  }
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    FrameKey key;
    key.video_id = r.string();
    key.frame_index = r.u32();
    std::vector<double> v(bank.dim);
    for (auto& x : v) x = r.f64();
    bank.vectors.emplace(std::move(key), std::move(v));
  }
  if (!r.at_end()) throw IoError(source + ": trailing bytes");
  return bank;
}

void save_bank(const std::filesystem::path& path, const FeatureBank& bank) {
  write_file_atomic(path, encode_bank(bank));
}

FeatureBank load_bank(const std::filesystem::path& path) {
  return decode_bank(read_file(path), path.string());
}

Tensor gather_bank_sum(const BankSet& banks, const std::vector<std::string>& sources,
                       std::span<const FrameKey> keys, std::size_t dim) {
  std::vector<double> out(keys.size() * dim, 0.0);
  for (const auto& src : sources) {
    auto it = banks.find(src);
    if (it == banks.end()) throw ConfigError("no feature bank for fusion source '" + src + "'");
    for (std::size_t i = 0; i < keys.size(); ++i) {
      const auto& v = it->second.at(keys[i]);
      for (std::size_t k = 0; k < dim; ++k) out[i * dim + k] += v[k];
    }
  }
  return Tensor::from({keys.size(), dim}, std::move(out));
}

// ---- checkpoints --------------------------------------------------------------------

std::string encode_checkpoint(const Checkpoint& c) {
  const json header{{"architecture", arch_to_json(c.model.spec())},
                    {"config", config_to_json(c.config)},
                    {"stage", c.stage},
                    {"best_score", c.best_score},
                    {"best_epoch", c.best_epoch}};
  return encode_param_file(header, c.model.parameters());
}

Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source) {
  const ParamFile file = decode_param_file(bytes, source);
  Checkpoint c;
  try {
    c.model = model_from_param_file(file);
    c.config = config_from_json(file.header.at("config"));
    c.stage = file.header.at("stage").get<std::string>();
    c.best_score = file.header.at("best_score").get<double>();
    c.best_epoch = file.header.at("best_epoch").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError(source + ": bad checkpoint header: " + e.what());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

std::string checkpoint_hash(const Checkpoint& ckpt) { return hex64(fnv1a64(encode_checkpoint(ckpt))); }

// ---- training -----------------------------------------------------------------------

ArchSpec arch_for(const TrainConfig& c, std::size_t input_dim, bool fusion) {
  ArchSpec a;
  a.input_dim = input_dim;
  a.feature_dim = c.feature_dim;
  a.encoder_hidden = c.encoder_hidden;
  a.leaky_slope = c.leaky_slope;
  a.fusion = fusion;
  a.fusion_passthrough = fusion && c.fusion_passthrough;
  a.dropout = c.dropout;
  a.temporal = c.temporal;
  a.temporal_heads = TaskSet::parse(c.temporal_heads);
  return a;
}

namespace {

// Labels of a batch with padded frames turned into sentinels.
struct Labels {
  std::vector<double> valence, arousal;
  std::vector<int> expression;
  std::vector<AuLabels> aus;
};

Labels masked_labels(const Batch& b) {
  Labels l{b.valence, b.arousal, b.expression, b.aus};
  for (std::size_t i = 0; i < b.rows(); ++i) {
    if (b.pad_mask[i]) continue;
    l.valence[i] = l.arousal[i] = kVaSentinel;
    l.expression[i] = kExprSentinel;
    l.aus[i].fill(kAuSentinel);
  }
  return l;
}

struct StepLosses {
  std::optional<Tensor> total;
  TaskLosses parts;
};

template <typename F>
std::optional<Tensor> maybe(F&& f) {
  try {
    return f();
  } catch (const EmptyBatchError&) {
    return std::nullopt;
  }
}

StepLosses compute_losses(const Model& model, const TrainConfig& cfg, const Batch& batch,
                          const BankSet& banks, const ClassWeights& cw, ForwardMode& mode) {
  const TaskSet tasks = cfg.task_set();
  const LossWeights lambda = cfg.loss_weights();
  std::optional<Tensor> other;
  if (!cfg.fusion_sources.empty())
    other = gather_bank_sum(banks, cfg.fusion_sources, batch.keys, model.spec().feature_dim);
  const Predictions p =
      model.forward(batch.frames, other ? &*other : nullptr, batch.b, batch.s, tasks, mode);
  const Labels y = masked_labels(batch);

  StepLosses out;
  if (lambda.au > 0.0) out.parts.au = maybe([&] { return au_loss(*p.au, y.aus, cw); });
  if (lambda.expr > 0.0) out.parts.expr = maybe([&] { return expr_loss(*p.expr, y.expression, cw); });
  if (lambda.va > 0.0) {
    out.parts.va = maybe([&]() -> Tensor {
      std::optional<Tensor> v, a;
      if (tasks.contains(Task::V)) v = va_component_loss(column(*p.va, 0), y.valence);
      if (tasks.contains(Task::A)) a = va_component_loss(column(*p.va, 1), y.arousal);
      return v && a ? add(*v, *a) : v ? *v : *a;
    });
  }
  try {
    out.total = overall_loss(out.parts, lambda).total;
  } catch (const EmptyBatchError&) {
  }
  return out;
}

bool keep_for_training(const AnnotationRecord& r, TaskSet tasks, const LossWeights& lambda) {
  if (lambda.au > 0.0 && r.au_valid()) return true;
  if (lambda.expr > 0.0 && r.expr_valid()) return true;
  if (lambda.va > 0.0) {
    if (tasks.contains(Task::V) && va_valid(r.valence)) return true;
    if (tasks.contains(Task::A) && va_valid(r.arousal)) return true;
  }
  return false;
}

DatasetSplit training_records(const TrainConfig& cfg, const DatasetSplit& split) {
  const TaskSet tasks = cfg.task_set();
  const LossWeights lambda = cfg.loss_weights();
  std::vector<AnnotationRecord> kept;
  for (const auto& r : split.records)
    if (keep_for_training(r, tasks, lambda)) kept.push_back(r);
  return DatasetSplit::from(std::move(kept));
}

ClassWeights class_weights_for(const TrainConfig& cfg, const DatasetSplit& train) {
  const LossWeights lambda = cfg.loss_weights();
  if (cfg.class_weights == ClassWeightMode::Ones || (lambda.au == 0.0 && lambda.expr == 0.0))
    return ClassWeights::ones();
  return compute_class_weights(train.records);
}

std::string routing_of(const Model& m) {
  if (!m.spec().temporal) return "frame";
  return "temporal:" + m.spec().temporal_heads.to_string();
}

void check_bank_coverage(const BankSet& banks, const TrainConfig& cfg, const Splits& splits) {
  for (const auto& src : cfg.fusion_sources) {
    auto it = banks.find(src);
    if (it == banks.end()) throw ConfigError("no feature bank for fusion source '" + src + "'");
    const FeatureBank& bank = it->second;
    if (bank.provenance != "single")
      throw ConfigError("feature bank for '" + src + "' was not exported from single-task training");
    if (bank.source != src)
      throw ConfigError("feature bank given for '" + src + "' was produced by a " + bank.source +
                        " run");
    if (bank.dim != cfg.feature_dim)
      throw ConfigError("feature bank for '" + src + "' has dim " + std::to_string(bank.dim) +
                        ", expected " + std::to_string(cfg.feature_dim));
    std::vector<std::string> missing;
    for (const DatasetSplit* s : {&splits.train, &splits.val})
      for (const auto& r : s->records)
        if (!bank.vectors.count(r.key()) && missing.size() < 10) missing.push_back(to_string(r.key()));
    if (!missing.empty())
      throw ValidationError("feature bank for '" + src + "' lacks frames: " + join(missing, ", "));
  }
}

TrainResult run_training(const TrainConfig& cfg, Model model, const DatasetSplit& train,
                         const DatasetSplit& val, const BankSet& banks, const std::string& stage) {
  if (train.records.empty()) throw ValidationError("training split has no usable records");
  const std::string primary = cfg.tasks.front();
  const ClassWeights cw = class_weights_for(cfg, train);
  const auto windows = build_windows(train, cfg.seq_len, cfg.window_stride);
  const std::uint64_t order_seed = derive_seed(cfg.seed, "batch_order");
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  Adam adam({cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps});
  const auto params = model.parameters();

  TrainResult result;
  auto score_of = [&](const Model& m) {
    const EvalReport r = evaluate(m, cfg, val, banks);
    const auto s = selection_score(r, primary);
    if (!s) throw ValidationError("validation split has no labels for task " + primary);
    return *s;
  };

  struct Sums {
    double total = 0.0, au = 0.0, expr = 0.0, va = 0.0;
    std::size_t n = 0, n_au = 0, n_expr = 0, n_va = 0;
    void add(const StepLosses& l) {
      total += l.total->item();
      ++n;
      if (l.parts.au) au += l.parts.au->item(), ++n_au;
      if (l.parts.expr) expr += l.parts.expr->item(), ++n_expr;
      if (l.parts.va) va += l.parts.va->item(), ++n_va;
    }
    void fill(EpochLog& e) const {
      auto avg = [](double s, std::size_t k) { return k ? std::optional(s / static_cast<double>(k)) : std::nullopt; };
      e.train_loss = n ? total / static_cast<double>(n) : 0.0;
      e.loss_au = avg(au, n_au);
      e.loss_expr = avg(expr, n_expr);
      e.loss_va = avg(va, n_va);
    }
  };

  // Epoch 0: the initial weights, no updates.
  {
    Sums sums;
    ForwardMode eval_mode{false, nullptr};
    for (const auto& ids : batch_order(windows.size(), cfg.batch_size, 0, false)) {
      const Batch batch = make_batch(train, windows, ids);
      const StepLosses l = compute_losses(model, cfg, batch, banks, cw, eval_mode);
      if (l.total) sums.add(l);
    }
    EpochLog e;
    sums.fill(e);
    e.val_score = score_of(model);
    e.improved = true;
    result.epochs.push_back(e);
    result.best = {model.clone(), cfg, stage, e.val_score, 0};
  }

  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Sums sums;
    ForwardMode train_mode{true, &dropout_rng};
    for (const auto& ids :
         batch_order(windows.size(), cfg.batch_size, derive_seed(order_seed, epoch), cfg.shuffle)) {
      const Batch batch = make_batch(train, windows, ids);
      Tape tape;
      Tape::Scope scope(tape);
      const StepLosses l = compute_losses(model, cfg, batch, banks, cw, train_mode);
      if (!l.total) continue;
      tape.backward(*l.total);
      clip_grad_norm(params, cfg.grad_clip);
      adam.step(params);
      for (const auto& p : params) {
        Tensor t = p.tensor;
        t.zero_grad();
      }
      result.batch_losses.push_back(l.total->item());
      sums.add(l);
    }
    EpochLog e;
    e.epoch = epoch;
    sums.fill(e);
    e.val_score = score_of(model);
    if (e.val_score > result.best.best_score) {
      e.improved = true;
      result.best = {model.clone(), cfg, stage, e.val_score, epoch};
      stale = 0;
    } else {
      ++stale;
    }
    result.epochs.push_back(e);
    if (stale >= cfg.patience) break;
  }

  result.report = evaluate(result.best.model, cfg, val, banks);
  return result;
}

}  // namespace

TrainResult train_single(const TrainConfig& cfg, const Splits& splits) {
  cfg.validate();
  if (cfg.tasks.size() != 1)
    throw ConfigError("tasks: single-task training takes exactly one task");
  if (!cfg.fusion_sources.empty())
    throw ConfigError("fusion_sources: feature fusion belongs to joint training");
  const DatasetSplit train = training_records(cfg, splits.train);
  Model model = Model::init(arch_for(cfg, splits.train.input_dim(), false), cfg.seed);
  return run_training(cfg, std::move(model), train, splits.val, {}, "single");
}

TrainResult train_joint(const TrainConfig& cfg, const Splits& splits, const BankSet& banks,
                        const Checkpoint* init) {
  cfg.validate();
  check_bank_coverage(banks, cfg, splits);
  Model model = Model::init(arch_for(cfg, splits.train.input_dim(), true), cfg.seed);
  if (cfg.init_from == InitFrom::Single) {
    if (!init) throw ConfigError("init_from: 'single' needs a single-task checkpoint");
    if (init->stage != "single")
      throw ConfigError("init_from: checkpoint comes from a '" + init->stage + "' run");
    const ArchSpec& a = init->model.spec();
    if (a.input_dim != model.spec().input_dim || a.feature_dim != model.spec().feature_dim ||
        a.encoder_hidden != model.spec().encoder_hidden)
      throw ConfigError("init_from: checkpoint dimensions differ from the config");
    model.copy_matching(init->model);
  }
  const DatasetSplit train = training_records(cfg, splits.train);
  return run_training(cfg, std::move(model), train, splits.val, banks, "joint");
}

FeatureBank extract_bank(const Checkpoint& ckpt, std::span<const DatasetSplit* const> splits) {
  FeatureBank bank;
  bank.source = ckpt.config.tasks.front();
  bank.provenance = ckpt.stage;
  bank.checkpoint_hash = checkpoint_hash(ckpt);
  bank.dim = ckpt.model.spec().feature_dim;
  constexpr std::size_t kChunk = 256;
  for (const DatasetSplit* split : splits) {
    const auto& recs = split->records;
    for (std::size_t begin = 0; begin < recs.size(); begin += kChunk) {
      const std::size_t end = std::min(recs.size(), begin + kChunk);
      const std::size_t dim = split->input_dim();
      std::vector<double> x;
      x.reserve((end - begin) * dim);
      for (std::size_t i = begin; i < end; ++i) {
        if (recs[i].features.size() != dim)
          throw DimensionError("extract_bank: ragged features at " + to_string(recs[i].key()));
        x.insert(x.end(), recs[i].features.begin(), recs[i].features.end());
      }
      const Tensor f = ckpt.model.features(Tensor::from({end - begin, dim}, std::move(x)));
      const auto v = f.values();
      for (std::size_t i = begin; i < end; ++i) {
        auto first = v.begin() + static_cast<std::ptrdiff_t>((i - begin) * bank.dim);
        bank.vectors[recs[i].key()] = std::vector<double>(first, first + static_cast<std::ptrdiff_t>(bank.dim));
      }
    }
  }
  return bank;
}

EvalReport evaluate(const Model& model, const TrainConfig& cfg, const DatasetSplit& split,
                    const BankSet& banks) {
  if (split.records.empty()) throw ValidationError("evaluate: empty split");
  const TaskSet tasks = cfg.task_set();
  const auto windows = build_windows(split, cfg.seq_len, cfg.seq_len);
  std::vector<double> au_p, expr_p, v_p, a_p, v_t, a_t;
  std::vector<AuLabels> au_t;
  std::vector<int> expr_t;
  ForwardMode mode{false, nullptr};
  for (const auto& ids : batch_order(windows.size(), cfg.batch_size, 0, false)) {
    const Batch batch = make_batch(split, windows, ids);
    std::optional<Tensor> other;
    if (!cfg.fusion_sources.empty())
      other = gather_bank_sum(banks, cfg.fusion_sources, batch.keys, model.spec().feature_dim);
    const Predictions p =
        model.forward(batch.frames, other ? &*other : nullptr, batch.b, batch.s, tasks, mode);
    for (std::size_t i = 0; i < batch.rows(); ++i) {
      if (!batch.pad_mask[i]) continue;
      if (p.au) {
        const auto row = p.au->values().subspan(i * kNumAus, kNumAus);
        au_p.insert(au_p.end(), row.begin(), row.end());
        au_t.push_back(batch.aus[i]);
      }
      if (p.expr) {
        const auto row = p.expr->values().subspan(i * kNumExpr, kNumExpr);
        expr_p.insert(expr_p.end(), row.begin(), row.end());
        expr_t.push_back(batch.expression[i]);
      }
      if (p.va) {
        v_p.push_back((*p.va)[i * 2]);
        a_p.push_back((*p.va)[i * 2 + 1]);
        v_t.push_back(batch.valence[i]);
        a_t.push_back(batch.arousal[i]);
      }
    }
  }

  EvalReport r;
  r.absent_rule = cfg.absent_class_f1;
  r.au_threshold = cfg.au_threshold;
  r.routing = routing_of(model);
  r.config_hash = config_hash(cfg);
  r.seed = cfg.seed;
  bool any = false;
  if (tasks.contains(Task::AU)) {
    try {
      const AuScores s = au_macro_f1(au_p, au_t, cfg.au_threshold, cfg.absent_class_f1);
      r.au_f1_per_unit = s.per_unit;
      r.au_f1_macro = s.macro;
      r.au_evaluated = s.evaluated;
      r.au_skipped = s.skipped;
      any = true;
    } catch (const ValidationError&) {
      r.au_skipped = au_t.size();
    }
  }
  if (tasks.contains(Task::EXPR)) {
    try {
      const ExprScores s = expr_macro_f1(expr_p, expr_t, cfg.absent_class_f1);
      r.expr_f1_per_class = s.per_class;
      r.expr_f1_macro = s.macro;
      r.expr_evaluated = s.evaluated;
      r.expr_skipped = s.skipped;
      any = true;
    } catch (const ValidationError&) {
      r.expr_skipped = expr_t.size();
    }
  }
  auto va_metric = [&](const std::vector<double>& pred, const std::vector<double>& target,
                       std::optional<double>& slot) {
    try {
      slot = ccc_metric(pred, target);
      any = true;
    } catch (const Error&) {
    }
  };
  if (tasks.contains(Task::V)) va_metric(v_p, v_t, r.ccc_valence);
  if (tasks.contains(Task::A)) va_metric(a_p, a_t, r.ccc_arousal);
  if (tasks.has_va()) {
    for (std::size_t i = 0; i < v_t.size(); ++i) {
      const bool valid = (!tasks.contains(Task::V) || va_valid(v_t[i])) &&
                         (!tasks.contains(Task::A) || va_valid(a_t[i]));
      (valid ? r.va_evaluated : r.va_skipped) += 1;
    }
  }
  if (!any) throw ValidationError("evaluate: the split has no valid labels for any configured task");
  finalize(r);
  return r;
}

std::string log_csv(const std::vector<EpochLog>& epochs) {
  std::ostringstream os;
  os << "epoch,train_loss,loss_au,loss_expr,loss_va,val_score,improved\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  for (const auto& e : epochs)
    os << e.epoch << ',' << format_double(e.train_loss) << ',' << opt(e.loss_au) << ','
       << opt(e.loss_expr) << ',' << opt(e.loss_va) << ',' << format_double(e.val_score) << ','
       << (e.improved ? 1 : 0) << '\n';
  return os.str();
}

void write_run_dir(const std::filesystem::path& dir, const TrainResult& result) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "config", config_to_json(result.best.config).dump(2) + "\n");
  save_checkpoint(dir / "checkpoint.best", result.best);
  write_file_atomic(dir / "log.csv", log_csv(result.epochs));
  write_file_atomic(dir / "report", to_key_value(result.report));
  write_file_atomic(dir / "report.json", to_json(result.report).dump(2) + "\n");
}

}  // namespace affmtl
