#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "affmtl/data.hpp"
#include "affmtl/layers.hpp"
#include "affmtl/metrics.hpp"
#include "affmtl/objectives.hpp"

namespace affmtl {

// ---- optimizer ----------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment update with bias correction. Moments are keyed by parameter
// name. Every gradient is checked before any parameter moves, so a non-finite
// gradient leaves the model untouched.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Updates every trainable parameter that holds a gradient.
  void step(const std::vector<NamedParam>& params);
  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig config_;
  std::size_t t_ = 0;
  std::map<std::string, Moments> moments_;
};

// Rescales the gradients of trainable parameters so their joint L2 norm is at
// most max_norm. Returns the norm before clipping.
double clip_grad_norm(const std::vector<NamedParam>& params, double max_norm);

// ---- configuration ------------------------------------------------------------------

enum class ClassWeightMode { InverseFrequency, Ones };
enum class InitFrom { Single, Scratch };

struct TrainConfig {
  // The first entry picks the validation metric: AU and EXPR use macro F1,
  // V and A their own CCC, VA the mean CCC.
  std::vector<std::string> tasks{"EXPR"};
  // Unset weights resolve to 1 for trained tasks and 0 otherwise.
  std::optional<double> lambda_au, lambda_expr, lambda_va;
  std::vector<std::string> fusion_sources;
  bool fusion_passthrough = false;
  bool temporal = false;
  std::size_t seq_len = 1;
  std::size_t window_stride = 1;
  std::vector<std::string> temporal_heads{"EXPR", "V", "A"};
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 5.0;
  std::size_t max_epochs = 30;
  std::size_t patience = 8;
  std::uint64_t seed = 0;
  bool shuffle = true;
  ClassWeightMode class_weights = ClassWeightMode::InverseFrequency;
  InitFrom init_from = InitFrom::Single;
  std::size_t feature_dim = 16;
  std::size_t encoder_hidden = 32;
  double leaky_slope = 0.01;
  double dropout = 0.1;
  double au_threshold = 0.5;
  AbsentClassRule absent_class_f1 = AbsentClassRule::One;
  double val_fraction = 0.25;

  TaskSet task_set() const;
  LossWeights loss_weights() const;
  // Throws ConfigError describing the first violated rule.
  void validate() const;

  bool operator==(const TrainConfig&) const = default;
};

// True for integral JSON numbers >= 0, whether stored signed or unsigned.
bool is_json_count(const nlohmann::json& v);

nlohmann::json config_to_json(const TrainConfig& config);
// Strict: unknown keys and wrongly typed values raise ConfigError naming the key.
TrainConfig config_from_json(const nlohmann::json& j);
TrainConfig load_config(const std::filesystem::path& path);
// Applies "key=value". The value is read as JSON when it parses, otherwise as
// a string; list-valued keys also accept comma-separated names.
void apply_override(nlohmann::json& j, std::string_view assignment);
std::string config_hash(const TrainConfig& config);

struct ConfigKeyDoc {
  std::string key;
  std::string default_value;
  std::string description;
};
std::vector<ConfigKeyDoc> config_key_docs();

// Score used to select checkpoints for the given task name (AU, EXPR, V, A, VA).
std::optional<double> selection_score(const EvalReport& report, const std::string& task);

// ---- feature banks ------------------------------------------------------------------

struct FeatureBank {
  std::string source;      // task name of the producing run (AU, EXPR, V, A or VA)
  std::string provenance;  // "single" for banks exported from single-task training
  std::string checkpoint_hash;
  std::size_t dim = 0;
  FeatureMap vectors;

  const std::vector<double>& at(const FrameKey& key) const;
  bool operator==(const FeatureBank&) const = default;
};

std::string encode_bank(const FeatureBank& bank);
FeatureBank decode_bank(std::string_view bytes, const std::string& source = "<memory>");
void save_bank(const std::filesystem::path& path, const FeatureBank& bank);
FeatureBank load_bank(const std::filesystem::path& path);

using BankSet = std::map<std::string, FeatureBank>;

// Sum of the selected banks' vectors for each key, shape [keys, d].
Tensor gather_bank_sum(const BankSet& banks, const std::vector<std::string>& sources, std::span<const FrameKey> keys,
                       std::size_t dim);

// ---- checkpoints --------------------------------------------------------------------

struct Checkpoint {
  Model model;
  TrainConfig config;
  std::string stage;  // "single" or "joint"
  double best_score = 0.0;
  std::size_t best_epoch = 0;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source = "<memory>");
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_hash(const Checkpoint& ckpt);

// ---- training -----------------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean over batches of the weighted total
  std::optional<double> loss_au, loss_expr, loss_va;
  double val_score = 0.0;
  bool improved = false;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> epochs;       // epoch 0 evaluates the initial weights
  std::vector<double> batch_losses;   // every optimizer step, in order
  EvalReport report;                  // validation report of the best checkpoint
};

ArchSpec arch_for(const TrainConfig& config, std::size_t input_dim, bool fusion);

// Encoder plus the task's head on the task's valid records only.
TrainResult train_single(const TrainConfig& config, const Splits& splits);

// Fusion module on top of the encoder; f_other is the sum of the configured
// banks. With init_from = single the trainable weights start from `init`.
TrainResult train_joint(const TrainConfig& config, const Splits& splits, const BankSet& banks,
                        const Checkpoint* init);

// Evaluation-mode encoder outputs for every record of the given splits.
FeatureBank extract_bank(const Checkpoint& ckpt, std::span<const DatasetSplit* const> splits);

// Dropout off, windows of the model's S with stride S, padded frames dropped.
EvalReport evaluate(const Model& model, const TrainConfig& config, const DatasetSplit& split,
                    const BankSet& banks);

// Writes config, checkpoint.best, log.csv, report and report.json.
void write_run_dir(const std::filesystem::path& dir, const TrainResult& result);
std::string log_csv(const std::vector<EpochLog>& epochs);

}  // namespace affmtl
