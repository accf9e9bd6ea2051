#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "affmtl/errors.hpp"
#include "affmtl/training.hpp"

using namespace affmtl;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

const Splits& small_splits() {
  static const Splits splits = [] {
    SynthOptions opt;
    opt.num_videos = 4;
    opt.frames_per_video = 120;
    opt.input_dim = 12;
    opt.sentinel_rates = {0.05, 0.05, 0.05};
    return split_by_video(synth_generate(opt), 0.25);
  }();
  return splits;
}

TrainConfig small_config(std::vector<std::string> tasks, std::size_t epochs = 3) {
  TrainConfig c;
  c.tasks = std::move(tasks);
  c.max_epochs = epochs;
  c.feature_dim = 8;
  c.encoder_hidden = 12;
  c.batch_size = 32;
  return c;
}

const TrainResult& au_single() {
  static const TrainResult r = train_single(small_config({"AU"}), small_splits());
  return r;
}

BankSet au_bank_set() {
  const DatasetSplit* parts[] = {&small_splits().train, &small_splits().val};
  return {{"AU", extract_bank(au_single().best, parts)}};
}

}  // namespace

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  Tensor w = Tensor::from({3}, {0.5, -1.0, 2.0});
  w.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(scale(w, 0.0)));
  }
  Adam adam;
  adam.step({{"w", w, true}});
  CHECK(vec(w) == std::vector<double>{0.5, -1.0, 2.0});
}

TEST_CASE("adam: first bias-corrected step moves by the learning rate") {
  Tensor x = Tensor::scalar(3.0);
  x.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(x));  // d/dx = 1
  }
  Adam adam;  // lr 1e-4
  adam.step({{"x", x, true}});
  // m_hat = 1, v_hat = 1, step = lr / (1 + eps)
  CHECK(x.item() == doctest::Approx(3.0 - 1e-4 / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(adam.steps() == 1);
}

TEST_CASE("adam: quadratic bowl converges within 2000 steps") {
  Tensor x = Tensor::scalar(1.0);
  x.set_requires_grad(true);
  Adam adam({0.01, 0.9, 0.999, 1e-8});
  std::size_t steps = 0;
  for (; steps < 2000 && std::fabs(x.item()) >= 1e-3; ++steps) {
    Tape tape;
    {
      Tape::Scope scope(tape);
      tape.backward(mul(x, x));
    }
    adam.step({{"x", x, true}});
    x.zero_grad();
  }
  CHECK(std::fabs(x.item()) < 1e-3);
  CHECK(steps <= 2000);
}

TEST_CASE("adam: a non-finite gradient names the parameter and moves nothing") {
  Tensor good = Tensor::scalar(1.0);
  Tensor bad = Tensor::scalar(0.0);
  good.set_requires_grad(true);
  bad.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(add(good, mul(bad, Tensor::scalar(INFINITY))));
  }
  Adam adam;
  try {
    adam.step({{"encoder.good", good, true}, {"heads.bad", bad, true}});
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("heads.bad") != std::string::npos);
  }
  CHECK(good.item() == 1.0);
}

TEST_CASE("clip_grad_norm rescales to the limit and reports the original norm") {
  Tensor a = Tensor::from({2}, {0.0, 0.0});
  a.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum(mul(a, Tensor::from({2}, {3.0, 4.0}))));
  }
  const double norm = clip_grad_norm({{"a", a, true}}, 1.0);
  CHECK(norm == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(a.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("config: defaults, strict parsing, overrides, hashing") {
  const TrainConfig defaults;
  CHECK(config_from_json(nlohmann::json::object()) == defaults);
  CHECK(config_from_json(config_to_json(defaults)) == defaults);
  CHECK_THROWS_WITH_AS(config_from_json({{"learning_rat", 0.1}}), "unknown config key 'learning_rat'", ConfigError);
  CHECK_THROWS_AS(config_from_json({{"batch_size", "big"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json({{"batch_size", -3}}), ConfigError);

  nlohmann::json j = nlohmann::json::object();
  apply_override(j, "tasks=VA,AU");
  apply_override(j, "lambda_au=0.5");
  apply_override(j, "temporal=true");
  apply_override(j, "seq_len=5");
  apply_override(j, "window_stride=5");
  apply_override(j, "class_weights=ones");
  const TrainConfig c = config_from_json(j);
  CHECK(c.tasks == std::vector<std::string>{"VA", "AU"});
  CHECK(c.loss_weights() == LossWeights{0.5, 0.0, 1.0});
  CHECK(c.class_weights == ClassWeightMode::Ones);
  CHECK_THROWS_AS(apply_override(j, "nonsense=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ConfigError);

  CHECK(config_hash(c) == config_hash(config_from_json(j)));
  CHECK(config_hash(c) != config_hash(defaults));

  TrainConfig bad = defaults;
  bad.temporal = true;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.seq_len = 4;
  bad.window_stride = 5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = defaults;
  bad.lambda_expr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = defaults;
  bad.lambda_au = 1.0;  // AU is not in the task set
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  for (const auto& doc : config_key_docs()) CHECK(config_to_json(defaults).contains(doc.key));
  CHECK(config_key_docs().size() == config_to_json(defaults).size());
}

TEST_CASE("train_single: zero epochs keeps the initial weights and their score") {
  const TrainConfig cfg = small_config({"EXPR"}, 0);
  const TrainResult r = train_single(cfg, small_splits());
  CHECK(r.epochs.size() == 1);
  CHECK(r.batch_losses.empty());
  CHECK(r.best.best_epoch == 0);
  const Model fresh = Model::init(arch_for(cfg, small_splits().train.input_dim(), false), cfg.seed);
  const auto a = r.best.model.parameters(), b = fresh.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(vec(a[i].tensor) == vec(b[i].tensor));
  CHECK(r.best.best_score == *r.report.expr_f1_macro);
  CHECK(r.best.stage == "single");
}

TEST_CASE("train_single: same seed, same run; config errors") {
  const TrainConfig cfg = small_config({"V"}, 2);
  const TrainResult a = train_single(cfg, small_splits());
  const TrainResult b = train_single(cfg, small_splits());
  CHECK(a.best.best_score == b.best.best_score);
  CHECK(a.batch_losses == b.batch_losses);
  CHECK(encode_checkpoint(a.best) == encode_checkpoint(b.best));

  TrainConfig two = cfg;
  two.tasks = {"V", "A"};
  CHECK_THROWS_AS(train_single(two, small_splits()), ConfigError);
  TrainConfig fused = cfg;
  fused.fusion_sources = {"AU"};
  CHECK_THROWS_AS(train_single(fused, small_splits()), ConfigError);
}

TEST_CASE("train_single: expression probe on the default synthetic corpus exceeds macro F1 0.9") {
  SynthOptions opt;  // defaults: 8 videos x 500 frames
  const Splits splits = split_by_video(synth_generate(opt), 0.25);
  TrainConfig cfg;
  cfg.tasks = {"EXPR"};
  const TrainResult r = train_single(cfg, splits);
  REQUIRE(r.report.expr_f1_macro.has_value());
  CHECK(*r.report.expr_f1_macro > 0.9);
  CHECK(r.epochs.size() <= 31);
}

TEST_CASE("training loss at epoch 5 is below epoch 0 for seeds 0..4") {
  for (const char* task : {"AU", "EXPR", "VA"}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      TrainConfig cfg = small_config({task}, 5);
      cfg.seed = seed;
      cfg.patience = 10;
      const TrainResult r = train_single(cfg, small_splits());
      REQUIRE(r.epochs.size() == 6);
      INFO(task << " seed " << seed);
      CHECK(r.epochs[5].train_loss < r.epochs[0].train_loss);
    }
  }
}

TEST_CASE("feature banks: coverage, determinism, zero encoder, round trip") {
  const Splits& s = small_splits();
  const BankSet banks = au_bank_set();
  const FeatureBank& bank = banks.at("AU");
  CHECK(bank.source == "AU");
  CHECK(bank.provenance == "single");
  CHECK(bank.dim == 8);
  CHECK(bank.vectors.size() == s.train.records.size() + s.val.records.size());
  for (const auto& r : s.val.records) CHECK(bank.at(r.key()).size() == 8);
  CHECK_THROWS_AS(bank.at(FrameKey{"missing", 0}), ValidationError);
  CHECK(au_bank_set().at("AU") == bank);
  CHECK(decode_bank(encode_bank(bank)) == bank);

  Checkpoint zero = au_single().best;
  zero.model = zero.model.clone();
  for (const auto& p : zero.model.parameters())
    if (p.name.rfind("encoder.output", 0) == 0) {
      Tensor t = p.tensor;
      for (auto& v : t.mutable_values()) v = 0.0;
    }
  const DatasetSplit* parts[] = {&s.val};
  for (const auto& [key, v] : extract_bank(zero, parts).vectors)
    for (double x : v) CHECK(x == 0.0);
}

TEST_CASE("train_joint: bank and initialisation preconditions") {
  const Splits& s = small_splits();
  TrainConfig cfg = small_config({"VA"}, 1);
  cfg.fusion_sources = {"AU"};
  cfg.init_from = InitFrom::Scratch;
  CHECK_THROWS_AS(train_joint(cfg, s, {}, nullptr), ConfigError);

  BankSet banks = au_bank_set();
  banks["AU"].provenance = "joint";
  CHECK_THROWS_AS(train_joint(cfg, s, banks, nullptr), ConfigError);

  banks = au_bank_set();
  banks["AU"].vectors.erase(s.val.records.front().key());
  CHECK_THROWS_AS(train_joint(cfg, s, banks, nullptr), ValidationError);

  banks = au_bank_set();
  cfg.init_from = InitFrom::Single;
  CHECK_THROWS_AS(train_joint(cfg, s, banks, nullptr), ConfigError);
  Checkpoint joint_ckpt = au_single().best;
  joint_ckpt.stage = "joint";
  CHECK_THROWS_AS(train_joint(cfg, s, banks, &joint_ckpt), ConfigError);
}

TEST_CASE("train_joint: fusion and temporal run, bank stays frozen, initialisation copies weights") {
  const Splits& s = small_splits();
  const BankSet banks = au_bank_set();
  const std::string before = encode_bank(banks.at("AU"));

  const TrainResult va_single = train_single(small_config({"VA"}, 2), s);
  TrainConfig cfg = small_config({"VA"}, 0);
  cfg.fusion_sources = {"AU"};
  cfg.temporal = true;
  cfg.seq_len = 5;
  cfg.window_stride = 5;
  const TrainResult init_only = train_joint(cfg, s, banks, &va_single.best);
  CHECK(vec(init_only.best.model.encoder.hidden.weight) == vec(va_single.best.model.encoder.hidden.weight));
  CHECK(vec(init_only.best.model.heads.va.weight) == vec(va_single.best.model.heads.va.weight));
  CHECK(init_only.best.stage == "joint");

  cfg.max_epochs = 2;
  const TrainResult r = train_joint(cfg, s, banks, &va_single.best);
  CHECK(r.report.routing == "temporal:EXPR|V|A");
  CHECK(r.report.ccc_valence.has_value());
  CHECK(encode_bank(banks.at("AU")) == before);
}

TEST_CASE("train_joint: a zero VA weight leaves the VA head bitwise unchanged") {
  const Splits& s = small_splits();
  TrainConfig cfg = small_config({"AU", "VA"}, 2);
  cfg.lambda_va = 0.0;
  cfg.fusion_sources = {"AU"};
  cfg.init_from = InitFrom::Scratch;
  const BankSet banks = au_bank_set();
  const Model init = Model::init(arch_for(cfg, s.train.input_dim(), true), cfg.seed);
  const TrainResult r = train_joint(cfg, s, banks, nullptr);
  REQUIRE(r.best.best_epoch > 0);
  CHECK(vec(r.best.model.heads.va.weight) == vec(init.heads.va.weight));
  CHECK(vec(r.best.model.heads.va.bias) == vec(init.heads.va.bias));
  CHECK(vec(r.best.model.heads.au.weight) != vec(init.heads.au.weight));
  // VA is still scored even though it is not trained.
  CHECK(r.report.ccc_valence.has_value());
}

TEST_CASE("train_joint with a pass-through fusion layer and no sources reduces to train_single") {
  for (const char* task : {"EXPR", "VA"}) {
    TrainConfig single = small_config({task}, 3);
    single.class_weights = ClassWeightMode::InverseFrequency;
    TrainConfig joint = single;
    joint.fusion_passthrough = true;
    joint.init_from = InitFrom::Scratch;
    const TrainResult a = train_single(single, small_splits());
    const TrainResult b = train_joint(joint, small_splits(), {}, nullptr);
    REQUIRE(a.batch_losses.size() == b.batch_losses.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.batch_losses.size(); ++i)
      worst = std::max(worst, std::fabs(a.batch_losses[i] - b.batch_losses[i]));
    INFO(task);
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("checkpoints: round trip reproduces the recorded score; evaluation is repeatable") {
  const TrainResult& r = au_single();
  const auto dir = std::filesystem::temp_directory_path() / "affmtl_test_training";
  std::filesystem::remove_all(dir);
  write_run_dir(dir, r);
  for (const char* f : {"config", "checkpoint.best", "log.csv", "report", "report.json"})
    CHECK(std::filesystem::exists(dir / f));
  const Checkpoint back = load_checkpoint(dir / "checkpoint.best");
  CHECK(back.config == r.best.config);
  CHECK(back.best_score == r.best.best_score);
  CHECK(back.best_epoch == r.best.best_epoch);
  const EvalReport again = evaluate(back.model, back.config, small_splits().val, {});
  CHECK(*again.au_f1_macro == r.best.best_score);
  CHECK(again == evaluate(back.model, back.config, small_splits().val, {}));
  CHECK(again == r.report);
  CHECK(checkpoint_hash(back) == checkpoint_hash(r.best));
  std::filesystem::remove_all(dir);

  const std::string log = log_csv(r.epochs);
  CHECK(log.rfind("epoch,train_loss,loss_au,loss_expr,loss_va,val_score,improved\n", 0) == 0);
}

TEST_CASE("evaluate: padded frames never reach the metrics") {
  const Splits& s = small_splits();
  const Checkpoint& ckpt = au_single().best;
  // A frame-level model scores the same whatever window length evaluation uses.
  TrainConfig c1 = ckpt.config;
  TrainConfig c7 = ckpt.config;
  c7.seq_len = 7;
  c7.window_stride = 7;
  const EvalReport r1 = evaluate(ckpt.model, c1, s.val, {});
  const EvalReport r7 = evaluate(ckpt.model, c7, s.val, {});
  CHECK(*r1.au_f1_macro == *r7.au_f1_macro);
  CHECK(r1.au_evaluated == r7.au_evaluated);

  // A temporal model evaluates every real frame exactly once (120 is not a multiple of 7).
  TrainConfig t = small_config({"VA"}, 0);
  t.temporal = true;
  t.seq_len = 7;
  t.window_stride = 7;
  const Model m = Model::init(arch_for(t, s.val.input_dim(), false), 0);
  const EvalReport rt = evaluate(m, t, s.val, {});
  CHECK(rt.va_evaluated + rt.va_skipped == s.val.records.size());
  CHECK(rt.va_evaluated == filter_valid(s.val, LabelTask::VA).records.size());
}
