#include "affmtl/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>

#include "affmtl/binary_io.hpp"
#include "affmtl/data.hpp"
#include "affmtl/errors.hpp"
#include "affmtl/search.hpp"
#include "affmtl/text.hpp"
#include "affmtl/training.hpp"

namespace affmtl {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("AFFMTL_SEED");
  if (!v || !*v) return std::nullopt;
  long long n = 0;
  if (!parse_int(v, n) || n < 0)
    throw ConfigError("AFFMTL_SEED must be a non-negative integer, got '" + std::string(v) + "'");
  return static_cast<std::uint64_t>(n);
}

std::string config_help() {
  std::ostringstream os;
  os << "Config keys (JSON object; --set key=value overrides; AFFMTL_SEED overrides seed):\n";
  for (const auto& d : config_key_docs()) {
    os << "  " << d.key << std::string(d.key.size() < 20 ? 20 - d.key.size() : 1, ' ')
       << "default " << d.default_value << "\n" << std::string(22, ' ') << d.description << "\n";
  }
  return os.str();
}

// File config, then the environment seed, then --set overrides, then --task.
TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& sets,
                           const std::string& task) {
  json j = json::object();
  if (!path.empty()) {
    try {
      j = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
      throw ConfigError(path + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError(path + ": expected a JSON object");
  }
  if (auto s = env_seed()) j["seed"] = *s;
  for (const auto& s : sets) apply_override(j, s);
  if (!task.empty()) j["tasks"] = json::array({task});
  return config_from_json(j);
}

BankSet load_banks(const std::vector<std::string>& paths) {
  BankSet banks;
  for (const auto& p : paths) {
    FeatureBank b = load_bank(p);
    const std::string src = b.source;
    if (!banks.emplace(src, std::move(b)).second)
      throw ConfigError("two feature banks for source '" + src + "'");
  }
  return banks;
}

void require_fresh_or_dir(const fs::path& out) {
  if (fs::exists(out) && !fs::is_directory(out))
    throw ConfigError("--out " + out.string() + " exists and is not a directory");
}

std::string fixed4(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

struct ReportRow {
  std::string run;
  EvalReport report;
};

int cmd_report(const std::vector<std::string>& runs, const std::string& out_path, std::ostream& out) {
  std::vector<ReportRow> rows;
  for (const auto& run : runs) {
    const fs::path file = fs::is_directory(run) ? fs::path(run) / "report" : fs::path(run);
    EvalReport r = report_from_key_value(read_file(file));
    const bool complete = r.ccc_valence && r.ccc_arousal && r.expr_f1_macro && r.au_f1_macro;
    if (complete) {
      const double p = composite_P(*r.ccc_valence, *r.ccc_arousal, *r.expr_f1_macro, *r.au_f1_macro);
      if (r.P && std::fabs(*r.P - p) > 1e-12)
        throw IntegrityError(file.string() + ": stored P " + format_double(*r.P) +
                             " does not match its components (" + format_double(p) + ")");
      const double m = (*r.ccc_arousal + *r.ccc_valence) / 2.0;
      if (r.mean_ccc && std::fabs(*r.mean_ccc - m) > 1e-12)
        throw IntegrityError(file.string() + ": stored mean CCC does not match its components");
      r.P = p;
      r.mean_ccc = m;
    } else if (r.P) {
      throw IntegrityError(file.string() + ": P is stored but a component is missing");
    }
    rows.push_back({run, std::move(r)});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    const double pa = a.report.P.value_or(-INFINITY), pb = b.report.P.value_or(-INFINITY);
    return pa > pb;
  });
  std::ostringstream os;
  os << "| run | Average CCC | CCC-V | CCC-A | F_expr | F_aus | P |\n|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows)
    os << "| " << r.run << " | " << fixed4(r.report.mean_ccc) << " | " << fixed4(r.report.ccc_valence)
       << " | " << fixed4(r.report.ccc_arousal) << " | " << fixed4(r.report.expr_f1_macro) << " | "
       << fixed4(r.report.au_f1_macro) << " | " << fixed4(r.report.P) << " |\n";
  out << os.str();
  if (!out_path.empty()) write_file_atomic(out_path, os.str());
  return 0;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-task affect recognition: synthetic data, progressive training, strategy search"};
  app.name("affmtl");
  app.require_subcommand(1);
  app.footer(config_help());

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic annotation + feature corpus");
  SynthOptions so;
  std::optional<std::uint64_t> synth_seed;
  std::string synth_out;
  synth->add_option("--seed", synth_seed, "Generator seed (default 0, or AFFMTL_SEED)");
  synth->add_option("--videos", so.num_videos, "Number of videos")->capture_default_str();
  synth->add_option("--frames", so.frames_per_video, "Frames per video")->capture_default_str();
  synth->add_option("--dim", so.input_dim, "Feature dimension")->capture_default_str();
  synth->add_option("--va-rate", so.sentinel_rates.va, "Share of VA sentinels")->capture_default_str();
  synth->add_option("--expr-rate", so.sentinel_rates.expr, "Share of EXPR sentinels")->capture_default_str();
  synth->add_option("--au-rate", so.sentinel_rates.au, "Share of AU sentinels")->capture_default_str();
  synth->add_option("--noise", so.feature_noise, "Feature noise std")->capture_default_str();
  synth->add_option("--corruption", so.corruption_rate, "Share of noise-only frames")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory")->required();

  // train-single
  auto* single = app.add_subcommand("train-single", "Train one task on its valid records");
  std::string data_dir, config_path, task, out_dir;
  std::vector<std::string> sets;
  single->add_option("--data", data_dir, "Corpus directory")->required();
  single->add_option("--config", config_path, "JSON config file");
  single->add_option("--set", sets, "Config override key=value (repeatable)");
  single->add_option("--task", task, "Task (AU, EXPR, V, A, VA); overrides 'tasks'");
  single->add_option("--out", out_dir, "Run directory")->required();
  single->footer(config_help());

  // extract-bank
  auto* bank_cmd = app.add_subcommand("extract-bank", "Export frozen encoder features of a run");
  std::string run_dir, bank_out;
  bank_cmd->add_option("--run", run_dir, "Run directory holding checkpoint.best")->required();
  bank_cmd->add_option("--data", data_dir, "Corpus directory")->required();
  bank_cmd->add_option("--out", bank_out, "Bank path (default <run>/bank.<task>)");

  // train-joint
  auto* joint = app.add_subcommand("train-joint", "Joint training with feature fusion");
  std::vector<std::string> bank_paths;
  std::string init_path;
  joint->add_option("--data", data_dir, "Corpus directory")->required();
  joint->add_option("--config", config_path, "JSON config file");
  joint->add_option("--set", sets, "Config override key=value (repeatable)");
  joint->add_option("--bank", bank_paths, "Feature bank file (repeatable)");
  joint->add_option("--init", init_path, "Single-task checkpoint for init_from=single");
  joint->add_option("--out", out_dir, "Run directory")->required();
  joint->footer(config_help());

  // search
  auto* search = app.add_subcommand("search", "Run a strategy grid");
  std::string grid_path;
  std::size_t jobs = 1;
  search->add_option("--grid", grid_path, "Grid JSON file")->required();
  search->add_option("--data", data_dir, "Corpus directory")->required();
  search->add_option("--out", out_dir, "Output directory")->required();
  search->add_option("--jobs", jobs, "Parallel runs")->capture_default_str()->check(CLI::PositiveNumber);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Score a checkpoint on the validation split");
  std::string ckpt_path, eval_out;
  eval->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Corpus directory")->required();
  eval->add_option("--bank", bank_paths, "Feature bank file (repeatable)");
  eval->add_option("--out", eval_out, "Write the report here as well");

  // report
  auto* report = app.add_subcommand("report", "Compare run reports");
  std::vector<std::string> runs;
  std::string report_out;
  report->add_option("runs", runs, "Run directories or report files")->required();
  report->add_option("--out", report_out, "Write the table here as well");

  std::vector<const char*> argv{"affmtl"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  if (synth->parsed()) {
    so.seed = synth_seed ? *synth_seed : env_seed().value_or(0);
    const auto records = synth_generate(so);
    require_fresh_or_dir(synth_out);
    fs::create_directories(synth_out);
    write_dataset(synth_out, records);
    out << "wrote " << records.size() << " frames to " << synth_out << "\n";
    return 0;
  }
  if (single->parsed()) {
    const TrainConfig cfg = resolve_config(config_path, sets, task);
    require_fresh_or_dir(out_dir);
    const Splits splits = load_splits(data_dir, cfg.val_fraction);
    const TrainResult r = train_single(cfg, splits);
    write_run_dir(out_dir, r);
    out << "best " << cfg.tasks.front() << " score " << format_double(r.best.best_score)
        << " at epoch " << r.best.best_epoch << "\n";
    return 0;
  }
  if (bank_cmd->parsed()) {
    const Checkpoint ckpt = load_checkpoint(fs::path(run_dir) / "checkpoint.best");
    const Splits splits = load_splits(data_dir, ckpt.config.val_fraction);
    const DatasetSplit* parts[] = {&splits.train, &splits.val};
    const FeatureBank bank = extract_bank(ckpt, parts);
    const fs::path path = bank_out.empty() ? fs::path(run_dir) / ("bank." + bank.source) : fs::path(bank_out);
    save_bank(path, bank);
    out << "wrote " << bank.vectors.size() << " vectors to " << path.string() << "\n";
    return 0;
  }
  if (joint->parsed()) {
    const TrainConfig cfg = resolve_config(config_path, sets, "");
    require_fresh_or_dir(out_dir);
    const BankSet banks = load_banks(bank_paths);
    std::optional<Checkpoint> init;
    if (!init_path.empty()) init = load_checkpoint(init_path);
    const Splits splits = load_splits(data_dir, cfg.val_fraction);
    const TrainResult r = train_joint(cfg, splits, banks, init ? &*init : nullptr);
    write_run_dir(out_dir, r);
    out << "best " << cfg.tasks.front() << " score " << format_double(r.best.best_score)
        << " at epoch " << r.best.best_epoch << "\n";
    return 0;
  }
  if (search->parsed()) {
    GridConfig grid = load_grid(grid_path);
    if (auto s = env_seed()) grid.master_seed = *s;
    const GridExpansion expansion = enumerate_grid(grid);
    for (const auto& s : expansion.skipped) err << "skipped " << s << "\n";
    const double val_fraction = config_from_json(grid.train).val_fraction;
    std::vector<std::string> bank_files;
    for (const auto& [_, p] : grid.banks) bank_files.push_back(p);
    const BankSet banks = load_banks(bank_files);
    for (const auto& [name, b] : banks)
      if (!grid.banks.count(name))
        throw ConfigError("grid: bank listed under another name holds source '" + name + "'");
    std::map<std::string, Checkpoint> init;
    for (const auto& [t, p] : grid.init) init.emplace(t, load_checkpoint(p));
    require_fresh_or_dir(out_dir);
    const Splits splits = load_splits(data_dir, val_fraction);
    std::vector<double> seconds;
    const SearchReport rep = run_search(expansion.specs, splits, banks, init, grid.master_seed,
                                        grid.train, {jobs, fs::path(out_dir) / "runs", grid.aggregate}, &seconds);
    write_file_atomic(fs::path(out_dir) / "search_report.csv", report_csv(rep));
    write_file_atomic(fs::path(out_dir) / "search_report.md", report_markdown(rep));
    std::ostringstream timing;
    timing << "row,seed,seconds\n";
    std::size_t n = 0;
    for (std::size_t i = 0; i < rep.rows.size(); ++i)
      for (auto seed : rep.rows[i].spec.seeds) timing << i << ',' << seed << ',' << seconds[n++] << "\n";
    write_file_atomic(fs::path(out_dir) / "search_timing.csv", timing.str());
    std::size_t failed = 0;
    for (const auto& r : rep.rows)
      for (const auto& e : r.errors) failed += e.empty() ? 0 : 1;
    out << rep.rows.size() << " strategies, " << failed << " failed runs; tables in " << out_dir << "\n";
    return 0;
  }
  if (eval->parsed()) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const BankSet banks = load_banks(bank_paths);
    const Splits splits = load_splits(data_dir, ckpt.config.val_fraction);
    const EvalReport r = evaluate(ckpt.model, ckpt.config, splits.val, banks);
    out << to_key_value(r);
    if (!eval_out.empty()) write_file_atomic(eval_out, to_key_value(r));
    return 0;
  }
  return cmd_report(runs, report_out, out);
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return run(args, out, err);
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace affmtl
