#include "affmtl/search.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#include "affmtl/binary_io.hpp"
#include "affmtl/errors.hpp"
#include "affmtl/rng.hpp"
#include "affmtl/text.hpp"

namespace affmtl {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 4> kCanonical = {"AU", "EXPR", "V", "A"};

std::size_t canonical_index(const std::string& name) {
  for (std::size_t i = 0; i < kCanonical.size(); ++i)
    if (kCanonical[i] == name) return i;
  throw ConfigError("grid: unknown task '" + name + "' (expected AU, EXPR, V or A)");
}

std::vector<std::string> canonical(std::vector<std::string> names, const std::string& what) {
  for (const auto& n : names) canonical_index(n);
  std::sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) {
    return canonical_index(a) < canonical_index(b);
  });
  if (std::adjacent_find(names.begin(), names.end()) != names.end())
    throw ConfigError("grid: " + what + " lists a task twice");
  return names;
}

std::vector<std::string> string_list(const json& j, const std::string& what) {
  if (!j.is_array()) throw ConfigError("grid: " + what + " must be a list of task names");
  std::vector<std::string> out;
  for (const auto& e : j) {
    if (!e.is_string()) throw ConfigError("grid: " + what + " must be a list of task names");
    out.push_back(e.get<std::string>());
  }
  return out;
}

void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError("grid: " + where + " must be an object");
  for (const auto& [k, _] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; }))
      throw ConfigError("grid: unknown key '" + k + "' in " + where);
}

std::map<std::string, std::string> path_map(const json& j, const std::string& what) {
  if (!j.is_object()) throw ConfigError("grid: " + what + " must map task names to paths");
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_string()) throw ConfigError("grid: " + what + "." + k + " must be a path");
    out[k] = v.get<std::string>();
  }
  return out;
}

std::string sanitize(std::string s) {
  for (auto& c : s)
    if (c == ',' || c == '|' || c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

GridConfig grid_from_json(const json& j) {
  only_keys(j, {"targets", "seeds", "master_seed", "banks", "init", "train", "aggregate"}, "grid");
  GridConfig g;
  if (!j.contains("targets") || !j["targets"].is_object() || j["targets"].empty())
    throw ConfigError("grid: 'targets' must name at least one target task");
  for (const auto& [name, t] : j["targets"].items()) {
    canonical_index(name);
    only_keys(t, {"fusion_subsets", "joint_sets", "windows", "lambda"}, "targets." + name);
    GridConfig::Target target;
    const json fusion = t.value("fusion_subsets", json::array({json::array()}));
    for (const auto& f : fusion) target.fusion_subsets.push_back(canonical(string_list(f, "fusion_subsets"), "a fusion subset"));
    const json joint = t.value("joint_sets", json::array({json::array({name})}));
    for (const auto& s : joint) target.joint_sets.push_back(string_list(s, "joint_sets"));
    const json windows = t.value("windows", json::array({json::array({1, 1})}));
    for (const auto& w : windows) {
      if (!w.is_array() || w.size() != 2 || !is_json_count(w[0]) || !is_json_count(w[1]))
        throw ConfigError("grid: targets." + name + ".windows entries must be [S, W]");
      target.windows.emplace_back(w[0].get<std::size_t>(), w[1].get<std::size_t>());
    }
    if (t.contains("lambda")) {
      only_keys(t["lambda"], {"au", "expr", "va"}, "targets." + name + ".lambda");
      LossWeights l{1.0, 1.0, 1.0};
      l.au = t["lambda"].value("au", 1.0);
      l.expr = t["lambda"].value("expr", 1.0);
      l.va = t["lambda"].value("va", 1.0);
      target.lambda = l;
    }
    g.targets[name] = std::move(target);
  }
  if (j.contains("seeds")) {
    g.seeds.clear();
    for (const auto& s : j["seeds"]) {
      if (!is_json_count(s)) throw ConfigError("grid: seeds must be non-negative integers");
      g.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  if (g.seeds.empty()) throw ConfigError("grid: at least one seed is required");
  if (j.contains("master_seed")) {
    if (!is_json_count(j["master_seed"]))
      throw ConfigError("grid: master_seed must be a non-negative integer");
    g.master_seed = j["master_seed"].get<std::uint64_t>();
  }
  if (j.contains("banks")) g.banks = path_map(j["banks"], "banks");
  if (j.contains("init")) g.init = path_map(j["init"], "init");
  if (j.contains("aggregate")) {
    const json& a = j["aggregate"];
    if (a == "mean")
      g.aggregate = SeedAggregate::Mean;
    else if (a == "best")
      g.aggregate = SeedAggregate::Best;
    else
      throw ConfigError("grid: aggregate must be \"mean\" or \"best\"");
  }
  if (j.contains("train")) {
    g.train = j["train"];
    config_from_json(g.train);  // reject unknown keys before any run starts
  }
  return g;
}

GridConfig load_grid(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return grid_from_json(j);
}

GridExpansion enumerate_grid(const GridConfig& grid) {
  GridExpansion out;
  // Targets in canonical order so the strategy index is stable.
  std::vector<std::string> targets;
  for (const auto& [name, _] : grid.targets) targets.push_back(name);
  targets = canonical(targets, "targets");
  for (const auto& name : targets) {
    const auto& t = grid.targets.at(name);
    for (const auto& fusion : t.fusion_subsets)
      for (const auto& joint_raw : t.joint_sets)
        for (const auto& [s, w] : t.windows) {
          const std::string label = name + " fusion=[" + join(fusion, "|") + "] joint=[" +
                                    join(joint_raw, "|") + "] S=" + std::to_string(s) +
                                    " W=" + std::to_string(w);
          if (std::find(joint_raw.begin(), joint_raw.end(), name) == joint_raw.end()) {
            out.skipped.push_back(label + ": target outside the joint set");
            continue;
          }
          if (s < 1 || w < 1 || w > s) {
            out.skipped.push_back(label + ": windows need 1 <= W <= S");
            continue;
          }
          StrategySpec spec;
          spec.target = name;
          spec.fusion = fusion;
          std::vector<std::string> rest;
          for (const auto& j : joint_raw)
            if (j != name) rest.push_back(j);
          spec.joint = {name};
          for (const auto& j : canonical(rest, "a joint set")) spec.joint.push_back(j);
          const TaskSet set = TaskSet::parse(spec.joint);
          const LossWeights base = t.lambda.value_or(LossWeights{1.0, 1.0, 1.0});
          spec.lambda.au = set.contains(Task::AU) ? base.au : 0.0;
          spec.lambda.expr = set.contains(Task::EXPR) ? base.expr : 0.0;
          spec.lambda.va = set.has_va() ? base.va : 0.0;
          if ((set.contains(Task::AU) && spec.lambda.au <= 0.0) ||
              (set.contains(Task::EXPR) && spec.lambda.expr <= 0.0) ||
              (set.has_va() && spec.lambda.va <= 0.0)) {
            out.skipped.push_back(label + ": zero weight for a task in the joint set");
            continue;
          }
          spec.temporal = s > 1;
          spec.seq_len = s;
          spec.window_stride = w;
          spec.seeds = grid.seeds;
          out.specs.push_back(std::move(spec));
        }
  }
  if (out.specs.empty()) throw ConfigError("grid: no strategy survives the grid filters");
  return out;
}

TrainConfig run_config(const StrategySpec& spec, std::uint64_t seed, std::uint64_t master_seed,
                       const json& overrides) {
  json j = overrides.is_null() ? json::object() : overrides;
  j["tasks"] = spec.joint;
  j["lambda_au"] = spec.lambda.au;
  j["lambda_expr"] = spec.lambda.expr;
  j["lambda_va"] = spec.lambda.va;
  j["fusion_sources"] = spec.fusion;
  j["temporal"] = spec.temporal;
  j["seq_len"] = spec.seq_len;
  j["window_stride"] = spec.window_stride;
  j["seed"] = derive_seed(master_seed, seed);
  return config_from_json(j);
}

bool SearchReport::operator==(const SearchReport& o) const {
  if (master_seed != o.master_seed || protocol != o.protocol || rows.size() != o.rows.size())
    return false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto &a = rows[i], &b = o.rows[i];
    if (!(a.spec == b.spec) || a.scores != b.scores || a.errors != b.errors || a.score != b.score ||
        a.best != b.best)
      return false;
  }
  return true;
}

void select_best(SearchReport& report) {
  std::map<std::string, std::size_t> best;
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    auto& row = report.rows[i];
    row.best = false;
    if (!row.score) continue;
    auto it = best.find(row.spec.target);
    if (it == best.end()) {
      best[row.spec.target] = i;
      continue;
    }
    const auto& cur = report.rows[it->second];
    const bool better =
        *row.score > *cur.score ||
        (*row.score == *cur.score &&
         (row.spec.fusion.size() < cur.spec.fusion.size() ||
          (row.spec.fusion.size() == cur.spec.fusion.size() && row.spec.seq_len < cur.spec.seq_len)));
    if (better) it->second = i;
  }
  for (const auto& [_, i] : best) report.rows[i].best = true;
}

SearchReport run_search(const std::vector<StrategySpec>& specs, const Splits& splits,
                        const BankSet& banks, const std::map<std::string, Checkpoint>& init,
                        std::uint64_t master_seed, const json& overrides,
                        const SearchOptions& options, std::vector<double>* wall_seconds) {
  if (specs.empty()) throw ConfigError("search: empty grid");
  for (const auto& spec : specs)
    for (const auto& src : spec.fusion)
      if (!banks.count(src)) throw ConfigError("search: no feature bank for fusion source '" + src + "'");

  SearchReport report;
  report.master_seed = master_seed;
  std::size_t max_seeds = 0;
  struct Job {
    std::size_t row, slot;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    SearchRow row;
    row.spec = specs[i];
    row.scores.resize(specs[i].seeds.size());
    row.errors.resize(specs[i].seeds.size());
    max_seeds = std::max(max_seeds, specs[i].seeds.size());
    for (std::size_t k = 0; k < specs[i].seeds.size(); ++k) jobs.push_back({i, k});
    report.rows.push_back(std::move(row));
  }
  const bool best_of = options.aggregate == SeedAggregate::Best;
  report.protocol = max_seeds == 1 ? "single-seed" : (best_of ? "best-of-" : "mean-of-") + std::to_string(max_seeds);
  std::vector<double> seconds(jobs.size(), 0.0);

  const int threads = static_cast<int>(std::max<std::size_t>(1, options.jobs));
#pragma omp parallel for num_threads(threads) schedule(dynamic, 1)
  for (std::ptrdiff_t n = 0; n < static_cast<std::ptrdiff_t>(jobs.size()); ++n) {
    const Job job = jobs[static_cast<std::size_t>(n)];
    SearchRow& row = report.rows[job.row];
    const auto t0 = std::chrono::steady_clock::now();
    try {
      TrainConfig cfg = run_config(row.spec, row.spec.seeds[job.slot], master_seed, overrides);
      auto it = init.find(row.spec.target);
      cfg.init_from = it == init.end() ? InitFrom::Scratch : InitFrom::Single;
      const TrainResult result =
          train_joint(cfg, splits, banks, it == init.end() ? nullptr : &it->second);
      row.scores[job.slot] = result.best.best_score;
      if (options.run_root)
        write_run_dir(*options.run_root / (row.spec.target + "-" + std::to_string(job.row) +
                                           "-seed" + std::to_string(row.spec.seeds[job.slot])),
                      result);
    } catch (const std::exception& e) {
      row.scores[job.slot].reset();
      row.errors[job.slot] = sanitize(e.what());
    }
    seconds[static_cast<std::size_t>(n)] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  for (auto& row : report.rows) {
    double sum = 0.0;
    std::size_t ok = 0;
    for (const auto& s : row.scores) {
      if (!s) continue;
      if (best_of)
        row.score = row.score ? std::max(*row.score, *s) : *s;
      sum += *s;
      ++ok;
    }
    if (ok && !best_of) row.score = sum / static_cast<double>(ok);
  }
  select_best(report);
  if (wall_seconds) *wall_seconds = std::move(seconds);
  return report;
}

// ---- tables -------------------------------------------------------------------------

namespace {

constexpr std::string_view kCsvHeader =
    "target,fusion,joint,lambda_au,lambda_expr,lambda_va,temporal,S,W,seeds,scores,errors,score,best";

std::string opt_num(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

std::vector<std::string> name_list(const std::string& s) {
  if (s.empty()) return {};
  return split(s, '|');
}

double csv_number(const std::string& s, std::size_t line) {
  double v = 0.0;
  if (!parse_double(s, v)) throw ParseError(line, "expected a number, got '" + s + "'");
  return v;
}

std::size_t csv_count(const std::string& s, std::size_t line) {
  long long v = 0;
  if (!parse_int(s, v) || v < 0) throw ParseError(line, "expected a count, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

}  // namespace

std::string report_csv(const SearchReport& report) {
  std::ostringstream os;
  os << "# master_seed=" << report.master_seed << "\n# protocol=" << report.protocol << "\n";
  os << kCsvHeader << "\n";
  for (const auto& r : report.rows) {
    std::vector<std::string> seeds, scores, errors;
    for (auto s : r.spec.seeds) seeds.push_back(std::to_string(s));
    for (const auto& s : r.scores) scores.push_back(opt_num(s));
    for (const auto& e : r.errors) errors.push_back(sanitize(e));
    os << r.spec.target << ',' << join(r.spec.fusion, "|") << ',' << join(r.spec.joint, "|") << ','
       << format_double(r.spec.lambda.au) << ',' << format_double(r.spec.lambda.expr) << ','
       << format_double(r.spec.lambda.va) << ',' << (r.spec.temporal ? 1 : 0) << ','
       << r.spec.seq_len << ',' << r.spec.window_stride << ',' << join(seeds, "|") << ','
       << join(scores, "|") << ',' << join(errors, "|") << ',' << opt_num(r.score) << ','
       << (r.best ? 1 : 0) << "\n";
  }
  return os.str();
}

SearchReport report_from_csv(std::string_view text) {
  SearchReport report;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view t = trim(line);
    if (t.empty()) continue;
    if (t.starts_with("# master_seed=")) {
      long long v = 0;
      if (!parse_int(t.substr(14), v) || v < 0) throw ParseError(line_no, "bad master_seed");
      report.master_seed = static_cast<std::uint64_t>(v);
      continue;
    }
    if (t.starts_with("# protocol=")) {
      report.protocol = std::string(t.substr(11));
      continue;
    }
    if (!header) {
      if (t != kCsvHeader) throw ParseError(line_no, "unexpected search report header");
      header = true;
      continue;
    }
    const auto f = split(t, ',');
    if (f.size() != 14) throw ParseError(line_no, "expected 14 fields, got " + std::to_string(f.size()));
    SearchRow row;
    row.spec.target = f[0];
    row.spec.fusion = name_list(f[1]);
    row.spec.joint = name_list(f[2]);
    row.spec.lambda = {csv_number(f[3], line_no), csv_number(f[4], line_no), csv_number(f[5], line_no)};
    row.spec.temporal = f[6] == "1";
    row.spec.seq_len = csv_count(f[7], line_no);
    row.spec.window_stride = csv_count(f[8], line_no);
    for (const auto& s : split(f[9], '|')) row.spec.seeds.push_back(csv_count(s, line_no));
    for (const auto& s : split(f[10], '|'))
      row.scores.push_back(s.empty() ? std::nullopt : std::optional(csv_number(s, line_no)));
    row.errors = split(f[11], '|');
    if (row.scores.size() != row.spec.seeds.size() || row.errors.size() != row.spec.seeds.size())
      throw ParseError(line_no, "per-seed columns disagree with the seed list");
    if (!f[12].empty()) row.score = csv_number(f[12], line_no);
    row.best = f[13] == "1";
    report.rows.push_back(std::move(row));
  }
  if (!header) throw ParseError(line_no, "missing search report header");
  return report;
}

std::string report_markdown(const SearchReport& report) {
  std::ostringstream os;
  os << "# Strategy search\n\nmaster seed " << report.master_seed << ", protocol " << report.protocol
     << "\n";
  std::vector<std::string> targets;
  for (const auto& r : report.rows)
    if (std::find(targets.begin(), targets.end(), r.spec.target) == targets.end())
      targets.push_back(r.spec.target);
  for (const auto& target : targets) {
    std::size_t n_seeds = 0;
    for (const auto& r : report.rows)
      if (r.spec.target == target) n_seeds = std::max(n_seeds, r.spec.seeds.size());
    os << "\n## Target " << target << "\n\n|";
    for (auto t : kCanonical) os << " F_" << t << " |";
    for (auto t : kCanonical) os << ' ' << t << " |";
    os << " Tem. | S | W |";
    for (std::size_t k = 0; k < n_seeds; ++k) os << " seed " << k << " |";
    os << (report.protocol.starts_with("best-of-") ? " Best |\n|" : " Mean |\n|");
    for (std::size_t c = 0; c < 4 + 4 + 3 + n_seeds + 1; ++c) os << "---|";
    os << "\n";
    for (const auto& r : report.rows) {
      if (r.spec.target != target) continue;
      os << '|';
      auto mark = [](const std::vector<std::string>& set, std::string_view t) {
        return std::find(set.begin(), set.end(), t) != set.end() ? " x |" : "  |";
      };
      for (auto t : kCanonical) os << mark(r.spec.fusion, t);
      for (auto t : kCanonical) os << mark(r.spec.joint, t);
      os << (r.spec.temporal ? " x |" : "  |") << ' ' << r.spec.seq_len << " | "
         << r.spec.window_stride << " |";
      for (std::size_t k = 0; k < n_seeds; ++k) {
        if (k >= r.scores.size())
          os << "  |";
        else if (r.scores[k])
          os << ' ' << format_double(*r.scores[k]) << " |";
        else
          os << " failed |";
      }
      const std::string score = r.score ? format_double(*r.score) : "failed";
      os << ' ' << (r.best ? "**" + score + "**" : score) << " |\n";
    }
  }
  return os.str();
}

}  // namespace affmtl
