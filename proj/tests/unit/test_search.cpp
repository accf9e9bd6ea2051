#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "affmtl/errors.hpp"
#include "affmtl/search.hpp"

using namespace affmtl;
using nlohmann::json;

namespace {

const Splits& splits() {
  static const Splits s = [] {
    SynthOptions opt;
    opt.num_videos = 3;
    opt.frames_per_video = 80;
    opt.input_dim = 8;
    return split_by_video(synth_generate(opt), 0.34);
  }();
  return s;
}

json small_train() { return {{"max_epochs", 2}, {"feature_dim", 6}, {"encoder_hidden", 8}}; }

const BankSet& banks() {
  static const BankSet b = [] {
    TrainConfig cfg = config_from_json(small_train());
    BankSet out;
    for (const char* task : {"AU", "EXPR"}) {
      cfg.tasks = {task};
      const TrainResult r = train_single(cfg, splits());
      const DatasetSplit* parts[] = {&splits().train, &splits().val};
      out[task] = extract_bank(r.best, parts);
    }
    return out;
  }();
  return b;
}

SearchRow row_with(std::string target, std::vector<std::string> fusion, std::size_t s,
                   std::optional<double> mean) {
  SearchRow r;
  r.spec.target = target;
  r.spec.fusion = std::move(fusion);
  r.spec.joint = {target};
  r.spec.seq_len = s;
  r.spec.window_stride = s;
  r.spec.temporal = s > 1;
  r.spec.seeds = {0};
  r.scores = {mean};
  r.errors = {mean ? "" : "boom"};
  r.score = mean;
  return r;
}

std::size_t count_columns(const std::string& line) {
  return std::size_t(std::count(line.begin(), line.end(), '|')) - 1;
}

}  // namespace

TEST_CASE("enumerate_grid: cross product, order and filtering") {
  const GridConfig grid = grid_from_json(json::parse(R"({
    "targets": {"V": {"fusion_subsets": [[], ["AU"]], "joint_sets": [["V"], ["AU", "V"]],
                      "windows": [[1, 1], [5, 5]]}},
    "seeds": [0, 1]})"));
  const GridExpansion e = enumerate_grid(grid);
  REQUIRE(e.specs.size() == 8);
  CHECK(e.skipped.empty());
  CHECK(e.specs[0].fusion.empty());
  CHECK(e.specs[0].joint == std::vector<std::string>{"V"});
  CHECK(e.specs[0].seq_len == 1);
  CHECK_FALSE(e.specs[0].temporal);
  CHECK(e.specs[1].temporal);
  CHECK(e.specs[2].joint == std::vector<std::string>{"V", "AU"});
  CHECK(e.specs[2].lambda == LossWeights{1, 0, 1});
  CHECK(e.specs[4].fusion == std::vector<std::string>{"AU"});
  for (const auto& s : e.specs) CHECK(s.seeds == std::vector<std::uint64_t>{0, 1});
  CHECK(enumerate_grid(grid).specs == e.specs);

  const GridConfig filtered = grid_from_json(json::parse(R"({
    "targets": {"EXPR": {"fusion_subsets": [[]], "joint_sets": [["AU"], ["EXPR"]],
                         "windows": [[5, 6], [5, 5]], "lambda": {"au": 1, "expr": 2, "va": 0}}}})"));
  const GridExpansion f = enumerate_grid(filtered);
  CHECK(f.specs.size() == 1);
  CHECK(f.skipped.size() == 3);
  CHECK(f.specs[0].lambda == LossWeights{0, 2, 0});

  const GridConfig zero = grid_from_json(json::parse(R"({
    "targets": {"V": {"fusion_subsets": [[]], "joint_sets": [["V"]], "windows": [[1, 1]],
                      "lambda": {"au": 1, "expr": 1, "va": 0}}}})"));
  CHECK_THROWS_AS(enumerate_grid(zero), ConfigError);
}

TEST_CASE("enumerate_grid: the valence window sweep") {
  const GridConfig grid = grid_from_json(json::parse(R"({
    "targets": {"V": {"fusion_subsets": [[]], "joint_sets": [["V"]],
                      "windows": [[1, 1], [5, 5], [10, 10], [15, 15], [20, 20], [20, 15]]}},
    "seeds": [0]})"));
  const auto specs = enumerate_grid(grid).specs;
  std::vector<std::pair<std::size_t, std::size_t>> sw;
  for (const auto& s : specs) sw.push_back({s.seq_len, s.window_stride});
  CHECK(sw == std::vector<std::pair<std::size_t, std::size_t>>{{1, 1}, {5, 5}, {10, 10}, {15, 15}, {20, 20}, {20, 15}});
}

TEST_CASE("grid files are strict") {
  CHECK_THROWS_AS(grid_from_json(json::parse(R"({"targets": {}})")), ConfigError);
  CHECK_THROWS_AS(grid_from_json(json::parse(R"({"targets": {"V": {"fusion_subsets": [[]], "joint_sets": [["V"]], "windows": [[1, 1]]}}, "extra": 1})")), ConfigError);
  CHECK_THROWS_AS(grid_from_json(json::parse(R"({"targets": {"Q": {"fusion_subsets": [[]], "joint_sets": [["Q"]], "windows": [[1, 1]]}}})")), ConfigError);
  CHECK_THROWS_AS(grid_from_json(json::parse(R"({"targets": {"V": {"fusion_subsets": [[]], "joint_sets": [["V"]], "windows": [[1, 1]]}}, "train": {"learning_rat": 1}})")), ConfigError);
}

TEST_CASE("run_config: strategy fields and paired seed derivation") {
  StrategySpec spec;
  spec.target = "V";
  spec.fusion = {"AU"};
  spec.joint = {"V", "EXPR"};
  spec.lambda = {0, 0.5, 1};
  spec.temporal = true;
  spec.seq_len = 5;
  spec.window_stride = 5;
  const TrainConfig c = run_config(spec, 2, 11, small_train());
  CHECK(c.tasks == spec.joint);
  CHECK(c.fusion_sources == spec.fusion);
  CHECK(c.loss_weights() == spec.lambda);
  CHECK(c.seq_len == 5);
  CHECK(c.max_epochs == 2);
  CHECK(c.seed == derive_seed(11, std::uint64_t{2}));
  StrategySpec other = spec;
  other.fusion.clear();
  CHECK(run_config(other, 2, 11, small_train()).seed == c.seed);
}

TEST_CASE("select_best: highest mean, then fewer sources, then smaller S") {
  SearchReport r;
  r.rows = {row_with("V", {"AU"}, 1, 0.5), row_with("V", {}, 5, 0.5), row_with("V", {}, 1, 0.5),
            row_with("V", {"AU", "EXPR"}, 1, 0.4), row_with("AU", {}, 1, std::nullopt),
            row_with("AU", {"V"}, 1, 0.7)};
  select_best(r);
  std::vector<bool> flags;
  for (const auto& row : r.rows) flags.push_back(row.best);
  CHECK(flags == std::vector<bool>{false, false, true, false, false, true});

  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    SearchReport t;
    for (int i = 0; i < 6; ++i)
      t.rows.push_back(row_with(i % 2 ? "V" : "A", {}, 1 + rng.below(3), double(rng.below(5)) / 4.0));
    select_best(t);
    for (const char* target : {"V", "A"}) {
      std::size_t flagged = 0;
      double best = -1, top = -1;
      for (const auto& row : t.rows) {
        if (row.spec.target != target) continue;
        top = std::max(top, *row.score);
        if (row.best) ++flagged, best = *row.score;
      }
      CHECK(flagged == 1);
      CHECK(best == top);
    }
  }
}

TEST_CASE("report tables: csv round trip, markdown layout, blank fusion cells") {
  SearchReport r;
  r.master_seed = 9;
  r.protocol = "mean-of-2";
  SearchRow a = row_with("V", {}, 1, std::nullopt);
  a.spec.seeds = {0, 1};
  a.scores = {0.123456789012345678, std::nullopt};
  a.errors = {"", "training split has no usable records"};
  a.score = 0.123456789012345678;
  SearchRow b = row_with("V", {"AU", "EXPR"}, 20, std::nullopt);
  b.spec.window_stride = 15;
  b.spec.joint = {"V", "AU"};
  b.spec.lambda = {1, 0, 1};
  b.spec.seeds = {0, 1};
  b.scores = {0.5, 0.25};
  b.errors = {"", ""};
  b.score = 0.375;
  r.rows = {a, b};
  select_best(r);
  CHECK(report_from_csv(report_csv(r)) == r);
  CHECK_THROWS_AS(report_from_csv("nonsense\n"), ParseError);

  const std::string md = report_markdown(r);
  std::istringstream in(md);
  std::string line;
  std::vector<std::string> table;
  while (std::getline(in, line))
    if (!line.empty() && line[0] == '|') table.push_back(line);
  REQUIRE(table.size() == 4);
  for (const auto& l : table) CHECK(count_columns(l) == 4 + 4 + 3 + 2 + 1);
  // Row without fusion sources: the four fusion cells are blank.
  CHECK(table[2].rfind("|  |  |  |  | ", 0) == 0);
  CHECK(table[2].find("failed") != std::string::npos);
  CHECK(table[3].find("**0.375**") != std::string::npos);
}

TEST_CASE("run_search: one spec, determinism across parallelism, failures recorded") {
  const GridConfig grid = grid_from_json(json::parse(R"({
    "targets": {"V": {"fusion_subsets": [[], ["AU"], ["EXPR"]], "joint_sets": [["V"]],
                      "windows": [[1, 1], [4, 4]]}},
    "seeds": [0, 1]})"));
  const auto specs = enumerate_grid(grid).specs;
  REQUIRE(specs.size() == 6);

  const SearchReport one = run_search({specs[0]}, splits(), banks(), {}, 0, small_train(), {1});
  REQUIRE(one.rows.size() == 1);
  CHECK(one.rows[0].best);
  CHECK(one.protocol == "mean-of-2");

  std::vector<double> seconds;
  const SearchReport serial = run_search(specs, splits(), banks(), {}, 3, small_train(), {1}, &seconds);
  const SearchReport parallel = run_search(specs, splits(), banks(), {}, 3, small_train(), {4});
  CHECK(serial == parallel);
  CHECK(report_csv(serial) == report_csv(parallel));
  CHECK(seconds.size() == 12);
  CHECK(serial.rows.size() == specs.size());
  for (std::size_t i = 0; i < specs.size(); ++i) CHECK(serial.rows[i].spec == specs[i]);

  // An EXPR bank that did not come from single-task training makes those runs fail.
  BankSet tainted = banks();
  tainted["EXPR"].provenance = "joint";
  const SearchReport partial = run_search(specs, splits(), tainted, {}, 3, small_train(), {2});
  for (const auto& row : partial.rows) {
    const bool uses_expr = row.spec.fusion == std::vector<std::string>{"EXPR"};
    CHECK(row.score.has_value() != uses_expr);
    if (uses_expr) {
      CHECK_FALSE(row.best);
      CHECK(row.errors[0].find("single-task") != std::string::npos);
    }
  }
  CHECK(std::count_if(partial.rows.begin(), partial.rows.end(), [](const SearchRow& r) { return r.best; }) == 1);

  CHECK_THROWS_AS(run_search({}, splits(), banks(), {}, 0, small_train(), {1}), ConfigError);
  CHECK_THROWS_AS(run_search(specs, splits(), {}, {}, 0, small_train(), {1}), ConfigError);
}

TEST_CASE("run_search: best-of-N keeps the per-seed scores and takes their maximum") {
  const GridConfig grid = grid_from_json(json::parse(R"({
    "targets": {"V": {"fusion_subsets": [[]], "joint_sets": [["V"]], "windows": [[1, 1], [4, 4]]}},
    "seeds": [0, 1, 2], "aggregate": "best"})"));
  CHECK(grid.aggregate == SeedAggregate::Best);
  const auto specs = enumerate_grid(grid).specs;
  SearchOptions best_opts;
  best_opts.aggregate = grid.aggregate;
  const SearchReport best = run_search(specs, splits(), banks(), {}, 0, small_train(), best_opts);
  const SearchReport mean = run_search(specs, splits(), banks(), {}, 0, small_train(), {1});
  CHECK(best.protocol == "best-of-3");
  CHECK(mean.protocol == "mean-of-3");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    CHECK(best.rows[i].scores == mean.rows[i].scores);
    double top = -2.0, sum = 0.0;
    for (const auto& s : best.rows[i].scores) top = std::max(top, *s), sum += *s;
    CHECK(*best.rows[i].score == top);
    CHECK(*mean.rows[i].score == doctest::Approx(sum / 3.0).epsilon(1e-15));
  }
  CHECK(report_from_csv(report_csv(best)) == best);
  CHECK(report_markdown(best).find("| Best |") != std::string::npos);
  CHECK_THROWS_AS(grid_from_json(json::parse(R"({"targets": {"V": {}}, "aggregate": "median"})")), ConfigError);
}
