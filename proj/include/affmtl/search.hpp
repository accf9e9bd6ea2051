#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "affmtl/training.hpp"

namespace affmtl {

struct StrategySpec {
  std::string target;                       // AU, EXPR, V or A
  std::vector<std::string> fusion;          // subset of AU, EXPR, V, A (canonical order)
  std::vector<std::string> joint;           // target first, then the rest in canonical order
  LossWeights lambda;
  bool temporal = false;
  std::size_t seq_len = 1;
  std::size_t window_stride = 1;
  std::vector<std::uint64_t> seeds;

  bool operator==(const StrategySpec&) const = default;
};

// Grid file (JSON):
//   {
//     "targets": {
//       "V": {"fusion_subsets": [[], ["AU"]], "joint_sets": [["V"], ["V", "AU"]],
//             "windows": [[1, 1], [5, 5]], "lambda": {"au": 1, "expr": 0, "va": 1}}
//     },
//     "seeds": [0, 1, 2],
//     "master_seed": 0,
//     "banks": {"AU": "runs/au/bank.AU"},
//     "init": {"V": "runs/v/checkpoint.best"},
//     "train": {"max_epochs": 10},
//     "aggregate": "mean"
//   }
// "lambda" is optional (1 for every task of the joint set); "init" maps a
// target to the single-task checkpoint joint runs start from. "aggregate"
// ("mean" or "best") picks how a row's seeds collapse into its score.
enum class SeedAggregate { Mean, Best };

struct GridConfig {
  struct Target {
    std::vector<std::vector<std::string>> fusion_subsets;
    std::vector<std::vector<std::string>> joint_sets;
    std::vector<std::pair<std::size_t, std::size_t>> windows;
    std::optional<LossWeights> lambda;
  };
  std::map<std::string, Target> targets;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::uint64_t master_seed = 0;
  std::map<std::string, std::string> banks;
  std::map<std::string, std::string> init;
  nlohmann::json train = nlohmann::json::object();
  SeedAggregate aggregate = SeedAggregate::Mean;
};

GridConfig grid_from_json(const nlohmann::json& j);
GridConfig load_grid(const std::filesystem::path& path);

struct GridExpansion {
  std::vector<StrategySpec> specs;
  std::vector<std::string> skipped;  // human-readable reasons for filtered combinations
};

// Cross product per target in the order fusion subset, joint set, window.
// Combinations whose joint set lacks the target are dropped and reported.
GridExpansion enumerate_grid(const GridConfig& grid);

// Training config of one run. The run seed is derived from the master seed
// and the listed seed value so every strategy sees the same streams for a given seed.
TrainConfig run_config(const StrategySpec& spec, std::uint64_t seed, std::uint64_t master_seed,
                       const nlohmann::json& overrides);

struct SearchRow {
  StrategySpec spec;
  std::vector<std::optional<double>> scores;  // one per seed, empty on failure
  std::vector<std::string> errors;            // one per seed, empty on success
  std::optional<double> score;                // mean or best over successful seeds
  bool best = false;
};

struct SearchReport {
  std::vector<SearchRow> rows;
  std::uint64_t master_seed = 0;
  std::string protocol;  // "single-seed", "mean-of-N" or "best-of-N"

  bool operator==(const SearchReport&) const;
};

// Flags the best row per target: highest score, then fewer fusion sources,
// then smaller S, then grid order.
void select_best(SearchReport& report);

struct SearchOptions {
  std::size_t jobs = 1;
  std::optional<std::filesystem::path> run_root;  // per-run directories when set
  SeedAggregate aggregate = SeedAggregate::Mean;
};

// Trains every (spec, seed) pair with train_joint. A failing run is recorded
// in its row and never stops the search.
SearchReport run_search(const std::vector<StrategySpec>& specs, const Splits& splits,
                        const BankSet& banks, const std::map<std::string, Checkpoint>& init,
                        std::uint64_t master_seed, const nlohmann::json& overrides,
                        const SearchOptions& options, std::vector<double>* wall_seconds = nullptr);

std::string report_csv(const SearchReport& report);
SearchReport report_from_csv(std::string_view text);
std::string report_markdown(const SearchReport& report);

}  // namespace affmtl
