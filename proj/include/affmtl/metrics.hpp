#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "affmtl/records.hpp"

namespace affmtl {

// F1 of a class that never occurs in predictions or targets.
enum class AbsentClassRule { One, Zero };

std::string_view to_string(AbsentClassRule rule);
AbsentClassRule parse_absent_rule(std::string_view s);

struct BinaryCounts {
  std::size_t tp = 0, fp = 0, fn = 0;

  void add(bool pred, bool target) {
    tp += pred && target;
    fp += pred && !target;
    fn += !pred && target;
  }
  BinaryCounts& operator+=(const BinaryCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  // 2TP / (2TP + FP + FN)
  double f1(AbsentClassRule rule = AbsentClassRule::One) const;
};

double binary_f1(const std::vector<bool>& pred, const std::vector<bool>& target,
                 AbsentClassRule rule = AbsentClassRule::One);

struct AuScores {
  std::array<double, kNumAus> per_unit{};
  double macro = 0.0;
  std::size_t evaluated = 0, skipped = 0;
};

// probs: row-major [N, 12]. A unit is predicted present when p > threshold.
AuScores au_macro_f1(std::span<const double> probs, std::span<const AuLabels> target,
                     double threshold = 0.5, AbsentClassRule rule = AbsentClassRule::One);

struct ExprScores {
  std::array<double, kNumExpr> per_class{};
  double macro = 0.0;
  std::size_t evaluated = 0, skipped = 0;
};

// Index of the row maximum; ties go to the lowest index.
std::size_t argmax(std::span<const double> row);

// dist: row-major [N, 8].
ExprScores expr_macro_f1(std::span<const double> dist, std::span<const int> target,
                         AbsentClassRule rule = AbsentClassRule::One);

// Split-wide CCC over entries whose target is not -5.
double ccc_metric(std::span<const double> pred, std::span<const double> target);

struct EvalReport {
  std::optional<std::array<double, kNumAus>> au_f1_per_unit;
  std::optional<double> au_f1_macro;
  std::optional<std::array<double, kNumExpr>> expr_f1_per_class;
  std::optional<double> expr_f1_macro;
  std::optional<double> ccc_valence;
  std::optional<double> ccc_arousal;
  std::optional<double> mean_ccc;
  std::optional<double> P;
  std::size_t au_evaluated = 0, au_skipped = 0;
  std::size_t expr_evaluated = 0, expr_skipped = 0;
  std::size_t va_evaluated = 0, va_skipped = 0;
  AbsentClassRule absent_rule = AbsentClassRule::One;
  double au_threshold = 0.5;
  std::string routing;      // which heads read the temporal module
  std::string config_hash;  // hex FNV-1a of the run config
  std::uint64_t seed = 0;

  bool operator==(const EvalReport&) const = default;
};

// (CCC_arousal + CCC_valence) / 2 + F_expr + F_aus
double composite_P(double ccc_valence, double ccc_arousal, double expr_f1_macro,
                   double au_f1_macro);
// Throws ValidationError when a component is missing.
double composite_P(const EvalReport& report);

// Fills mean_ccc and P from whichever components are present.
void finalize(EvalReport& report);

std::string to_key_value(const EvalReport& report);
EvalReport report_from_key_value(std::string_view text);
nlohmann::json to_json(const EvalReport& report);

}  // namespace affmtl
