#pragma once

#include <array>
#include <optional>
#include <span>

#include "affmtl/records.hpp"
#include "affmtl/tensor.hpp"

namespace affmtl {

inline constexpr double kProbClamp = 1e-12;
inline constexpr double kCccEpsilon = 1e-8;

struct ClassWeights {
  std::array<double, kNumAus> au;
  std::array<double, kNumExpr> expr;

  static ClassWeights ones();
};

struct LossWeights {
  double au = 0.0;
  double expr = 0.0;
  double va = 0.0;

  bool operator==(const LossWeights&) const = default;
};

// Weighted BCE averaged over the 12 units, then over samples with valid AU
// labels. Throws EmptyBatchError when no sample is valid.
Tensor au_loss(const Tensor& pred, std::span<const AuLabels> target, const ClassWeights& w);

// -(1/8) * W_c * log p_c for the true class c, averaged over valid samples.
Tensor expr_loss(const Tensor& pred, std::span<const int> target, const ClassWeights& w);

// Concordance correlation coefficient of two rank-1 tensors, population
// moments: 2 cov / max(var_x + var_y + (mu_x - mu_y)^2, eps).
Tensor ccc(const Tensor& x, const Tensor& y);

// 1 - CCC over the entries whose target is not the -5 sentinel.
Tensor va_component_loss(const Tensor& pred, std::span<const double> target);

// (1 - CCC_valence) + (1 - CCC_arousal), each over its own valid entries.
Tensor va_loss(const Tensor& pred_v, const Tensor& pred_a, std::span<const double> target_v,
               std::span<const double> target_a);

struct TaskLosses {
  std::optional<Tensor> au;
  std::optional<Tensor> expr;
  std::optional<Tensor> va;
};

struct OverallLoss {
  Tensor total;
  // Tasks with a positive weight but no loss for this batch.
  std::size_t skipped = 0;
};

// lambda_AU * L_AU + lambda_EXPR * L_EXPR + lambda_VA * L_VA. Zero-weight
// terms are left off the graph entirely.
OverallLoss overall_loss(const TaskLosses& losses, const LossWeights& lambda);

// Inverse-frequency weights normalised to mean 1; classes without positives
// take the largest observed weight.
ClassWeights compute_class_weights(std::span<const AnnotationRecord> records);

}  // namespace affmtl
