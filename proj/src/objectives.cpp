#include "affmtl/objectives.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "affmtl/errors.hpp"

namespace affmtl {

ClassWeights ClassWeights::ones() {
  ClassWeights w;
  w.au.fill(1.0);
  w.expr.fill(1.0);
  return w;
}

namespace {

Tensor one_minus(const Tensor& x) { return add_scalar(scale(x, -1.0), 1.0); }

Tensor row_tensor(std::span<const double> values) {
  return Tensor::from({values.size()}, {values.begin(), values.end()});
}

}  // namespace

Tensor au_loss(const Tensor& pred, std::span<const AuLabels> target, const ClassWeights& w) {
  if (pred.rank() != 2 || pred.dim(1) != kNumAus || pred.dim(0) != target.size())
    throw DimensionError("au_loss: predictions " + to_string(pred.shape()) + " vs " +
                         std::to_string(target.size()) + " label rows");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < target.size(); ++i)
    if (au_valid(target[i])) rows.push_back(i);
  if (rows.empty()) throw EmptyBatchError("au_loss: no valid AU labels in batch");

  std::vector<double> y;
  y.reserve(rows.size() * kNumAus);
  for (auto r : rows)
    for (int a : target[r]) y.push_back(static_cast<double>(a));
  const Tensor labels = Tensor::from({rows.size(), kNumAus}, std::move(y));

  const Tensor p = clamp(gather_rows(pred, rows), kProbClamp, 1.0 - kProbClamp);
  const Tensor term = add(mul(labels, log(p)), mul(one_minus(labels), log(one_minus(p))));
  const Tensor per_sample = scale(sum(mul_row(term, row_tensor(w.au)), 1), -1.0 / kNumAus);
  return mean(per_sample);
}

Tensor expr_loss(const Tensor& pred, std::span<const int> target, const ClassWeights& w) {
  if (pred.rank() != 2 || pred.dim(1) != kNumExpr || pred.dim(0) != target.size())
    throw DimensionError("expr_loss: predictions " + to_string(pred.shape()) + " vs " +
                         std::to_string(target.size()) + " labels");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!expr_valid(target[i])) continue;
    if (target[i] < 0 || target[i] >= static_cast<int>(kNumExpr))
      throw DomainError("expr_loss: class index " + std::to_string(target[i]) + " out of range");
    rows.push_back(i);
  }
  if (rows.empty()) throw EmptyBatchError("expr_loss: no valid expression labels in batch");

  std::vector<double> picked(rows.size() * kNumExpr, 0.0);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto c = static_cast<std::size_t>(target[rows[r]]);
    picked[r * kNumExpr + c] = w.expr[c];
  }
  const Tensor weights = Tensor::from({rows.size(), kNumExpr}, std::move(picked));
  const Tensor logp = log(clamp(gather_rows(pred, rows), kProbClamp, 1.0));
  const Tensor per_sample = scale(sum(mul(logp, weights), 1), -1.0 / kNumExpr);
  return mean(per_sample);
}

Tensor ccc(const Tensor& x, const Tensor& y) {
  if (x.rank() != 1 || x.shape() != y.shape())
    throw DimensionError("ccc: expected two equal-length vectors, got " + to_string(x.shape()) +
                         " and " + to_string(y.shape()));
  const std::size_t n = x.dim(0);
  if (n < 2) throw DegenerateInputError("ccc: needs at least 2 entries, got " + std::to_string(n));

  const Tensor mx = mean(x);
  const Tensor my = mean(y);
  const Tensor dx = sub(x, broadcast(mx, {n}));
  const Tensor dy = sub(y, broadcast(my, {n}));
  // var and cov share one code path so that ccc(x, x) is exactly 1.
  const Tensor cov = mean(mul(dx, dy));
  const Tensor var_x = mean(mul(dx, dx));
  const Tensor var_y = mean(mul(dy, dy));
  const Tensor gap = sub(mx, my);
  const Tensor denom = clamp(add(add(var_x, var_y), mul(gap, gap)), kCccEpsilon,
                             std::numeric_limits<double>::infinity());
  return div(scale(cov, 2.0), denom);
}

Tensor va_component_loss(const Tensor& pred, std::span<const double> target) {
  if (pred.rank() != 1 || pred.dim(0) != target.size())
    throw DimensionError("va_loss: predictions " + to_string(pred.shape()) + " vs " +
                         std::to_string(target.size()) + " targets");
  std::vector<std::size_t> rows;
  std::vector<double> t;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!va_valid(target[i])) continue;
    rows.push_back(i);
    t.push_back(target[i]);
  }
  if (rows.size() < 2)
    throw EmptyBatchError("va_loss: fewer than 2 valid entries (" + std::to_string(rows.size()) +
                          ")");
  const std::size_t n = rows.size();
  return one_minus(ccc(gather_rows(pred, rows), Tensor::from({n}, std::move(t))));
}

Tensor va_loss(const Tensor& pred_v, const Tensor& pred_a, std::span<const double> target_v,
               std::span<const double> target_a) {
  return add(va_component_loss(pred_v, target_v), va_component_loss(pred_a, target_a));
}

OverallLoss overall_loss(const TaskLosses& losses, const LossWeights& lambda) {
  if (lambda.au == 0.0 && lambda.expr == 0.0 && lambda.va == 0.0)
    throw ConfigError("overall_loss: every task weight is zero");
  if (lambda.au < 0.0 || lambda.expr < 0.0 || lambda.va < 0.0)
    throw ConfigError("overall_loss: task weights must be non-negative");
  OverallLoss out;
  std::optional<Tensor> total;
  auto term = [&](const std::optional<Tensor>& loss, double weight) {
    if (weight == 0.0) return;
    if (!loss) {
      ++out.skipped;
      return;
    }
    Tensor scaled = scale(*loss, weight);
    total = total ? add(*total, scaled) : scaled;
  };
  term(losses.au, lambda.au);
  term(losses.expr, lambda.expr);
  term(losses.va, lambda.va);
  if (!total) throw EmptyBatchError("overall_loss: no weighted task produced a loss");
  out.total = *total;
  return out;
}

namespace {

template <std::size_t N>
std::array<double, N> normalise_inverse_frequency(const std::array<std::size_t, N>& counts,
                                                  std::size_t total) {
  std::array<double, N> w{};
  if (total == 0) {
    w.fill(1.0);
    return w;
  }
  double max_seen = 0.0;
  for (std::size_t j = 0; j < N; ++j) {
    if (counts[j] == 0) continue;
    w[j] = static_cast<double>(total) / static_cast<double>(counts[j]);
    max_seen = std::max(max_seen, w[j]);
  }
  if (max_seen == 0.0) {
    w.fill(1.0);
    return w;
  }
  for (std::size_t j = 0; j < N; ++j)
    if (counts[j] == 0) w[j] = max_seen;
  const double avg = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(N);
  for (auto& v : w) v /= avg;
  return w;
}

}  // namespace

ClassWeights compute_class_weights(std::span<const AnnotationRecord> records) {
  std::array<std::size_t, kNumAus> au_pos{};
  std::array<std::size_t, kNumExpr> expr_count{};
  std::size_t n_au = 0, n_expr = 0;
  for (const auto& r : records) {
    if (r.au_valid()) {
      ++n_au;
      for (std::size_t j = 0; j < kNumAus; ++j) au_pos[j] += r.aus[j] == 1 ? 1 : 0;
    }
    if (r.expr_valid()) {
      ++n_expr;
      ++expr_count[static_cast<std::size_t>(r.expression)];
    }
  }
  if (n_au == 0 && n_expr == 0)
    throw ValidationError("compute_class_weights: no valid AU or expression labels");
  ClassWeights w;
  w.au = normalise_inverse_frequency(au_pos, n_au);
  w.expr = normalise_inverse_frequency(expr_count, n_expr);
  return w;
}

}  // namespace affmtl
