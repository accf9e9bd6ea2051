#include "affmtl/metrics.hpp"

#include <map>
#include <sstream>

#include "affmtl/errors.hpp"
#include "affmtl/objectives.hpp"
#include "affmtl/text.hpp"

namespace affmtl {

std::string_view to_string(AbsentClassRule rule) {
  return rule == AbsentClassRule::One ? "one" : "zero";
}

AbsentClassRule parse_absent_rule(std::string_view s) {
  if (s == "one") return AbsentClassRule::One;
  if (s == "zero") return AbsentClassRule::Zero;
  throw ConfigError("absent-class F1 rule must be 'one' or 'zero', got '" + std::string(s) + "'");
}

double BinaryCounts::f1(AbsentClassRule rule) const {
  const std::size_t denom = 2 * tp + fp + fn;
  if (denom == 0) return rule == AbsentClassRule::One ? 1.0 : 0.0;
  return static_cast<double>(2 * tp) / static_cast<double>(denom);
}

double binary_f1(const std::vector<bool>& pred, const std::vector<bool>& target,
                 AbsentClassRule rule) {
  if (pred.size() != target.size())
    throw DimensionError("binary_f1: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(target.size()) + " targets");
  BinaryCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) c.add(pred[i], target[i]);
  return c.f1(rule);
}

AuScores au_macro_f1(std::span<const double> probs, std::span<const AuLabels> target,
                     double threshold, AbsentClassRule rule) {
  if (probs.size() != target.size() * kNumAus)
    throw DimensionError("au_macro_f1: " + std::to_string(probs.size()) +
                         " probabilities for " + std::to_string(target.size()) + " rows");
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ConfigError("au_macro_f1: threshold must lie in (0, 1)");
  AuScores s;
  std::array<BinaryCounts, kNumAus> counts{};
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!au_valid(target[i])) {
      ++s.skipped;
      continue;
    }
    ++s.evaluated;
    for (std::size_t j = 0; j < kNumAus; ++j)
      counts[j].add(probs[i * kNumAus + j] > threshold, target[i][j] == 1);
  }
  if (s.evaluated == 0) throw ValidationError("au_macro_f1: no valid AU labels");
  double total = 0.0;
  for (std::size_t j = 0; j < kNumAus; ++j) {
    s.per_unit[j] = counts[j].f1(rule);
    total += s.per_unit[j];
  }
  s.macro = total / static_cast<double>(kNumAus);
  return s;
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

ExprScores expr_macro_f1(std::span<const double> dist, std::span<const int> target,
                         AbsentClassRule rule) {
  if (dist.size() != target.size() * kNumExpr)
    throw DimensionError("expr_macro_f1: " + std::to_string(dist.size()) + " scores for " +
                         std::to_string(target.size()) + " rows");
  ExprScores s;
  std::array<BinaryCounts, kNumExpr> counts{};
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!expr_valid(target[i])) {
      ++s.skipped;
      continue;
    }
    ++s.evaluated;
    const std::size_t pred = argmax(dist.subspan(i * kNumExpr, kNumExpr));
    for (std::size_t c = 0; c < kNumExpr; ++c)
      counts[c].add(pred == c, static_cast<std::size_t>(target[i]) == c);
  }
  if (s.evaluated == 0) throw ValidationError("expr_macro_f1: no valid expression labels");
  double total = 0.0;
  for (std::size_t c = 0; c < kNumExpr; ++c) {
    s.per_class[c] = counts[c].f1(rule);
    total += s.per_class[c];
  }
  s.macro = total / static_cast<double>(kNumExpr);
  return s;
}

double ccc_metric(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size())
    throw DimensionError("ccc_metric: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(target.size()) + " targets");
  std::vector<double> p, t;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!va_valid(target[i])) continue;
    p.push_back(pred[i]);
    t.push_back(target[i]);
  }
  if (p.size() < 2)
    throw ValidationError("ccc_metric: fewer than 2 valid entries (" + std::to_string(p.size()) +
                          ")");
  NoGrad no_grad;
  const std::size_t n = p.size();
  return ccc(Tensor::from({n}, std::move(p)), Tensor::from({n}, std::move(t))).item();
}

double composite_P(double ccc_valence, double ccc_arousal, double expr_f1_macro,
                   double au_f1_macro) {
  return (ccc_arousal + ccc_valence) / 2.0 + expr_f1_macro + au_f1_macro;
}

double composite_P(const EvalReport& r) {
  std::vector<std::string> missing;
  if (!r.ccc_valence) missing.emplace_back("ccc_valence");
  if (!r.ccc_arousal) missing.emplace_back("ccc_arousal");
  if (!r.expr_f1_macro) missing.emplace_back("expr_f1_macro");
  if (!r.au_f1_macro) missing.emplace_back("au_f1_macro");
  if (!missing.empty())
    throw ValidationError("composite_P: missing component(s) " + join(missing, ", "));
  return composite_P(*r.ccc_valence, *r.ccc_arousal, *r.expr_f1_macro, *r.au_f1_macro);
}

void finalize(EvalReport& r) {
  r.mean_ccc.reset();
  r.P.reset();
  if (r.ccc_valence && r.ccc_arousal) r.mean_ccc = (*r.ccc_arousal + *r.ccc_valence) / 2.0;
  if (r.mean_ccc && r.expr_f1_macro && r.au_f1_macro) r.P = composite_P(r);
}

// ---- serialization -------------------------------------------------------------

namespace {

std::vector<std::pair<std::string, std::string>> report_pairs(const EvalReport& r) {
  std::vector<std::pair<std::string, std::string>> kv;
  auto num = [&](const std::string& k, const std::optional<double>& v) {
    if (v) kv.emplace_back(k, format_double(*v));
  };
  kv.emplace_back("config_hash", r.config_hash);
  kv.emplace_back("seed", std::to_string(r.seed));
  kv.emplace_back("absent_class_f1", std::string(to_string(r.absent_rule)));
  kv.emplace_back("au_threshold", format_double(r.au_threshold));
  kv.emplace_back("routing", r.routing);
  num("au_f1_macro", r.au_f1_macro);
  if (r.au_f1_per_unit)
    for (std::size_t j = 0; j < kNumAus; ++j)
      kv.emplace_back("au_f1." + std::string(kAuNames[j]), format_double((*r.au_f1_per_unit)[j]));
  num("expr_f1_macro", r.expr_f1_macro);
  if (r.expr_f1_per_class)
    for (std::size_t c = 0; c < kNumExpr; ++c)
      kv.emplace_back("expr_f1." + std::string(kExprNames[c]),
                      format_double((*r.expr_f1_per_class)[c]));
  num("ccc_valence", r.ccc_valence);
  num("ccc_arousal", r.ccc_arousal);
  num("mean_ccc", r.mean_ccc);
  num("P", r.P);
  kv.emplace_back("au_evaluated", std::to_string(r.au_evaluated));
  kv.emplace_back("au_skipped", std::to_string(r.au_skipped));
  kv.emplace_back("expr_evaluated", std::to_string(r.expr_evaluated));
  kv.emplace_back("expr_skipped", std::to_string(r.expr_skipped));
  kv.emplace_back("va_evaluated", std::to_string(r.va_evaluated));
  kv.emplace_back("va_skipped", std::to_string(r.va_skipped));
  return kv;
}

}  // namespace

std::string to_key_value(const EvalReport& r) {
  std::ostringstream os;
  for (const auto& [k, v] : report_pairs(r)) os << k << '=' << v << '\n';
  return os.str();
}

EvalReport report_from_key_value(std::string_view text) {
  EvalReport r;
  std::size_t line_no = 0;
  auto lines = split(text, '\n');
  for (const auto& raw : lines) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(line_no, "expected key=value");
    const std::string key(line.substr(0, eq));
    const std::string value(line.substr(eq + 1));
    auto real = [&]() {
      double d;
      if (!parse_double(value, d)) throw ParseError(line_no, "bad number for " + key);
      return d;
    };
    auto count = [&]() {
      long long n;
      if (!parse_int(value, n) || n < 0) throw ParseError(line_no, "bad count for " + key);
      return static_cast<std::size_t>(n);
    };
    if (key == "config_hash") r.config_hash = value;
    else if (key == "seed") r.seed = count();
    else if (key == "absent_class_f1") r.absent_rule = parse_absent_rule(value);
    else if (key == "au_threshold") r.au_threshold = real();
    else if (key == "routing") r.routing = value;
    else if (key == "au_f1_macro") r.au_f1_macro = real();
    else if (key == "expr_f1_macro") r.expr_f1_macro = real();
    else if (key == "ccc_valence") r.ccc_valence = real();
    else if (key == "ccc_arousal") r.ccc_arousal = real();
    else if (key == "mean_ccc") r.mean_ccc = real();
    else if (key == "P") r.P = real();
    else if (key == "au_evaluated") r.au_evaluated = count();
    else if (key == "au_skipped") r.au_skipped = count();
    else if (key == "expr_evaluated") r.expr_evaluated = count();
    else if (key == "expr_skipped") r.expr_skipped = count();
    else if (key == "va_evaluated") r.va_evaluated = count();
    else if (key == "va_skipped") r.va_skipped = count();
    else if (key.starts_with("au_f1.")) {
      const auto name = key.substr(6);
      bool found = false;
      for (std::size_t j = 0; j < kNumAus; ++j)
        if (kAuNames[j] == name) {
          if (!r.au_f1_per_unit) r.au_f1_per_unit.emplace();
          (*r.au_f1_per_unit)[j] = real();
          found = true;
        }
      if (!found) throw ParseError(line_no, "unknown AU '" + name + "'");
    } else if (key.starts_with("expr_f1.")) {
      const auto name = key.substr(8);
      bool found = false;
      for (std::size_t c = 0; c < kNumExpr; ++c)
        if (kExprNames[c] == name) {
          if (!r.expr_f1_per_class) r.expr_f1_per_class.emplace();
          (*r.expr_f1_per_class)[c] = real();
          found = true;
        }
      if (!found) throw ParseError(line_no, "unknown expression class '" + name + "'");
    } else {
      throw ParseError(line_no, "unknown report key '" + key + "'");
    }
  }
  return r;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = nlohmann::json::object();
  auto opt = [&](const char* k, const std::optional<double>& v) {
    j[k] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  j["config_hash"] = r.config_hash;
  j["seed"] = r.seed;
  j["absent_class_f1"] = std::string(to_string(r.absent_rule));
  j["au_threshold"] = r.au_threshold;
  j["routing"] = r.routing;
  opt("au_f1_macro", r.au_f1_macro);
  j["au_f1_per_unit"] = r.au_f1_per_unit ? nlohmann::json(*r.au_f1_per_unit) : nlohmann::json(nullptr);
  opt("expr_f1_macro", r.expr_f1_macro);
  j["expr_f1_per_class"] =
      r.expr_f1_per_class ? nlohmann::json(*r.expr_f1_per_class) : nlohmann::json(nullptr);
  opt("ccc_valence", r.ccc_valence);
  opt("ccc_arousal", r.ccc_arousal);
  opt("mean_ccc", r.mean_ccc);
  opt("P", r.P);
  j["counts"] = {{"au_evaluated", r.au_evaluated},     {"au_skipped", r.au_skipped},
                 {"expr_evaluated", r.expr_evaluated}, {"expr_skipped", r.expr_skipped},
                 {"va_evaluated", r.va_evaluated},     {"va_skipped", r.va_skipped}};
  return j;
}

}  // namespace affmtl
