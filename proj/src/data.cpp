#include "affmtl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <set>
#include <sstream>

#include "affmtl/binary_io.hpp"
#include "affmtl/errors.hpp"
#include "affmtl/rng.hpp"
#include "affmtl/text.hpp"

namespace affmtl {

std::string to_string(const FrameKey& key) {
  return key.video_id + "#" + std::to_string(key.frame_index);
}

// ---- annotation CSV ---------------------------------------------------------------

namespace {

constexpr std::size_t kColumns = 5 + kNumAus;

AnnotationRecord parse_row(const std::string& line, std::size_t line_no) {
  const auto fields = split(line, ',');
  if (fields.size() != kColumns)
    throw ParseError(line_no, "expected " + std::to_string(kColumns) + " fields, got " +
                                  std::to_string(fields.size()));
  AnnotationRecord r;
  r.video_id = std::string(trim(fields[0]));
  if (r.video_id.empty()) throw ParseError(line_no, "empty video_id");

  long long n = 0;
  if (!parse_int(fields[1], n)) throw ParseError(line_no, "frame_index is not an integer");
  if (n < 0 || n > static_cast<long long>(UINT32_MAX))
    throw ValidationError("line " + std::to_string(line_no) + ": frame_index out of range");
  r.frame_index = static_cast<std::uint32_t>(n);

  auto va = [&](const std::string& field, const char* name) {
    double v = 0.0;
    if (!parse_double(field, v)) throw ParseError(line_no, std::string(name) + " is not a number");
    if (v != kVaSentinel && !(v >= -1.0 && v <= 1.0))
      throw ValidationError("line " + std::to_string(line_no) + ": " + name + " = " + field +
                            " outside [-1, 1] and not the -5 sentinel");
    return v;
  };
  r.valence = va(fields[2], "valence");
  r.arousal = va(fields[3], "arousal");

  if (!parse_int(fields[4], n)) throw ParseError(line_no, "expression is not an integer");
  if (n != kExprSentinel && (n < 0 || n >= static_cast<long long>(kNumExpr)))
    throw ValidationError("line " + std::to_string(line_no) + ": expression = " +
                          std::to_string(n) + " outside 0..7 and not the -1 sentinel");
  r.expression = static_cast<int>(n);

  std::size_t sentinels = 0;
  for (std::size_t j = 0; j < kNumAus; ++j) {
    if (!parse_int(fields[5 + j], n))
      throw ParseError(line_no, std::string(kAuNames[j]) + " is not an integer");
    if (n != kAuSentinel && n != 0 && n != 1)
      throw ValidationError("line " + std::to_string(line_no) + ": " + std::string(kAuNames[j]) +
                            " = " + std::to_string(n) + " is not 0, 1 or -1");
    r.aus[j] = static_cast<int>(n);
    sentinels += n == kAuSentinel ? 1 : 0;
  }
  if (sentinels != 0 && sentinels != kNumAus)
    throw ValidationError("line " + std::to_string(line_no) +
                          ": AU sentinel -1 must cover all twelve units");
  return r;
}

}  // namespace

std::vector<AnnotationRecord> parse_annotations(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  ++line_no;
  if (trim(line) != kAnnotationHeader) throw ParseError(1, "unexpected header");
  std::vector<AnnotationRecord> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    out.push_back(parse_row(line, line_no));
  }
  return out;
}

std::vector<AnnotationRecord> parse_annotations_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_annotations(in);
}

std::string serialize_annotations(std::span<const AnnotationRecord> records) {
  std::ostringstream os;
  os << kAnnotationHeader << '\n';
  for (const auto& r : records) {
    os << r.video_id << ',' << r.frame_index << ',' << format_double(r.valence) << ','
       << format_double(r.arousal) << ',' << r.expression;
    for (int a : r.aus) os << ',' << a;
    os << '\n';
  }
  return os.str();
}

DedupResult dedup(std::vector<AnnotationRecord> records) {
  DedupResult out;
  std::map<FrameKey, std::size_t> first;
  for (auto& r : records) {
    auto [it, inserted] = first.emplace(r.key(), out.records.size());
    if (inserted) {
      out.records.push_back(std::move(r));
      continue;
    }
    const auto& kept = out.records[it->second];
    if (!kept.same_labels(r)) {
      const std::string a = serialize_annotations(std::span(&kept, 1));
      const std::string b = serialize_annotations(std::span(&r, 1));
      throw ConflictError("conflicting duplicates for " + to_string(r.key()) + ":\n  " +
                          a.substr(a.find('\n') + 1) + "  " + b.substr(b.find('\n') + 1));
    }
    ++out.removed;
  }
  return out;
}

// ---- feature file -------------------------------------------------------------------

std::string encode_features(std::span<const AnnotationRecord> records) {
  BinaryWriter w;
  w.u32(kFeatureFormatVersion);
  w.u64(records.size());
  for (const auto& r : records) {
    w.string(r.video_id);
    w.u32(r.frame_index);
    w.u32(static_cast<std::uint32_t>(r.features.size()));
    for (double v : r.features) w.f64(v);
  }
  return w.bytes();
}

FeatureMap decode_features(std::string_view bytes, const std::string& source) {
  BinaryReader r(bytes, source);
  const auto version = r.u32();
  if (version != kFeatureFormatVersion)
    throw IoError(source + ": unsupported feature format version " + std::to_string(version));
  const auto count = r.u64();
  FeatureMap out;
  for (std::uint64_t i = 0; i < count; ++i) {
    FrameKey key;
    key.video_id = r.string();
    key.frame_index = r.u32();
    std::vector<double> v(r.u32());
    for (auto& x : v) x = r.f64();
    out[std::move(key)] = std::move(v);
  }
  if (!r.at_end()) throw IoError(source + ": trailing bytes");
  return out;
}

void attach_features(std::vector<AnnotationRecord>& records, const FeatureMap& features) {
  std::vector<std::string> missing;
  std::size_t dim = 0;
  for (auto& r : records) {
    auto it = features.find(r.key());
    if (it == features.end()) {
      if (missing.size() < 10) missing.push_back(to_string(r.key()));
      continue;
    }
    if (dim == 0) dim = it->second.size();
    if (it->second.size() != dim)
      throw ValidationError("feature dimension changes at " + to_string(r.key()));
    r.features = it->second;
  }
  if (!missing.empty())
    throw ValidationError("no features for frame(s): " + join(missing, ", "));
}

// ---- splits and windows ------------------------------------------------------------

DatasetSplit DatasetSplit::from(std::vector<AnnotationRecord> records) {
  DatasetSplit s;
  s.records = std::move(records);
  for (const auto& r : s.records) {
    if (r.au_valid()) {
      ++s.au_valid;
      for (std::size_t j = 0; j < kNumAus; ++j) s.au_positive[j] += r.aus[j] == 1 ? 1 : 0;
    }
    if (r.expr_valid()) {
      ++s.expr_valid;
      ++s.expr_histogram[static_cast<std::size_t>(r.expression)];
    }
    if (r.va_valid()) ++s.va_valid;
  }
  return s;
}

std::size_t DatasetSplit::input_dim() const {
  return records.empty() ? 0 : records.front().features.size();
}

DatasetSplit filter_valid(std::span<const AnnotationRecord> records, LabelTask task) {
  std::vector<AnnotationRecord> kept;
  for (const auto& r : records) {
    const bool ok = task == LabelTask::AU     ? r.au_valid()
                    : task == LabelTask::EXPR ? r.expr_valid()
                                              : r.va_valid();
    if (ok) kept.push_back(r);
  }
  return DatasetSplit::from(std::move(kept));
}

DatasetSplit filter_valid(const DatasetSplit& split, LabelTask task) {
  return filter_valid(std::span<const AnnotationRecord>(split.records), task);
}

std::vector<Window> build_windows(const DatasetSplit& split, std::size_t seq_len,
                                  std::size_t stride) {
  if (seq_len == 0 || stride == 0 || stride > seq_len)
    throw ConfigError("windows need S >= 1 and 1 <= W <= S (got S=" + std::to_string(seq_len) +
                      ", W=" + std::to_string(stride) + ")");
  const auto& recs = split.records;
  std::vector<std::size_t> order(recs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return recs[a].key() < recs[b].key(); });

  std::vector<Window> out;
  std::size_t seg_begin = 0;
  while (seg_begin < order.size()) {
    std::size_t seg_end = seg_begin + 1;
    while (seg_end < order.size() && recs[order[seg_end]].video_id == recs[order[seg_begin]].video_id &&
           recs[order[seg_end]].frame_index == recs[order[seg_end - 1]].frame_index + 1)
      ++seg_end;
    const std::size_t len = seg_end - seg_begin;
    for (std::size_t start = 0; start < len; start += stride) {
      Window w;
      w.video_id = recs[order[seg_begin]].video_id;
      w.start_frame = recs[order[seg_begin + start]].frame_index;
      for (std::size_t k = 0; k < seq_len; ++k) {
        const bool real = start + k < len;
        w.frames.push_back(order[real ? seg_begin + start + k : seg_end - 1]);
        w.pad_mask.push_back(real);
      }
      out.push_back(std::move(w));
    }
    seg_begin = seg_end;
  }
  return out;
}

std::vector<std::vector<std::size_t>> batch_order(std::size_t n_windows, std::size_t batch_size,
                                                  std::uint64_t seed, bool shuffle) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> idx(n_windows);
  for (std::size_t i = 0; i < n_windows; ++i) idx[i] = i;
  if (shuffle) {
    Rng rng(seed);
    for (std::size_t i = n_windows; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n_windows; i += batch_size)
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(i),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(n_windows, i + batch_size)));
  return out;
}

Batch make_batch(const DatasetSplit& split, std::span<const Window> windows,
                 std::span<const std::size_t> window_ids) {
  if (window_ids.empty()) throw DegenerateInputError("make_batch: no windows");
  Batch batch;
  batch.b = window_ids.size();
  batch.s = windows[window_ids[0]].frames.size();
  const std::size_t dim = split.input_dim();
  std::vector<double> feats;
  feats.reserve(batch.rows() * dim);
  for (auto w : window_ids) {
    const Window& win = windows[w];
    if (win.frames.size() != batch.s) throw DimensionError("make_batch: ragged windows");
    for (std::size_t t = 0; t < batch.s; ++t) {
      const auto& r = split.records[win.frames[t]];
      if (r.features.size() != dim)
        throw DimensionError("make_batch: frame " + to_string(r.key()) + " has " +
                             std::to_string(r.features.size()) + " features, expected " +
                             std::to_string(dim));
      feats.insert(feats.end(), r.features.begin(), r.features.end());
      batch.keys.push_back(r.key());
      batch.valence.push_back(r.valence);
      batch.arousal.push_back(r.arousal);
      batch.expression.push_back(r.expression);
      batch.aus.push_back(r.aus);
      batch.pad_mask.push_back(win.pad_mask[t]);
    }
  }
  batch.frames = Tensor::from({batch.rows(), dim}, std::move(feats));
  return batch;
}

std::vector<Batch> batches(const DatasetSplit& split, std::span<const Window> windows,
                           std::size_t batch_size, std::uint64_t seed, bool shuffle) {
  std::vector<Batch> out;
  for (const auto& ids : batch_order(windows.size(), batch_size, seed, shuffle))
    out.push_back(make_batch(split, windows, ids));
  return out;
}

// ---- synthetic corpus ---------------------------------------------------------------

int expression_octant(double valence, double arousal) {
  const double angle = std::atan2(arousal, valence);  // (-pi, pi]
  auto c = static_cast<int>(std::floor((angle + std::numbers::pi) / (std::numbers::pi / 4.0)));
  return std::clamp(c, 0, static_cast<int>(kNumExpr) - 1);
}

std::vector<AnnotationRecord> synth_generate(const SynthOptions& o) {
  for (double r : {o.sentinel_rates.va, o.sentinel_rates.expr, o.sentinel_rates.au})
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("sentinel rates must lie in [0, 1)");
  if (o.input_dim == 0) throw ConfigError("input_dim must be positive");

  Rng world(derive_seed(o.seed, "synth.world"));
  // AU_j = [probe_j . (v, a) + offset_j + noise > 0]
  std::array<std::array<double, 2>, kNumAus> probe{};
  std::array<double, kNumAus> offset{};
  for (std::size_t j = 0; j < kNumAus; ++j) {
    probe[j] = {2.0 * world.normal(), 2.0 * world.normal()};
    offset[j] = world.uniform(-0.4, 0.4);
  }
  // features = embed . [v, a, au - 1/2] + noise
  const std::size_t latent = 2 + kNumAus;
  std::vector<double> embed(o.input_dim * latent);
  for (auto& e : embed) e = world.normal();

  std::vector<AnnotationRecord> out;
  out.reserve(o.num_videos * o.frames_per_video);
  for (std::size_t v = 0; v < o.num_videos; ++v) {
    Rng rng(derive_seed(o.seed, v));
    char id[32];
    std::snprintf(id, sizeof id, "vid%03zu", v);
    const double mu_v = rng.uniform(-0.2, 0.2);
    const double mu_a = rng.uniform(-0.2, 0.2);
    const double spread =
        o.walk_step / std::sqrt(std::max(1e-12, 2.0 * o.walk_reversion - o.walk_reversion * o.walk_reversion));
    double val = std::clamp(mu_v + spread * rng.normal(), -1.0, 1.0);
    double aro = std::clamp(mu_a + spread * rng.normal(), -1.0, 1.0);
    for (std::size_t f = 0; f < o.frames_per_video; ++f) {
      if (f > 0) {
        val = std::clamp(val + o.walk_reversion * (mu_v - val) + o.walk_step * rng.normal(), -1.0, 1.0);
        aro = std::clamp(aro + o.walk_reversion * (mu_a - aro) + o.walk_step * rng.normal(), -1.0, 1.0);
      }
      AnnotationRecord r;
      r.video_id = id;
      r.frame_index = static_cast<std::uint32_t>(f);
      r.valence = val;
      r.arousal = aro;
      r.expression = expression_octant(val, aro);
      for (std::size_t j = 0; j < kNumAus; ++j) {
        const double z = probe[j][0] * val + probe[j][1] * aro + offset[j] + 0.2 * rng.normal();
        r.aus[j] = z > 0.0 ? 1 : 0;
      }
      std::array<double, 2 + kNumAus> code{};
      code[0] = 2.0 * val;
      code[1] = 2.0 * aro;
      for (std::size_t j = 0; j < kNumAus; ++j) code[2 + j] = r.aus[j] - 0.5;
      const bool corrupted = rng.uniform() < o.corruption_rate;
      r.features.resize(o.input_dim);
      for (std::size_t d = 0; d < o.input_dim; ++d) {
        double x = 0.0;
        for (std::size_t k = 0; k < latent; ++k) x += embed[d * latent + k] * code[k];
        const double noise = rng.normal();
        r.features[d] = corrupted ? 2.0 * noise : x + o.feature_noise * noise;
      }
      // sentinel draws always consume the stream so rates do not shift the labels
      const double u_va = rng.uniform(), u_expr = rng.uniform(), u_au = rng.uniform();
      if (u_va < o.sentinel_rates.va) r.valence = r.arousal = kVaSentinel;
      if (u_expr < o.sentinel_rates.expr) r.expression = kExprSentinel;
      if (u_au < o.sentinel_rates.au) r.aus.fill(kAuSentinel);
      out.push_back(std::move(r));
    }
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, std::span<const AnnotationRecord> records) {
  write_file_atomic(dir / "annotations.csv", serialize_annotations(records));
  write_file_atomic(dir / "features.bin", encode_features(records));
}

Splits split_by_video(std::vector<AnnotationRecord> records, double val_fraction) {
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    throw ConfigError("val_fraction must lie in [0, 1)");
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.video_id);
  const std::vector<std::string> sorted(ids.begin(), ids.end());
  std::size_t n_val = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(sorted.size())));
  if (sorted.size() > 1) n_val = std::min(n_val, sorted.size() - 1);
  const std::set<std::string> val_ids(sorted.end() - static_cast<std::ptrdiff_t>(n_val), sorted.end());
  std::vector<AnnotationRecord> train, val;
  for (auto& r : records) (val_ids.count(r.video_id) ? val : train).push_back(std::move(r));
  return {DatasetSplit::from(std::move(train)), DatasetSplit::from(std::move(val))};
}

Splits load_splits(const std::filesystem::path& dir, double val_fraction) {
  auto records = dedup(parse_annotations_file(dir / "annotations.csv")).records;
  attach_features(records, decode_features(read_file(dir / "features.bin"),
                                           (dir / "features.bin").string()));
  return split_by_video(std::move(records), val_fraction);
}

}  // namespace affmtl
