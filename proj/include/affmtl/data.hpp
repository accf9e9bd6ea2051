#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "affmtl/records.hpp"
#include "affmtl/tensor.hpp"

namespace affmtl {

// ---- annotation CSV ---------------------------------------------------------------

inline constexpr std::string_view kAnnotationHeader =
    "video_id,frame_index,valence,arousal,expression,au1,au2,au4,au6,au7,au10,au12,au15,au23,"
    "au24,au25,au26";

std::vector<AnnotationRecord> parse_annotations(std::istream& in);
std::vector<AnnotationRecord> parse_annotations_file(const std::filesystem::path& path);
std::string serialize_annotations(std::span<const AnnotationRecord> records);

struct DedupResult {
  std::vector<AnnotationRecord> records;
  std::size_t removed = 0;
};

// Keeps the first occurrence of each (video_id, frame_index). Duplicates whose
// labels disagree raise ConflictError.
DedupResult dedup(std::vector<AnnotationRecord> records);

// ---- feature file -------------------------------------------------------------------
//   u32 format version, u64 record count, then per record:
//   u32 length + video_id bytes, u32 frame_index, u32 dim, dim x f64 (little-endian)

inline constexpr std::uint32_t kFeatureFormatVersion = 1;

using FeatureMap = std::map<FrameKey, std::vector<double>>;

std::string encode_features(std::span<const AnnotationRecord> records);
FeatureMap decode_features(std::string_view bytes, const std::string& source = "<memory>");
// Fills record.features; throws ValidationError listing keys without features.
void attach_features(std::vector<AnnotationRecord>& records, const FeatureMap& features);

// ---- splits and windows ------------------------------------------------------------

enum class LabelTask { AU, EXPR, VA };

struct DatasetSplit {
  std::vector<AnnotationRecord> records;
  std::size_t au_valid = 0, expr_valid = 0, va_valid = 0;
  std::array<std::size_t, kNumAus> au_positive{};
  std::array<std::size_t, kNumExpr> expr_histogram{};

  static DatasetSplit from(std::vector<AnnotationRecord> records);
  std::size_t input_dim() const;
};

// Drops records whose labels for `task` are sentinel. An empty result is
// returned as-is (callers decide).
DatasetSplit filter_valid(std::span<const AnnotationRecord> records, LabelTask task);
DatasetSplit filter_valid(const DatasetSplit& split, LabelTask task);

struct Window {
  std::string video_id;
  std::uint32_t start_frame = 0;
  std::vector<std::size_t> frames;  // indices into the split's records
  std::vector<bool> pad_mask;       // true = real frame
};

// Per video, windows of length S start every W frames. A gap in frame indices
// starts a new segment. Short tails are padded by repeating the last real frame.
std::vector<Window> build_windows(const DatasetSplit& split, std::size_t seq_len,
                                  std::size_t stride);

// Window indices grouped into batches of `batch_size`; shuffled with a
// seeded Fisher-Yates when requested. The final batch may be short.
std::vector<std::vector<std::size_t>> batch_order(std::size_t n_windows, std::size_t batch_size,
                                                  std::uint64_t seed, bool shuffle);

struct Batch {
  Tensor frames;  // [b*s, input_dim]
  std::size_t b = 0, s = 0;
  std::vector<FrameKey> keys;
  std::vector<double> valence, arousal;
  std::vector<int> expression;
  std::vector<AuLabels> aus;
  std::vector<bool> pad_mask;

  std::size_t rows() const { return b * s; }
};

Batch make_batch(const DatasetSplit& split, std::span<const Window> windows,
                 std::span<const std::size_t> window_ids);

std::vector<Batch> batches(const DatasetSplit& split, std::span<const Window> windows,
                           std::size_t batch_size, std::uint64_t seed, bool shuffle);

// ---- synthetic corpus ---------------------------------------------------------------

struct SentinelRates {
  double va = 0.0, expr = 0.0, au = 0.0;
};

struct SynthOptions {
  std::uint64_t seed = 0;
  std::size_t num_videos = 8;
  std::size_t frames_per_video = 500;
  std::size_t input_dim = 32;
  SentinelRates sentinel_rates{};
  double feature_noise = 0.05;   // iid Gaussian on every feature
  double corruption_rate = 0.03; // frames whose features are replaced by noise
  double walk_reversion = 0.1;   // pull of (v, a) toward the video mean per frame
  double walk_step = 0.25;       // per-frame innovation std of (v, a)
};

// Expression class of a (valence, arousal) point: the octant of its angle.
int expression_octant(double valence, double arousal);

std::vector<AnnotationRecord> synth_generate(const SynthOptions& options);

// Writes annotations.csv and features.bin under `dir`.
void write_dataset(const std::filesystem::path& dir, std::span<const AnnotationRecord> records);

struct Splits {
  DatasetSplit train;
  DatasetSplit val;
};

// Reads annotations.csv + features.bin, dedups, attaches features and holds
// out the last ceil(val_fraction * videos) videos (sorted by id) for validation.
Splits load_splits(const std::filesystem::path& dir, double val_fraction);
Splits split_by_video(std::vector<AnnotationRecord> records, double val_fraction);

}  // namespace affmtl
