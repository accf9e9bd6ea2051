#pragma once

#include <algorithm>
#include <array>
#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include "affmtl/tasks.hpp"

namespace affmtl {

using AuLabels = std::array<int, kNumAus>;

inline constexpr double kVaSentinel = -5.0;
inline constexpr int kExprSentinel = -1;
inline constexpr int kAuSentinel = -1;

inline bool va_valid(double v) { return v != kVaSentinel; }
inline bool expr_valid(int e) { return e != kExprSentinel; }
inline bool au_valid(const AuLabels& aus) {
  return std::none_of(aus.begin(), aus.end(), [](int a) { return a == kAuSentinel; });
}

struct FrameKey {
  std::string video_id;
  std::uint32_t frame_index = 0;
  auto operator<=>(const FrameKey&) const = default;
};

std::string to_string(const FrameKey& key);

// One frame's labels. Sentinels: -5 for valence/arousal, -1 for expression
// and for all twelve AUs at once.
struct AnnotationRecord {
  std::string video_id;
  std::uint32_t frame_index = 0;
  double valence = kVaSentinel;
  double arousal = kVaSentinel;
  int expression = kExprSentinel;
  AuLabels aus{-1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1, -1};
  std::vector<double> features;  // joined from the feature file

  FrameKey key() const { return {video_id, frame_index}; }
  bool va_valid() const { return affmtl::va_valid(valence) && affmtl::va_valid(arousal); }
  bool expr_valid() const { return affmtl::expr_valid(expression); }
  bool au_valid() const { return affmtl::au_valid(aus); }
  bool same_labels(const AnnotationRecord& o) const {
    return valence == o.valence && arousal == o.arousal && expression == o.expression &&
           aus == o.aus;
  }
};

}  // namespace affmtl
