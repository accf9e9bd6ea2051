#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace affmtl {

std::uint64_t fnv1a64(std::string_view bytes);

// Mixes a master seed with a tag into an independent stream seed (splitmix64
// finalizer). Used for per-parameter init streams and per-run streams.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag);

// mt19937_64 is fully specified by the standard; the distribution helpers
// below are hand-rolled because <random> distributions are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::mt19937_64 engine_;
};

}  // namespace affmtl
