#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace affmtl {

inline constexpr std::size_t kNumAus = 12;
inline constexpr std::size_t kNumExpr = 8;

// AU column order of the annotation format.
inline constexpr std::array<std::string_view, kNumAus> kAuNames = {
    "au1", "au2", "au4", "au6", "au7", "au10", "au12", "au15", "au23", "au24", "au25", "au26"};

inline constexpr std::array<std::string_view, kNumExpr> kExprNames = {
    "Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise", "Other"};

// Valence and arousal are separate tasks so that single-dimension models
// (and the F_V / F_A feature banks) can be expressed.
enum class Task : std::uint8_t { AU = 0, EXPR = 1, V = 2, A = 3 };

inline constexpr std::array<Task, 4> kAllTasks = {Task::AU, Task::EXPR, Task::V, Task::A};

std::string_view task_name(Task t);

class TaskSet {
 public:
  constexpr TaskSet() = default;
  constexpr TaskSet(std::initializer_list<Task> tasks) {
    for (Task t : tasks) bits_ |= bit(t);
  }

  // Accepts AU, EXPR, V, A and VA (= V + A).
  static TaskSet parse(std::string_view name);
  static TaskSet parse(const std::vector<std::string>& names);

  constexpr bool contains(Task t) const { return (bits_ & bit(t)) != 0; }
  constexpr bool contains(TaskSet other) const { return (bits_ & other.bits_) == other.bits_; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr bool has_va() const { return contains(Task::V) || contains(Task::A); }
  std::size_t size() const;
  TaskSet& insert(Task t) {
    bits_ |= bit(t);
    return *this;
  }
  constexpr bool operator==(const TaskSet&) const = default;
  std::uint8_t bits() const { return bits_; }

  // "AU|EXPR|V|A" style; empty set renders as "".
  std::string to_string() const;

 private:
  static constexpr std::uint8_t bit(Task t) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(t)); }
  std::uint8_t bits_ = 0;
};

}  // namespace affmtl
