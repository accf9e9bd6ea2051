#include "affmtl/tasks.hpp"

#include "affmtl/errors.hpp"

namespace affmtl {

std::string_view task_name(Task t) {
  switch (t) {
    case Task::AU:
      return "AU";
    case Task::EXPR:
      return "EXPR";
    case Task::V:
      return "V";
    case Task::A:
      return "A";
  }
  return "?";
}

TaskSet TaskSet::parse(std::string_view name) {
  if (name == "AU") return {Task::AU};
  if (name == "EXPR") return {Task::EXPR};
  if (name == "V") return {Task::V};
  if (name == "A") return {Task::A};
  if (name == "VA") return {Task::V, Task::A};
  throw ConfigError("unknown task '" + std::string(name) + "' (expected AU, EXPR, V, A or VA)");
}

TaskSet TaskSet::parse(const std::vector<std::string>& names) {
  TaskSet s;
  for (const auto& n : names) s.bits_ |= parse(n).bits_;
  return s;
}

std::size_t TaskSet::size() const {
  std::size_t n = 0;
  for (Task t : kAllTasks) n += contains(t) ? 1 : 0;
  return n;
}

std::string TaskSet::to_string() const {
  std::string out;
  for (Task t : kAllTasks) {
    if (!contains(t)) continue;
    if (!out.empty()) out += '|';
    out += task_name(t);
  }
  return out;
}

}  // namespace affmtl
