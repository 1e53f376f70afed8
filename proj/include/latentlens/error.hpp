#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace latentlens {

/// Machine-readable failure class. The CLI maps each to a distinct exit code.
enum class ErrorCategory {
  shape = 2,
  format = 3,
  io = 4,
  config = 5,
  numeric = 6,
  data = 7,
};

inline std::string_view category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::format: return "format";
    case ErrorCategory::io: return "io";
    case ErrorCategory::config: return "config";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::data: return "data";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

}  // namespace latentlens
