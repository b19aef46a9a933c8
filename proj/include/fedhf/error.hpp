#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fedhf {

// Error categories double as the machine-readable exit/status codes of the
// C API, so values must stay in sync with fedhf_status in fedhf.h.
enum class ErrorCategory : int {
  config = 1,
  io = 2,
  degenerate_input = 3,
  invalid_target = 4,
  empty_client = 5,
  infeasible_partition = 6,
  empty_client_rule = 7,
  evaluation = 8,
  protocol = 9,
  report = 10,
  overwrite_refused = 11,
  initialization = 12,
  internal = 99,
};

std::string_view category_name(ErrorCategory category) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& message)
      : std::runtime_error(message), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory category, const std::string& message) {
  throw Error(category, message);
}

inline void require(bool condition, ErrorCategory category, const std::string& message) {
  if (!condition) throw Error(category, message);
}

}  // namespace fedhf
