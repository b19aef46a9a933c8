#include "fedhf/error.hpp"

namespace fedhf {

std::string_view category_name(ErrorCategory category) noexcept {
  switch (category) {
    case ErrorCategory::config: return "config";
    case ErrorCategory::io: return "io";
    case ErrorCategory::degenerate_input: return "degenerate_input";
    case ErrorCategory::invalid_target: return "invalid_target";
    case ErrorCategory::empty_client: return "empty_client";
    case ErrorCategory::infeasible_partition: return "infeasible_partition";
    case ErrorCategory::empty_client_rule: return "empty_client_rule";
    case ErrorCategory::evaluation: return "evaluation";
    case ErrorCategory::protocol: return "protocol";
    case ErrorCategory::report: return "report";
    case ErrorCategory::overwrite_refused: return "overwrite_refused";
    case ErrorCategory::initialization: return "initialization";
    case ErrorCategory::internal: return "internal";
  }
  return "internal";
}

}  // namespace fedhf
