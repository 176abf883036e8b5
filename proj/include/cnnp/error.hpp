#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cnnp {

enum class ErrorCode {
  shape_mismatch,
  invalid_argument,
  invalid_architecture,
  invalid_plan,
  stale_cache,
  label_out_of_range,
  empty_dataset,
  bad_magic,
  version_mismatch,
  truncated,
  io,
  not_found,
  non_informative_pair,
  busy,
  cancelled,
};

std::string_view to_string(ErrorCode code);

/// Library-wide exception. `detail` carries machine-friendly context
/// (offending dimension, layer index, node id) for the server's error body.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, std::string detail = {})
      : std::runtime_error(message), code_(code), detail_(std::move(detail)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace cnnp
