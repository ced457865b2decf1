#pragma once

#include <stdexcept>
#include <string>

namespace trace {

/// Error carrying a stable machine-readable code ("MALFORMED_PAYLOAD", ...)
/// alongside the human message. Codes are what tests and reports match on.
class CodedError : public std::runtime_error {
 public:
  CodedError(std::string code, const std::string& detail)
      : std::runtime_error(code + ": " + detail), code_(std::move(code)), detail_(detail) {}

  const std::string& code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string code_;
  std::string detail_;
};

}  // namespace trace
