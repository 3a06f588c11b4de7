#pragma once

#include <stdexcept>
#include <string>

namespace m3 {

enum class ErrorCode {
  invalid_argument = 1,
  shape_mismatch,
  non_finite,
  io,
  format,
  vocabulary_mismatch,
  diverged,
  internal,
};

// Every failure raised by the library carries a code so the C boundary can map
// it without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorCode::invalid_argument, message);
}

}  // namespace m3
