#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sdt {

enum class ErrorCode {
  kContract,
  kDimension,
  kIndex,
  kNumeric,
  kIncompatibleCheckpoint,
  kPlan,
  kConfig,
  kIo,
  kData,
};

// Stable machine-readable name, printed by the CLI as `error[<name>]`.
std::string_view error_code_name(ErrorCode code);

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

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace sdt
