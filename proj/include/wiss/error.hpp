#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace wiss {

enum class ErrorCode {
  kMissingFile,
  kSizeMismatch,
  kInvalidSpacing,
  kMalformed,
  kOutOfBounds,
  kSelfIntersecting,
  kDegenerateGeometry,
  kInsufficientPoints,
  kRankDeficient,
  kShapeMismatch,
  kNonFinite,
  kInvalidConfig,
  kEmptyTrainingSet,
  kRetriesExhausted,
  kUndefinedDistance,
  kDuplicateEntry,
  kIo,
};

std::string_view to_string(ErrorCode code);

// All library failures are thrown as Error; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace wiss
