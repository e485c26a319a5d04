#pragma once

#include <stdexcept>
#include <string>

namespace desire {

/// Error categories surfaced by the library. The CLI maps them to exit codes.
enum class ErrorKind {
  kDimension,
  kNumeric,
  kIndex,
  kRange,
  kDecomposition,
  kConditioning,
  kInsufficientSamples,
  kConfiguration,
  kConsistency,
  kLeakage,
  kProtocol,
  kIo,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define DESIRE_DEFINE_ERROR(Name, Kind)                              \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(Kind, what) {}    \
  };

DESIRE_DEFINE_ERROR(DimensionError, ErrorKind::kDimension)
DESIRE_DEFINE_ERROR(NumericError, ErrorKind::kNumeric)
DESIRE_DEFINE_ERROR(IndexError, ErrorKind::kIndex)
DESIRE_DEFINE_ERROR(RangeError, ErrorKind::kRange)
DESIRE_DEFINE_ERROR(DecompositionError, ErrorKind::kDecomposition)
DESIRE_DEFINE_ERROR(ConditioningError, ErrorKind::kConditioning)
DESIRE_DEFINE_ERROR(InsufficientSamplesError, ErrorKind::kInsufficientSamples)
DESIRE_DEFINE_ERROR(ConfigError, ErrorKind::kConfiguration)
DESIRE_DEFINE_ERROR(ConsistencyError, ErrorKind::kConsistency)
DESIRE_DEFINE_ERROR(LeakageError, ErrorKind::kLeakage)
DESIRE_DEFINE_ERROR(ProtocolError, ErrorKind::kProtocol)
DESIRE_DEFINE_ERROR(IoError, ErrorKind::kIo)

#undef DESIRE_DEFINE_ERROR

}  // namespace desire
