#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vibprune {

enum class ErrorKind {
  kShape,
  kNumeric,
  kContract,
  kDeterminism,
  kData,
  kDegenerateModel,
  kNumericDivergence,
  kFormat,
  kConfig,
  kIo,
};

inline std::string_view error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kContract: return "contract error";
    case ErrorKind::kDeterminism: return "determinism error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kDegenerateModel: return "degenerate model error";
    case ErrorKind::kNumericDivergence: return "numeric divergence";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kIo: return "io error";
  }
  return "error";
}

/// Every failure raised by the library. what() reads "<kind>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + detail),
        kind_(kind),
        detail_(detail) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

}  // namespace vibprune
