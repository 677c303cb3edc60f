#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace segkit {

enum class Errc {
  kShapeMismatch,
  kNotScalar,
  kKernelTooLarge,
  kBinTooMany,
  kNotNormalized,
  kLabelOutOfRange,
  kAllUndefined,
  kEmptyMatrix,
  kBadThreshold,
  kBadSpec,
  kInputNotDivisible,
  kBadCoefficients,
  kBadConfig,
  kBadHex,
  kUnknownColor,
  kMissingFile,
  kBadManifest,
  kBadFormat,
  kClassCountMismatch,
  kNumericFailure,
};

std::string_view to_string(Errc code);

// Every failure raised by the library carries one of the codes above so that
// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message);

  Errc code() const noexcept { return code_; }
  // The message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

[[noreturn]] void fail(Errc code, const std::string& message);

// Non-fatal diagnostics (unknown mask colours, split-count mismatches). The
// default sink writes "warning: ..." lines to stderr.
using WarningSink = void (*)(const std::string& message);
void warn(const std::string& message);
// Returns the previous sink; nullptr restores the default.
WarningSink set_warning_sink(WarningSink sink);

}  // namespace segkit
