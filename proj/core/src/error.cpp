#include "segkit/error.hpp"

#include <atomic>
#include <iostream>

namespace segkit {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::kShapeMismatch: return "ShapeMismatch";
    case Errc::kNotScalar: return "NotScalar";
    case Errc::kKernelTooLarge: return "KernelTooLarge";
    case Errc::kBinTooMany: return "BinTooMany";
    case Errc::kNotNormalized: return "NotNormalized";
    case Errc::kLabelOutOfRange: return "LabelOutOfRange";
    case Errc::kAllUndefined: return "AllUndefined";
    case Errc::kEmptyMatrix: return "EmptyMatrix";
    case Errc::kBadThreshold: return "BadThreshold";
    case Errc::kBadSpec: return "BadSpec";
    case Errc::kInputNotDivisible: return "InputNotDivisible";
    case Errc::kBadCoefficients: return "BadCoefficients";
    case Errc::kBadConfig: return "BadConfig";
    case Errc::kBadHex: return "BadHex";
    case Errc::kUnknownColor: return "UnknownColor";
    case Errc::kMissingFile: return "MissingFile";
    case Errc::kBadManifest: return "BadManifest";
    case Errc::kBadFormat: return "BadFormat";
    case Errc::kClassCountMismatch: return "ClassCountMismatch";
    case Errc::kNumericFailure: return "NumericFailure";
  }
  return "Unknown";
}

Error::Error(Errc code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message),
      code_(code),
      detail_(message) {}

void fail(Errc code, const std::string& message) { throw Error(code, message); }

namespace {

void default_sink(const std::string& message) { std::cerr << "warning: " << message << '\n'; }

std::atomic<WarningSink> g_sink{&default_sink};

}  // namespace

void warn(const std::string& message) { g_sink.load()(message); }

WarningSink set_warning_sink(WarningSink sink) {
  return g_sink.exchange(sink ? sink : &default_sink);
}

}  // namespace segkit
