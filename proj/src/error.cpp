#include "capdpo/error.hpp"

namespace capdpo {

std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::kUnknownTemplate: return "UnknownTemplate";
    case Errc::kMissingBinding: return "MissingBinding";
    case Errc::kUnboundPlaceholderInOutput: return "UnboundPlaceholderInOutput";
    case Errc::kInvalidTemplate: return "InvalidTemplate";
    case Errc::kNoScoreFound: return "NoScoreFound";
    case Errc::kScoreOutOfRange: return "ScoreOutOfRange";
    case Errc::kNonIntegerScore: return "NonIntegerScore";
    case Errc::kTransport: return "Transport";
    case Errc::kBackendRejected: return "BackendRejected";
    case Errc::kUnsupportedAttachment: return "UnsupportedAttachment";
    case Errc::kNetworkForbidden: return "NetworkForbidden";
    case Errc::kMalformedQAOutput: return "MalformedQAOutput";
    case Errc::kEmptyGeneration: return "EmptyGeneration";
    case Errc::kEmptyGroup: return "EmptyGroup";
    case Errc::kRubricMismatch: return "RubricMismatch";
    case Errc::kShapeMismatch: return "ShapeMismatch";
    case Errc::kEmptyBatch: return "EmptyBatch";
    case Errc::kNonFinite: return "NonFinite";
    case Errc::kIndexOutOfRange: return "IndexOutOfRange";
    case Errc::kLengthMismatch: return "LengthMismatch";
    case Errc::kZeroVariance: return "ZeroVariance";
    case Errc::kTooFew: return "TooFew";
    case Errc::kNoNonTieGroups: return "NoNonTieGroups";
    case Errc::kEmptyInput: return "EmptyInput";
    case Errc::kSchemaViolation: return "SchemaViolation";
    case Errc::kMalformedLine: return "MalformedLine";
    case Errc::kIo: return "Io";
    case Errc::kDigestMismatch: return "DigestMismatch";
    case Errc::kConfig: return "Config";
    case Errc::kLocked: return "Locked";
    case Errc::kInvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

Error::Error(Errc code, std::string message)
    : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

void fail(Errc code, std::string message) { throw Error(code, std::move(message)); }

}  // namespace capdpo
