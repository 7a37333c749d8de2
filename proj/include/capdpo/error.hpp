#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace capdpo {

enum class Errc {
  // prompts
  kUnknownTemplate,
  kMissingBinding,
  kUnboundPlaceholderInOutput,
  kInvalidTemplate,
  // judge / backends
  kNoScoreFound,
  kScoreOutOfRange,
  kNonIntegerScore,
  kTransport,
  kBackendRejected,
  kUnsupportedAttachment,
  kNetworkForbidden,
  // qa_gen / sampler
  kMalformedQAOutput,
  kEmptyGeneration,
  // pref_builder
  kEmptyGroup,
  kRubricMismatch,
  // dpo
  kShapeMismatch,
  kEmptyBatch,
  kNonFinite,
  kIndexOutOfRange,
  // analytics
  kLengthMismatch,
  kZeroVariance,
  kTooFew,
  kNoNonTieGroups,
  kEmptyInput,
  // store
  kSchemaViolation,
  kMalformedLine,
  kIo,
  kDigestMismatch,
  // pipeline
  kConfig,
  kLocked,
  // generic precondition failure
  kInvalidArgument,
};

std::string_view errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, std::string message);

  Errc code() const noexcept { return code_; }

  // Name of the offending placeholder, field or stage, when one applies.
  const std::string& detail() const noexcept { return detail_; }
  // Offending integer (ScoreOutOfRange) when one applies.
  std::optional<long long> value() const noexcept { return value_; }
  // 1-based line number for file-level errors.
  std::optional<std::size_t> line() const noexcept { return line_; }

  Error& with_detail(std::string d) {
    detail_ = std::move(d);
    return *this;
  }
  Error& with_value(long long v) {
    value_ = v;
    return *this;
  }
  Error& with_line(std::size_t l) {
    line_ = l;
    return *this;
  }

 private:
  Errc code_;
  std::string detail_;
  std::optional<long long> value_;
  std::optional<std::size_t> line_;
};

[[noreturn]] void fail(Errc code, std::string message);

inline void require(bool condition, Errc code, std::string_view message) {
  if (!condition) fail(code, std::string(message));
}

}  // namespace capdpo
