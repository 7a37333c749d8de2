#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "capdpo/prompts.hpp"

namespace capdpo::judge {

struct JudgeRubric {
  int scale_min = 1;
  int scale_max = 5;
  std::optional<int> pass_threshold;

  // QA rubric: 1..5, pass at 3.
  static JudgeRubric qa() { return {1, 5, 3}; }
  // Caption self-evaluation rubric: 0..6, no pass threshold.
  static JudgeRubric caption() { return {0, 6, std::nullopt}; }

  void validate() const;
  bool operator==(const JudgeRubric&) const = default;
};

// One call to a text (or text + attachments) model. Judge and generation
// backends share this contract.
struct JudgeRequest {
  std::string prompt;
  double temperature = 0.0;
  int max_output_tokens = 512;
  std::string backend_id;
  std::string template_id;
  // Opaque frame references (URIs); forwarded, never decoded.
  std::vector<std::string> attachments;
  std::optional<std::uint64_t> seed;
  // Caller correlation key. Real backends ignore it; mocks may use it as a
  // fixture side-channel.
  std::string key;

  void validate() const;
};

struct Judgment {
  std::string explanation;
  int score = 0;
  JudgeRubric rubric;
  std::string raw;
  std::string judge_id;

  bool operator==(const Judgment&) const = default;
};

// `submit` must be safe to call from several threads at once.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string submit(const JudgeRequest& request) = 0;
  virtual std::string id() const = 0;
  virtual bool accepts_attachments() const { return false; }
};

using BackendPtr = std::shared_ptr<Backend>;

// Returns the same text for every request.
class FixedBackend final : public Backend {
 public:
  FixedBackend(std::string reply, std::string id = "fixed", bool attachments = false)
      : reply_(std::move(reply)), id_(std::move(id)), attachments_(attachments) {}

  std::string submit(const JudgeRequest& request) override;
  std::string id() const override { return id_; }
  bool accepts_attachments() const override { return attachments_; }

  // Most recent request, for inspection in tests.
  JudgeRequest last_request() const;
  std::size_t calls() const;

 private:
  std::string reply_;
  std::string id_;
  bool attachments_;
  mutable std::mutex mu_;
  JudgeRequest last_;
  std::size_t calls_ = 0;
};

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds base_delay{1000};
  double factor = 2.0;
  std::uint64_t jitter_seed = 0;

  // Full-jitter delay before retry number `retry` (0-based): uniform in
  // [0, base_delay * factor^retry].
  std::chrono::milliseconds delay_for(int retry, std::uint64_t draw) const;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

// Retries Errc::kTransport failures; every other error propagates at once.
class RetryingBackend final : public Backend {
 public:
  RetryingBackend(BackendPtr inner, RetryPolicy policy, Sleeper sleeper = {});

  std::string submit(const JudgeRequest& request) override;
  std::string id() const override { return inner_->id(); }
  bool accepts_attachments() const override { return inner_->accepts_attachments(); }

 private:
  BackendPtr inner_;
  RetryPolicy policy_;
  Sleeper sleeper_;
};

// Deterministic offline stand-in for the text judge. For a rendered
// qa_judge_caption prompt it replies "Explanation: mock.\nScore: s" with
// s = 1 + round(4 * J), J the token Jaccard similarity between prediction
// and ground-truth answer. For an instruction_gen prompt it writes three
// QA pairs from the first three sentences of the caption (fewer sentences
// yield fewer pairs).
BackendPtr mock_judge(std::uint64_t seed);

// Offline stand-in for a frame-reading judge. The ground-truth answer is
// looked up by request key; the score is the caption-judge score shifted by
// `bias` plus a prompt-seeded offset uniform in [-spread, spread], clamped to 1..5.
BackendPtr mock_frame_judge(std::uint64_t seed, std::map<std::string, std::string> answers_by_key,
                            double bias = 0.5, double spread = 1.0);

// Lowercased whitespace tokens.
std::vector<std::string> word_tokens(std::string_view text);
double token_jaccard(std::string_view a, std::string_view b);

Judgment parse_judgment(std::string_view raw, const JudgeRubric& rubric);

struct AuditEntry {
  std::string request_id;
  std::string template_id;
  std::string prompt_hash;
  std::string raw;
  std::optional<int> score;
};

// Thread-safe collector; entries come back sorted by caller-supplied order
// so concurrent runs produce identical logs.
class AuditLog {
 public:
  void add(std::size_t order, AuditEntry entry);
  std::vector<AuditEntry> entries() const;
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::map<std::size_t, AuditEntry> entries_;
};

struct CallContext {
  const prompts::Registry* registry = nullptr;
  AuditLog* audit = nullptr;
  std::size_t order = 0;
  std::string request_id;
  std::string key;
  int max_output_tokens = 512;
};

Judgment score_qa(std::string_view caption, std::string_view question, std::string_view answer,
                  std::string_view prediction, Backend& backend, const CallContext& ctx = {});

Judgment score_qa_frames(const std::vector<std::string>& frames, std::string_view question,
                         std::string_view prediction, Backend& backend, const CallContext& ctx = {});

}  // namespace capdpo::judge
