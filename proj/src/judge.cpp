#include "capdpo/judge.hpp"

#include <algorithm>
#include <cctype>
#include <climits>
#include <cmath>
#include <set>
#include <thread>

#include "capdpo/digest.hpp"
#include "capdpo/error.hpp"
#include "capdpo/rng.hpp"
#include "text_util.hpp"

namespace capdpo::judge {

using detail::ifind_last;
using detail::istarts_with;
using detail::trim;

void JudgeRubric::validate() const {
  require(scale_min < scale_max, Errc::kInvalidArgument, "rubric scale_min must be below scale_max");
  if (pass_threshold) {
    require(*pass_threshold >= scale_min && *pass_threshold <= scale_max, Errc::kInvalidArgument,
            "rubric pass_threshold outside the scale");
  }
}

void JudgeRequest::validate() const {
  require(!prompt.empty(), Errc::kInvalidArgument, "request prompt is empty");
  require(temperature >= 0.0, Errc::kInvalidArgument, "temperature must be >= 0");
  require(max_output_tokens > 0, Errc::kInvalidArgument, "max_output_tokens must be positive");
}

std::string FixedBackend::submit(const JudgeRequest& request) {
  std::lock_guard lock(mu_);
  last_ = request;
  ++calls_;
  return reply_;
}

JudgeRequest FixedBackend::last_request() const {
  std::lock_guard lock(mu_);
  return last_;
}

std::size_t FixedBackend::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

std::chrono::milliseconds RetryPolicy::delay_for(int retry, std::uint64_t draw) const {
  const double cap = static_cast<double>(base_delay.count()) * std::pow(factor, retry);
  const double u = static_cast<double>(draw >> 11) * 0x1.0p-53;
  return std::chrono::milliseconds(static_cast<long long>(std::floor(cap * u)));
}

RetryingBackend::RetryingBackend(BackendPtr inner, RetryPolicy policy, Sleeper sleeper)
    : inner_(std::move(inner)), policy_(policy), sleeper_(std::move(sleeper)) {
  require(inner_ != nullptr, Errc::kInvalidArgument, "retrying backend needs an inner backend");
  require(policy_.max_attempts >= 1, Errc::kConfig, "retry count must be at least 1");
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

std::string RetryingBackend::submit(const JudgeRequest& request) {
  for (int attempt = 0;; ++attempt) {
    try {
      return inner_->submit(request);
    } catch (const Error& e) {
      if (e.code() != Errc::kTransport || attempt + 1 >= policy_.max_attempts) throw;
      const auto draw = StableHasher(policy_.jitter_seed).add(request.prompt).add(attempt).finish();
      sleeper_(policy_.delay_for(attempt, draw));
    }
  }
}

std::vector<std::string> word_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

double token_jaccard(std::string_view a, std::string_view b) {
  const auto ta = word_tokens(a);
  const auto tb = word_tokens(b);
  const std::set<std::string> sa(ta.begin(), ta.end());
  const std::set<std::string> sb(tb.begin(), tb.end());
  std::size_t inter = 0;
  for (const auto& t : sa) inter += sb.count(t);
  const std::size_t uni = sa.size() + sb.size() - inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

int mock_score(double jaccard) { return 1 + static_cast<int>(std::lround(4.0 * jaccard)); }

constexpr std::string_view kAnswerMarker = "3. **Ground Truth Answer**: ";
constexpr std::string_view kPredictionMarker = "\n4. **Model Predicted Answer**: ";
constexpr std::string_view kPredictionEnd = "\n\nYour task is to evaluate the model's predicted answer";
constexpr std::string_view kCaptionMarker = "Input Video Caption:\n";
constexpr std::string_view kCaptionEnd = "\n\nOutput format:\nQ1:";

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    cur.push_back(c == '\n' ? ' ' : c);
    const bool terminal = c == '.' || c == '!' || c == '?';
    const bool boundary = i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1]));
    if (terminal && boundary) {
      auto s = trim(cur);
      if (!s.empty()) out.emplace_back(s);
      cur.clear();
    }
  }
  auto rest = trim(cur);
  if (!rest.empty()) out.emplace_back(rest);
  return out;
}

class MockJudge final : public Backend {
 public:
  explicit MockJudge(std::uint64_t seed) : seed_(seed) {}

  std::string submit(const JudgeRequest& request) override {
    request.validate();
    const std::string_view p = request.prompt;
    if (auto a = p.find(kAnswerMarker); a != std::string_view::npos) {
      const auto pred = p.find(kPredictionMarker, a);
      const auto end = p.rfind(kPredictionEnd);
      if (pred != std::string_view::npos && end != std::string_view::npos && end >= pred) {
        const auto answer = p.substr(a + kAnswerMarker.size(), pred - a - kAnswerMarker.size());
        const auto prediction = p.substr(pred + kPredictionMarker.size(), end - pred - kPredictionMarker.size());
        return "Explanation: mock.\nScore: " + std::to_string(mock_score(token_jaccard(prediction, answer)));
      }
    }
    if (auto c = p.find(kCaptionMarker); c != std::string_view::npos) {
      const auto end = p.rfind(kCaptionEnd);
      if (end != std::string_view::npos && end >= c) {
        return write_pairs(p.substr(c + kCaptionMarker.size(), end - c - kCaptionMarker.size()));
      }
    }
    fail(Errc::kBackendRejected, "mock judge does not recognise this prompt");
  }

  std::string id() const override { return "mock-judge"; }

 private:
  std::string write_pairs(std::string_view caption) const {
    static constexpr std::string_view kQuestions[] = {
        "What does the video show in part {k}?",
        "Describe what happens in segment {k} of the video.",
        "What can be seen in scene {k} of the clip?",
    };
    const auto sentences = split_sentences(caption);
    std::string out;
    for (std::size_t k = 0; k < sentences.size() && k < 3; ++k) {
      const auto pick = StableHasher(seed_).add(caption).add(static_cast<std::uint64_t>(k)).finish() % 3;
      std::string q(kQuestions[pick]);
      q.replace(q.find("{k}"), 3, std::to_string(k + 1));
      if (!out.empty()) out += "\n";
      out += "Q" + std::to_string(k + 1) + ": " + q + "\n";
      out += "A" + std::to_string(k + 1) + ": " + sentences[k];
    }
    return out;
  }

  std::uint64_t seed_;
};

class MockFrameJudge final : public Backend {
 public:
  MockFrameJudge(std::uint64_t seed, std::map<std::string, std::string> answers, double bias, double spread)
      : seed_(seed), answers_(std::move(answers)), bias_(bias), spread_(spread) {}

  std::string submit(const JudgeRequest& request) override {
    request.validate();
    auto it = answers_.find(request.key);
    if (it == answers_.end()) fail(Errc::kBackendRejected, "mock frame judge has no answer for key '" + request.key + "'");
    constexpr std::string_view kMarker = "Model Predicted Answer: ";
    constexpr std::string_view kEnd = "\n\n**Output Format**:";
    const std::string_view p = request.prompt;
    const auto a = p.find(kMarker);
    const auto e = p.rfind(kEnd);
    if (a == std::string_view::npos || e == std::string_view::npos || e < a) {
      fail(Errc::kBackendRejected, "mock frame judge does not recognise this prompt");
    }
    const auto prediction = p.substr(a + kMarker.size(), e - a - kMarker.size());
    const double j = token_jaccard(prediction, it->second);
    const auto h = StableHasher(seed_).add(request.prompt).finish();
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    const long s = 1 + std::lround(4.0 * j + bias_ + spread_ * (2.0 * u - 1.0));
    return "Explanation: mock frames.\nScore: " + std::to_string(std::clamp(s, 1L, 5L));
  }

  std::string id() const override { return "mock-frame-judge"; }
  bool accepts_attachments() const override { return true; }

 private:
  std::uint64_t seed_;
  std::map<std::string, std::string> answers_;
  double bias_;
  double spread_;
};

}  // namespace

BackendPtr mock_judge(std::uint64_t seed) { return std::make_shared<MockJudge>(seed); }

BackendPtr mock_frame_judge(std::uint64_t seed, std::map<std::string, std::string> answers_by_key, double bias,
                            double spread) {
  return std::make_shared<MockFrameJudge>(seed, std::move(answers_by_key), bias, spread);
}

Judgment parse_judgment(std::string_view raw, const JudgeRubric& rubric) {
  rubric.validate();
  const auto marker = ifind_last(raw, "score:");
  if (marker == std::string_view::npos) fail(Errc::kNoScoreFound, "no 'Score:' marker in judge output");

  std::size_t i = marker + 6;
  while (i < raw.size() && (raw[i] == ' ' || raw[i] == '\t' || raw[i] == '*')) ++i;
  bool negative = false;
  if (i < raw.size() && (raw[i] == '-' || raw[i] == '+')) {
    negative = raw[i] == '-';
    ++i;
  }
  const std::size_t digits_begin = i;
  while (i < raw.size() && std::isdigit(static_cast<unsigned char>(raw[i]))) ++i;
  if (i == digits_begin) {
    throw Error(Errc::kNonIntegerScore, "score marker not followed by an integer")
        .with_detail(std::string(raw.substr(digits_begin, 16)));
  }
  // "4.5" is not an integer score; a trailing sentence period is fine.
  if (i + 1 < raw.size() && raw[i] == '.' && std::isdigit(static_cast<unsigned char>(raw[i + 1]))) {
    fail(Errc::kNonIntegerScore, "fractional score");
  }
  long long value = LLONG_MAX;
  if (i - digits_begin <= 18) value = std::stoll(std::string(raw.substr(digits_begin, i - digits_begin)));
  if (negative) value = -value;

  std::size_t j = i;
  while (j < raw.size() && (raw[j] == ' ' || raw[j] == '\t')) ++j;
  if (j < raw.size() && raw[j] == '/') {
    ++j;
    while (j < raw.size() && (raw[j] == ' ' || raw[j] == '\t')) ++j;
    const std::size_t den_begin = j;
    while (j < raw.size() && std::isdigit(static_cast<unsigned char>(raw[j]))) ++j;
    const auto den = raw.substr(den_begin, j - den_begin);
    if (den != std::to_string(rubric.scale_max)) {
      fail(Errc::kNonIntegerScore, "score suffix '/" + std::string(den) + "' does not match the rubric maximum");
    }
  }

  if (value < rubric.scale_min || value > rubric.scale_max) {
    throw Error(Errc::kScoreOutOfRange, "score " + std::to_string(value) + " outside " +
                                            std::to_string(rubric.scale_min) + ".." + std::to_string(rubric.scale_max))
        .with_value(value);
  }

  std::string_view explanation = trim(raw.substr(0, marker));
  for (std::string_view label : {"explanation:", "judgment:"}) {
    if (istarts_with(explanation, label)) {
      explanation = trim(explanation.substr(label.size()));
      break;
    }
  }

  Judgment j_out;
  j_out.explanation = std::string(explanation);
  j_out.score = static_cast<int>(value);
  j_out.rubric = rubric;
  j_out.raw = std::string(raw);
  return j_out;
}

void AuditLog::add(std::size_t order, AuditEntry entry) {
  std::lock_guard lock(mu_);
  entries_.insert_or_assign(order, std::move(entry));
}

std::vector<AuditEntry> AuditLog::entries() const {
  std::lock_guard lock(mu_);
  std::vector<AuditEntry> out;
  out.reserve(entries_.size());
  for (const auto& [order, e] : entries_) out.push_back(e);
  return out;
}

std::size_t AuditLog::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

namespace {

Judgment submit_and_parse(const std::string& template_id, std::string prompt, std::vector<std::string> attachments,
                          Backend& backend, const CallContext& ctx) {
  JudgeRequest req;
  req.prompt = std::move(prompt);
  req.temperature = 0.0;
  req.max_output_tokens = ctx.max_output_tokens;
  req.backend_id = backend.id();
  req.template_id = template_id;
  req.attachments = std::move(attachments);
  req.key = ctx.key;
  req.validate();

  const std::string raw = backend.submit(req);
  AuditEntry entry{ctx.request_id, template_id, sha256_hex(req.prompt), raw, std::nullopt};
  try {
    Judgment j = parse_judgment(raw, JudgeRubric::qa());
    j.judge_id = backend.id();
    entry.score = j.score;
    if (ctx.audit) ctx.audit->add(ctx.order, std::move(entry));
    return j;
  } catch (...) {
    if (ctx.audit) ctx.audit->add(ctx.order, std::move(entry));
    throw;
  }
}

const prompts::Registry& registry_of(const CallContext& ctx) {
  return ctx.registry ? *ctx.registry : prompts::Registry::builtin();
}

}  // namespace

Judgment score_qa(std::string_view caption, std::string_view question, std::string_view answer,
                  std::string_view prediction, Backend& backend, const CallContext& ctx) {
  require(!caption.empty() && !question.empty() && !answer.empty() && !prediction.empty(), Errc::kInvalidArgument,
          "score_qa needs non-empty caption, question, answer and prediction");
  const std::string id(prompts::kQaJudgeCaption);
  auto prompt = registry_of(ctx).render(id, {{"caption", std::string(caption)},
                                             {"question", std::string(question)},
                                             {"answer", std::string(answer)},
                                             {"prediction", std::string(prediction)}});
  return submit_and_parse(id, std::move(prompt), {}, backend, ctx);
}

Judgment score_qa_frames(const std::vector<std::string>& frames, std::string_view question,
                         std::string_view prediction, Backend& backend, const CallContext& ctx) {
  require(!frames.empty(), Errc::kInvalidArgument, "score_qa_frames needs at least one frame reference");
  require(!question.empty() && !prediction.empty(), Errc::kInvalidArgument,
          "score_qa_frames needs non-empty question and prediction");
  if (!backend.accepts_attachments()) {
    fail(Errc::kUnsupportedAttachment, "backend '" + backend.id() + "' is text-only");
  }
  const std::string id(prompts::kQaJudgeFrames);
  auto prompt =
      registry_of(ctx).render(id, {{"question", std::string(question)}, {"prediction", std::string(prediction)}});
  return submit_and_parse(id, std::move(prompt), frames, backend, ctx);
}

}  // namespace capdpo::judge
