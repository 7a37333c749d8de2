#include "capdpo/qa_gen.hpp"

#include <algorithm>
#include <optional>

#include "capdpo/digest.hpp"
#include "capdpo/error.hpp"
#include "capdpo/rng.hpp"
#include "text_util.hpp"

namespace capdpo::qa_gen {

using detail::trim;

void CaptionRecord::validate() const {
  require(!video_id.empty(), Errc::kInvalidArgument, "caption record has an empty video_id");
  require(!caption.empty(), Errc::kInvalidArgument, "caption record " + video_id + " has an empty caption");
}

namespace {

struct Label {
  char kind;  // 'Q' or 'A'
  int number;
  std::size_t content_begin;  // offset within the line
};

// Recognises "<ws>Q<digits>:" / "<ws>A<digits>:" at the start of a line.
std::optional<Label> match_label(std::string_view line) {
  std::size_t i = 0;
  while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
  if (i >= line.size()) return std::nullopt;
  const char kind = static_cast<char>(std::toupper(static_cast<unsigned char>(line[i])));
  if (kind != 'Q' && kind != 'A') return std::nullopt;
  std::size_t j = i + 1;
  int number = 0;
  while (j < line.size() && std::isdigit(static_cast<unsigned char>(line[j])) && j - i <= 4) {
    number = number * 10 + (line[j] - '0');
    ++j;
  }
  if (j == i + 1 || j >= line.size() || line[j] != ':') return std::nullopt;
  return Label{kind, number, j + 1};
}

[[noreturn]] void malformed(const std::string& what) {
  throw Error(Errc::kMalformedQAOutput, what).with_detail(what);
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_qa_output(std::string_view raw) {
  std::vector<std::string> fields;  // Q1, A1, Q2, ...
  std::string current;
  bool in_field = false;

  auto close_field = [&] {
    if (in_field) fields.emplace_back(trim(current));
    current.clear();
  };

  std::size_t pos = 0;
  while (pos <= raw.size()) {
    auto nl = raw.find('\n', pos);
    if (nl == std::string_view::npos) nl = raw.size();
    std::string_view line = raw.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    if (auto label = match_label(line)) {
      const std::size_t idx = fields.size() + (in_field ? 1 : 0);
      const char want_kind = idx % 2 == 0 ? 'Q' : 'A';
      const int want_number = static_cast<int>(idx / 2) + 1;
      if (idx >= 2 * kPairsPerCaption) {
        malformed("unexpected label " + std::string(1, label->kind) + std::to_string(label->number) +
                  " after A3");
      }
      if (label->kind != want_kind || label->number != want_number) {
        malformed("expected label " + std::string(1, want_kind) + std::to_string(want_number) + ", found " +
                  std::string(1, label->kind) + std::to_string(label->number));
      }
      close_field();
      in_field = true;
      current = std::string(line.substr(label->content_begin));
    } else if (in_field) {
      current += '\n';
      current += line;
    }
    if (nl == raw.size()) break;
    pos = nl + 1;
  }
  close_field();

  if (fields.size() != 2 * kPairsPerCaption) {
    malformed("expected 6 labels (Q1..A3), found " + std::to_string(fields.size()));
  }
  std::vector<std::pair<std::string, std::string>> out;
  for (int k = 0; k < kPairsPerCaption; ++k) {
    auto& q = fields[2 * k];
    auto& a = fields[2 * k + 1];
    if (q.empty()) malformed("Q" + std::to_string(k + 1) + " is empty");
    if (a.empty()) malformed("A" + std::to_string(k + 1) + " is empty");
    out.emplace_back(std::move(q), std::move(a));
  }
  return out;
}

std::string format_qa_output(const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::string out;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    if (k) out += '\n';
    out += "Q" + std::to_string(k + 1) + ": " + pairs[k].first + "\n";
    out += "A" + std::to_string(k + 1) + ": " + pairs[k].second;
  }
  return out;
}

std::vector<QAPair> generate_qa(const CaptionRecord& record, judge::Backend& backend, const judge::CallContext& ctx) {
  record.validate();
  const auto& registry = ctx.registry ? *ctx.registry : prompts::Registry::builtin();
  judge::JudgeRequest req;
  req.prompt = registry.render(prompts::kInstructionGen, {{"caption", record.caption}});
  req.temperature = 0.0;
  req.max_output_tokens = ctx.max_output_tokens;
  req.backend_id = backend.id();
  req.template_id = std::string(prompts::kInstructionGen);
  req.key = record.video_id;

  const std::string raw = backend.submit(req);
  if (ctx.audit) {
    ctx.audit->add(ctx.order, {ctx.request_id, req.template_id, sha256_hex(req.prompt), raw, std::nullopt});
  }
  const auto parsed = parse_qa_output(raw);
  std::vector<QAPair> out;
  for (std::size_t k = 0; k < parsed.size(); ++k) {
    out.push_back({record.video_id, static_cast<int>(k) + 1, parsed[k].first, parsed[k].second});
  }
  return out;
}

std::vector<CaptionRecord> apply_source_quota(const std::vector<CaptionRecord>& records,
                                              const std::map<std::string, std::size_t>& quota, std::uint64_t seed) {
  std::map<std::string, std::vector<std::size_t>> by_source;
  for (std::size_t i = 0; i < records.size(); ++i) by_source[records[i].source].push_back(i);

  const Rng base(seed);
  std::vector<std::size_t> keep;
  for (auto& [source, idx] : by_source) {
    auto q = quota.find(source);
    if (q == quota.end()) continue;
    Rng rng = base.split("quota:" + source);
    rng.shuffle(idx);
    idx.resize(std::min(idx.size(), q->second));
    keep.insert(keep.end(), idx.begin(), idx.end());
  }
  std::sort(keep.begin(), keep.end());
  std::vector<CaptionRecord> out;
  out.reserve(keep.size());
  for (auto i : keep) out.push_back(records[i]);
  return out;
}

}  // namespace capdpo::qa_gen
