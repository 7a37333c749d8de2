#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "capdpo/judge.hpp"

namespace capdpo::qa_gen {

struct CaptionRecord {
  std::string video_id;
  // activitynet | webvid | vidal | other
  std::string source;
  std::string caption;
  std::vector<std::string> frame_refs;

  void validate() const;
  bool operator==(const CaptionRecord&) const = default;
};

struct QAPair {
  std::string video_id;
  int pair_index = 0;  // 1..3
  std::string question;
  std::string answer;

  bool operator==(const QAPair&) const = default;
};

inline constexpr int kPairsPerCaption = 3;

// Parses the Q1/A1 .. Q3/A3 layout. Labels are case-insensitive, may be
// indented, and must appear exactly once each in order. Text before Q1 is
// ignored. Throws MalformedQAOutput.
std::vector<std::pair<std::string, std::string>> parse_qa_output(std::string_view raw);

// Canonical layout accepted by parse_qa_output.
std::string format_qa_output(const std::vector<std::pair<std::string, std::string>>& pairs);

std::vector<QAPair> generate_qa(const CaptionRecord& record, judge::Backend& backend,
                                const judge::CallContext& ctx = {});

// Draws up to quota[source] records per source without replacement; sources
// absent from the quota map are dropped. Output keeps input order.
std::vector<CaptionRecord> apply_source_quota(const std::vector<CaptionRecord>& records,
                                              const std::map<std::string, std::size_t>& quota, std::uint64_t seed);

}  // namespace capdpo::qa_gen
