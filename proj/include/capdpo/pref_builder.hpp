#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "capdpo/judge.hpp"
#include "capdpo/sampler.hpp"

namespace capdpo::pref_builder {

struct ScoredCandidate {
  sampler::CandidateResponse candidate;
  judge::Judgment judgment;
};

// All scored candidates for one (video, question).
struct CandidateGroup {
  std::string video_id;
  int pair_index = 0;
  std::string question;
  std::vector<ScoredCandidate> candidates;
};

struct PreferencePair {
  std::string video_id;
  std::string question;
  std::string chosen;
  std::string rejected;
  int chosen_score = 0;
  int rejected_score = 0;

  bool operator==(const PreferencePair&) const = default;
};

struct BuildStats {
  std::size_t kept = 0;
  std::size_t excluded_all_high = 0;
  std::size_t excluded_all_low = 0;
  // Counts of scores 1..5 over every candidate seen (index = score - 1).
  std::array<std::size_t, 5> score_histogram{};
  // Kept pairs whose chosen and rejected texts are identical.
  std::size_t degenerate_text_pairs = 0;

  bool operator==(const BuildStats&) const = default;
};

struct BuildResult {
  std::vector<PreferencePair> pairs;
  BuildStats stats;
};

inline constexpr int kDefaultThreshold = 3;

// Per group: positives score >= threshold, negatives below. When both sets
// are non-empty one positive then one negative are drawn uniformly from a
// generator seeded by (seed, video_id, pair_index); otherwise the group is
// excluded. Throws EmptyGroup or RubricMismatch.
BuildResult build_pairs(const std::vector<CandidateGroup>& groups, int threshold, std::uint64_t seed);

}  // namespace capdpo::pref_builder
