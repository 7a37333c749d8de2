#include "capdpo/pref_builder.hpp"

#include "capdpo/error.hpp"
#include "capdpo/rng.hpp"

namespace capdpo::pref_builder {

BuildResult build_pairs(const std::vector<CandidateGroup>& groups, int threshold, std::uint64_t seed) {
  const auto rubric = judge::JudgeRubric::qa();
  require(threshold >= rubric.scale_min && threshold <= rubric.scale_max, Errc::kInvalidArgument,
          "threshold outside the 1..5 rubric");
  BuildResult result;
  for (const auto& group : groups) {
    const std::string where = group.video_id + "#" + std::to_string(group.pair_index);
    if (group.candidates.empty()) throw Error(Errc::kEmptyGroup, "group " + where + " has no candidates").with_detail(where);

    std::vector<std::size_t> positives;
    std::vector<std::size_t> negatives;
    for (std::size_t i = 0; i < group.candidates.size(); ++i) {
      const auto& j = group.candidates[i].judgment;
      if (j.rubric.scale_min != rubric.scale_min || j.rubric.scale_max != rubric.scale_max ||
          j.score < rubric.scale_min || j.score > rubric.scale_max) {
        throw Error(Errc::kRubricMismatch, "group " + where + " has a judgment off the 1..5 rubric").with_detail(where);
      }
      ++result.stats.score_histogram[static_cast<std::size_t>(j.score - 1)];
      (j.score >= threshold ? positives : negatives).push_back(i);
    }
    if (negatives.empty()) {
      ++result.stats.excluded_all_high;
      continue;
    }
    if (positives.empty()) {
      ++result.stats.excluded_all_low;
      continue;
    }

    Rng rng(StableHasher(seed).add(group.video_id).add(group.pair_index).finish());
    const auto& w = group.candidates[positives[rng.uniform_index(positives.size())]];
    const auto& l = group.candidates[negatives[rng.uniform_index(negatives.size())]];
    PreferencePair pair{group.video_id, group.question, w.candidate.text, l.candidate.text, w.judgment.score,
                        l.judgment.score};
    if (pair.chosen == pair.rejected) ++result.stats.degenerate_text_pairs;
    result.pairs.push_back(std::move(pair));
    ++result.stats.kept;
  }
  return result;
}

}  // namespace capdpo::pref_builder
