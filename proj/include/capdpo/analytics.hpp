#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capdpo/judge.hpp"

namespace capdpo::analytics {

// Sample Pearson correlation. Throws LengthMismatch, TooFew, ZeroVariance.
double pearson(std::span<const double> xs, std::span<const double> ys);

struct ScorePair {
  int a = 0;
  int b = 0;
};

struct DiffDistribution {
  double mean_diff = 0.0;
  // Population standard deviation of a - b.
  double sigma_diff = 0.0;
  // Fraction with |d - mean(d)| <= sigma_diff.
  double frac_within_1sigma = 0.0;
  // Counts of a - b for -4..4 (index = d + 4).
  std::array<std::size_t, 9> histogram{};
};

DiffDistribution diff_distribution(std::span<const ScorePair> pairs);

enum class TieRule {
  kEither,     // a group is a tie if either judge scores both answers equally
  kReference,  // only the reference judge (b) counts ties
};

struct TwoAnswerGroup {
  std::pair<int, int> scores_a;
  std::pair<int, int> scores_b;
};

struct PreferenceAgreement {
  double rate = 0.0;
  std::size_t n_ties_excluded = 0;
  std::size_t n_groups_compared = 0;
};

// Throws NoNonTieGroups (detail carries the tie count) when every group ties.
PreferenceAgreement preference_agreement(std::span<const TwoAnswerGroup> groups, TieRule rule = TieRule::kEither);

struct BenchmarkScore {
  double accuracy = 0.0;
  double avg_score = 0.0;
  std::size_t n = 0;
};

BenchmarkScore benchmark_score(std::span<const int> scores, int threshold = 3);
BenchmarkScore benchmark_score(std::span<const judge::Judgment> judgments, int threshold = 3);

struct PairedJudgment {
  std::string example_id;
  // Examples sharing a group_id are the two answers to one question.
  std::string group_id;
  int answer_index = 0;
  int judge_a_score = 0;
  int judge_b_score = 0;

  bool operator==(const PairedJudgment&) const = default;
};

struct AgreementReport {
  std::size_t n = 0;
  double mean_a = 0.0;
  double mean_b = 0.0;
  // Unset when either judge's scores have zero variance.
  std::optional<double> pcc;
  double sigma_diff = 0.0;
  double frac_within_1sigma = 0.0;
  std::array<std::size_t, 9> diff_histogram{};
  // Unset when every group ties.
  std::optional<double> pref_agreement;
  std::size_t n_ties_excluded = 0;
  std::size_t n_groups = 0;
  TieRule tie_rule = TieRule::kEither;
};

// Throws TooFew for fewer than two examples and InvalidArgument when a group
// does not hold exactly answers 0 and 1 or example ids repeat.
AgreementReport agreement_report(std::span<const PairedJudgment> records, TieRule rule = TieRule::kEither);

std::string tie_rule_name(TieRule rule);
TieRule parse_tie_rule(const std::string& name);

}  // namespace capdpo::analytics
