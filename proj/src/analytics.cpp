#include "capdpo/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "capdpo/error.hpp"

namespace capdpo::analytics {

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) fail(Errc::kLengthMismatch, "pearson inputs differ in length");
  if (xs.size() < 2) fail(Errc::kTooFew, "pearson needs at least two points");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) fail(Errc::kZeroVariance, "pearson input has zero variance");
  const double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

DiffDistribution diff_distribution(std::span<const ScorePair> pairs) {
  if (pairs.size() < 2) fail(Errc::kTooFew, "difference distribution needs at least two examples");
  DiffDistribution out;
  const double n = static_cast<double>(pairs.size());
  double sum = 0.0;
  for (const auto& p : pairs) {
    const int d = p.a - p.b;
    if (d < -4 || d > 4) fail(Errc::kInvalidArgument, "score difference outside -4..4");
    ++out.histogram[static_cast<std::size_t>(d + 4)];
    sum += d;
  }
  out.mean_diff = sum / n;
  double ss = 0.0;
  for (const auto& p : pairs) {
    const double c = (p.a - p.b) - out.mean_diff;
    ss += c * c;
  }
  out.sigma_diff = std::sqrt(ss / n);
  std::size_t within = 0;
  for (const auto& p : pairs) {
    if (std::abs((p.a - p.b) - out.mean_diff) <= out.sigma_diff) ++within;
  }
  out.frac_within_1sigma = static_cast<double>(within) / n;
  return out;
}

namespace {
int sign(int v) { return (v > 0) - (v < 0); }
}  // namespace

PreferenceAgreement preference_agreement(std::span<const TwoAnswerGroup> groups, TieRule rule) {
  PreferenceAgreement out;
  std::size_t agree = 0;
  for (const auto& g : groups) {
    const int pa = sign(g.scores_a.first - g.scores_a.second);
    const int pb = sign(g.scores_b.first - g.scores_b.second);
    const bool tie = rule == TieRule::kEither ? (pa == 0 || pb == 0) : pb == 0;
    if (tie) {
      ++out.n_ties_excluded;
      continue;
    }
    ++out.n_groups_compared;
    if (pa == pb) ++agree;
  }
  if (out.n_groups_compared == 0) {
    throw Error(Errc::kNoNonTieGroups, std::to_string(out.n_ties_excluded) + " group(s), all ties")
        .with_value(static_cast<long long>(out.n_ties_excluded));
  }
  out.rate = static_cast<double>(agree) / static_cast<double>(out.n_groups_compared);
  return out;
}

BenchmarkScore benchmark_score(std::span<const int> scores, int threshold) {
  if (scores.empty()) fail(Errc::kEmptyInput, "no scores to evaluate");
  BenchmarkScore out;
  out.n = scores.size();
  std::size_t correct = 0;
  long long total = 0;
  for (int s : scores) {
    if (s >= threshold) ++correct;
    total += s;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(out.n);
  out.avg_score = static_cast<double>(total) / static_cast<double>(out.n);
  return out;
}

BenchmarkScore benchmark_score(std::span<const judge::Judgment> judgments, int threshold) {
  std::vector<int> scores;
  scores.reserve(judgments.size());
  for (const auto& j : judgments) {
    if (!(j.rubric == judge::JudgeRubric::qa())) fail(Errc::kRubricMismatch, "benchmark expects 1..5 judgments");
    scores.push_back(j.score);
  }
  return benchmark_score(scores, threshold);
}

AgreementReport agreement_report(std::span<const PairedJudgment> records, TieRule rule) {
  if (records.size() < 2) fail(Errc::kTooFew, "agreement needs at least two examples");
  AgreementReport r;
  r.n = records.size();
  r.tie_rule = rule;

  std::set<std::string> ids;
  std::map<std::string, std::array<const PairedJudgment*, 2>> groups;
  std::vector<double> xs;
  std::vector<double> ys;
  std::vector<ScorePair> diffs;
  for (const auto& rec : records) {
    if (!ids.insert(rec.example_id).second) fail(Errc::kInvalidArgument, "duplicate example_id " + rec.example_id);
    for (int s : {rec.judge_a_score, rec.judge_b_score}) {
      if (s < 1 || s > 5) fail(Errc::kRubricMismatch, "example " + rec.example_id + " has a score off 1..5");
    }
    if (rec.answer_index != 0 && rec.answer_index != 1) {
      fail(Errc::kInvalidArgument, "example " + rec.example_id + " has answer_index outside {0, 1}");
    }
    auto& slot = groups[rec.group_id][static_cast<std::size_t>(rec.answer_index)];
    if (slot) fail(Errc::kInvalidArgument, "group " + rec.group_id + " repeats an answer index");
    slot = &rec;
    xs.push_back(rec.judge_a_score);
    ys.push_back(rec.judge_b_score);
    diffs.push_back({rec.judge_a_score, rec.judge_b_score});
    r.mean_a += rec.judge_a_score;
    r.mean_b += rec.judge_b_score;
  }
  r.mean_a /= static_cast<double>(r.n);
  r.mean_b /= static_cast<double>(r.n);
  try {
    r.pcc = pearson(xs, ys);
  } catch (const Error& e) {
    if (e.code() != Errc::kZeroVariance) throw;
  }
  const auto dd = diff_distribution(diffs);
  r.sigma_diff = dd.sigma_diff;
  r.frac_within_1sigma = dd.frac_within_1sigma;
  r.diff_histogram = dd.histogram;

  std::vector<TwoAnswerGroup> two;
  for (const auto& [gid, slots] : groups) {
    if (!slots[0] || !slots[1]) fail(Errc::kInvalidArgument, "group " + gid + " does not hold exactly two answers");
    two.push_back({{slots[0]->judge_a_score, slots[1]->judge_a_score}, {slots[0]->judge_b_score, slots[1]->judge_b_score}});
  }
  r.n_groups = two.size();
  try {
    const auto pa = preference_agreement(two, rule);
    r.pref_agreement = pa.rate;
    r.n_ties_excluded = pa.n_ties_excluded;
  } catch (const Error& e) {
    if (e.code() != Errc::kNoNonTieGroups) throw;
    r.n_ties_excluded = two.size();
  }
  return r;
}

std::string tie_rule_name(TieRule rule) { return rule == TieRule::kEither ? "either" : "reference"; }

TieRule parse_tie_rule(const std::string& name) {
  if (name == "either") return TieRule::kEither;
  if (name == "reference") return TieRule::kReference;
  fail(Errc::kConfig, "tie_rule must be 'either' or 'reference', got '" + name + "'");
}

}  // namespace capdpo::analytics
