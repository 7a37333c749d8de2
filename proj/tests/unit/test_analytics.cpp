#include <doctest.h>

#include <cmath>

#include "capdpo/analytics.hpp"
#include "capdpo/rng.hpp"
#include "unit/helpers.hpp"

using namespace capdpo;
using namespace capdpo::analytics;
using testutil::error_code_of;

namespace {

nlohmann::json derived(const std::string& name) {
  return testutil::load_json(testutil::fixture("_derived/" + name + ".json"));
}

std::vector<ScorePair> pairs_of(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<ScorePair> out;
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back({a[i], b[i]});
  return out;
}

std::vector<TwoAnswerGroup> groups_of(const nlohmann::json& arr) {
  std::vector<TwoAnswerGroup> out;
  for (const auto& g : arr) out.push_back({{g[0], g[1]}, {g[2], g[3]}});
  return out;
}

int score(Rng& rng) { return 1 + static_cast<int>(rng.uniform_index(5)); }

}  // namespace

TEST_SUITE("analytics") {
  TEST_CASE("pearson hand values") {
    CHECK(pearson(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4}) == 0.8);
    CHECK(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6}) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(pearson(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(pearson(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4}) ==
          derived("analytics_pearson_hand").at("expected").get<double>());
  }

  TEST_CASE("pearson errors") {
    CHECK(error_code_of([] { pearson(std::vector<double>{1, 2}, std::vector<double>{1}); }) == Errc::kLengthMismatch);
    CHECK(error_code_of([] { pearson(std::vector<double>{1}, std::vector<double>{1}); }) == Errc::kTooFew);
    CHECK(error_code_of([] { pearson(std::vector<double>{3, 3, 3}, std::vector<double>{1, 2, 3}); }) ==
          Errc::kZeroVariance);
  }

  TEST_CASE("pearson on stored random cases") {
    const auto doc = derived("analytics_pearson_random");
    const auto& cases = doc.at("input").at("cases");
    for (std::size_t i = 0; i < cases.size(); ++i) {
      const auto xs = cases[i].at("xs").get<std::vector<double>>();
      const auto ys = cases[i].at("ys").get<std::vector<double>>();
      CHECK(std::abs(pearson(xs, ys) - doc.at("expected")[i].get<double>()) < 1e-12);
    }
  }

  TEST_CASE("property: pearson is symmetric and invariant to positive affine maps") {
    Rng rng(31);
    for (int trial = 0; trial < 300; ++trial) {
      const std::size_t n = 3 + rng.uniform_index(40);
      std::vector<double> xs(n), ys(n);
      for (std::size_t i = 0; i < n; ++i) {
        xs[i] = rng.uniform01() * 10 - 5;
        ys[i] = 0.5 * xs[i] + rng.uniform01() * 4;
      }
      const double r = pearson(xs, ys);
      CHECK(std::abs(pearson(ys, xs) - r) < 1e-12);
      const double scale = 0.1 + rng.uniform01() * 10;
      const double shift = rng.uniform01() * 100 - 50;
      std::vector<double> xt(n);
      for (std::size_t i = 0; i < n; ++i) xt[i] = scale * xs[i] + shift;
      CHECK(std::abs(pearson(xt, ys) - r) < 1e-12);
      CHECK(std::abs(pearson(xs, xt) - 1.0) < 1e-12);
    }
  }

  TEST_CASE("difference distribution hand values") {
    const auto d = diff_distribution(pairs_of({2, 3, 3, 4}, {3, 3, 3, 3}));
    CHECK(d.mean_diff == 0.0);
    CHECK(d.sigma_diff == doctest::Approx(std::sqrt(0.5)).epsilon(1e-15));
    CHECK(d.frac_within_1sigma == 0.5);
    CHECK(d.histogram == std::array<std::size_t, 9>{0, 0, 0, 1, 2, 1, 0, 0, 0});
    const auto expected = derived("analytics_diff_hand").at("expected");
    CHECK(d.sigma_diff == expected.at("sigma_diff").get<double>());
    CHECK(error_code_of([] { diff_distribution(std::vector<ScorePair>{{1, 1}}); }) == Errc::kTooFew);
  }

  TEST_CASE("preference agreement hand values and tie handling") {
    const std::vector<TwoAnswerGroup> groups{{{5, 3}, {4, 2}}, {{2, 4}, {4, 3}}};
    const auto pa = preference_agreement(groups);
    CHECK(pa.rate == 0.5);
    CHECK(pa.n_groups_compared == 2);
    CHECK(pa.n_ties_excluded == 0);

    const std::vector<TwoAnswerGroup> tie{{{3, 3}, {4, 2}}};
    try {
      preference_agreement(tie);
      FAIL("expected NoNonTieGroups");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::kNoNonTieGroups);
      CHECK(e.value() == 1);
    }
    // the reference rule ignores ties on judge a only
    const auto ref = preference_agreement(tie, TieRule::kReference);
    CHECK(ref.n_groups_compared == 1);
    CHECK(ref.rate == 0.0);

    for (const char* name : {"analytics_preference_hand", "analytics_preference_random",
                             "analytics_preference_random_reference"}) {
      const auto doc = derived(name);
      const auto rule = parse_tie_rule(doc.at("input").at("tie_rule"));
      const auto got = preference_agreement(groups_of(doc.at("input").at("groups")), rule);
      CHECK(got.rate == doc.at("expected").at("rate").get<double>());
      CHECK(got.n_ties_excluded == doc.at("expected").at("n_ties_excluded").get<std::size_t>());
      CHECK(got.n_groups_compared == doc.at("expected").at("n_groups_compared").get<std::size_t>());
    }
  }

  TEST_CASE("benchmark score hand values and inclusive threshold") {
    const auto b = benchmark_score(std::vector<int>{5, 3, 2, 1, 4}, 3);
    CHECK(b.accuracy == 0.6);
    CHECK(b.avg_score == 3.0);
    CHECK(b.n == 5);
    const auto doc = derived("analytics_accuracy_hand");
    CHECK(b.accuracy == doc.at("expected").at("accuracy").get<double>());
    CHECK(benchmark_score(std::vector<int>{3}, 3).accuracy == 1.0);
    CHECK(benchmark_score(std::vector<int>{2}, 3).accuracy == 0.0);
    CHECK(error_code_of([] { benchmark_score(std::vector<int>{}, 3); }) == Errc::kEmptyInput);
    std::vector<judge::Judgment> js(2);
    js[0].score = 4;
    js[0].rubric = judge::JudgeRubric::qa();
    js[1].score = 2;
    js[1].rubric = judge::JudgeRubric::qa();
    CHECK(benchmark_score(js).accuracy == 0.5);
    js[1].rubric = judge::JudgeRubric::caption();
    CHECK(error_code_of([&] { benchmark_score(js); }) == Errc::kRubricMismatch);
  }

  TEST_CASE("property: 1000 random fixtures match the naive oracles") {
    Rng rng(32);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t n = 2 + rng.uniform_index(60);
      std::vector<int> a(n), b(n);
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = score(rng);
        b[i] = score(rng);
      }
      std::vector<double> xa(a.begin(), a.end()), xb(b.begin(), b.end());
      const double naive_r = oracle::pearson(xa, xb);
      if (std::isfinite(naive_r)) {
        CHECK(std::abs(pearson(xa, xb) - naive_r) < 1e-12);
      } else {
        CHECK(error_code_of([&] { pearson(xa, xb); }) == Errc::kZeroVariance);
      }

      const auto d = diff_distribution(pairs_of(a, b));
      const auto od = oracle::diff_stats(a, b);
      CHECK(std::abs(d.mean_diff - od.mean) < 1e-12);
      CHECK(std::abs(d.sigma_diff - od.sigma) < 1e-12);
      CHECK(d.frac_within_1sigma == od.frac_within);
      CHECK(d.histogram == od.histogram);

      std::vector<std::array<int, 4>> raw(1 + rng.uniform_index(30));
      for (auto& g : raw) {
        for (auto& s : g) s = score(rng);
      }
      std::vector<TwoAnswerGroup> groups;
      for (const auto& g : raw) groups.push_back({{g[0], g[1]}, {g[2], g[3]}});
      for (bool reference : {false, true}) {
        const auto oc = oracle::preference_agreement(raw, reference);
        const auto rule = reference ? TieRule::kReference : TieRule::kEither;
        if (oc.compared == 0) {
          CHECK(error_code_of([&] { preference_agreement(groups, rule); }) == Errc::kNoNonTieGroups);
          continue;
        }
        const auto pa = preference_agreement(groups, rule);
        CHECK(pa.n_groups_compared == oc.compared);
        CHECK(pa.n_ties_excluded == oc.ties);
        CHECK(std::abs(pa.rate - static_cast<double>(oc.agree) / static_cast<double>(oc.compared)) < 1e-12);
      }

      const int threshold = score(rng);
      const auto bs = benchmark_score(a, threshold);
      const auto ob = oracle::accuracy(a, threshold);
      CHECK(std::abs(bs.accuracy - ob.accuracy) < 1e-12);
      CHECK(std::abs(bs.avg_score - ob.mean) < 1e-12);
    }
  }

  TEST_CASE("property: accuracy is non-increasing in the threshold") {
    Rng rng(33);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<int> s(1 + rng.uniform_index(50));
      for (auto& v : s) v = score(rng);
      double previous = 2.0;
      for (int t = 1; t <= 5; ++t) {
        const double acc = benchmark_score(s, t).accuracy;
        CHECK(acc <= previous);
        previous = acc;
      }
    }
  }

  TEST_CASE("property: swapping judges negates the mean difference and keeps the spread") {
    Rng rng(34);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<ScorePair> p(2 + rng.uniform_index(40)), q;
      for (auto& x : p) {
        x = {score(rng), score(rng)};
        q.push_back({x.b, x.a});
      }
      const auto d = diff_distribution(p);
      const auto e = diff_distribution(q);
      CHECK(std::abs(d.mean_diff + e.mean_diff) < 1e-12);
      CHECK(std::abs(d.sigma_diff - e.sigma_diff) < 1e-12);
      CHECK(d.frac_within_1sigma == e.frac_within_1sigma);
      for (std::size_t k = 0; k < 9; ++k) CHECK(d.histogram[k] == e.histogram[8 - k]);
    }
  }

  TEST_CASE("two simulated judges reproduce the reported summary statistics") {
    const auto doc = derived("analytics_diff_two_judges");
    std::vector<PairedJudgment> records;
    std::size_t id = 0;
    for (const auto& cell : doc.at("input").at("cells")) {
      for (int k = 0; k < cell.at("count").get<int>(); ++k, ++id) {
        records.push_back({"e" + std::to_string(id), "g" + std::to_string(id / 2), static_cast<int>(id % 2),
                           cell.at("a").get<int>(), cell.at("b").get<int>()});
      }
    }
    const auto r = agreement_report(records);
    CHECK(r.n == 20000);
    CHECK(std::abs(r.mean_a - 2.9) < 1e-9);
    CHECK(std::abs(r.mean_b - 3.5) < 1e-9);
    CHECK(std::abs(r.sigma_diff - 1.31) < 1e-9);
    REQUIRE(r.pcc.has_value());
    CHECK(std::abs(*r.pcc - 0.47) < 5e-4);
    const auto& e = doc.at("expected");
    CHECK(std::abs(*r.pcc - e.at("pcc").get<double>()) < 1e-12);
    CHECK(std::abs(r.frac_within_1sigma - e.at("frac_within_1sigma").get<double>()) < 1e-12);
    for (std::size_t k = 0; k < 9; ++k) CHECK(r.diff_histogram[k] == e.at("histogram")[k].get<std::size_t>());
  }

  TEST_CASE("agreement report structure checks") {
    std::vector<PairedJudgment> ok{{"a", "g", 0, 4, 5}, {"b", "g", 1, 2, 3}};
    const auto r = agreement_report(ok);
    CHECK(r.n_groups == 1);
    CHECK(r.pref_agreement == 1.0);
    CHECK(r.pcc == doctest::Approx(1.0));

    std::vector<PairedJudgment> flat{{"a", "g", 0, 3, 3}, {"b", "g", 1, 3, 3}};
    const auto f = agreement_report(flat);
    CHECK_FALSE(f.pcc.has_value());
    CHECK_FALSE(f.pref_agreement.has_value());
    CHECK(f.n_ties_excluded == 1);

    std::vector<PairedJudgment> dup{{"a", "g", 0, 3, 3}, {"a", "h", 1, 3, 3}};
    CHECK(error_code_of([&] { agreement_report(dup); }) == Errc::kInvalidArgument);
    std::vector<PairedJudgment> lonely{{"a", "g", 0, 3, 3}, {"b", "h", 0, 3, 3}};
    CHECK(error_code_of([&] { agreement_report(lonely); }) == Errc::kInvalidArgument);
    CHECK(error_code_of([&] { agreement_report(std::vector<PairedJudgment>{ok[0]}); }) == Errc::kTooFew);
    CHECK(parse_tie_rule("reference") == TieRule::kReference);
    CHECK(tie_rule_name(TieRule::kEither) == "either");
    CHECK(error_code_of([] { parse_tie_rule("both"); }) == Errc::kConfig);
  }
}
