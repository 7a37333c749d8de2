#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "capdpo/dpo.hpp"
#include "capdpo/rng.hpp"
#include "unit/helpers.hpp"

using namespace capdpo;
using namespace capdpo::dpo;
using testutil::error_code_of;

namespace {

const double kLn2 = std::log(2.0);

std::vector<int> random_tokens(Rng& rng, std::size_t len, std::size_t vocab) {
  std::vector<int> out(len);
  for (auto& t : out) t = static_cast<int>(rng.uniform_index(vocab));
  return out;
}

std::vector<DpoExample> random_batch(Rng& rng, const Shape& s, std::size_t n) {
  std::vector<DpoExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({static_cast<std::size_t>(rng.uniform_index(s.n_contexts)), random_tokens(rng, s.seq_len, s.vocab),
                   random_tokens(rng, s.seq_len, s.vocab)});
  }
  return out;
}

Shape random_shape(Rng& rng) {
  return {1 + rng.uniform_index(4), 1 + rng.uniform_index(5), 2 + rng.uniform_index(7)};
}

double max_rel_error(std::span<const double> analytic, const std::vector<double>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

nlohmann::json derived(const std::string& name) {
  return testutil::load_json(testutil::fixture("_derived/" + name + ".json"));
}

std::vector<DpoExample> batch_from(const nlohmann::json& j) {
  std::vector<DpoExample> out;
  for (const auto& e : j) {
    out.push_back({e.at("context").get<std::size_t>(), e.at("chosen").get<std::vector<int>>(),
                   e.at("rejected").get<std::vector<int>>()});
  }
  return out;
}

}  // namespace

TEST_SUITE("dpo") {
  TEST_CASE("logprob of a uniform policy") {
    ToyPolicy p(Shape{1, 3, 4});
    const std::vector<int> toks{0, 3, 2};
    CHECK(logprob(p, 0, toks) == doctest::Approx(-4.1588830834).epsilon(1e-10));
    CHECK(std::abs(logprob(p, 0, toks) - 3 * std::log(0.25)) < 1e-14);
  }

  TEST_CASE("logprob on a dominant path is near zero") {
    ToyPolicy p(Shape{2, 4, 6});
    const std::vector<int> path{5, 0, 2, 2};
    for (std::size_t t = 0; t < 4; ++t) p.mutable_logits().at(1, t, static_cast<std::size_t>(path[t])) = 50.0;
    const double lp = logprob(p, 1, path);
    CHECK(lp <= 0.0);
    CHECK(lp >= -1e-12);
  }

  TEST_CASE("softmax rows sum to one for random policies") {
    const auto p = ToyPolicy::random({3, 4, 7}, 5, 3.0);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t t = 0; t < 4; ++t) {
        const auto row = p.logits().row(c, t);
        const ToyPolicy single(LogitTensor({1, 1, 7}, std::vector<double>(row.begin(), row.end())));
        double total = 0.0;
        for (int k = 0; k < 7; ++k) total += std::exp(logprob(single, 0, std::vector<int>{k}));
        CHECK(std::abs(total - 1.0) < 1e-12);
      }
    }
  }

  TEST_CASE("logprob matches the extended-precision oracle on the seed-0 policy") {
    const auto doc = derived("dpo_logprob_seed0");
    const auto policy = testutil::from_table(doc.at("input").at("policy"));
    CHECK(policy == ToyPolicy::random({2, 3, 5}, 0));
    const auto& queries = doc.at("input").at("queries");
    for (std::size_t i = 0; i < queries.size(); ++i) {
      const auto toks = queries[i].at("tokens").get<std::vector<int>>();
      CHECK(std::abs(logprob(policy, queries[i].at("context").get<std::size_t>(), toks) -
                     doc.at("expected")[i].get<double>()) < 1e-12);
    }
  }

  TEST_CASE("identical policies give ln 2 for any batch") {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
      const auto s = random_shape(rng);
      const auto p = ToyPolicy::random(s, rng.next_u64(), 2.0);
      const auto batch = random_batch(rng, s, 1 + rng.uniform_index(16));
      CHECK(std::abs(dpo_loss(p, p, batch, 0.1) - kLn2) < 1e-12);
    }
  }

  TEST_CASE("closed form: margin of +1 and -1 log-ratio units at beta 0.1") {
    // ref uniform over 8 tokens; theta puts e/8 on the chosen token and 1/(8e) on the rejected one
    const ToyPolicy ref(Shape{1, 1, 8});
    ToyPolicy theta(Shape{1, 1, 8});
    const double pw = std::exp(1.0) / 8.0;
    const double pl = std::exp(-1.0) / 8.0;
    const double rest = (1.0 - pw - pl) / 6.0;
    for (std::size_t k = 0; k < 8; ++k) theta.mutable_logits().at(0, 0, k) = std::log(rest);
    theta.mutable_logits().at(0, 0, 0) = std::log(pw);
    theta.mutable_logits().at(0, 0, 1) = std::log(pl);
    const DpoExample ex{0, {0}, {1}};
    CHECK(std::abs(logprob(theta, 0, ex.chosen) - logprob(ref, 0, ex.chosen) - 1.0) < 1e-12);
    CHECK(std::abs(preference_margin(theta, ref, ex, 0.1) - 0.2) < 1e-12);
    const double loss = dpo_loss(theta, ref, std::vector<DpoExample>{ex}, 0.1);
    const double expected = derived("dpo_loss_closed_form").at("expected").get<double>();
    CHECK(std::abs(loss - expected) < 1e-12);
    CHECK(loss == doctest::Approx(0.5981389).epsilon(1e-7));
    CHECK(std::abs(loss - oracle::softplus_q(-0.2)) < 1e-12);
  }

  TEST_CASE("loss on the seed-0 instance matches the oracle") {
    const auto in = derived("dpo_loss_seed0");
    const auto& i = in.at("input");
    const auto theta = testutil::from_table(i.at("theta"));
    const auto ref = testutil::from_table(i.at("ref"));
    CHECK(theta == ToyPolicy::random({2, 3, 5}, 0));
    CHECK(ref == ToyPolicy::random({2, 3, 5}, 1));
    const double loss = dpo_loss(theta, ref, batch_from(i.at("batch")), i.at("beta").get<double>());
    CHECK(std::abs(loss - in.at("expected").get<double>()) < 1e-12);
  }

  TEST_CASE("loss decreases monotonically toward zero as the margin grows") {
    const ToyPolicy ref(Shape{1, 1, 2});
    double previous = kLn2;
    for (double gap : {0.5, 1.0, 5.0, 20.0, 100.0, 500.0}) {
      ToyPolicy theta(Shape{1, 1, 2});
      theta.mutable_logits().at(0, 0, 0) = gap;
      const double loss = dpo_loss(theta, ref, std::vector<DpoExample>{{0, {0}, {1}}}, 0.1);
      CHECK(loss > 0.0);
      CHECK(loss < previous);
      previous = loss;
    }
  }

  TEST_CASE("gradient matches stored finite differences on the seed-0 instance") {
    const auto doc = derived("dpo_grad_seed0");
    const auto& i = doc.at("input");
    const auto theta = testutil::from_table(i.at("theta"));
    const auto ref = testutil::from_table(i.at("ref"));
    const auto grad = dpo_grad(theta, ref, batch_from(i.at("batch")), i.at("beta").get<double>());
    CHECK(max_rel_error(grad.values(), doc.at("expected").get<std::vector<double>>()) < 1e-5);
  }

  TEST_CASE("property: gradient agrees with finite differences on 50 random instances") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      const auto s = random_shape(rng);
      const auto theta = ToyPolicy::random(s, rng.next_u64());
      const auto ref = ToyPolicy::random(s, rng.next_u64());
      const auto batch = random_batch(rng, s, 1 + rng.uniform_index(16));
      const auto grad = dpo_grad(theta, ref, batch, 0.1);
      const auto fd = oracle::fd_gradient(testutil::to_table(theta), testutil::to_table(ref),
                                          testutil::to_oracle(batch), 0.1, 1e-5);
      CAPTURE(trial);
      CHECK(max_rel_error(grad.values(), fd) < 1e-5);
    }
  }

  TEST_CASE("zero gradients: identical sequences and untouched rows") {
    Rng rng(3);
    const Shape s{3, 2, 4};
    const auto p = ToyPolicy::random(s, 4);
    std::vector<DpoExample> same{{1, {0, 3}, {0, 3}}, {2, {1, 1}, {1, 1}}};
    const auto zero = dpo_grad(p, p, same, 0.1);
    for (double g : zero.values()) CHECK(g == 0.0);

    const auto ref = ToyPolicy::random(s, 5);
    std::vector<DpoExample> only_ctx1{{1, {0, 3}, {2, 1}}, {1, {1, 1}, {3, 0}}};
    const auto grad = dpo_grad(p, ref, only_ctx1, 0.1);
    for (std::size_t c : {0u, 2u}) {
      for (std::size_t t = 0; t < 2; ++t) {
        for (std::size_t k = 0; k < 4; ++k) CHECK(grad.at(c, t, k) == 0.0);
      }
    }
  }

  TEST_CASE("property: a small descent step does not increase the loss") {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
      const auto s = random_shape(rng);
      auto theta = ToyPolicy::random(s, rng.next_u64());
      const auto ref = ToyPolicy::random(s, rng.next_u64());
      const auto batch = random_batch(rng, s, 1 + rng.uniform_index(16));
      const double before = dpo_loss(theta, ref, batch, 0.1);
      const auto grad = dpo_grad(theta, ref, batch, 0.1);
      auto v = theta.mutable_logits().values();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 1e-3 * grad.values()[i];
      CHECK(dpo_loss(theta, ref, batch, 0.1) <= before);
    }
  }

  TEST_CASE("training: zero learning rate keeps the loss trace constant") {
    Rng rng(7);
    const Shape s{2, 3, 4};
    const auto theta0 = ToyPolicy::random(s, 1);
    const auto data = random_batch(rng, s, 40);
    DpoConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.batch_size = 40;
    const auto r = train(theta0, data, cfg);
    REQUIRE(r.loss_trace.size() == 3);
    for (double l : r.loss_trace) CHECK(std::abs(l - kLn2) < 1e-12);
    CHECK(r.policy == theta0);
  }

  TEST_CASE("training: always-chosen token 0 over token 1 yields positive margins") {
    Rng rng(8);
    const Shape s{4, 3, 6};
    std::vector<DpoExample> data;
    for (int i = 0; i < 64; ++i) {
      const auto c = static_cast<std::size_t>(rng.uniform_index(4));
      data.push_back({c, {0, 0, 0}, {1, 1, 1}});
    }
    const ToyPolicy theta0(s);
    const ToyPolicy frozen = theta0;
    DpoConfig cfg;
    cfg.learning_rate = 5.0;
    cfg.batch_size = 8;
    cfg.epochs = 5;
    cfg.seed = 1;
    const auto r = train(theta0, data, cfg);
    CHECK(theta0 == frozen);
    std::size_t positive = 0;
    for (const auto& ex : data) positive += preference_margin(r.policy, theta0, ex, cfg.beta) > 0.0;
    CHECK(static_cast<double>(positive) >= 0.95 * static_cast<double>(data.size()));
    CHECK(r.loss_trace.back() < r.loss_trace.front());
    CHECK(train(theta0, data, cfg).policy == r.policy);
  }

  TEST_CASE("step count for 17,920 pairs at batch 128 over 3 epochs") {
    const std::size_t n = 17920;
    const std::size_t batch = (n + 140 - 1) / 140;
    CHECK(batch == 128);
    CHECK(steps_per_epoch(n, batch) * 3 == 420);
    std::vector<DpoExample> data(n, DpoExample{0, {0}, {1}});
    DpoConfig cfg;
    cfg.batch_size = batch;
    cfg.learning_rate = 0.01;
    const auto r = train(ToyPolicy(Shape{1, 1, 2}), data, cfg);
    CHECK(r.loss_trace.size() == 420);
  }

  TEST_CASE("divergence aborts with the step index") {
    // two contradicting pairs with an enormous beta: the second step overflows the margin
    std::vector<DpoExample> data{{0, {0}, {1}}, {0, {1}, {0}}};
    DpoConfig cfg;
    cfg.beta = 1e308;
    cfg.learning_rate = 1.0;
    cfg.batch_size = 1;
    try {
      train(ToyPolicy(Shape{1, 1, 2}), data, cfg);
      FAIL("expected NonFinite");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::kNonFinite);
      REQUIRE(e.value().has_value());
      CHECK(*e.value() == 1);
    }
  }

  TEST_CASE("implicit reward: zero for identical policies, linear in beta, oracle on seed 0") {
    const auto p = ToyPolicy::random({2, 3, 4}, 9);
    const auto q = ToyPolicy::random({2, 3, 4}, 10);
    const std::vector<int> toks{1, 2, 3};
    CHECK(implicit_reward(p, p, 1, toks, 0.1) == 0.0);
    CHECK(implicit_reward(p, q, 1, toks, 0.2) == 2.0 * implicit_reward(p, q, 1, toks, 0.1));

    const auto doc = derived("dpo_reward_seed0");
    const auto& i = doc.at("input");
    const auto theta = testutil::from_table(i.at("theta"));
    const auto ref = testutil::from_table(i.at("ref"));
    const auto cands = i.at("candidates").get<std::vector<std::vector<int>>>();
    const auto r = rank_best_of_n(theta, ref, i.at("context").get<std::size_t>(), cands, i.at("beta").get<double>());
    CHECK(r.best_index == doc.at("expected").at("best_index").get<std::size_t>());
    for (std::size_t k = 0; k < cands.size(); ++k) {
      CHECK(std::abs(r.rewards[k] - doc.at("expected").at("rewards")[k].get<double>()) < 1e-12);
    }
  }

  TEST_CASE("ranking: argmax, single candidate, ties to the lowest index, exhaustive enumeration") {
    // rewards 0.1, -0.3, 0.5 via a one-position policy against a uniform reference
    const ToyPolicy ref(Shape{1, 1, 3});
    ToyPolicy theta(Shape{1, 1, 3});
    const double beta = 0.1;
    const double lse = std::log(std::exp(1.0) + std::exp(-3.0) + std::exp(5.0));
    theta.mutable_logits().at(0, 0, 0) = 1.0;
    theta.mutable_logits().at(0, 0, 1) = -3.0;
    theta.mutable_logits().at(0, 0, 2) = 5.0;
    const auto r = rank_best_of_n(theta, ref, 0, {{0}, {1}, {2}}, beta);
    CHECK(r.best_index == 2);
    const double shift = beta * (-lse + std::log(3.0));
    CHECK(std::abs(r.rewards[0] - (0.1 + shift)) < 1e-12);
    CHECK(std::abs(r.rewards[1] - (-0.3 + shift)) < 1e-12);
    CHECK(std::abs(r.rewards[2] - (0.5 + shift)) < 1e-12);

    CHECK(rank_best_of_n(theta, ref, 0, {{1}}, beta).best_index == 0);
    CHECK(rank_best_of_n(theta, ref, 0, {{1}, {2}, {2}}, beta).best_index == 1);

    const auto doc = derived("dpo_rank_exhaustive");
    const auto& i = doc.at("input");
    const auto t = testutil::from_table(i.at("theta"));
    const auto f = testutil::from_table(i.at("ref"));
    CHECK(t == ToyPolicy::random({1, 2, 3}, 0));
    const auto cands = i.at("candidates").get<std::vector<std::vector<int>>>();
    CHECK(cands.size() == 9);
    CHECK(rank_best_of_n(t, f, 0, cands, 0.1).best_index == doc.at("expected").at("best_index").get<std::size_t>());
    CHECK(error_code_of([&] { rank_best_of_n(t, f, 0, {}, 0.1); }) == Errc::kEmptyInput);
  }

  TEST_CASE("property: per-row shifts of both policies leave rewards and the argmax unchanged") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
      const auto s = random_shape(rng);
      auto theta = ToyPolicy::random(s, rng.next_u64());
      auto ref = ToyPolicy::random(s, rng.next_u64());
      std::vector<std::vector<int>> cands;
      for (int k = 0; k < 8; ++k) cands.push_back(random_tokens(rng, s.seq_len, s.vocab));
      const auto context = static_cast<std::size_t>(rng.uniform_index(s.n_contexts));
      const auto before = rank_best_of_n(theta, ref, context, cands, 0.1);
      for (std::size_t c = 0; c < s.n_contexts; ++c) {
        for (std::size_t t = 0; t < s.seq_len; ++t) {
          const double shift = 10.0 * (rng.uniform01() - 0.5);
          for (auto& v : theta.mutable_logits().row(c, t)) v += shift;
          for (auto& v : ref.mutable_logits().row(c, t)) v += shift;
        }
      }
      const auto after = rank_best_of_n(theta, ref, context, cands, 0.1);
      CHECK(after.best_index == before.best_index);
      for (std::size_t k = 0; k < cands.size(); ++k) CHECK(std::abs(after.rewards[k] - before.rewards[k]) < 1e-9);
    }
  }

  TEST_CASE("checkpoint round trip, byte-swapped files and corruption") {
    testutil::TempDir dir;
    const auto p = ToyPolicy::random({2, 3, 4}, 13);
    save_checkpoint(dir / "p.bin", p);
    CHECK(load_checkpoint(dir / "p.bin") == p);

    // rewrite every multi-byte field in the opposite byte order
    auto bytes = testutil::slurp(dir / "p.bin");
    auto flip = [&](std::size_t off, std::size_t width) { std::reverse(bytes.begin() + off, bytes.begin() + off + width); };
    flip(8, 4);
    flip(12, 4);
    for (std::size_t off = 16; off < 40; off += 8) flip(off, 8);
    for (std::size_t off = 40; off < bytes.size(); off += 8) flip(off, 8);
    std::ofstream(dir / "swapped.bin", std::ios::binary) << bytes;
    CHECK(load_checkpoint(dir / "swapped.bin") == p);

    std::ofstream(dir / "junk.bin", std::ios::binary) << "not a checkpoint";
    CHECK(error_code_of([&] { load_checkpoint(dir / "junk.bin"); }) == Errc::kIo);
    auto truncated = testutil::slurp(dir / "p.bin");
    truncated.resize(truncated.size() - 3);
    std::ofstream(dir / "short.bin", std::ios::binary) << truncated;
    CHECK(error_code_of([&] { load_checkpoint(dir / "short.bin"); }) == Errc::kIo);
  }

  TEST_CASE("loss csv") {
    testutil::TempDir dir;
    write_loss_csv(dir / "loss.csv", std::vector<double>{0.5, 0.25});
    CHECK(testutil::slurp(dir / "loss.csv") == "step,loss\n0,0.5\n1,0.25\n");
  }

  TEST_CASE("errors") {
    const auto p = ToyPolicy::random({2, 2, 3}, 1);
    const auto q = ToyPolicy::random({2, 2, 4}, 1);
    const std::vector<DpoExample> ok{{0, {0, 1}, {1, 2}}};
    CHECK(error_code_of([&] { dpo_loss(p, q, ok, 0.1); }) == Errc::kShapeMismatch);
    CHECK(error_code_of([&] { dpo_loss(p, p, {}, 0.1); }) == Errc::kEmptyBatch);
    CHECK(error_code_of([&] { dpo_grad(p, p, {}, 0.1); }) == Errc::kEmptyBatch);
    CHECK(error_code_of([&] { dpo_loss(p, p, std::vector<DpoExample>{{0, {0, 3}, {1, 2}}}, 0.1); }) ==
          Errc::kIndexOutOfRange);
    CHECK(error_code_of([&] { dpo_loss(p, p, std::vector<DpoExample>{{2, {0, 1}, {1, 2}}}, 0.1); }) ==
          Errc::kIndexOutOfRange);
    CHECK(error_code_of([&] { logprob(p, 0, std::vector<int>{-1, 0}); }) == Errc::kIndexOutOfRange);
    CHECK(error_code_of([&] { logprob(p, 0, std::vector<int>{0}); }) == Errc::kShapeMismatch);
    CHECK(error_code_of([&] { dpo_loss(p, p, ok, 0.0); }) == Errc::kInvalidArgument);
    std::vector<double> bad(12, 0.0);
    bad[3] = std::nan("");
    CHECK(error_code_of([&] { ToyPolicy(LogitTensor({2, 2, 3}, bad)); }) == Errc::kNonFinite);
    CHECK(error_code_of([&] { LogitTensor({2, 2, 3}, std::vector<double>(5)); }) == Errc::kShapeMismatch);
    CHECK(error_code_of([&] { train(p, {}, DpoConfig{}); }) == Errc::kEmptyBatch);
  }
}
