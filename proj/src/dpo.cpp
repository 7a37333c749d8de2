#include "capdpo/dpo.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>

#include "capdpo/error.hpp"
#include "capdpo/rng.hpp"

namespace capdpo::dpo {

LogitTensor::LogitTensor(Shape shape) : shape_(shape), values_(shape.size(), 0.0) {}

LogitTensor::LogitTensor(Shape shape, std::vector<double> values) : shape_(shape), values_(std::move(values)) {
  require(values_.size() == shape_.size(), Errc::kShapeMismatch, "logit count does not match shape");
}

std::span<double> LogitTensor::row(std::size_t context, std::size_t position) {
  return std::span<double>(values_).subspan(offset(context, position), shape_.vocab);
}

std::span<const double> LogitTensor::row(std::size_t context, std::size_t position) const {
  return std::span<const double>(values_).subspan(offset(context, position), shape_.vocab);
}

bool LogitTensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

ToyPolicy::ToyPolicy(Shape shape) : logits_(shape) {
  require(shape.n_contexts > 0 && shape.seq_len > 0 && shape.vocab > 0, Errc::kInvalidArgument,
          "policy dimensions must be positive");
}

ToyPolicy::ToyPolicy(LogitTensor logits) : logits_(std::move(logits)) {
  const auto& s = logits_.shape();
  require(s.n_contexts > 0 && s.seq_len > 0 && s.vocab > 0, Errc::kInvalidArgument,
          "policy dimensions must be positive");
  require(logits_.all_finite(), Errc::kNonFinite, "policy logits must be finite");
}

ToyPolicy ToyPolicy::random(Shape shape, std::uint64_t seed, double scale) {
  Rng rng(seed);
  std::vector<double> v(shape.size());
  for (auto& x : v) x = scale * (2.0 * rng.uniform01() - 1.0);
  return ToyPolicy(LogitTensor(shape, std::move(v)));
}

void DpoConfig::validate() const {
  require(beta > 0.0 && std::isfinite(beta), Errc::kInvalidArgument, "beta must be positive");
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), Errc::kInvalidArgument,
          "learning_rate must be non-negative");
  require(epochs >= 1, Errc::kInvalidArgument, "epochs must be positive");
  require(batch_size >= 1, Errc::kInvalidArgument, "batch_size must be positive");
}

double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace {

double log_sum_exp(std::span<const double> row) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return m + std::log(s);
}

void softmax_into(std::span<const double> row, std::span<double> out) {
  const double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (std::size_t k = 0; k < row.size(); ++k) {
    out[k] = std::exp(row[k] - m);
    s += out[k];
  }
  for (auto& v : out) v /= s;
}

// Pairwise summation in index order.
double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.first(half)) + pairwise_sum(xs.subspan(half));
}

void check_tokens(const Shape& shape, std::size_t context, std::span<const int> tokens) {
  if (context >= shape.n_contexts) {
    throw Error(Errc::kIndexOutOfRange, "context " + std::to_string(context) + " out of range")
        .with_value(static_cast<long long>(context));
  }
  if (tokens.size() != shape.seq_len) {
    fail(Errc::kShapeMismatch, "sequence length " + std::to_string(tokens.size()) + " != seq_len " +
                                   std::to_string(shape.seq_len));
  }
  for (int tok : tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= shape.vocab) {
      throw Error(Errc::kIndexOutOfRange, "token id " + std::to_string(tok) + " out of range").with_value(tok);
    }
  }
}

void check_pair(const ToyPolicy& theta, const ToyPolicy& ref, std::span<const DpoExample> batch, double beta) {
  if (!(theta.shape() == ref.shape())) fail(Errc::kShapeMismatch, "theta and ref shapes differ");
  if (batch.empty()) fail(Errc::kEmptyBatch, "batch is empty");
  require(beta > 0.0 && std::isfinite(beta), Errc::kInvalidArgument, "beta must be positive");
}

double finite_or_throw(double v, const char* what) {
  if (!std::isfinite(v)) fail(Errc::kNonFinite, std::string(what) + " is not finite");
  return v;
}

}  // namespace

double logprob(const ToyPolicy& policy, std::size_t context, std::span<const int> tokens) {
  check_tokens(policy.shape(), context, tokens);
  double total = 0.0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto row = policy.logits().row(context, t);
    total += row[static_cast<std::size_t>(tokens[t])] - log_sum_exp(row);
  }
  return total;
}

double preference_margin(const ToyPolicy& theta, const ToyPolicy& ref, const DpoExample& example, double beta) {
  const double dw = logprob(theta, example.context, example.chosen) - logprob(ref, example.context, example.chosen);
  const double dl =
      logprob(theta, example.context, example.rejected) - logprob(ref, example.context, example.rejected);
  return finite_or_throw(beta * (dw - dl), "preference margin");
}

double dpo_loss(const ToyPolicy& theta, const ToyPolicy& ref, std::span<const DpoExample> batch, double beta) {
  check_pair(theta, ref, batch, beta);
  std::vector<double> losses;
  losses.reserve(batch.size());
  for (const auto& ex : batch) losses.push_back(softplus(-preference_margin(theta, ref, ex, beta)));
  return finite_or_throw(pairwise_sum(losses) / static_cast<double>(batch.size()), "dpo loss");
}

LogitTensor dpo_grad(const ToyPolicy& theta, const ToyPolicy& ref, std::span<const DpoExample> batch, double beta) {
  check_pair(theta, ref, batch, beta);
  const auto& shape = theta.shape();
  LogitTensor grad(shape);
  std::vector<double> probs(shape.vocab);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) {
    const double z = preference_margin(theta, ref, ex, beta);
    // d softplus(-z) / dz = -sigmoid(-z); dz/dlogits = beta * (dlogpi(y_w) - dlogpi(y_l)).
    const double coeff = -beta * sigmoid(-z) * inv_n;
    for (std::size_t t = 0; t < shape.seq_len; ++t) {
      softmax_into(theta.logits().row(ex.context, t), probs);
      auto g = grad.row(ex.context, t);
      const auto w = static_cast<std::size_t>(ex.chosen[t]);
      const auto l = static_cast<std::size_t>(ex.rejected[t]);
      for (std::size_t k = 0; k < shape.vocab; ++k) {
        const double chosen_term = (k == w ? 1.0 : 0.0) - probs[k];
        const double rejected_term = (k == l ? 1.0 : 0.0) - probs[k];
        g[k] += coeff * (chosen_term - rejected_term);
      }
    }
  }
  if (!grad.all_finite()) fail(Errc::kNonFinite, "gradient is not finite");
  return grad;
}

std::size_t steps_per_epoch(std::size_t n_examples, std::size_t batch_size) {
  return (n_examples + batch_size - 1) / batch_size;
}

TrainResult train(const ToyPolicy& theta0, std::span<const DpoExample> data, const DpoConfig& cfg) {
  cfg.validate();
  if (data.empty()) fail(Errc::kEmptyBatch, "training data is empty");
  const ToyPolicy ref = theta0;
  TrainResult result{theta0, {}};
  const std::size_t per_epoch = steps_per_epoch(data.size(), cfg.batch_size);
  result.loss_trace.reserve(per_epoch * static_cast<std::size_t>(cfg.epochs));

  std::vector<std::size_t> order(data.size());
  std::vector<DpoExample> batch;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(StableHasher(cfg.seed).add("epoch").add(epoch).finish());
    rng.shuffle(order);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t step = result.loss_trace.size();
      batch.clear();
      const std::size_t end = std::min(data.size(), (b + 1) * cfg.batch_size);
      for (std::size_t i = b * cfg.batch_size; i < end; ++i) batch.push_back(data[order[i]]);
      try {
        const double loss = dpo_loss(result.policy, ref, batch, cfg.beta);
        const auto grad = dpo_grad(result.policy, ref, batch, cfg.beta);
        auto params = result.policy.mutable_logits().values();
        const auto g = grad.values();
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg.learning_rate * g[i];
        if (!result.policy.logits().all_finite()) fail(Errc::kNonFinite, "logits diverged");
        result.loss_trace.push_back(loss);
      } catch (const Error& e) {
        if (e.code() != Errc::kNonFinite) throw;
        throw Error(Errc::kNonFinite, "training aborted at step " + std::to_string(step) + ": " + e.what())
            .with_value(static_cast<long long>(step));
      }
    }
  }
  return result;
}

double implicit_reward(const ToyPolicy& theta, const ToyPolicy& ref, std::size_t context, std::span<const int> tokens,
                       double beta) {
  if (!(theta.shape() == ref.shape())) fail(Errc::kShapeMismatch, "theta and ref shapes differ");
  return beta * (logprob(theta, context, tokens) - logprob(ref, context, tokens));
}

Ranking rank_best_of_n(const ToyPolicy& theta, const ToyPolicy& ref, std::size_t context,
                       const std::vector<std::vector<int>>& candidates, double beta) {
  require(!candidates.empty(), Errc::kEmptyInput, "no candidates to rank");
  Ranking r;
  r.rewards.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    r.rewards.push_back(implicit_reward(theta, ref, context, candidates[i], beta));
    if (r.rewards[i] > r.rewards[r.best_index]) r.best_index = i;
  }
  return r;
}

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'D', 'P', 'O', 'T', 'O', 'Y', '\0'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr std::uint32_t kEndianTag = 0x01020304;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, bool swap) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(Errc::kIo, "truncated checkpoint");
  if (swap) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ToyPolicy& policy) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::kIo, "cannot write " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint32_t>(out, kEndianTag);
  const auto& s = policy.shape();
  put<std::uint64_t>(out, s.n_contexts);
  put<std::uint64_t>(out, s.seq_len);
  put<std::uint64_t>(out, s.vocab);
  for (double v : policy.logits().values()) put<double>(out, v);
  if (!out) fail(Errc::kIo, "failed writing " + path.string());
}

ToyPolicy load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::kIo, "cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) fail(Errc::kIo, path.string() + " is not a policy checkpoint");
  auto version = get<std::uint32_t>(in, false);
  const auto tag = get<std::uint32_t>(in, false);
  bool swap = false;
  if (tag == kEndianTag) {
    swap = false;
  } else if (tag == 0x04030201) {
    swap = true;
    auto* b = reinterpret_cast<unsigned char*>(&version);
    std::reverse(b, b + sizeof(version));
  } else {
    fail(Errc::kIo, "unrecognised endianness tag in " + path.string());
  }
  if (version != kFormatVersion) fail(Errc::kIo, "unsupported checkpoint version " + std::to_string(version));
  Shape s;
  s.n_contexts = get<std::uint64_t>(in, swap);
  s.seq_len = get<std::uint64_t>(in, swap);
  s.vocab = get<std::uint64_t>(in, swap);
  std::vector<double> values(s.size());
  for (auto& v : values) v = get<double>(in, swap);
  if (in.peek() != std::char_traits<char>::eof()) fail(Errc::kIo, "trailing bytes in " + path.string());
  return ToyPolicy(LogitTensor(s, std::move(values)));
}

void write_loss_csv(const std::filesystem::path& path, std::span<const double> loss_trace) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::kIo, "cannot write " + path.string());
  out << "step,loss\n";
  std::array<char, 64> buf{};
  for (std::size_t i = 0; i < loss_trace.size(); ++i) {
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), loss_trace[i]);
    out << i << ',' << std::string_view(buf.data(), static_cast<std::size_t>(ptr - buf.data())) << '\n';
  }
}

}  // namespace capdpo::dpo
