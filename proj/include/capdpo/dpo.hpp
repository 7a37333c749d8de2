#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace capdpo::dpo {

struct Shape {
  std::size_t n_contexts = 0;
  std::size_t seq_len = 0;
  std::size_t vocab = 0;

  std::size_t size() const { return n_contexts * seq_len * vocab; }
  bool operator==(const Shape&) const = default;
};

// Dense (context, position, vocab) array, row-major.
class LogitTensor {
 public:
  LogitTensor() = default;
  explicit LogitTensor(Shape shape);
  LogitTensor(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  std::span<double> row(std::size_t context, std::size_t position);
  std::span<const double> row(std::size_t context, std::size_t position) const;
  double& at(std::size_t context, std::size_t position, std::size_t token) {
    return values_[offset(context, position) + token];
  }
  double at(std::size_t context, std::size_t position, std::size_t token) const {
    return values_[offset(context, position) + token];
  }

  bool all_finite() const;
  bool operator==(const LogitTensor&) const = default;

 private:
  std::size_t offset(std::size_t context, std::size_t position) const {
    return (context * shape_.seq_len + position) * shape_.vocab;
  }

  Shape shape_;
  std::vector<double> values_;
};

// Tabular token-factorised policy: an independent categorical
// softmax(logits[c, t, :]) per (context, position).
class ToyPolicy {
 public:
  // All-zero logits, i.e. uniform.
  explicit ToyPolicy(Shape shape);
  // Throws NonFinite if any logit is NaN or infinite.
  explicit ToyPolicy(LogitTensor logits);

  // Logits drawn uniformly from [-scale, scale].
  static ToyPolicy random(Shape shape, std::uint64_t seed, double scale = 1.0);

  const Shape& shape() const { return logits_.shape(); }
  const LogitTensor& logits() const { return logits_; }
  LogitTensor& mutable_logits() { return logits_; }

  bool operator==(const ToyPolicy&) const = default;

 private:
  LogitTensor logits_;
};

struct DpoExample {
  std::size_t context = 0;
  std::vector<int> chosen;
  std::vector<int> rejected;
};

struct DpoConfig {
  double beta = 0.1;
  double learning_rate = 0.1;
  int epochs = 3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

// Stable softplus(x) = log(1 + e^x).
double softplus(double x);
double sigmoid(double x);

// Sum over positions of log softmax(logits[context, t])[tokens[t]].
double logprob(const ToyPolicy& policy, std::size_t context, std::span<const int> tokens);

// beta * [(log pi_theta(y_w) - log pi_ref(y_w)) - (log pi_theta(y_l) - log pi_ref(y_l))]
double preference_margin(const ToyPolicy& theta, const ToyPolicy& ref, const DpoExample& example, double beta);

// Batch mean of softplus(-margin) == -log sigmoid(margin).
double dpo_loss(const ToyPolicy& theta, const ToyPolicy& ref, std::span<const DpoExample> batch, double beta);

// d loss / d theta.logits. The reference policy receives no gradient.
LogitTensor dpo_grad(const ToyPolicy& theta, const ToyPolicy& ref, std::span<const DpoExample> batch, double beta);

struct TrainResult {
  ToyPolicy policy;
  // Batch loss before each update.
  std::vector<double> loss_trace;
};

std::size_t steps_per_epoch(std::size_t n_examples, std::size_t batch_size);

// Mini-batch gradient descent against a frozen copy of theta0, reshuffling
// once per epoch. Throws NonFinite (value = step index) on divergence.
TrainResult train(const ToyPolicy& theta0, std::span<const DpoExample> data, const DpoConfig& cfg);

double implicit_reward(const ToyPolicy& theta, const ToyPolicy& ref, std::size_t context, std::span<const int> tokens,
                       double beta);

struct Ranking {
  std::size_t best_index = 0;
  std::vector<double> rewards;
};

// Argmax of implicit reward; ties go to the lowest index.
Ranking rank_best_of_n(const ToyPolicy& theta, const ToyPolicy& ref, std::size_t context,
                       const std::vector<std::vector<int>>& candidates, double beta);

// Binary checkpoint: magic, version, endianness tag, shape, then row-major
// float64 logits.
void save_checkpoint(const std::filesystem::path& path, const ToyPolicy& policy);
ToyPolicy load_checkpoint(const std::filesystem::path& path);

void write_loss_csv(const std::filesystem::path& path, std::span<const double> loss_trace);

}  // namespace capdpo::dpo
