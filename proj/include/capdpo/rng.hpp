#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

namespace capdpo {

// Stable 64-bit hashing of tagged tuples. Results are identical across
// platforms and runs; used to derive per-sample and per-group seeds.
class StableHasher {
 public:
  explicit StableHasher(std::uint64_t seed = 0);

  StableHasher& add(std::string_view text);
  StableHasher& add(std::uint64_t value);
  StableHasher& add(std::int64_t value) { return add(static_cast<std::uint64_t>(value)); }
  StableHasher& add(int value) { return add(static_cast<std::uint64_t>(static_cast<std::int64_t>(value))); }

  std::uint64_t finish() const;

 private:
  void mix_byte(unsigned char b);

  std::uint64_t state_;
};

std::uint64_t splitmix64(std::uint64_t x);

// Seedable, splittable generator. Engine is mt19937_64; draws use portable
// rejection sampling so streams do not depend on the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n);
  // Uniform real in [0, 1) with 53 random bits.
  double uniform01();
  // Independent child stream keyed by a label; does not advance this stream.
  Rng split(std::string_view label) const;

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_index(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace capdpo
