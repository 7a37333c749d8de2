#include "capdpo/rng.hpp"

#include <limits>

namespace capdpo {

namespace {
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;
}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

StableHasher::StableHasher(std::uint64_t seed) : state_(kFnvOffset) { add(seed); }

void StableHasher::mix_byte(unsigned char b) {
  state_ ^= b;
  state_ *= kFnvPrime;
}

StableHasher& StableHasher::add(std::string_view text) {
  // Length prefix keeps ("ab","c") distinct from ("a","bc").
  add(static_cast<std::uint64_t>(text.size()));
  for (char c : text) mix_byte(static_cast<unsigned char>(c));
  return *this;
}

StableHasher& StableHasher::add(std::uint64_t value) {
  for (int i = 0; i < 8; ++i) mix_byte(static_cast<unsigned char>((value >> (8 * i)) & 0xff));
  return *this;
}

std::uint64_t StableHasher::finish() const { return splitmix64(state_); }

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n <= 1) return 0;
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - (std::numeric_limits<std::uint64_t>::max() % n);
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

double Rng::uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

Rng Rng::split(std::string_view label) const { return Rng(StableHasher(seed_).add(label).finish()); }

}  // namespace capdpo
