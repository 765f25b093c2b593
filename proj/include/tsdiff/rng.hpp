#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tsdiff/common.hpp"

namespace tsdiff {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}
}  // namespace detail

// Deterministic RNG. Normal variates use non-caching Box-Muller so the
// stream state is exactly the engine state, which keeps checkpoint
// serialization trivial and results platform-independent (we never rely on
// std::normal_distribution, whose algorithm is implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(detail::splitmix64(seed)) {}

  // Derive an independent stream, e.g. derive(seed, "train") or per-shard
  // derive(seed, shard_index).
  static Rng derive(std::uint64_t seed, const std::string& tag) {
    return Rng(detail::splitmix64(seed ^ fnv1a(tag.data(), tag.size())));
  }
  static Rng derive(std::uint64_t seed, std::uint64_t index) {
    return Rng(detail::splitmix64(seed) ^ detail::splitmix64(index + 1));
  }

  double uniform() {  // [0, 1)
    return (engine_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // u1 in (0,1] so log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n) {
    // Rejection sampling avoids modulo bias.
    const std::uint64_t limit = engine_.max() - engine_.max() % n;
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[index(i)]);
    }
  }

  template <typename S>
  void fill_normal(std::vector<S>& out) {
    for (auto& x : out) x = static_cast<S>(normal());
  }

  std::string serialize() const {
    std::ostringstream ss;
    ss << engine_;
    return ss.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream ss(s);
    ss >> engine_;
    if (!ss) throw DataError("malformed RNG state string");
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tsdiff
