#ifndef ICFG_RNG_HPP_
#define ICFG_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace icfg {

// FNV-1a, used to derive stable per-key seeds. std::hash is not portable
// across implementations, this is.
inline uint64_t stable_hash(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ull) {
  uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  // splitmix64 finalizer over the xor
  uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Deterministic RNG. All sampling goes through explicit formulas on raw
// mt19937_64 output so results are identical on every platform; the
// std::*_distribution classes are implementation-defined and unusable here.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t u64() { return gen_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // uniform integer in [0, n)
  int uniform_int(int n) {
    return n <= 1 ? 0 : static_cast<int>(gen_() % static_cast<uint64_t>(n));
  }

  // standard normal via Box-Muller; no caching, call cost is two uniforms
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // independent child stream; deterministic given parent state
  Rng fork() { return Rng(hash_combine(gen_(), 0x5eedf0ull)); }
  Rng fork(uint64_t tag) { return Rng(hash_combine(gen_(), tag)); }

 private:
  std::mt19937_64 gen_;
};

}  // namespace icfg

#endif  // ICFG_RNG_HPP_
