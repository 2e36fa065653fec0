#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace oet {

// splitmix64: used to fan a single run seed out to per-stage / per-trial
// seeds. Fixed constants, stable across platforms.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// FNV-1a over a string, folded with splitmix64. Stable seed derivation for
// (run seed, label, index) tuples such as per-trial generation seeds.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : label) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return splitmix64(base ^ splitmix64(h) ^ splitmix64(index * 0x9e3779b97f4a7c15ull + 1));
}

// 64-bit linear congruential generator (Knuth MMIX constants:
// a = 6364136223846793005, c = 1442695040888963407, modulus 2^64).
// Deliberately tiny and exactly specified so dataset shuffles reproduce
// across implementations and languages.
class Lcg64 {
 public:
  explicit Lcg64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ = state_ * 6364136223846793005ull + 1442695040888963407ull;
    return state_;
  }

  // Uniform in [0, n). Uses the top 32 bits; modulo bias is negligible for
  // the list sizes involved and keeps the definition one line.
  std::uint64_t bounded(std::uint64_t n) { return (next() >> 32) % n; }

  // Fisher-Yates, back to front.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

// Deterministic uniform double in [0,1) from a raw 64-bit draw. Used instead
// of std::uniform_real_distribution, whose output is not pinned by the
// standard.
inline double u64_to_unit_double(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

}  // namespace oet
