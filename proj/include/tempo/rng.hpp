#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace tempo {

// Deterministic random stream. mt19937_64 output is pinned by the standard;
// the distributions here are hand-rolled so results are identical across
// platforms and standard-library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), n > 0. Rejection sampling over a power-of-two
  // mask keeps the draw unbiased and platform-stable.
  uint64_t uniform_int(uint64_t n) {
    if (n <= 1) return 0;
    uint64_t mask = n - 1;
    mask |= mask >> 1;
    mask |= mask >> 2;
    mask |= mask >> 4;
    mask |= mask >> 8;
    mask |= mask >> 16;
    mask |= mask >> 32;
    for (;;) {
      uint64_t v = eng_() & mask;
      if (v < n) return v;
    }
  }

  // Standard normal via the Marsaglia polar method (no libm trig).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * m;
    has_spare_ = true;
    return u * m;
  }

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (size_t i = items.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  // Choose k distinct indices from [0, n) (partial Fisher-Yates); order of the
  // result is the draw order.
  std::vector<size_t> choose(size_t n, size_t k);

  // Independent child stream. Mixes the tag through splitmix64 so substreams
  // for nearby tags do not correlate.
  Rng substream(uint64_t tag) const;

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline std::vector<size_t> Rng::choose(size_t n, size_t k) {
  if (k > n) k = n;
  std::vector<size_t> pool(n);
  for (size_t i = 0; i < n; ++i) pool[i] = i;
  std::vector<size_t> out;
  out.reserve(k);
  for (size_t i = 0; i < k; ++i) {
    const size_t j = i + static_cast<size_t>(uniform_int(n - i));
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
  return out;
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline Rng Rng::substream(uint64_t tag) const {
  Rng copy = *this;
  const uint64_t base = copy.next_u64();
  return Rng(splitmix64(base ^ splitmix64(tag)));
}

}  // namespace tempo
