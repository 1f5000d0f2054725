#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "duet/error.hpp"

namespace duet {

inline uint64_t splitmix64_next(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// xoshiro256++ with explicit, serializable state. All distributions are
// implemented here rather than with <random> so that streams are
// reproducible across standard-library versions and so that checkpointed
// state restores bit-exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : state_) w = splitmix64_next(sm);
    have_spare_ = false;
    spare_ = 0.0;
  }

  // Independent stream derived from (seed, stream_id). Used for
  // per-sequence sampling workers; results do not depend on how many
  // draws any other stream has made.
  static Rng stream(uint64_t seed, uint64_t stream_id) {
    uint64_t sm = seed;
    uint64_t a = splitmix64_next(sm);
    uint64_t b = stream_id + 0x9e3779b97f4a7c15ull;
    Rng r;
    r.reseed(a ^ (b * 0xbf58476d1ce4e5b9ull));
    return r;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 bits of precision.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    // Box-Muller; u1 in (0, 1] avoids log(0).
    const double u1 = 1.0 - uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  // Uniform integer in [0, n).
  uint64_t randint(uint64_t n) {
    if (n == 0) throw ValueError("randint: n must be positive");
    // Lemire's multiply-shift with rejection; unbiased.
    uint64_t x = next_u64();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    uint64_t l = static_cast<uint64_t>(m);
    if (l < n) {
      const uint64_t t = (0ull - n) % n;
      while (l < t) {
        x = next_u64();
        m = static_cast<__uint128_t>(x) * n;
        l = static_cast<uint64_t>(m);
      }
    }
    return static_cast<uint64_t>(m >> 64);
  }

  // Index draw from unnormalized non-negative weights.
  int categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0 || !std::isfinite(w)) throw ValueError("categorical: bad weight");
      total += w;
    }
    if (total <= 0.0) throw ValueError("categorical: weights sum to zero");
    double u = uniform01() * total;
    for (size_t i = 0; i + 1 < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(randint(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), returned sorted.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k < 0 || k > n) throw ValueError("sample_without_replacement: k out of range");
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    for (int i = 0; i < k; ++i) {
      const int j = i + static_cast<int>(randint(static_cast<uint64_t>(n - i)));
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
  }

  std::string serialize() const {
    std::ostringstream os;
    os << std::hex << state_[0] << " " << state_[1] << " " << state_[2] << " "
       << state_[3] << " " << (have_spare_ ? 1 : 0) << " ";
    union {
      double d;
      uint64_t u;
    } bits{};
    bits.d = spare_;
    os << bits.u;
    return os.str();
  }

  static Rng deserialize(const std::string& text) {
    Rng r;
    std::istringstream is(text);
    int spare_flag = 0;
    uint64_t spare_bits = 0;
    is >> std::hex >> r.state_[0] >> r.state_[1] >> r.state_[2] >> r.state_[3] >>
        spare_flag >> spare_bits;
    if (!is) throw ValueError("Rng::deserialize: malformed state string");
    r.have_spare_ = spare_flag != 0;
    union {
      double d;
      uint64_t u;
    } bits{};
    bits.u = spare_bits;
    r.spare_ = bits.d;
    return r;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_{};
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace duet
