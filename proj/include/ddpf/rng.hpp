#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace ddpf {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
inline std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}
}  // namespace detail

// xoshiro256++ with splitmix64 seeding. Streams are keyed by up to three
// 64-bit labels mixed into the seed, giving independent substreams for
// (iteration, unit) pairs without any shared state. Same key, same draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) { reseed(seed); }

  static Rng keyed(std::uint64_t seed, std::uint64_t k1, std::uint64_t k2 = 0,
                   std::uint64_t k3 = 0) {
    std::uint64_t st = seed;
    std::uint64_t a = detail::splitmix64(st);
    st ^= k1 * 0x9e3779b97f4a7c15ULL;
    a ^= detail::splitmix64(st);
    st ^= k2 * 0xd1b54a32d192ed03ULL;
    a ^= detail::splitmix64(st);
    st ^= k3 * 0x8cb92ba72f3d8dd7ULL;
    a ^= detail::splitmix64(st);
    return Rng(a);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = detail::rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = detail::rotl(s_[3], 45);
    return result;
  }

  // uniform on (0,1): never returns 0 or 1
  double uniform() {
    std::uint64_t u = next_u64() >> 11;  // 53 bits
    double x = (static_cast<double>(u) + 0.5) * 0x1.0p-53;
    return x;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // Marsaglia polar
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  double exponential() { return -std::log(uniform()); }

  // Marsaglia-Tsang; requires shape >= 1
  double gamma_mt(double shape, double rate) {
    double d = shape - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      double u = uniform();
      double x2 = x * x;
      if (u < 1.0 - 0.0331 * x2 * x2) return d * v / rate;
      if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v / rate;
    }
  }

  double gamma(double shape, double rate = 1.0) {
    if (shape >= 1.0) return gamma_mt(shape, rate);
    // boost by one and scale back; can underflow for tiny shapes
    double g = gamma_mt(shape + 1.0, rate);
    return g * std::pow(uniform(), 1.0 / shape);
  }

  // log of a Gamma(shape,1) draw; stable for arbitrarily small shapes where
  // the draw itself would underflow
  double log_gamma(double shape) {
    if (shape >= 1.0) return std::log(gamma_mt(shape, 1.0));
    double g = gamma_mt(shape + 1.0, 1.0);
    return std::log(g) + std::log(uniform()) / shape;
  }

  // Beta draw via two log-space gamma draws; safe for tiny shapes. The
  // result is clamped inside (0,1) so downstream invariants hold even when
  // the true value is below double resolution.
  double beta(double a, double b) {
    double lga = log_gamma(a);
    double lgb = log_gamma(b);
    double d = lgb - lga;  // sigma = 1/(1+exp(d))
    double x;
    if (d > 36.0) {
      x = std::exp(-d);
    } else if (d < -36.0) {
      x = 1.0 - std::exp(d);
    } else {
      x = 1.0 / (1.0 + std::exp(d));
    }
    const double lo = std::numeric_limits<double>::min();
    const double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
    if (x < lo) x = lo;
    if (x > hi) x = hi;
    return x;
  }

  // standard normal conditioned on Z > a (Robert's exponential rejection in
  // the tail, plain rejection otherwise)
  double std_normal_above(double a) {
    if (a <= 0.0) {
      for (;;) {
        double z = normal();
        if (z > a) return z;
      }
    }
    if (a < 0.75) {
      for (;;) {
        double z = normal();
        if (z > a) return z;
      }
    }
    double lambda = 0.5 * (a + std::sqrt(a * a + 4.0));
    for (;;) {
      double x = a + exponential() / lambda;
      double diff = x - lambda;
      if (std::log(uniform()) < -0.5 * diff * diff) return x;
    }
  }

  // N(mu, sd^2) conditioned on X > lo
  double normal_above(double mu, double sd, double lo) {
    return mu + sd * std_normal_above((lo - mu) / sd);
  }

  // N(mu, sd^2) conditioned on X < hi
  double normal_below(double mu, double sd, double hi) {
    return mu - sd * std_normal_above((mu - hi) / sd);
  }

  // multinomial by CDF inversion; probs need not be normalized
  std::vector<long long> multinomial(long long n, std::span<const double> probs) {
    std::size_t k = probs.size();
    std::vector<double> cdf(k);
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      acc += probs[i] > 0.0 ? probs[i] : 0.0;
      cdf[i] = acc;
    }
    std::vector<long long> counts(k, 0);
    if (acc <= 0.0) return counts;
    for (long long t = 0; t < n; ++t) {
      double u = uniform() * acc;
      std::size_t lo = 0, hi = k - 1;
      while (lo < hi) {
        std::size_t mid = (lo + hi) / 2;
        if (u <= cdf[mid]) hi = mid; else lo = mid + 1;
      }
      ++counts[lo];
    }
    return counts;
  }

  // index draw proportional to nonnegative weights
  std::size_t pick(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      acc += weights[i];
      if (u <= acc) return i;
    }
    return weights.empty() ? 0 : weights.size() - 1;
  }

 private:
  void reseed(std::uint64_t seed) {
    std::uint64_t st = seed;
    for (auto& s : s_) s = detail::splitmix64(st);
    has_spare_ = false;
  }

  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Stream labels used to key substreams throughout the library. Keeping them
// in one place avoids accidental collisions between modules.
namespace stream {
inline constexpr std::uint64_t kPriorSigma = 1;
inline constexpr std::uint64_t kPriorFactors = 2;
inline constexpr std::uint64_t kSimulate = 3;
inline constexpr std::uint64_t kChainInit = 4;
inline constexpr std::uint64_t kChainT = 5;
inline constexpr std::uint64_t kChainQ = 6;
inline constexpr std::uint64_t kChainSigma = 7;
inline constexpr std::uint64_t kChainX = 8;
inline constexpr std::uint64_t kChainFactors = 9;
inline constexpr std::uint64_t kEmRow = 10;
inline constexpr std::uint64_t kEta = 11;
inline constexpr std::uint64_t kCluster = 12;
}  // namespace stream

}  // namespace ddpf
