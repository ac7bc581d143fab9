#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace gatefuse {

/// 64-bit FNV-1a; used to derive substream keys and to hash datasets.
constexpr std::uint64_t fnv1a64(std::string_view bytes,
                                std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix_finalize(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based generator: the i-th draw of a stream is a pure function of
/// (key, i), so the whole state is the counter.
class Rng {
 public:
  Rng() = default;
  Rng(std::uint64_t seed, std::string_view stream)
      : key_(splitmix_finalize(seed ^ fnv1a64(stream))) {}

  std::uint64_t next_u64() noexcept {
    return splitmix_finalize(key_ + (counter_++) * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform on the open interval (0, 1).
  double uniform() noexcept {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Normal truncated to [-2 sigma, 2 sigma] by rejection.
  double truncated_normal(double sigma) noexcept {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= 2.0) return sigma * z;
    }
  }

  /// Standard Gumbel(0,1) via -log(-log(u)), u clamped away from {0, 1}.
  double gumbel() noexcept {
    double u = uniform();
    if (u < 1e-12) u = 1e-12;
    if (u > 1.0 - 1e-12) u = 1.0 - 1e-12;
    return -std::log(-std::log(u));
  }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    // Lemire's multiply-shift; bias is negligible at the sizes used here.
    __extension__ using u128 = unsigned __int128;
    return static_cast<std::uint64_t>((static_cast<u128>(next_u64()) * n) >> 64);
  }

  template <class T>
  void shuffle(std::vector<T>& v) noexcept {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  std::uint64_t counter() const noexcept { return counter_; }
  void set_counter(std::uint64_t c) noexcept { counter_ = c; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

/// Named substreams derived from one seed, so that adding draws to one
/// feature never shifts the draws of another.
class RngStreams {
 public:
  explicit RngStreams(std::uint64_t seed = 42) : seed_(seed) {}

  Rng& stream(const std::string& name) {
    auto it = streams_.find(name);
    if (it == streams_.end()) {
      it = streams_.emplace(name, Rng(seed_, name)).first;
    }
    return it->second;
  }

  std::uint64_t seed() const noexcept { return seed_; }

  std::map<std::string, std::uint64_t> counters() const {
    std::map<std::string, std::uint64_t> out;
    for (const auto& [name, rng] : streams_) out[name] = rng.counter();
    return out;
  }

  void restore(const std::map<std::string, std::uint64_t>& counters) {
    for (const auto& [name, c] : counters) stream(name).set_counter(c);
  }

 private:
  std::uint64_t seed_;
  std::map<std::string, Rng> streams_;
};

}  // namespace gatefuse
