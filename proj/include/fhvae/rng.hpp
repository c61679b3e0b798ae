#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace fhvae {

// Counter-based random stream (splitmix64 finalizer over key + counter).
// Streams keyed by (seed, tag, ids...) are independent of evaluation order,
// so parallel producers of different streams draw identical values.
class Rng {
 public:
  explicit Rng(std::uint64_t k0, std::uint64_t k1 = 0, std::uint64_t k2 = 0,
               std::uint64_t k3 = 0, std::uint64_t k4 = 0) {
    key_ = mix(k0);
    key_ = mix(key_ ^ mix(k1 + 0x9e3779b97f4a7c15ULL));
    key_ = mix(key_ ^ mix(k2 + 0x3c6ef372fe94f82aULL));
    key_ = mix(key_ ^ mix(k3 + 0x78dde6e5fd29f045ULL));
    key_ = mix(key_ ^ mix(k4 + 0xb5c0fbcfec4d3b2fULL));
  }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // standard normal, Box-Muller; second member of each pair is cached
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // uniform integer in [0, n), unbiased
  std::uint64_t below(std::uint64_t n) {
    std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      std::uint64_t v = next_u64();
      if (v >= threshold) return v % n;
    }
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// Stream tags: every random draw in the project derives from one global seed
// through one of these, so sub-streams never alias.
namespace stream {
inline constexpr std::uint64_t kStimulusSource = 0x01;
inline constexpr std::uint64_t kSubjectMix = 0x02;
inline constexpr std::uint64_t kSubjectOffset = 0x03;
inline constexpr std::uint64_t kNoise = 0x04;
inline constexpr std::uint64_t kParamInit = 0x05;
inline constexpr std::uint64_t kBatch = 0x06;
inline constexpr std::uint64_t kTrainEps = 0x07;
inline constexpr std::uint64_t kEvalEps = 0x08;
inline constexpr std::uint64_t kProbe = 0x09;
inline constexpr std::uint64_t kFolds = 0x0a;
inline constexpr std::uint64_t kMixBase = 0x0b;
}  // namespace stream

}  // namespace fhvae
