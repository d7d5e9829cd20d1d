#pragma once

// Shared plumbing: error types, deterministic RNG, hashing, parallel_for.

#include <cstdint>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace al {

enum class ErrKind { config, io, invalid, stage };

class Error : public std::runtime_error {
public:
  Error(ErrKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
  ErrKind kind;
};

[[noreturn]] inline void fail_config(const std::string& m) { throw Error(ErrKind::config, m); }
[[noreturn]] inline void fail_io(const std::string& m) { throw Error(ErrKind::io, m); }
[[noreturn]] inline void fail_invalid(const std::string& m) { throw Error(ErrKind::invalid, m); }
[[noreturn]] inline void fail_stage(const std::string& m) { throw Error(ErrKind::stage, m); }

inline void check(bool ok, const std::string& m, ErrKind k = ErrKind::invalid) {
  if (!ok) throw Error(k, m);
}

// --- hashing -----------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), h);
}

// Derive a child seed from a root seed and a stream name.
inline uint64_t derive_seed(uint64_t root, std::string_view stream) {
  uint64_t h = fnv1a64(&root, sizeof(root));
  return fnv1a64(stream, h);
}

// --- RNG ---------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// xoshiro256** seeded via splitmix64. One instance per logical stream.
class Rng {
public:
  explicit Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& w : s_) w = splitmix64(sm);
  }

  uint64_t next() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    uint64_t result = rotl(s_[1] * 5, 7) * 9;
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0,1) with 53 bits.
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  // Uniform in (0,1]; never zero (safe for log()).
  double uniform_pos() { return double((next() >> 11) + 1) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    uint64_t lim = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do { v = next(); } while (v >= lim);
    return v % n;
  }

  int range(int lo, int hi) {  // inclusive both ends
    return lo + int(below(uint64_t(hi - lo + 1)));
  }

  // Box-Muller; draws two uniforms, returns one gaussian. Stateless
  // between calls so call order alone determines the stream.
  double gaussian() {
    double u1 = uniform_pos();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

private:
  uint64_t s_[4];
};

// --- parallelism --------------------------------------------------------

// Worker cap: min(hardware, ANCHORLENS_THREADS if set). Always >= 1.
int worker_count();

// Static partition of [0,n) over workers; f(begin,end) per chunk. Chunks are
// contiguous and ordered, so callers can merge results deterministically by
// writing into disjoint slots. Runs inline when a single worker suffices.
void parallel_for(size_t n, const std::function<void(size_t, size_t)>& f);

}  // namespace al
