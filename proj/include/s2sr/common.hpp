#pragma once

// Shared plumbing: error types, shape helpers, deterministic RNG, env knobs.

#include <cstdint>
#include <cstdlib>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace s2sr {

using Shape = std::vector<int64_t>;

// Shape/contract violations detected before touching data.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Caller misuse (bad arguments, wrong mode). CLI maps this to exit code 1.
class UsageError : public std::invalid_argument {
 public:
  explicit UsageError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Bad external data (unreadable file, malformed stream). CLI exit code 2.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf reached a tensor; forward results must stay finite.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline int64_t ceil_to(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic generator. Distribution sampling is implemented here rather
// than with std:: distributions so streams are identical across compilers.
class Rng {
 public:
  explicit Rng(uint64_t seed) : s_(splitmix64(seed ? seed : 0x2545f4914f6cdd1dULL)) {
    for (int i = 0; i < 4; ++i) s_ = splitmix64(s_);
  }

  uint64_t next_u64() {
    s_ = splitmix64(s_);
    return s_;
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int64_t uniform_int(int64_t n) { return n > 0 ? int64_t(next_u64() % uint64_t(n)) : 0; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do { u1 = uniform(); } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Normal(0, std) resampled until inside +/- 2 std.
  double trunc_normal(double stddev) {
    double v;
    do { v = normal(); } while (std::fabs(v) > 2.0);
    return v * stddev;
  }

  // Independent child stream (e.g., per iteration or per sample).
  static Rng child(uint64_t seed, uint64_t stream) {
    return Rng(splitmix64(seed ^ (0x9e3779b97f4a7c15ULL * (stream + 1))));
  }

 private:
  uint64_t s_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

inline uint64_t env_seed(uint64_t fallback = 0) {
  if (const char* v = std::getenv("S2SR_SEED")) return std::strtoull(v, nullptr, 10);
  return fallback;
}

inline int env_threads() {
  if (const char* v = std::getenv("S2SR_THREADS")) {
    int n = std::atoi(v);
    if (n >= 1) return n;
  }
  return 0;  // 0 = library picks
}

}  // namespace s2sr
