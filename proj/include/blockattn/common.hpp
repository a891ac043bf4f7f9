#pragma once

#include <cstdint>
#include <cstdlib>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace blockattn {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct StateError : std::runtime_error {
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a kernel would materialize more scratch than the caller's budget.
struct BudgetError : std::runtime_error {
  explicit BudgetError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline void check_config(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64 has a fully specified bit stream; the
// value transforms below are hand-rolled so that draws are identical across
// standard library implementations (std::*_distribution is not portable).
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ^ 0x9e3779b97f4a7c15ull) {
    // splitmix64 warmup decorrelates small consecutive seeds
    for (int i = 0; i < 4; ++i) next_u64();
  }

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  // Box-Muller, no cached spare so the draw count stays predictable
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  std::uint64_t state_;
};

// FNV-1a over a label, folded with the base seed: gives each named parameter
// its own stream so adding a module does not shift unrelated draws.
inline std::uint64_t derive_seed(std::uint64_t base, const std::string& label) {
  std::uint64_t h = 1469598103934665603ull;
  for (const char ch : label) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ull;
  }
  return h ^ (base * 0x9e3779b97f4a7c15ull + 0xd1b54a32d192ed03ull);
}

// ---------------------------------------------------------------------------
// Intra-op parallelism. Work is partitioned over whole output elements and
// every element keeps its fixed single-threaded reduction order, so results
// are bit-identical for any thread count.
// ---------------------------------------------------------------------------

inline int& thread_cap_ref() {
  static int cap = [] {
    const char* env = std::getenv("BLOCKATTN_THREADS");
    if (env != nullptr) {
      const int v = std::atoi(env);
      if (v >= 1) return v > 64 ? 64 : v;
    }
    return 1;
  }();
  return cap;
}

inline int thread_cap() { return thread_cap_ref(); }

inline void set_thread_cap(int cap) {
  if (cap < 1) cap = static_cast<int>(std::thread::hardware_concurrency());
  if (cap < 1) cap = 1;
  thread_cap_ref() = cap > 64 ? 64 : cap;
}

template <class Fn>
inline void parallel_for(std::int64_t n, Fn&& body) {
  const int threads = thread_cap();
  if (threads <= 1 || n < 2) {
    for (std::int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  const int used = static_cast<int>(std::min<std::int64_t>(threads, n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(used));
  const std::int64_t chunk = (n + used - 1) / used;
  for (int t = 0; t < used; ++t) {
    const std::int64_t lo = t * chunk;
    const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body] {
      for (std::int64_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

template <class T>
inline bool all_finite(const std::vector<T>& values) {
  for (const T v : values) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

}  // namespace blockattn
