#pragma once

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace qsr {

using Vec3 = Eigen::Vector3d;

// Error hierarchy. Each kind maps onto a distinct CLI exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

#define QSR_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                        \
   public:                                                           \
    using Error::Error;                                              \
    const char* kind() const noexcept override { return tag; }       \
  };

QSR_DEFINE_ERROR(InvalidArgument, "invalid-argument")
QSR_DEFINE_ERROR(ShapeError, "shape")
QSR_DEFINE_ERROR(FormatError, "format")
QSR_DEFINE_ERROR(UnsupportedError, "unsupported")
QSR_DEFINE_ERROR(ConfigError, "config")
QSR_DEFINE_ERROR(NumericalError, "numerical")
QSR_DEFINE_ERROR(StateError, "state")
QSR_DEFINE_ERROR(CheckpointError, "checkpoint")
QSR_DEFINE_ERROR(IoError, "io")

#undef QSR_DEFINE_ERROR

// splitmix64 finalizer; the basis of all counter-based randomness.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) noexcept {
  return mix64(a ^ (mix64(b) + 0x632BE59BD9B4E019ull + (a << 6) + (a >> 2)));
}

template <typename... Rest>
constexpr std::uint64_t hash_seed(std::uint64_t first, Rest... rest) noexcept {
  std::uint64_t h = mix64(first);
  ((h = hash_combine(h, static_cast<std::uint64_t>(rest))), ...);
  return h;
}

// Uniform double in [0, 1) from 53 random bits.
constexpr double unit_from_bits(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Small deterministic generator with portable bounded draws. std::
// distributions are implementation-defined, these are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(mix64(seed)) {}

  std::uint64_t next() noexcept {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix64(state_);
  }
  double uniform() noexcept { return unit_from_bits(next()); }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw InvalidArgument("Rng::below: empty range");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r;
    do {
      r = next();
    } while (r >= limit);
    return static_cast<std::size_t>(r % n);
  }

  double normal() noexcept {
    // Box-Muller; u1 kept away from zero.
    const double u1 = (static_cast<double>(next() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t state_;
};

// Worker-thread count for embarrassingly parallel stages. Results never
// depend on this value.
inline std::size_t& thread_count() {
  static std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

// Runs fn(i) for i in [0, n). Each index is independent.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// Diagnostics go to stderr, filtered by QSR_LOG={error,info,debug}.
enum class LogLevel { error = 0, info = 1, debug = 2 };

inline LogLevel parse_log_level(const char* s) {
  if (!s) return LogLevel::info;
  const std::string v(s);
  if (v == "error") return LogLevel::error;
  if (v == "debug") return LogLevel::debug;
  return LogLevel::info;
}

inline LogLevel& log_level() {
  static LogLevel level = parse_log_level(std::getenv("QSR_LOG"));
  return level;
}

inline void log_message(LogLevel level, const std::string& msg) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  static std::mutex m;
  std::lock_guard lock(m);
  const char* tag = level == LogLevel::error ? "error" : level == LogLevel::info ? "info" : "debug";
  std::cerr << "[" << tag << "] " << msg << "\n";
}

inline void log_info(const std::string& msg) { log_message(LogLevel::info, msg); }
inline void log_debug(const std::string& msg) { log_message(LogLevel::debug, msg); }
inline void log_warning(const std::string& msg) { log_message(LogLevel::info, "warning: " + msg); }

}  // namespace qsr
