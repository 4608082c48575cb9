#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace waves {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline constexpr double pi = std::numbers::pi;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

// Error taxonomy. The CLI maps DomainError/CapacityError/GeometryError/
// RegularityError/ResolutionError (bad inputs) to exit code 2 and
// MatrixError/NumericError to exit code 3.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : Error { using Error::Error; };
struct CapacityError : Error { using Error::Error; };
struct GeometryError : Error { using Error::Error; };
struct RegularityError : Error { using Error::Error; };
struct ResolutionError : Error { using Error::Error; };
struct MatrixError : Error { using Error::Error; };

// Raised when order doubling fails; carries the last two estimates.
struct NumericError : Error {
  double previous = 0.0;
  double last = 0.0;
  NumericError(const std::string& what, double prev, double cur)
      : Error(what + " (last estimates " + std::to_string(prev) + ", " +
              std::to_string(cur) + ")"),
        previous(prev),
        last(cur) {}
  explicit NumericError(const std::string& what) : Error(what) {}
};

// Worker count: WAVES_THREADS if set, otherwise hardware concurrency.
inline unsigned thread_count() {
  if (const char* env = std::getenv("WAVES_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return static_cast<unsigned>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

// Static block partition of [0, n). Each index is handled by exactly one
// worker, so callers that write per-index slots get reproducible output
// regardless of the thread count.
template <class F>
void parallel_for(std::size_t n, F&& body) {
  const std::size_t workers = std::min<std::size_t>(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = n * w / workers;
    const std::size_t hi = n * (w + 1) / workers;
    pool.emplace_back([lo, hi, w, &body, &errors] {
      try {
        for (std::size_t i = lo; i < hi; ++i) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Fixed-order (pairwise) summation so reductions do not depend on threads.
inline double ordered_sum(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
  if (hi - lo <= 8) {
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += v[i];
    return s;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  return ordered_sum(v, lo, mid) + ordered_sum(v, mid, hi);
}

inline double ordered_sum(const std::vector<double>& v) {
  return ordered_sum(v, 0, v.size());
}

}  // namespace waves
