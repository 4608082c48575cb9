#pragma once

#include "waves/core.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>

namespace waves {

struct Rule1D {
  std::vector<double> x;
  std::vector<double> w;
};

namespace detail {

inline Rule1D compute_gauss_legendre(int n) {
  Rule1D r;
  r.x.resize(n);
  r.w.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double z = std::cos(pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = 0.0;
      for (int k = 1; k <= n; ++k) {
        const double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
      }
      dp = n * (z * p0 - p1) / (z * z - 1.0);
      const double dz = p0 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-16) break;
    }
    // refresh the derivative at the converged root
    double p0 = 1.0, p1 = 0.0;
    for (int k = 1; k <= n; ++k) {
      const double p2 = p1;
      p1 = p0;
      p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
    }
    dp = n * (z * p0 - p1) / (z * z - 1.0);
    const double w = 2.0 / ((1.0 - z * z) * dp * dp);
    r.x[i] = -z;
    r.x[n - 1 - i] = z;
    r.w[i] = w;
    r.w[n - 1 - i] = w;
  }
  if (n % 2 == 1) r.x[n / 2] = 0.0;
  return r;
}

}  // namespace detail

// Gauss-Legendre rule on [-1, 1]; cached per order.
inline const Rule1D& gauss_legendre(int n) {
  if (n < 1 || n > 4096) throw DomainError("gauss_legendre: order out of range");
  static std::mutex mtx;
  static std::map<int, std::unique_ptr<Rule1D>> cache;
  std::lock_guard<std::mutex> lock(mtx);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<Rule1D>(detail::compute_gauss_legendre(n));
  return *slot;
}

// Gauss-Legendre rule mapped to [a, b].
inline Rule1D gauss_legendre(int n, double a, double b) {
  const Rule1D& ref = gauss_legendre(n);
  Rule1D r;
  r.x.resize(n);
  r.w.resize(n);
  const double h = 0.5 * (b - a), c = 0.5 * (a + b);
  for (int i = 0; i < n; ++i) {
    r.x[i] = c + h * ref.x[i];
    r.w[i] = h * ref.w[i];
  }
  return r;
}

// Composite rule: `panels` equal panels with an order-n Gauss rule each.
inline Rule1D composite_gauss(int panels, int n, double a, double b) {
  Rule1D r;
  r.x.reserve(static_cast<std::size_t>(panels) * n);
  r.w.reserve(static_cast<std::size_t>(panels) * n);
  const double step = (b - a) / panels;
  for (int p = 0; p < panels; ++p) {
    const Rule1D g = gauss_legendre(n, a + p * step, a + (p + 1) * step);
    r.x.insert(r.x.end(), g.x.begin(), g.x.end());
    r.w.insert(r.w.end(), g.w.begin(), g.w.end());
  }
  return r;
}

// Product rule on the unit sphere: Gauss-Legendre in cos(phi) with n nodes,
// trapezoid in psi with 2n nodes. Weights sum to 4*pi.
struct SphereRule {
  std::vector<Vec3> dirs;
  std::vector<double> w;
};

inline SphereRule sphere_rule(int n) {
  const Rule1D& g = gauss_legendre(n);
  SphereRule s;
  const int np = 2 * n;
  s.dirs.reserve(static_cast<std::size_t>(n) * np);
  s.w.reserve(static_cast<std::size_t>(n) * np);
  for (int i = 0; i < n; ++i) {
    const double z = g.x[i];
    const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
    for (int j = 0; j < np; ++j) {
      const double psi = two_pi * j / np;
      s.dirs.emplace_back(rho * std::cos(psi), rho * std::sin(psi), z);
      s.w.push_back(g.w[i] * two_pi / np);
    }
  }
  return s;
}

// Normalized spherical average (1/4pi) * integral of g, order doubled from 8
// until the relative change drops below tol.
inline double sphere_average(const std::function<double(const Vec3&)>& g,
                             double tol = 1e-9, int max_order = 1024) {
  auto eval = [&](int n) {
    const SphereRule s = sphere_rule(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < s.dirs.size(); ++i) acc += s.w[i] * g(s.dirs[i]);
    return acc / (4.0 * pi);
  };
  double prev = eval(8);
  for (int n = 16; n <= max_order; n *= 2) {
    const double cur = eval(n);
    if (std::abs(cur - prev) <= tol * std::max(1.0, std::abs(cur))) return cur;
    prev = cur;
    if (n * 2 > max_order) throw NumericError("sphere_average: no convergence", prev, cur);
  }
  throw NumericError("sphere_average: no convergence", prev, prev);
}

}  // namespace waves
