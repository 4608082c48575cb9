#pragma once

#include "waves/core.hpp"
#include "waves/philox.hpp"
#include "waves/quadrature.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

namespace waves {

// Largest m accepted by enumerate(); the scan is O(m).
inline constexpr std::int64_t kEnumerateCap = 100'000'000;
// max_coplanar scans all point triples.
inline constexpr std::size_t kCoplanarCap = 400;
// spectral_correlations4 pairs pair-sums with pair-sums: O(N^4) worst case.
inline constexpr double kCorrelationBudget = 1e9;

struct LatticePoint {
  std::array<std::int64_t, 3> mu{};

  std::int64_t norm2() const { return mu[0] * mu[0] + mu[1] * mu[1] + mu[2] * mu[2]; }
  Vec3 vec() const { return Vec3(double(mu[0]), double(mu[1]), double(mu[2])); }
  LatticePoint operator-() const { return {{-mu[0], -mu[1], -mu[2]}}; }
  auto operator<=>(const LatticePoint&) const = default;
};

struct LatticeSet {
  std::int64_t m = 0;
  std::vector<LatticePoint> points;
  std::vector<std::size_t> half_set;
  bool representable = false;
  bool admissible = false;

  std::size_t n_points() const { return points.size(); }
};

struct ProjectedSet {
  std::vector<Vec3> directions;
  std::int64_t m = 0;
};

inline bool is_admissible(std::int64_t m) {
  const std::int64_t r = m % 8;
  return m > 0 && r != 0 && r != 4 && r != 7;
}

// Legendre's three-square criterion: m != 4^l (8k + 7).
inline bool is_representable(std::int64_t m) {
  if (m <= 0) return m == 0;
  while (m % 4 == 0) m /= 4;
  return m % 8 != 7;
}

inline std::int64_t isqrt(std::int64_t n) {
  auto r = static_cast<std::int64_t>(std::sqrt(static_cast<double>(n)));
  while (r * r > n) --r;
  while ((r + 1) * (r + 1) <= n) ++r;
  return r;
}

inline LatticeSet enumerate(std::int64_t m) {
  if (m < 1) throw DomainError("enumerate: m must be positive");
  if (m > kEnumerateCap) throw CapacityError("enumerate: m exceeds cap 1e8");
  LatticeSet set;
  set.m = m;
  set.admissible = is_admissible(m);
  const std::int64_t s = isqrt(m);
  for (std::int64_t a = -s; a <= s; ++a) {
    const std::int64_t ra = m - a * a;
    const std::int64_t sb = isqrt(ra);
    for (std::int64_t b = -sb; b <= sb; ++b) {
      const std::int64_t rc = ra - b * b;
      const std::int64_t c = isqrt(rc);
      if (c * c != rc) continue;
      if (c == 0) {
        set.points.push_back({{a, b, 0}});
      } else {
        set.points.push_back({{a, b, -c}});
        set.points.push_back({{a, b, c}});
      }
    }
  }
  set.representable = !set.points.empty();
  for (std::size_t i = 0; i < set.points.size(); ++i) {
    if (set.points[i] > -set.points[i]) set.half_set.push_back(i);
  }
  return set;
}

inline ProjectedSet project(const LatticeSet& set) {
  if (set.points.empty()) throw DomainError("project: empty lattice set");
  ProjectedSet p;
  p.m = set.m;
  const double r = std::sqrt(static_cast<double>(set.m));
  p.directions.reserve(set.points.size());
  for (const auto& q : set.points) p.directions.push_back(q.vec() / r);
  return p;
}

inline double riesz_energy(const ProjectedSet& proj, double s) {
  if (proj.directions.size() < 2) throw DomainError("riesz_energy: need at least two points");
  if (!(s > 0.0)) throw DomainError("riesz_energy: s must be positive");
  const auto& d = proj.directions;
  const std::size_t n = d.size();
  std::vector<double> rows(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    double acc = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dist = (d[i] - d[j]).norm();
      if (dist == 0.0) throw DomainError("riesz_energy: duplicate points");
      acc += std::pow(dist, -s);
    }
    rows[i] = acc;
  });
  return 2.0 * ordered_sum(rows);
}

inline std::size_t cap_count(const LatticeSet& set, const Vec3& center, double s) {
  if (set.points.empty()) throw DomainError("cap_count: empty lattice set");
  if (s < 0.0) throw DomainError("cap_count: negative radius");
  const double r = std::sqrt(static_cast<double>(set.m));
  const Vec3 c = center.normalized() * r;
  const double lim = s + 1e-9 * std::max(1.0, r);
  std::size_t count = 0;
  for (const auto& q : set.points) {
    if ((q.vec() - c).norm() <= lim) ++count;
  }
  return count;
}

// Lower bound for the cap maximum: centers at every lattice direction plus
// n_random uniformly distributed centers drawn from the given seed.
inline std::size_t max_cap_count(const LatticeSet& set, double s, std::size_t n_random = 256,
                                 std::uint64_t seed = 1) {
  if (set.points.empty()) throw DomainError("max_cap_count: empty lattice set");
  std::vector<Vec3> centers;
  for (const auto& q : set.points) centers.push_back(q.vec().normalized());
  for (std::size_t i = 0; i < n_random; ++i) {
    const auto [u1, u2] = philox_uniform_pair(seed, i, 0x6361ull);
    const double z = 2.0 * u1 - 1.0;
    const double rho = std::sqrt(1.0 - z * z);
    centers.emplace_back(rho * std::cos(two_pi * u2), rho * std::sin(two_pi * u2), z);
  }
  std::size_t best = 0;
  for (const auto& c : centers) best = std::max(best, cap_count(set, c, s));
  return best;
}

namespace detail {

struct PlaneKey {
  std::int64_t a, b, c, d;
  bool operator==(const PlaneKey&) const = default;
};

struct PlaneKeyHash {
  std::size_t operator()(const PlaneKey& k) const noexcept {
    std::uint64_t h = 1469598103934665603ull;
    for (std::int64_t v : {k.a, k.b, k.c, k.d}) {
      h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};

}  // namespace detail

// Maximal number of points of the set on a common affine plane.
inline std::size_t max_coplanar(const LatticeSet& set) {
  const auto& p = set.points;
  const std::size_t n = p.size();
  if (n > kCoplanarCap) throw CapacityError("max_coplanar: N exceeds brute-force cap");
  if (n < 3) return n;
  // A plane holding k points is hit by C(k,3) triples.
  std::unordered_map<detail::PlaneKey, std::uint64_t, detail::PlaneKeyHash> triples;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const std::array<std::int64_t, 3> u{p[j].mu[0] - p[i].mu[0], p[j].mu[1] - p[i].mu[1],
                                           p[j].mu[2] - p[i].mu[2]};
      for (std::size_t k = j + 1; k < n; ++k) {
        const std::array<std::int64_t, 3> v{p[k].mu[0] - p[i].mu[0], p[k].mu[1] - p[i].mu[1],
                                             p[k].mu[2] - p[i].mu[2]};
        std::int64_t a = u[1] * v[2] - u[2] * v[1];
        std::int64_t b = u[2] * v[0] - u[0] * v[2];
        std::int64_t c = u[0] * v[1] - u[1] * v[0];
        if (a == 0 && b == 0 && c == 0) continue;  // collinear; impossible on a sphere
        const std::int64_t g = std::gcd(std::gcd(std::abs(a), std::abs(b)), std::abs(c));
        a /= g;
        b /= g;
        c /= g;
        if (a < 0 || (a == 0 && (b < 0 || (b == 0 && c < 0)))) {
          a = -a;
          b = -b;
          c = -c;
        }
        const std::int64_t d = a * p[i].mu[0] + b * p[i].mu[1] + c * p[i].mu[2];
        ++triples[{a, b, c, d}];
      }
    }
  }
  std::uint64_t most = 0;
  for (const auto& kv : triples) most = std::max(most, kv.second);
  std::size_t k = 3;
  while (static_cast<std::uint64_t>(k) * (k - 1) * (k - 2) / 6 < most) ++k;
  return k;
}

struct SpectralCorrelations {
  std::uint64_t count = 0;
  std::uint64_t paired_count = 0;
  double offdiag_inv_sq_sum = 0.0;
};

inline SpectralCorrelations spectral_correlations4(const LatticeSet& set) {
  const std::size_t n = set.points.size();
  const double nd = static_cast<double>(n);
  if (nd * nd * nd * nd > kCorrelationBudget) {
    throw CapacityError("spectral_correlations4: N^4 exceeds brute-force budget");
  }
  // Multiplicity of each pair sum mu1 + mu2.
  std::unordered_map<std::uint64_t, std::uint64_t> mult;
  const std::int64_t off = 1 << 20;
  auto pack = [off](std::int64_t x, std::int64_t y, std::int64_t z) {
    return (static_cast<std::uint64_t>(x + off) << 42) | (static_cast<std::uint64_t>(y + off) << 21) |
           static_cast<std::uint64_t>(z + off);
  };
  for (const auto& a : set.points) {
    for (const auto& b : set.points) {
      ++mult[pack(a.mu[0] + b.mu[0], a.mu[1] + b.mu[1], a.mu[2] + b.mu[2])];
    }
  }
  struct Sum {
    std::uint64_t key;
    std::array<std::int64_t, 3> v;
    std::uint64_t c;
  };
  std::vector<Sum> sums;
  sums.reserve(mult.size());
  const std::uint64_t mask = (1ull << 21) - 1;
  for (const auto& [key, c] : mult) {
    sums.push_back({key,
                    {static_cast<std::int64_t>(key >> 42) - off,
                     static_cast<std::int64_t>((key >> 21) & mask) - off,
                     static_cast<std::int64_t>(key & mask) - off},
                    c});
  }
  std::sort(sums.begin(), sums.end(), [](const Sum& x, const Sum& y) { return x.key < y.key; });

  SpectralCorrelations out;
  for (const auto& s : sums) {
    const auto it = mult.find(pack(-s.v[0], -s.v[1], -s.v[2]));
    if (it != mult.end()) out.count += s.c * it->second;
  }
  // Tuples made of two antipodal pairs: mu2=-mu1 with mu4=-mu3, or
  // mu3=-mu1 with mu4=-mu2, or mu4=-mu1 with mu3=-mu2; inclusion-exclusion
  // removes the overlaps (each pairwise overlap has N tuples, the triple one 0).
  out.paired_count = 3 * static_cast<std::uint64_t>(n) * n - 3 * static_cast<std::uint64_t>(n);

  std::vector<double> rows(sums.size(), 0.0);
  parallel_for(sums.size(), [&](std::size_t i) {
    double acc = 0.0;
    const auto& a = sums[i];
    for (const auto& b : sums) {
      const std::int64_t x = a.v[0] + b.v[0], y = a.v[1] + b.v[1], z = a.v[2] + b.v[2];
      const std::int64_t q = x * x + y * y + z * z;
      if (q != 0) acc += static_cast<double>(a.c * b.c) / static_cast<double>(q);
    }
    rows[i] = acc;
  });
  out.offdiag_inv_sq_sum = ordered_sum(rows);
  return out;
}

inline double directional_moment(const LatticeSet& set, int i, int j, int k, int l) {
  if (i < 0 || i > 2 || j < 0 || j > 2 || i == j) throw DomainError("directional_moment: bad axes");
  if (k + l != 4 || k < 0 || k > l) throw DomainError("directional_moment: need k + l = 4, 0 <= k <= l");
  if (set.points.empty()) throw DomainError("directional_moment: empty lattice set");
  __int128 acc = 0;
  for (const auto& p : set.points) {
    __int128 t = 1;
    for (int e = 0; e < k; ++e) t *= p.mu[i];
    for (int e = 0; e < l; ++e) t *= p.mu[j];
    acc += t;
  }
  if (acc == 0) return 0.0;
  const double md = static_cast<double>(set.m);
  return static_cast<double>(acc) / (md * md * static_cast<double>(set.points.size()));
}

struct TauIntegral {
  double tau_value = 0.0;
  double uniform_value = 0.0;
  double gap = 0.0;
};

inline TauIntegral integrate_against_tau(const LatticeSet& set,
                                         const std::function<double(const Vec3&)>& g) {
  const ProjectedSet p = project(set);
  std::vector<double> vals;
  vals.reserve(p.directions.size());
  for (const auto& d : p.directions) vals.push_back(g(d));
  TauIntegral out;
  out.tau_value = ordered_sum(vals) / static_cast<double>(vals.size());
  out.uniform_value = sphere_average(g, 1e-9);
  out.gap = std::abs(out.tau_value - out.uniform_value);
  return out;
}

inline nlohmann::json to_json(const LatticeSet& set) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : set.points) pts.push_back({p.mu[0], p.mu[1], p.mu[2]});
  return {{"m", set.m}, {"N", set.points.size()}, {"admissible", set.admissible}, {"points", pts}};
}

}  // namespace waves
