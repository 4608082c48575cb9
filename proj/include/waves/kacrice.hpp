#pragma once

#include "waves/core.hpp"
#include "waves/lattice.hpp"
#include "waves/nodal.hpp"
#include "waves/quadrature.hpp"
#include "waves/randomwave.hpp"
#include "waves/surface.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <vector>

namespace waves {

inline constexpr double kDefaultC0 = 0.1;
inline constexpr std::size_t kCellPairCap = 40'000'000;
// Calibrated constant in meas(S) <= C R4; observed ratios 6 to 43 for m <= 59.
inline constexpr double kSingularConstant = 64.0;

// ---- cell grid over the chart domains --------------------------------------

// Parameter rectangle with five probes (corners and centre). Every point of
// the cell lies within `reach` of some probe and within `radius` of the
// centre probe (ambient distances).
struct Cell {
  int chart = 0;
  double u0 = 0, u1 = 0, v0 = 0, v1 = 0;
  std::array<Vec3, 5> probes;  // centre first
  double reach = 0;
  double radius = 0;
  double measure = 0;
};

struct CellGrid {
  double delta = 0;
  std::vector<Cell> cells;
};

// Cells of ambient side at most delta. With strict set, a chart narrower
// than delta is a resolution error.
inline CellGrid make_cell_grid(const Surface& s, double delta, bool strict = true) {
  if (!(delta > 0)) throw DomainError("cell grid: delta must be positive");
  CellGrid g;
  g.delta = delta;
  const Rule1D& g4 = gauss_legendre(4);
  for (std::size_t c = 0; c < s.charts.size(); ++c) {
    const auto& ch = s.charts[c];
    const auto [su, sv] = ch.max_stretch();
    const double lu = su * (ch.u1 - ch.u0), lv = sv * (ch.v1 - ch.v0);
    if (strict && (lu < delta || lv < delta)) {
      throw ResolutionError("cell grid: cell size " + std::to_string(delta) + " exceeds a chart extent");
    }
    const int nu = std::max(1, static_cast<int>(std::ceil(lu / delta)));
    const int nv = std::max(1, static_cast<int>(std::ceil(lv / delta)));
    const double stretch = std::hypot(su, sv);
    for (int i = 0; i < nu; ++i) {
      for (int k = 0; k < nv; ++k) {
        Cell cell;
        cell.chart = static_cast<int>(c);
        cell.u0 = ch.u0 + (ch.u1 - ch.u0) * i / nu;
        cell.u1 = ch.u0 + (ch.u1 - ch.u0) * (i + 1) / nu;
        cell.v0 = ch.v0 + (ch.v1 - ch.v0) * k / nv;
        cell.v1 = ch.v0 + (ch.v1 - ch.v0) * (k + 1) / nv;
        const double hu = 0.5 * (cell.u1 - cell.u0), hv = 0.5 * (cell.v1 - cell.v0);
        cell.probes = {ch.point(cell.u0 + hu, cell.v0 + hv), ch.point(cell.u0, cell.v0), ch.point(cell.u1, cell.v0),
                       ch.point(cell.u0, cell.v1), ch.point(cell.u1, cell.v1)};
        // Farthest point from {corner, centre} in a quarter rectangle lies on
        // the bisector: (hu^2 + hv^2) / (2 max(hu, hv)) in parameter units.
        cell.reach = stretch * (hu * hu + hv * hv) / (2 * std::max(hu, hv));
        cell.radius = stretch * std::hypot(hu, hv);
        double a = 0;
        for (std::size_t p = 0; p < g4.x.size(); ++p) {
          for (std::size_t q = 0; q < g4.x.size(); ++q) {
            a += g4.w[p] * g4.w[q] * ch.area_element(cell.u0 + hu * (1 + g4.x[p]), cell.v0 + hv * (1 + g4.x[q]));
          }
        }
        cell.measure = a * hu * hv;
        g.cells.push_back(cell);
      }
    }
  }
  if (g.cells.size() * g.cells.size() > kCellPairCap) {
    throw CapacityError("cell grid: too many cell pairs (" + std::to_string(g.cells.size()) + " cells)");
  }
  return g;
}

// Gauss nodes of the given order inside every cell, grouped by cell.
struct CellNodes {
  std::vector<SurfaceNode> nodes;
  std::vector<std::size_t> first;  // cell c owns nodes [first[c], first[c+1])
};

inline CellNodes cell_nodes(const Surface& s, const CellGrid& g, int order) {
  CellNodes out;
  for (const auto& cell : g.cells) {
    out.first.push_back(out.nodes.size());
    const auto part = chart_nodes(s, cell.chart, gauss_legendre(order, cell.u0, cell.u1),
                                  gauss_legendre(order, cell.v0, cell.v1));
    out.nodes.insert(out.nodes.end(), part.begin(), part.end());
  }
  out.first.push_back(out.nodes.size());
  return out;
}

namespace detail {

// cos and sin of 2 pi <mu, x> per point over the half set, so pair sums
// need no trigonometry.
struct Phases {
  std::size_t n_half = 0;
  std::vector<double> c, s;

  Phases(const std::vector<Vec3>& pts, const Spectrum& sp) : n_half(sp.mu.size()) {
    c.resize(pts.size() * n_half);
    s.resize(pts.size() * n_half);
    parallel_for(pts.size(), [&](std::size_t i) {
      for (std::size_t h = 0; h < n_half; ++h) {
        const double th = two_pi * sp.mu[h].dot(pts[i]);
        c[i * n_half + h] = std::cos(th);
        s[i * n_half + h] = std::sin(th);
      }
    });
  }
};

inline double phase_r(const Phases& a, std::size_t i, const Phases& b, std::size_t j, double scale) {
  const double* ca = &a.c[i * a.n_half];
  const double* sa = &a.s[i * a.n_half];
  const double* cb = &b.c[j * b.n_half];
  const double* sb = &b.s[j * b.n_half];
  double r = 0;
  for (std::size_t h = 0; h < a.n_half; ++h) r += ca[h] * cb[h] + sa[h] * sb[h];
  return scale * r;
}

// Jet of r at (x_i, y_j); `second` adds the Hessian.
inline CovarianceJet phase_jet(const Phases& a, std::size_t i, const Phases& b, std::size_t j, const Spectrum& sp,
                               bool second) {
  const double* ca = &a.c[i * a.n_half];
  const double* sa = &a.s[i * a.n_half];
  const double* cb = &b.c[j * b.n_half];
  const double* sb = &b.s[j * b.n_half];
  CovarianceJet jet;
  double r = 0;
  Vec3 d = Vec3::Zero();
  double hxx = 0, hyy = 0, hzz = 0, hxy = 0, hxz = 0, hyz = 0;
  for (std::size_t h = 0; h < a.n_half; ++h) {
    const double cc = ca[h] * cb[h] + sa[h] * sb[h];
    const double ss = sa[h] * cb[h] - ca[h] * sb[h];
    const Vec3& mu = sp.mu[h];
    r += cc;
    d -= ss * mu;
    if (second) {
      hxx += cc * mu[0] * mu[0];
      hyy += cc * mu[1] * mu[1];
      hzz += cc * mu[2] * mu[2];
      hxy += cc * mu[0] * mu[1];
      hxz += cc * mu[0] * mu[2];
      hyz += cc * mu[1] * mu[2];
    }
  }
  const double scale = 2.0 / static_cast<double>(sp.n_points);
  jet.r = scale * r;
  jet.D = scale * two_pi * d;
  if (second) {
    const double k = -scale * two_pi * two_pi;
    jet.H << hxx, hxy, hxz, hxy, hyy, hyz, hxz, hyz, hzz;
    jet.H *= k;
  }
  return jet;
}

inline std::vector<Vec3> node_points(const std::vector<SurfaceNode>& nodes) {
  std::vector<Vec3> p;
  p.reserve(nodes.size());
  for (const auto& n : nodes) p.push_back(n.x);
  return p;
}

}  // namespace detail

// ---- moments of r ----------------------------------------------------------

// R_k = double integral of r^k over Sigma x Sigma. Cells of a quarter
// wavelength (shrunk for large k) with Gauss orders 4 and 5; the order-5
// value is returned and their gap must stay within tol.
inline double moment_Rk(const LatticeSet& set, const Surface& s, int k, double tol = 1e-3) {
  if (k < 0) throw DomainError("moment_Rk: k must be nonnegative");
  if (set.points.empty()) throw DomainError("moment_Rk: empty lattice set");
  if (k == 0) return s.area * s.area;
  const Spectrum sp = Spectrum::of(set);
  const double cell = 0.25 / std::sqrt(static_cast<double>(set.m)) / std::max(1.0, 0.5 * k);
  const CellGrid g = make_cell_grid(s, cell, false);
  const double scale = 2.0 / static_cast<double>(sp.n_points);
  auto integrate = [&](int order) {
    const CellNodes cn = cell_nodes(s, g, order);
    const detail::Phases ph(detail::node_points(cn.nodes), sp);
    std::vector<double> rows(cn.nodes.size()), mags(cn.nodes.size());
    parallel_for(cn.nodes.size(), [&](std::size_t i) {
      double acc = 0, mag = 0;
      for (std::size_t j = 0; j < cn.nodes.size(); ++j) {
        const double v = std::pow(detail::phase_r(ph, i, ph, j, scale), k) * cn.nodes[j].w;
        acc += v;
        mag += std::abs(v);
      }
      rows[i] = cn.nodes[i].w * acc;
      mags[i] = cn.nodes[i].w * mag;
    });
    return std::pair{ordered_sum(rows), ordered_sum(mags)};
  };
  const auto [lo, lo_mag] = integrate(4);
  const auto [hi, hi_mag] = integrate(5);
  if (std::abs(hi - lo) > tol * std::max(std::abs(hi), hi_mag * 1e-3)) {
    throw NumericError("moment_Rk: quadrature orders 4 and 5 disagree", lo, hi);
  }
  return hi;
}

// ---- singular partition ----------------------------------------------------

struct SingularPartition {
  double c0 = kDefaultC0;
  double delta = 0;
  CellGrid grid;
  std::vector<std::uint8_t> flags;  // row-major over cell pairs, symmetric
  double singular_measure = 0;
  std::size_t flagged_pairs = 0;

  bool flagged(std::size_t a, std::size_t b) const { return flags[a * grid.cells.size() + b] != 0; }
};

// A cell pair is flagged when some probe pair (p, q) admits |r| > 1/2
// within reach: |r(p,q)| + |D| (d_a + d_b) + M (d_a + d_b)^2 / 2, using
// |d^2 r| <= M |e|^2 along any joint displacement. A centre-only bound
// with cell radii clears most far pairs first.
inline SingularPartition singular_partition(const LatticeSet& set, const Surface& s, double c0 = kDefaultC0) {
  if (!(c0 > 0)) throw DomainError("singular_partition: c0 must be positive");
  if (set.points.empty()) throw DomainError("singular_partition: empty lattice set");
  SingularPartition part;
  part.c0 = c0;
  part.delta = c0 / std::sqrt(static_cast<double>(set.m));
  part.grid = make_cell_grid(s, part.delta, true);
  const Spectrum sp = Spectrum::of(set);
  const double M = gradient_variance(set.m);
  const auto& cells = part.grid.cells;
  const std::size_t nc = cells.size();
  std::vector<Vec3> probes;
  for (const auto& c : cells) probes.insert(probes.end(), c.probes.begin(), c.probes.end());
  const detail::Phases ph(probes, sp);
  part.flags.assign(nc * nc, 0);
  auto exceeds = [&](const CovarianceJet& j, double d) {
    return std::abs(j.r) + j.D.norm() * d + 0.5 * M * d * d > 0.5;
  };
  parallel_for(nc, [&](std::size_t a) {
    for (std::size_t b = a; b < nc; ++b) {
      bool flag = false;
      const auto centre = detail::phase_jet(ph, 5 * a, ph, 5 * b, sp, false);
      if (exceeds(centre, cells[a].radius + cells[b].radius)) {
        const double d = cells[a].reach + cells[b].reach;
        for (std::size_t p = 0; p < 5 && !flag; ++p) {
          for (std::size_t q = 0; q < 5 && !flag; ++q) {
            flag = exceeds(detail::phase_jet(ph, 5 * a + p, ph, 5 * b + q, sp, false), d);
          }
        }
      }
      part.flags[a * nc + b] = flag;
      part.flags[b * nc + a] = flag;
    }
  });
  std::vector<double> rows(nc, 0.0);
  for (std::size_t a = 0; a < nc; ++a) {
    for (std::size_t b = 0; b < nc; ++b) {
      if (part.flags[a * nc + b]) {
        rows[a] += cells[a].measure * cells[b].measure;
        ++part.flagged_pairs;
      }
    }
  }
  part.singular_measure = ordered_sum(rows);
  return part;
}

inline nlohmann::json to_json(const SingularPartition& p) {
  return {{"c0", p.c0},
          {"delta", p.delta},
          {"cells", p.grid.cells.size()},
          {"flagged_pairs", p.flagged_pairs},
          {"singular_measure", p.singular_measure}};
}

// ---- trace integrals -------------------------------------------------------

struct MomentReport {
  std::int64_t m = 0;
  std::size_t n_points = 0;
  double A = 0;
  double H = 0;  // normal-tensor quartic moment against the projected lattice
  double R2 = 0, R4 = 0;
  double R2_nonsingular = 0;
  double trX_int = 0, trXp_int = 0, trYY_int = 0;
  double pred_R2 = 0, pred_trX = 0, pred_trYY = 0;
  double res_R2 = 0, res_trX = 0, res_trXp = 0, res_trYY = 0;
  double quadrature_gap = 0;  // largest |order q - order q+1| over the four sums
  double singular_measure = 0;
  double singular_fraction = 0;  // share of Sigma^2 measure in flagged cells
  bool resolution_flag = false;  // more than 20% excised
  double c0 = kDefaultC0;
};

// Integrals of r^2, tr X, tr X', tr(Y'Y) over Sigma^2 minus the flagged
// cells, by Gauss rules of order q and q + 1 inside each cell.
inline MomentReport trace_integrals(const LatticeSet& set, const Surface& s, double c0 = kDefaultC0, int order = 2) {
  const SingularPartition part = singular_partition(set, s, c0);
  const Spectrum sp = Spectrum::of(set);
  const auto m = set.m;
  const double N = static_cast<double>(set.n_points());
  const std::size_t nc = part.grid.cells.size();
  auto integrate = [&](int q) {
    const CellNodes cn = cell_nodes(s, part.grid, q);
    const detail::Phases ph(detail::node_points(cn.nodes), sp);
    std::vector<std::array<double, 4>> rows(nc);
    parallel_for(nc, [&](std::size_t a) {
      std::array<double, 4> acc{};
      for (std::size_t b = 0; b < nc; ++b) {
        if (part.flagged(a, b)) continue;
        for (std::size_t i = cn.first[a]; i < cn.first[a + 1]; ++i) {
          const auto& x = cn.nodes[i];
          for (std::size_t j = cn.first[b]; j < cn.first[b + 1]; ++j) {
            const auto& y = cn.nodes[j];
            const CovarianceJet jet = detail::phase_jet(ph, i, ph, j, sp, true);
            const TraceTriple t = kacrice_traces(jet, x.n, y.n, m);
            const double w = x.w * y.w;
            acc[0] += w * jet.r * jet.r;
            acc[1] += w * t.trX;
            acc[2] += w * t.trXp;
            acc[3] += w * t.trYY;
          }
        }
      }
      rows[a] = acc;
    });
    std::array<double, 4> out{};
    for (int k = 0; k < 4; ++k) {
      std::vector<double> col(nc);
      for (std::size_t a = 0; a < nc; ++a) col[a] = rows[a][k];
      out[k] = ordered_sum(col);
    }
    return out;
  };
  const auto lo = integrate(order);
  const auto hi = integrate(order + 1);
  MomentReport rep;
  rep.m = m;
  rep.n_points = set.n_points();
  rep.c0 = c0;
  rep.A = s.area;
  const double a2 = s.area * s.area;
  rep.H = integral_H(s, set).value;
  rep.R2 = moment_Rk(set, s, 2);
  rep.R4 = moment_Rk(set, s, 4);
  rep.R2_nonsingular = hi[0];
  rep.trX_int = hi[1];
  rep.trXp_int = hi[2];
  rep.trYY_int = hi[3];
  for (int k = 0; k < 4; ++k) rep.quadrature_gap = std::max(rep.quadrature_gap, std::abs(hi[k] - lo[k]));
  rep.pred_R2 = a2 / N;
  rep.pred_trX = -2 * a2 / N;
  rep.pred_trYY = 3 / N * (a2 + 3 * rep.H);
  rep.res_R2 = rep.R2 - rep.pred_R2;
  rep.res_trX = rep.trX_int - rep.pred_trX;
  rep.res_trXp = rep.trXp_int - rep.pred_trX;
  rep.res_trYY = rep.trYY_int - rep.pred_trYY;
  rep.singular_measure = part.singular_measure;
  rep.singular_fraction = part.singular_measure / a2;
  rep.resolution_flag = rep.singular_fraction > 0.2;
  (void)nc;
  return rep;
}

inline nlohmann::json to_json(const MomentReport& r) {
  return {{"m", r.m},
          {"N", r.n_points},
          {"A", r.A},
          {"H", r.H},
          {"c0", r.c0},
          {"R2", r.R2},
          {"R4", r.R4},
          {"R2_nonsingular", r.R2_nonsingular},
          {"trX", r.trX_int},
          {"trXp", r.trXp_int},
          {"trYY", r.trYY_int},
          {"predictions", {{"R2", r.pred_R2}, {"trX", r.pred_trX}, {"trXp", r.pred_trX}, {"trYY", r.pred_trYY}}},
          {"residuals", {{"R2", r.res_R2}, {"trX", r.res_trX}, {"trXp", r.res_trXp}, {"trYY", r.res_trYY}}},
          {"error_budget",
           {{"quadrature_gap", r.quadrature_gap},
            {"singular_measure", r.singular_measure},
            {"singular_fraction", r.singular_fraction},
            {"resolution_flag", r.resolution_flag}}}};
}

// ---- approximate variance --------------------------------------------------

struct ApproxVariance {
  double value = 0;
  double M = 0;
  MomentReport moments;
  bool hypothesis_warning = false;
};

// M (R2/8 + tr X/16 + tr X'/16 + tr(Y'Y)/32) over Sigma^2 minus the
// singular cells; the excised measure is reported, not estimated.
inline ApproxVariance approx_variance(const LatticeSet& set, const Surface& s, double c0 = kDefaultC0) {
  ApproxVariance v;
  v.moments = trace_integrals(set, s, c0);
  v.M = gradient_variance(set.m);
  const auto& mr = v.moments;
  v.value = v.M * (mr.R2_nonsingular / 8 + mr.trX_int / 16 + mr.trXp_int / 16 + mr.trYY_int / 32);
  v.hypothesis_warning = !s.curvature_nonvanishing;
  return v;
}

inline nlohmann::json to_json(const ApproxVariance& v) {
  return {{"value", v.value}, {"M", v.M}, {"hypothesis_warning", v.hypothesis_warning}, {"moments", to_json(v.moments)}};
}

// ---- exact second moment ---------------------------------------------------

// Below |s - s'| sqrt(m) = kDiagonalFloor the two-point density is replaced
// by its diagonal limit sqrt(m) / (sqrt(3) |s - s'|), whose relative error
// there is about 1e-4. Closer pairs make Theta-hat too ill conditioned.
inline constexpr double kDiagonalFloor = 6e-3;

// M k2 at a pair of surface points.
inline double two_point_density(const Spectrum& sp, std::int64_t m, const Vec3& x, const Vec3& nx, const Vec3& y,
                                const Vec3& ny, double tol = 1e-8) {
  const double d = (x - y).norm();
  if (d * std::sqrt(static_cast<double>(m)) < kDiagonalFloor) return std::sqrt(static_cast<double>(m) / 3.0) / d;
  const CovarianceJet jet = covariance_jet(sp, x, y);
  const KacRiceMatrices k = kacrice_matrices(jet, nx, ny, m);
  return gradient_variance(m) * k2_exact(k, jet.r, K2Method::deterministic, 0, tol).value;
}

// Smooth cutoff: 1 at t <= 0, 0 at t >= 1, flat to all orders at both ends.
inline double band_cutoff(double t) {
  if (t <= 0) return 1.0;
  if (t >= 1) return 0.0;
  const double a = std::exp(-1.0 / t), b = std::exp(-1.0 / (1.0 - t));
  return b / (a + b);
}

struct SecondMomentOptions {
  double band = 0.5;  // cutoff radius in units of 1/sqrt(m)
  int order = 3;         // Gauss order per outer cell
  double spacing = 0.3;  // outer node spacing as a fraction of the halved band
  int n_phi = 16;
  int n_s = 10;
  double tol = 2e-3;  // relative band-halving tolerance
  double k2_tol = 1e-8;
};

struct SecondMoment {
  double value = 0;        // E[L^2] with the full band
  double value_half = 0;   // with the band halved
  double band_gap = 0;     // |value - value_half| / value
  double outer = 0, inner = 0;
  double mean_sq = 0;      // predict_mean^2
  double variance = 0;     // value - mean_sq
  double band = 0;         // ambient cutoff radius
  double tol = 0;
};

namespace detail {

// Polar integral of K2 psi(|s - s'| / band) around one node. Spherical
// surfaces use geodesic polar coordinates (clipped at the hemisphere rim);
// single-chart surfaces use parameter polar coordinates clipped to the
// chart rectangle.
struct DiscIntegrator {
  const Surface& s;
  const Spectrum& sp;
  std::int64_t m;
  const SecondMomentOptions& opt;
  bool spherical = false;
  Vec3 centre = Vec3::Zero(), pole = Vec3::Zero();
  double R = 0;
  bool clipped = false;
  double sigma_min = 1;

  DiscIntegrator(const Surface& surf, const Spectrum& spec, std::int64_t mm, const SecondMomentOptions& o)
      : s(surf), sp(spec), m(mm), opt(o) {
    if (const auto* sph = std::get_if<SphereSpec>(&s.spec)) {
      spherical = true;
      centre = sph->center;
      R = sph->radius;
    } else if (const auto* hem = std::get_if<HemisphereSpec>(&s.spec)) {
      spherical = true;
      clipped = true;
      centre = hem->center;
      R = hem->radius;
      pole = hem->pole.normalized();
    } else {
      if (s.charts.size() != 1) throw DomainError("exact_second_moment: unsupported multi-chart surface");
      const auto& ch = s.charts[0];
      sigma_min = std::numeric_limits<double>::infinity();
      const int k = 33;
      for (int i = 0; i < k; ++i) {
        for (int l = 0; l < k; ++l) {
          const ChartJet j = ch.jet(ch.u0 + (ch.u1 - ch.u0) * i / (k - 1), ch.v0 + (ch.v1 - ch.v0) * l / (k - 1));
          Eigen::Matrix2d gram;
          gram << j.du.dot(j.du), j.du.dot(j.dv), j.du.dot(j.dv), j.dv.dot(j.dv);
          sigma_min = std::min(sigma_min, std::sqrt(Eigen::SelfAdjointEigenSolver<Mat2>(gram).eigenvalues()[0]));
        }
      }
    }
  }

  double operator()(const SurfaceNode& x, double band) const {
    const Rule1D& gs = gauss_legendre(opt.n_s);
    double total = 0;
    for (int p = 0; p < opt.n_phi; ++p) {
      const double phi = two_pi * (p + 0.5) / opt.n_phi;
      double smax = 0;
      std::function<std::pair<Vec3, Vec3>(double, double*)> at;  // point, normal; writes Jacobian
      Vec3 e1, e2, n0;
      if (spherical) {
        n0 = (x.x - centre).normalized();
        const Vec3 helper = std::abs(n0[0]) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
        e1 = (helper - helper.dot(n0) * n0).normalized();
        e2 = n0.cross(e1);
        const Vec3 t = std::cos(phi) * e1 + std::sin(phi) * e2;
        smax = band >= 2 * R ? pi * R : 2 * R * std::asin(band / (2 * R));
        if (clipped) {
          // first alpha > 0 with <n0, pole> cos(alpha) + <t, pole> sin(alpha) = 0
          const double np = n0.dot(pole), tp = t.dot(pole);
          const double alpha = std::atan2(tp, np) + 0.5 * pi;
          smax = std::min(smax, R * alpha);
        }
        at = [this, n0, t](double sv, double* jac) {
          const double a = sv / R;
          const Vec3 dir = std::cos(a) * n0 + std::sin(a) * t;
          *jac = R * std::sin(a);
          return std::pair{Vec3(centre + R * dir), dir};
        };
      } else {
        const auto& ch = s.charts[0];
        const double cu = std::cos(phi), cv = std::sin(phi);
        smax = 1.25 * band / sigma_min;
        if (cu > 0) smax = std::min(smax, (ch.u1 - x.u) / cu);
        if (cu < 0) smax = std::min(smax, (ch.u0 - x.u) / cu);
        if (cv > 0) smax = std::min(smax, (ch.v1 - x.v) / cv);
        if (cv < 0) smax = std::min(smax, (ch.v0 - x.v) / cv);
        at = [&ch, &x, cu, cv](double sv, double* jac) {
          const ChartJet j = ch.jet(x.u + sv * cu, x.v + sv * cv);
          const Vec3 cr = j.du.cross(j.dv);
          *jac = cr.norm() * sv;
          return std::pair{j.p, Vec3(cr.normalized())};
        };
      }
      if (!(smax > 0)) continue;
      double ray = 0;
      for (std::size_t k = 0; k < gs.x.size(); ++k) {
        const double sv = 0.5 * smax * (gs.x[k] + 1);
        double jac = 0;
        const auto [y, ny] = at(sv, &jac);
        const double psi = band_cutoff((x.x - y).norm() / band);
        if (psi == 0.0) continue;
        ray += 0.5 * smax * gs.w[k] * jac * psi * two_point_density(sp, m, x.x, x.n, y, ny, opt.k2_tol);
      }
      total += ray;
    }
    return total * two_pi / opt.n_phi;
  }
};

}  // namespace detail

// E[L^2] = double integral of M k2 over Sigma^2. The diagonal is split off by
// the cutoff psi(|s - s'| / band): the far part (1 - psi) M k2 uses Gauss
// nodes in cells, the near part is a polar integral around each node where
// the 1/|s - s'| blow-up is absorbed by the Jacobian. Repeating with the
// band halved must agree within tol.
inline SecondMoment exact_second_moment(const LatticeSet& set, const Surface& s, const SecondMomentOptions& opt = {}) {
  if (set.points.empty()) throw DomainError("exact_second_moment: empty lattice set");
  const Spectrum sp = Spectrum::of(set);
  const auto m = set.m;
  SecondMoment out;
  out.tol = opt.tol;
  out.band = opt.band / std::sqrt(static_cast<double>(m));
  const double b1 = out.band, b2 = 0.5 * out.band;
  const CellGrid g = make_cell_grid(s, opt.spacing * b2 * opt.order, false);
  const CellNodes cn = cell_nodes(s, g, opt.order);
  const auto& nodes = cn.nodes;
  const std::size_t n = nodes.size();

  std::vector<double> far1(n, 0.0), far2(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    double a1 = 0, a2 = 0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = (nodes[i].x - nodes[j].x).norm();
      const double w1 = 1.0 - band_cutoff(d / b1), w2 = 1.0 - band_cutoff(d / b2);
      if (w2 < 1e-12) continue;  // w1 <= w2
      const double k = two_point_density(sp, m, nodes[i].x, nodes[i].n, nodes[j].x, nodes[j].n, opt.k2_tol);
      a1 += nodes[j].w * w1 * k;
      a2 += nodes[j].w * w2 * k;
    }
    far1[i] = 2 * nodes[i].w * a1;
    far2[i] = 2 * nodes[i].w * a2;
  });

  const detail::DiscIntegrator disc(s, sp, m, opt);
  std::vector<double> near1(n), near2(n);
  parallel_for(n, [&](std::size_t i) {
    near1[i] = nodes[i].w * disc(nodes[i], b1);
    near2[i] = nodes[i].w * disc(nodes[i], b2);
  });

  out.outer = ordered_sum(far1);
  out.inner = ordered_sum(near1);
  out.value = out.outer + out.inner;
  out.value_half = ordered_sum(far2) + ordered_sum(near2);
  out.band_gap = std::abs(out.value - out.value_half) / out.value;
  out.mean_sq = std::pow(predict_mean(m, s), 2);
  out.variance = out.value - out.mean_sq;
  if (out.band_gap > opt.tol) {
    throw NumericError("exact_second_moment: band halving changed the result beyond tolerance", out.value_half,
                       out.value);
  }
  return out;
}

inline nlohmann::json to_json(const SecondMoment& s) {
  return {{"E_L2", s.value},   {"E_L2_half_band", s.value_half}, {"band_gap", s.band_gap}, {"outer", s.outer},
          {"inner", s.inner},  {"mean_sq", s.mean_sq},           {"variance", s.variance}, {"band", s.band},
          {"tol", s.tol}};
}

}  // namespace waves
