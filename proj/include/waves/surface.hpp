#pragma once

#include "waves/core.hpp"
#include "waves/lattice.hpp"
#include "waves/quadrature.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <charconv>
#include <cmath>
#include <complex>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>

namespace waves {

// Position and derivatives of a chart at a parameter point.
struct ChartJet {
  Vec3 p, du, dv, duu, duv, dvv;
};

struct SurfaceChart {
  std::function<ChartJet(double, double)> gamma;
  double u0 = 0, u1 = 1, v0 = 0, v1 = 1;

  ChartJet jet(double u, double v) const { return gamma(u, v); }
  Vec3 point(double u, double v) const { return gamma(u, v).p; }

  static Vec3 normal_of(const ChartJet& j) { return j.du.cross(j.dv).normalized(); }
  static double area_element_of(const ChartJet& j) { return j.du.cross(j.dv).norm(); }

  // Gauss-Kronecker curvature det(II)/det(I).
  static double curvature_of(const ChartJet& j) {
    const Vec3 n = normal_of(j);
    const double e = j.du.dot(j.du), f = j.du.dot(j.dv), g = j.dv.dot(j.dv);
    const double l = j.duu.dot(n), mm = j.duv.dot(n), nn = j.dvv.dot(n);
    return (l * nn - mm * mm) / (e * g - f * f);
  }

  Vec3 normal(double u, double v) const { return normal_of(jet(u, v)); }
  double area_element(double u, double v) const { return area_element_of(jet(u, v)); }
  double curvature(double u, double v) const { return curvature_of(jet(u, v)); }

  // Largest |gamma_u| and |gamma_v| over a sample grid.
  std::pair<double, double> max_stretch(int samples = 33) const {
    double su = 0, sv = 0;
    for (int i = 0; i < samples; ++i) {
      for (int k = 0; k < samples; ++k) {
        const double u = u0 + (u1 - u0) * i / (samples - 1);
        const double v = v0 + (v1 - v0) * k / (samples - 1);
        const ChartJet j = jet(u, v);
        su = std::max(su, j.du.norm());
        sv = std::max(sv, j.dv.norm());
      }
    }
    return {su, sv};
  }
};

struct PolyTerm {
  int i = 0, j = 0;
  double c = 0;
};

struct SphereSpec {
  Vec3 center{0.5, 0.5, 0.5};
  double radius = 0.2;
};
struct HemisphereSpec {
  Vec3 center{0.5, 0.5, 0.5};
  double radius = 0.2;
  Vec3 pole{0, 0, 1};
};
// Graph (u, v, h(u, v)) with h = sum c (u - uc)^i (v - vc)^j.
struct MongeSpec {
  std::vector<PolyTerm> terms;
  double u0 = 0.3, u1 = 0.7, v0 = 0.3, v1 = 0.7;
  double uc = 0.5, vc = 0.5;
};
struct PlaneSpec {
  Vec3 origin{0.3, 0.3, 0.5};
  Vec3 a{1, 0, 0};
  Vec3 b{0, 1, 0};
  double eu = 0.4, ev = 0.4;
};
// (phi, psi) patch of c + (a sin phi cos psi, b sin phi sin psi, c cos phi).
struct EllipsoidSpec {
  Vec3 center{0.5, 0.5, 0.5};
  Vec3 axes{0.3, 0.25, 0.2};
  double phi0 = 0.3, phi1 = 1.2, psi0 = 0.0, psi1 = 1.5;
};

using SurfaceSpec = std::variant<SphereSpec, HemisphereSpec, MongeSpec, PlaneSpec, EllipsoidSpec>;

enum class SurfaceKind { sphere, hemisphere, monge, plane, ellipsoid };

struct Surface {
  std::vector<SurfaceChart> charts;
  double area = 0;
  bool curvature_nonvanishing = false;
  std::string label;
  SurfaceKind kind = SurfaceKind::sphere;
  SurfaceSpec spec;
};

// Quadrature node on a surface; w includes the area element.
struct SurfaceNode {
  Vec3 x;
  Vec3 n;
  double w = 0;
  int chart = 0;
  double u = 0, v = 0;
};

// Tensor rule on every chart from per-direction 1D rules.
inline std::vector<SurfaceNode> chart_nodes(const Surface& s, std::size_t c, const Rule1D& ru,
                                            const Rule1D& rv) {
  std::vector<SurfaceNode> out;
  out.reserve(ru.x.size() * rv.x.size());
  const auto& ch = s.charts[c];
  for (std::size_t i = 0; i < ru.x.size(); ++i) {
    for (std::size_t k = 0; k < rv.x.size(); ++k) {
      const ChartJet j = ch.jet(ru.x[i], rv.x[k]);
      const Vec3 cr = j.du.cross(j.dv);
      const double a = cr.norm();
      out.push_back({j.p, cr / a, ru.w[i] * rv.w[k] * a, static_cast<int>(c), ru.x[i], rv.x[k]});
    }
  }
  return out;
}

inline std::vector<SurfaceNode> surface_nodes(const Surface& s, int order, int panels = 1) {
  std::vector<SurfaceNode> out;
  for (std::size_t c = 0; c < s.charts.size(); ++c) {
    const auto& ch = s.charts[c];
    const Rule1D ru = composite_gauss(panels, order, ch.u0, ch.u1);
    const Rule1D rv = composite_gauss(panels, order, ch.v0, ch.v1);
    auto part = chart_nodes(s, c, ru, rv);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

using PointFunction = std::function<double(const SurfaceNode&)>;
using PairFunction = std::function<double(const SurfaceNode&, const SurfaceNode&)>;

inline double quadrature_single(const Surface& s, const PointFunction& f, double tol = 1e-8,
                                int max_order = 512) {
  auto eval = [&](int n) {
    const auto nodes = surface_nodes(s, n);
    double acc = 0, mag = 0;
    for (const auto& nd : nodes) {
      const double v = f(nd);
      acc += nd.w * v;
      mag += nd.w * std::abs(v);
    }
    return std::pair{acc, mag};
  };
  auto [prev, mag] = eval(8);
  for (int n = 16; n <= max_order; n *= 2) {
    const auto [cur, mg] = eval(n);
    if (std::abs(cur - prev) <= tol * std::max(std::abs(cur), mg)) return cur;
    if (2 * n > max_order) throw NumericError("quadrature_single: no convergence", prev, cur);
    prev = cur;
  }
  throw NumericError("quadrature_single: no convergence", prev, prev);
}

// Double integral over Sigma x Sigma with an optional diagonal exclusion band
// |x - x'| < band (band <= 0 disables it).
inline double quadrature_double(const Surface& s, const PairFunction& f, double band = 0.0,
                                double tol = 1e-8, int max_order = 64) {
  auto eval = [&](int n) {
    const auto nodes = surface_nodes(s, n);
    std::vector<double> rows(nodes.size()), mags(nodes.size());
    parallel_for(nodes.size(), [&](std::size_t i) {
      double acc = 0, mag = 0;
      for (const auto& b : nodes) {
        if (band > 0 && (nodes[i].x - b.x).norm() < band) continue;
        const double v = f(nodes[i], b);
        acc += b.w * v;
        mag += b.w * std::abs(v);
      }
      rows[i] = nodes[i].w * acc;
      mags[i] = nodes[i].w * mag;
    });
    return std::pair{ordered_sum(rows), ordered_sum(mags)};
  };
  auto [prev, mag] = eval(8);
  for (int n = 16; n <= max_order; n *= 2) {
    const auto [cur, mg] = eval(n);
    if (std::abs(cur - prev) <= tol * std::max(std::abs(cur), mg)) return cur;
    if (2 * n > max_order) throw NumericError("quadrature_double: no convergence", prev, cur);
    prev = cur;
  }
  throw NumericError("quadrature_double: no convergence", prev, prev);
}

namespace detail {

inline double poly_eval(const std::vector<PolyTerm>& t, double x, double y, int dx, int dy) {
  double acc = 0;
  for (const auto& term : t) {
    if (term.i < dx || term.j < dy) continue;
    double coef = term.c;
    for (int k = 0; k < dx; ++k) coef *= term.i - k;
    for (int k = 0; k < dy; ++k) coef *= term.j - k;
    acc += coef * std::pow(x, term.i - dx) * std::pow(y, term.j - dy);
  }
  return acc;
}

// Ellipsoid-type chart c + (a sin(phi)cos(psi) e1 + b sin(phi)sin(psi) e2 + c cos(phi) e3).
inline SurfaceChart spherical_chart(const Vec3& center, const Vec3& axes, const Mat3& frame,
                                    double phi0, double phi1, double psi0, double psi1) {
  SurfaceChart ch;
  ch.u0 = phi0;
  ch.u1 = phi1;
  ch.v0 = psi0;
  ch.v1 = psi1;
  ch.gamma = [=](double phi, double psi) {
    const double sp = std::sin(phi), cp = std::cos(phi), ss = std::sin(psi), cs = std::cos(psi);
    auto map = [&](double x, double y, double z) {
      return Vec3(frame.col(0) * (axes[0] * x) + frame.col(1) * (axes[1] * y) + frame.col(2) * (axes[2] * z));
    };
    ChartJet j;
    j.p = center + map(sp * cs, sp * ss, cp);
    j.du = map(cp * cs, cp * ss, -sp);
    j.dv = map(-sp * ss, sp * cs, 0);
    j.duu = map(-sp * cs, -sp * ss, -cp);
    j.duv = map(-cp * ss, cp * cs, 0);
    j.dvv = map(-sp * cs, -sp * ss, 0);
    return j;
  };
  return ch;
}

inline Mat3 frame_with_pole(const Vec3& pole) {
  const Vec3 e3 = pole.normalized();
  const Vec3 helper = std::abs(e3[0]) < 0.9 ? Vec3(1, 0, 0) : Vec3(0, 1, 0);
  const Vec3 e1 = (helper - helper.dot(e3) * e3).normalized();
  const Vec3 e2 = e3.cross(e1);
  Mat3 f;
  f.col(0) = e1;
  f.col(1) = e2;
  f.col(2) = e3;
  return f;
}

inline void check_fits_cell(const Surface& s) {
  const int k = 65;
  for (const auto& ch : s.charts) {
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        const Vec3 p = ch.point(ch.u0 + (ch.u1 - ch.u0) * i / (k - 1), ch.v0 + (ch.v1 - ch.v0) * j / (k - 1));
        for (int d = 0; d < 3; ++d) {
          if (!(p[d] > 0.0 && p[d] < 1.0)) {
            throw GeometryError("make_surface: surface leaves the fundamental cell (0,1)^3");
          }
        }
      }
    }
  }
}

inline void check_regular(const Surface& s) {
  const int k = 64;
  for (const auto& ch : s.charts) {
    if (!(ch.u1 > ch.u0) || !(ch.v1 > ch.v0)) throw RegularityError("make_surface: empty chart domain");
    const auto [su, sv] = ch.max_stretch(9);
    const double scale = std::max(su * sv, 1e-300);
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        const double u = ch.u0 + (ch.u1 - ch.u0) * (i + 0.5) / k;
        const double v = ch.v0 + (ch.v1 - ch.v0) * (j + 0.5) / k;
        const double a = ch.area_element(u, v);
        if (!(a > 1e-12 * scale)) throw RegularityError("make_surface: degenerate parametrization");
      }
    }
  }
}

}  // namespace detail

inline Surface make_surface(const SurfaceSpec& spec) {
  Surface s;
  s.spec = spec;
  std::visit(
      [&](const auto& sp) {
        using T = std::decay_t<decltype(sp)>;
        if constexpr (std::is_same_v<T, SphereSpec>) {
          if (!(sp.radius > 0 && sp.radius < 0.5)) throw GeometryError("sphere: radius must be in (0, 0.5)");
          const Vec3 r3(sp.radius, sp.radius, sp.radius);
          const Mat3 id = Mat3::Identity();
          s.charts.push_back(detail::spherical_chart(sp.center, r3, id, 0.0, pi / 4, 0.0, two_pi));
          s.charts.push_back(detail::spherical_chart(sp.center, r3, id, pi / 4, 3 * pi / 4, 0.0, two_pi));
          s.charts.push_back(detail::spherical_chart(sp.center, r3, id, 3 * pi / 4, pi, 0.0, two_pi));
          s.kind = SurfaceKind::sphere;
          s.label = "sphere";
        } else if constexpr (std::is_same_v<T, HemisphereSpec>) {
          if (!(sp.radius > 0 && sp.radius < 0.5)) throw GeometryError("hemisphere: radius must be in (0, 0.5)");
          if (sp.pole.norm() == 0) throw RegularityError("hemisphere: zero pole vector");
          const Vec3 r3(sp.radius, sp.radius, sp.radius);
          const Mat3 f = detail::frame_with_pole(sp.pole);
          s.charts.push_back(detail::spherical_chart(sp.center, r3, f, 0.0, pi / 4, 0.0, two_pi));
          s.charts.push_back(detail::spherical_chart(sp.center, r3, f, pi / 4, pi / 2, 0.0, two_pi));
          s.kind = SurfaceKind::hemisphere;
          s.label = "hemisphere";
        } else if constexpr (std::is_same_v<T, MongeSpec>) {
          SurfaceChart ch;
          ch.u0 = sp.u0;
          ch.u1 = sp.u1;
          ch.v0 = sp.v0;
          ch.v1 = sp.v1;
          const auto terms = sp.terms;
          const double uc = sp.uc, vc = sp.vc;
          ch.gamma = [terms, uc, vc](double u, double v) {
            const double x = u - uc, y = v - vc;
            using detail::poly_eval;
            ChartJet j;
            j.p = Vec3(u, v, poly_eval(terms, x, y, 0, 0));
            j.du = Vec3(1, 0, poly_eval(terms, x, y, 1, 0));
            j.dv = Vec3(0, 1, poly_eval(terms, x, y, 0, 1));
            j.duu = Vec3(0, 0, poly_eval(terms, x, y, 2, 0));
            j.duv = Vec3(0, 0, poly_eval(terms, x, y, 1, 1));
            j.dvv = Vec3(0, 0, poly_eval(terms, x, y, 0, 2));
            return j;
          };
          s.charts.push_back(ch);
          s.kind = SurfaceKind::monge;
          s.label = "monge";
        } else if constexpr (std::is_same_v<T, PlaneSpec>) {
          SurfaceChart ch;
          ch.u1 = sp.eu;
          ch.v1 = sp.ev;
          const Vec3 o = sp.origin, a = sp.a, b = sp.b;
          ch.gamma = [o, a, b](double u, double v) {
            return ChartJet{o + u * a + v * b, a, b, Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
          };
          s.charts.push_back(ch);
          s.kind = SurfaceKind::plane;
          s.label = "plane";
        } else {
          if (!(sp.phi0 > 0 && sp.phi1 < pi)) throw RegularityError("ellipsoid: phi range must avoid the poles");
          s.charts.push_back(detail::spherical_chart(sp.center, sp.axes, Mat3::Identity(), sp.phi0, sp.phi1,
                                                     sp.psi0, sp.psi1));
          s.kind = SurfaceKind::ellipsoid;
          s.label = "ellipsoid";
        }
      },
      spec);
  detail::check_regular(s);
  detail::check_fits_cell(s);
  s.area = quadrature_single(s, [](const SurfaceNode&) { return 1.0; });
  double kmin = std::numeric_limits<double>::infinity();
  for (const auto& nd : surface_nodes(s, 16)) {
    kmin = std::min(kmin, std::abs(s.charts[nd.chart].curvature(nd.u, nd.v)));
  }
  s.curvature_nonvanishing = kmin > 1e-8;
  return s;
}

// Normal tensor T = integral of n n^T; q(theta) = theta^T T theta.
inline Mat3 normal_tensor(const Surface& s, double tol = 1e-10) {
  Mat3 t;
  for (int a = 0; a < 3; ++a) {
    for (int b = a; b < 3; ++b) {
      t(a, b) = t(b, a) = quadrature_single(s, [a, b](const SurfaceNode& nd) { return nd.n[a] * nd.n[b]; }, tol);
    }
  }
  return t;
}

inline double integral_I(const Surface& s, double tol = 1e-9) {
  return quadrature_double(s, [](const SurfaceNode& a, const SurfaceNode& b) {
    const double c = a.n.dot(b.n);
    return c * c;
  }, 0.0, tol);
}

inline double q_theta(const Surface& s, const Vec3& theta, double tol = 1e-10) {
  if (std::abs(theta.norm() - 1.0) > 1e-9) throw DomainError("q_theta: theta must be a unit vector");
  return quadrature_single(s, [&theta](const SurfaceNode& nd) {
    const double c = theta.dot(nd.n);
    return c * c;
  }, tol);
}

struct UniformMeasure {};
using TauMeasure = std::variant<ProjectedSet, UniformMeasure>;

inline double c_tau(const Surface& s, const TauMeasure& tau) {
  const Mat3 t = normal_tensor(s);
  auto q = [&t](const Vec3& th) { return th.dot(t * th); };
  double value = 0;
  bool symmetric = true;
  if (const auto* p = std::get_if<ProjectedSet>(&tau)) {
    if (p->directions.empty()) throw DomainError("c_tau: empty measure");
    std::vector<double> vals;
    for (const auto& d : p->directions) vals.push_back(q(d) * q(d));
    value = ordered_sum(vals) / static_cast<double>(vals.size());
    symmetric = p->m > 0;  // lattice projections are closed under sign flips
  } else {
    value = sphere_average([&q](const Vec3& th) { return q(th) * q(th); }, 1e-12);
  }
  if (symmetric) {
    const double a2 = s.area * s.area;
    const double slack = 1e-7 * a2;
    if (value < a2 / 9 - slack || value > a2 / 3 + slack) {
      throw NumericError("c_tau: value outside [A^2/9, A^2/3]", a2 / 9, value);
    }
  }
  return value;
}

struct HIntegral {
  double value = 0;
  double prediction = 0;  // (A^2 + 2 I) / 15
  double residual = 0;
  double I = 0;
};

inline HIntegral integral_H(const Surface& s, const LatticeSet& set) {
  if (set.points.empty()) throw DomainError("integral_H: empty lattice set");
  HIntegral h;
  h.value = c_tau(s, project(set));
  h.I = integral_I(s);
  h.prediction = (s.area * s.area + 2 * h.I) / 15.0;
  h.residual = h.value - h.prediction;
  return h;
}

inline constexpr double kMaxOscillationFrequency = 2000.0;

inline std::complex<double> oscillatory_integral(const Surface& s, const Vec3& xi) {
  const double k = xi.norm();
  if (k > kMaxOscillationFrequency) throw CapacityError("oscillatory_integral: |xi| over resolvable cap");
  const int order = 8;
  std::vector<std::complex<double>> parts;
  for (std::size_t c = 0; c < s.charts.size(); ++c) {
    const auto& ch = s.charts[c];
    const auto [su, sv] = ch.max_stretch();
    // Gauss nodes are sparsest mid-panel (about 0.2 panel widths apart for
    // order 8), so 20|xi| nodes per unit length keep spacing <= 1/(10|xi|).
    const int pu = std::max(2, static_cast<int>(std::ceil(20.0 * k * su * (ch.u1 - ch.u0) / order)));
    const int pv = std::max(2, static_cast<int>(std::ceil(20.0 * k * sv * (ch.v1 - ch.v0) / order)));
    const Rule1D ru = composite_gauss(pu, order, ch.u0, ch.u1);
    const Rule1D rv = composite_gauss(pv, order, ch.v0, ch.v1);
    std::vector<std::complex<double>> rows(ru.x.size());
    parallel_for(ru.x.size(), [&](std::size_t i) {
      std::complex<double> acc = 0;
      for (std::size_t j = 0; j < rv.x.size(); ++j) {
        const ChartJet jt = ch.jet(ru.x[i], rv.x[j]);
        const double w = rv.w[j] * jt.du.cross(jt.dv).norm();
        const double ph = two_pi * xi.dot(jt.p);
        acc += w * std::complex<double>(std::cos(ph), std::sin(ph));
      }
      rows[i] = ru.w[i] * acc;
    });
    std::complex<double> total = 0;
    for (const auto& r : rows) total += r;
    parts.push_back(total);
  }
  std::complex<double> out = 0;
  for (const auto& p : parts) out += p;
  return out;
}

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<int> vertex_chart;
  std::vector<Vec2> vertex_uv;
  std::vector<std::array<std::uint32_t, 3>> triangles;
  double h = 0;

  double area() const {
    double a = 0;
    for (const auto& t : triangles) {
      a += 0.5 * (vertices[t[1]] - vertices[t[0]]).cross(vertices[t[2]] - vertices[t[0]]).norm();
    }
    return a;
  }
};

// Structured grid per chart with ambient spacing about h. Charts of the
// sphere families share the psi subdivision so seams are conforming.
inline Mesh triangulate(const Surface& s, double h) {
  if (!(h > 0)) throw DomainError("triangulate: h must be positive");
  const bool shared_v = s.kind == SurfaceKind::sphere || s.kind == SurfaceKind::hemisphere;
  std::vector<int> nus, nvs;
  int nv_shared = 0;
  for (const auto& ch : s.charts) {
    const auto [su, sv] = ch.max_stretch();
    const double lu = su * (ch.u1 - ch.u0), lv = sv * (ch.v1 - ch.v0);
    if (lu / h < 2.0 || lv / h < 2.0) throw ResolutionError("triangulate: h too large for a 2x2 grid on some chart");
    nus.push_back(static_cast<int>(std::ceil(lu / h)));
    nvs.push_back(static_cast<int>(std::ceil(lv / h)));
    nv_shared = std::max(nv_shared, nvs.back());
  }
  Mesh mesh;
  mesh.h = h;
  for (std::size_t c = 0; c < s.charts.size(); ++c) {
    const auto& ch = s.charts[c];
    const int nu = nus[c], nv = shared_v ? nv_shared : nvs[c];
    const auto base = static_cast<std::uint32_t>(mesh.vertices.size());
    for (int i = 0; i <= nu; ++i) {
      const double u = i == nu ? ch.u1 : ch.u0 + (ch.u1 - ch.u0) * i / nu;
      for (int k = 0; k <= nv; ++k) {
        const double v = k == nv ? ch.v1 : ch.v0 + (ch.v1 - ch.v0) * k / nv;
        mesh.vertices.push_back(ch.point(u, v));
        mesh.vertex_chart.push_back(static_cast<int>(c));
        mesh.vertex_uv.emplace_back(u, v);
      }
    }
    auto id = [&](int i, int k) { return base + static_cast<std::uint32_t>(i * (nv + 1) + k); };
    for (int i = 0; i < nu; ++i) {
      for (int k = 0; k < nv; ++k) {
        const auto a = id(i, k), b = id(i + 1, k), cc = id(i + 1, k + 1), d = id(i, k + 1);
        const double dac = (mesh.vertices[a] - mesh.vertices[cc]).squaredNorm();
        const double dbd = (mesh.vertices[b] - mesh.vertices[d]).squaredNorm();
        if (dac <= dbd) {
          mesh.triangles.push_back({a, b, cc});
          mesh.triangles.push_back({a, cc, d});
        } else {
          mesh.triangles.push_back({a, b, d});
          mesh.triangles.push_back({b, cc, d});
        }
      }
    }
  }
  return mesh;
}

inline void write_mesh(std::ostream& os, const Mesh& mesh) {
  os.precision(17);
  os << "# mesh vertices " << mesh.vertices.size() << " triangles " << mesh.triangles.size() << " h " << mesh.h
     << "\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const auto& v = mesh.vertices[i];
    os << "v " << v[0] << ' ' << v[1] << ' ' << v[2] << ' ' << mesh.vertex_chart[i] << "\n";
  }
  for (const auto& t : mesh.triangles) os << "t " << t[0] << ' ' << t[1] << ' ' << t[2] << "\n";
}

// ---- surface specs from text -------------------------------------------

namespace detail {

inline std::vector<double> parse_numbers(std::string_view text, char sep = ',') {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find(sep, pos);
    if (end == std::string_view::npos) end = text.size();
    std::string tok(text.substr(pos, end - pos));
    const auto b = tok.find_first_not_of(" \t");
    const auto e = tok.find_last_not_of(" \t");
    if (b == std::string::npos) throw DomainError("surface spec: empty number");
    tok = tok.substr(b, e - b + 1);
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      throw DomainError("surface spec: bad number '" + tok + "'");
    }
    if (used != tok.size()) throw DomainError("surface spec: bad number '" + tok + "'");
    out.push_back(v);
    pos = end + 1;
  }
  return out;
}

inline Vec3 vec3_at(const std::vector<double>& v, std::size_t i) { return Vec3(v[i], v[i + 1], v[i + 2]); }

inline std::vector<PolyTerm> parse_terms(std::string_view text) {
  std::vector<PolyTerm> terms;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find(';', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto t = parse_numbers(text.substr(pos, end - pos));
    if (t.size() != 3 || t[0] < 0 || t[1] < 0 || t[0] != std::floor(t[0]) || t[1] != std::floor(t[1])) {
      throw DomainError("surface spec: polynomial term must be 'i,j,c' with integer i,j >= 0");
    }
    terms.push_back({static_cast<int>(t[0]), static_cast<int>(t[1]), t[2]});
    pos = end + 1;
  }
  return terms;
}

}  // namespace detail

// Short form "kind:params":
//   sphere:r[,cx,cy,cz]
//   hemisphere:r[,cx,cy,cz[,px,py,pz]]
//   plane:eu,ev[,ox,oy,oz,ax,ay,az,bx,by,bz]
//   monge:u0,u1,v0,v1;i,j,c;i,j,c...      (h centred at the domain midpoint)
//   ellipsoid:a,b,c,phi0,phi1,psi0,psi1[,cx,cy,cz]
inline SurfaceSpec parse_surface_spec(std::string_view text) {
  const auto colon = text.find(':');
  const std::string kind(text.substr(0, colon));
  const std::string_view rest = colon == std::string_view::npos ? std::string_view{} : text.substr(colon + 1);
  if (kind == "sphere") {
    SphereSpec sp;
    if (!rest.empty()) {
      const auto v = detail::parse_numbers(rest);
      if (v.size() != 1 && v.size() != 4) throw DomainError("sphere spec: expected r or r,cx,cy,cz");
      sp.radius = v[0];
      if (v.size() == 4) sp.center = detail::vec3_at(v, 1);
    }
    return sp;
  }
  if (kind == "hemisphere") {
    HemisphereSpec sp;
    if (!rest.empty()) {
      const auto v = detail::parse_numbers(rest);
      if (v.size() != 1 && v.size() != 4 && v.size() != 7) throw DomainError("hemisphere spec: bad arity");
      sp.radius = v[0];
      if (v.size() >= 4) sp.center = detail::vec3_at(v, 1);
      if (v.size() == 7) sp.pole = detail::vec3_at(v, 4);
    }
    return sp;
  }
  if (kind == "plane") {
    PlaneSpec sp;
    if (!rest.empty()) {
      const auto v = detail::parse_numbers(rest);
      if (v.size() != 2 && v.size() != 11) throw DomainError("plane spec: expected eu,ev[,origin,a,b]");
      sp.eu = v[0];
      sp.ev = v[1];
      if (v.size() == 11) {
        sp.origin = detail::vec3_at(v, 2);
        sp.a = detail::vec3_at(v, 5);
        sp.b = detail::vec3_at(v, 8);
      }
    }
    return sp;
  }
  if (kind == "monge") {
    MongeSpec sp;
    const auto semi = rest.find(';');
    const auto dom = detail::parse_numbers(rest.substr(0, semi));
    if (dom.size() != 4) throw DomainError("monge spec: expected u0,u1,v0,v1;terms");
    sp.u0 = dom[0];
    sp.u1 = dom[1];
    sp.v0 = dom[2];
    sp.v1 = dom[3];
    sp.uc = 0.5 * (sp.u0 + sp.u1);
    sp.vc = 0.5 * (sp.v0 + sp.v1);
    if (semi != std::string_view::npos) sp.terms = detail::parse_terms(rest.substr(semi + 1));
    return sp;
  }
  if (kind == "ellipsoid") {
    EllipsoidSpec sp;
    const auto v = detail::parse_numbers(rest);
    if (v.size() != 7 && v.size() != 10) throw DomainError("ellipsoid spec: expected a,b,c,phi0,phi1,psi0,psi1[,c]");
    sp.axes = detail::vec3_at(v, 0);
    sp.phi0 = v[3];
    sp.phi1 = v[4];
    sp.psi0 = v[5];
    sp.psi1 = v[6];
    if (v.size() == 10) sp.center = detail::vec3_at(v, 7);
    return sp;
  }
  throw DomainError("unknown surface kind '" + kind + "'");
}

// Config-file form: keys under "surface." (kind, radius, center, pole,
// origin, basis_u, basis_v, extents, domain, poly_center, coeffs, axes).
// coeffs is a polynomial table "i j c; i j c; ...".
inline SurfaceSpec surface_spec_from_config(const std::map<std::string, std::string>& cfg) {
  auto get = [&](const std::string& k) -> const std::string* {
    const auto it = cfg.find("surface." + k);
    return it == cfg.end() ? nullptr : &it->second;
  };
  auto nums = [&](const std::string& k, std::size_t n) {
    auto v = detail::parse_numbers(*get(k), ',');
    if (v.size() != n) throw DomainError("surface." + k + ": expected " + std::to_string(n) + " numbers");
    return v;
  };
  const std::string* kind = get("kind");
  if (!kind) throw DomainError("config: surface.kind missing");
  if (*kind == "sphere" || *kind == "hemisphere") {
    const double r = get("radius") ? nums("radius", 1)[0] : 0.2;
    const Vec3 c = get("center") ? detail::vec3_at(nums("center", 3), 0) : Vec3(0.5, 0.5, 0.5);
    if (*kind == "sphere") return SphereSpec{c, r};
    const Vec3 p = get("pole") ? detail::vec3_at(nums("pole", 3), 0) : Vec3(0, 0, 1);
    return HemisphereSpec{c, r, p};
  }
  if (*kind == "plane") {
    PlaneSpec sp;
    if (get("origin")) sp.origin = detail::vec3_at(nums("origin", 3), 0);
    if (get("basis_u")) sp.a = detail::vec3_at(nums("basis_u", 3), 0);
    if (get("basis_v")) sp.b = detail::vec3_at(nums("basis_v", 3), 0);
    if (get("extents")) {
      const auto e = nums("extents", 2);
      sp.eu = e[0];
      sp.ev = e[1];
    }
    return sp;
  }
  if (*kind == "monge") {
    MongeSpec sp;
    if (get("domain")) {
      const auto d = nums("domain", 4);
      sp.u0 = d[0];
      sp.u1 = d[1];
      sp.v0 = d[2];
      sp.v1 = d[3];
    }
    sp.uc = 0.5 * (sp.u0 + sp.u1);
    sp.vc = 0.5 * (sp.v0 + sp.v1);
    if (get("poly_center")) {
      const auto c = nums("poly_center", 2);
      sp.uc = c[0];
      sp.vc = c[1];
    }
    if (get("coeffs")) {
      std::string table = *get("coeffs");
      for (char& ch : table) {
        if (ch == ' ') ch = ',';
      }
      // collapse repeated separators produced by the substitution
      std::string clean;
      for (char ch : table) {
        if (ch == ',' && (clean.empty() || clean.back() == ',' || clean.back() == ';')) continue;
        if (ch == ';' && !clean.empty() && clean.back() == ',') clean.pop_back();
        clean.push_back(ch);
      }
      while (!clean.empty() && (clean.back() == ',' || clean.back() == ';')) clean.pop_back();
      sp.terms = detail::parse_terms(clean);
    }
    return sp;
  }
  if (*kind == "ellipsoid") {
    EllipsoidSpec sp;
    if (get("center")) sp.center = detail::vec3_at(nums("center", 3), 0);
    if (get("axes")) sp.axes = detail::vec3_at(nums("axes", 3), 0);
    if (get("domain")) {
      const auto d = nums("domain", 4);
      sp.phi0 = d[0];
      sp.phi1 = d[1];
      sp.psi0 = d[2];
      sp.psi1 = d[3];
    }
    return sp;
  }
  throw DomainError("config: unknown surface.kind '" + *kind + "'");
}

inline nlohmann::json to_json(const SurfaceSpec& spec) {
  using nlohmann::json;
  auto v3 = [](const Vec3& v) { return json::array({v[0], v[1], v[2]}); };
  return std::visit(
      [&](const auto& sp) -> json {
        using T = std::decay_t<decltype(sp)>;
        if constexpr (std::is_same_v<T, SphereSpec>) {
          return {{"kind", "sphere"}, {"center", v3(sp.center)}, {"radius", sp.radius}};
        } else if constexpr (std::is_same_v<T, HemisphereSpec>) {
          return {{"kind", "hemisphere"}, {"center", v3(sp.center)}, {"radius", sp.radius}, {"pole", v3(sp.pole)}};
        } else if constexpr (std::is_same_v<T, MongeSpec>) {
          json terms = json::array();
          for (const auto& t : sp.terms) terms.push_back({t.i, t.j, t.c});
          return {{"kind", "monge"},
                  {"domain", {sp.u0, sp.u1, sp.v0, sp.v1}},
                  {"poly_center", {sp.uc, sp.vc}},
                  {"terms", terms}};
        } else if constexpr (std::is_same_v<T, PlaneSpec>) {
          return {{"kind", "plane"}, {"origin", v3(sp.origin)}, {"basis_u", v3(sp.a)}, {"basis_v", v3(sp.b)},
                  {"extents", {sp.eu, sp.ev}}};
        } else {
          return {{"kind", "ellipsoid"}, {"center", v3(sp.center)}, {"axes", v3(sp.axes)},
                  {"domain", {sp.phi0, sp.phi1, sp.psi0, sp.psi1}}};
        }
      },
      spec);
}

}  // namespace waves
