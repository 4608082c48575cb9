#pragma once

#include "waves/core.hpp"
#include "waves/lattice.hpp"
#include "waves/randomwave.hpp"
#include "waves/surface.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace waves {

// ---- extraction ------------------------------------------------------------

struct NodalCurve {
  std::vector<std::pair<Vec3, Vec3>> segments;
  double total_length = 0;
  // Set by the checked variant when h and h/2 disagree beyond tolerance.
  std::optional<double> refined_length;
  bool resolution_warning = false;
};

using ScalarField = std::function<double(const Vec3&)>;

inline constexpr double kVertexJitter = 1e-14;

// Exact vertex zeros are moved to +1e-14 * max|f| (seed independent).
inline void jitter_zeros(std::vector<double>& f) {
  double scale = 0;
  for (double v : f) scale = std::max(scale, std::abs(v));
  if (scale == 0) scale = 1;
  for (double& v : f) {
    if (v == 0) v = kVertexJitter * scale;
  }
}

namespace detail {

// Zero of the linear interpolant on edge (a, b), computed from the endpoint
// with the smaller index so both triangles sharing the edge agree bitwise.
inline Vec3 edge_zero(const Mesh& mesh, const std::vector<double>& f, std::uint32_t a, std::uint32_t b) {
  if (b < a) std::swap(a, b);
  const double t = f[a] / (f[a] - f[b]);
  return mesh.vertices[a] + t * (mesh.vertices[b] - mesh.vertices[a]);
}

template <class Emit>
void march(const Mesh& mesh, const std::vector<double>& f, Emit&& emit) {
  for (const auto& tri : mesh.triangles) {
    const bool s0 = f[tri[0]] > 0, s1 = f[tri[1]] > 0, s2 = f[tri[2]] > 0;
    if (s0 == s1 && s1 == s2) continue;
    // The odd vertex out owns the two crossing edges.
    const int k = s0 == s1 ? 2 : (s0 == s2 ? 1 : 0);
    const std::uint32_t o = tri[k], p = tri[(k + 1) % 3], q = tri[(k + 2) % 3];
    emit(edge_zero(mesh, f, o, p), edge_zero(mesh, f, o, q));
  }
}

}  // namespace detail

// Length only; the Monte Carlo loop uses this.
inline double nodal_length(const Mesh& mesh, std::vector<double> values) {
  if (values.size() != mesh.vertices.size()) throw DomainError("nodal_length: one value per vertex required");
  jitter_zeros(values);
  double total = 0;
  detail::march(mesh, values, [&](const Vec3& a, const Vec3& b) { total += (b - a).norm(); });
  return total;
}

inline NodalCurve extract_nodal_curve(const ScalarField& field, const Mesh& mesh) {
  std::vector<double> f(mesh.vertices.size());
  parallel_for(f.size(), [&](std::size_t i) { f[i] = field(mesh.vertices[i]); });
  jitter_zeros(f);
  NodalCurve out;
  detail::march(mesh, f, [&](const Vec3& a, const Vec3& b) { out.segments.emplace_back(a, b); });
  std::vector<double> lens;
  lens.reserve(out.segments.size());
  for (const auto& [a, b] : out.segments) lens.push_back((b - a).norm());
  out.total_length = ordered_sum(lens);
  return out;
}

// Extract at h and h/2; a relative disagreement above tol sets the warning.
inline NodalCurve extract_nodal_curve(const ScalarField& field, const Surface& surface, double h, double tol = 0.01) {
  NodalCurve coarse = extract_nodal_curve(field, triangulate(surface, h));
  const double fine = extract_nodal_curve(field, triangulate(surface, h / 2)).total_length;
  coarse.refined_length = fine;
  const double scale = std::max(fine, h);
  coarse.resolution_warning = std::abs(coarse.total_length - fine) > tol * scale;
  return coarse;
}

inline nlohmann::json to_json(const NodalCurve& c) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& [a, b] : c.segments) segs.push_back({{a[0], a[1], a[2]}, {b[0], b[1], b[2]}});
  nlohmann::json j{{"total_length", c.total_length},
                   {"resolution_warning", c.resolution_warning},
                   {"segments", std::move(segs)}};
  if (c.refined_length) j["refined_length"] = *c.refined_length;
  return j;
}

// ---- statistics -----------------------------------------------------------

struct SampleStats {
  std::size_t n_samples = 0;
  double mean = 0;
  double variance = 0;  // unbiased
  double std_error_mean = 0;
  double std_error_variance = 0;
  std::uint64_t first_seed = 0;
  std::uint64_t last_seed = 0;
};

// Serial fold in seed order. The variance standard error uses
// Var(s^2) ~ (mu4 - (n - 3)/(n - 1) s^4) / n.
inline SampleStats summarize(const std::vector<double>& x, std::uint64_t first_seed = 0) {
  SampleStats s;
  s.n_samples = x.size();
  s.first_seed = first_seed;
  s.last_seed = x.empty() ? first_seed : first_seed + x.size() - 1;
  if (x.size() < 2) throw DomainError("summarize: need at least two samples");
  const double n = static_cast<double>(x.size());
  double sum = 0;
  for (double v : x) sum += v;
  s.mean = sum / n;
  double m2 = 0, m4 = 0;
  for (double v : x) {
    const double d = v - s.mean;
    m2 += d * d;
    m4 += d * d * d * d;
  }
  s.variance = m2 / (n - 1);
  m4 /= n;
  s.std_error_mean = std::sqrt(s.variance / n);
  const double vv = (m4 - (n - 3) / (n - 1) * s.variance * s.variance) / n;
  s.std_error_variance = std::sqrt(std::max(vv, 0.0));
  return s;
}

inline nlohmann::json to_json(const SampleStats& s) {
  return {{"n_samples", s.n_samples},
          {"mean", s.mean},
          {"variance", s.variance},
          {"std_error_mean", s.std_error_mean},
          {"std_error_variance", s.std_error_variance},
          {"seeds", {s.first_seed, s.last_seed}}};
}

inline void write_lengths_csv(std::ostream& os, std::uint64_t first_seed, const std::vector<double>& lengths) {
  os << "seed,length\n";
  char buf[64];
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", lengths[i]);
    os << first_seed + i << ',' << buf << '\n';
  }
}

// ---- predictions ----------------------------------------------------------

// E[L] = pi sqrt(m) A / sqrt(3).
inline double predict_mean(std::int64_t m, const Surface& surface) {
  if (m <= 0 || !is_representable(m)) throw DomainError("predict_mean: m is not a sum of three squares");
  return pi * std::sqrt(static_cast<double>(m)) * surface.area / std::sqrt(3.0);
}

struct VariancePrediction {
  double leading = 0;      // coefficient * m / N
  double coefficient = 0;  // (pi^2/60)(3I - A^2)
  double I = 0;
  double A = 0;
  bool hypothesis_warning = false;
  std::string warning;
};

inline VariancePrediction predict_variance(std::int64_t m, const LatticeSet& set, const Surface& surface,
                                           double tol = 1e-8) {
  if (set.m != m) throw DomainError("predict_variance: lattice set does not match m");
  if (set.points.empty()) throw DomainError("predict_variance: m is not a sum of three squares");
  VariancePrediction p;
  p.A = surface.area;
  p.I = integral_I(surface);
  p.coefficient = pi * pi / 60 * (3 * p.I - p.A * p.A);
  const double upper = pi * pi / 30 * p.A * p.A;
  const double slack = tol * std::max(1.0, upper);
  if (p.coefficient < -slack || p.coefficient > upper + slack) {
    throw NumericError("predict_variance: coefficient outside [0, (pi^2/30) A^2]", 0.0, p.coefficient);
  }
  p.leading = p.coefficient * static_cast<double>(m) / static_cast<double>(set.n_points());
  if (!surface.curvature_nonvanishing) {
    p.hypothesis_warning = true;
    p.warning = "surface has vanishing Gauss curvature somewhere; the variance asymptotic does not apply";
  }
  return p;
}

inline nlohmann::json to_json(const VariancePrediction& p) {
  nlohmann::json j{{"leading", p.leading}, {"coefficient", p.coefficient}, {"I", p.I}, {"A", p.A},
                   {"hypothesis_warning", p.hypothesis_warning}};
  if (p.hypothesis_warning) j["warning"] = p.warning;
  return j;
}

// ---- Monte Carlo ----------------------------------------------------------

struct McOptions {
  std::size_t check_seeds = 3;  // replicas re-extracted at h/2
  double check_tol = 0.01;
  std::size_t batch = 16;
};

struct McResult {
  SampleStats stats;
  std::vector<double> lengths;  // in seed order
  double h = 0;
  std::size_t n_vertices = 0;
  std::size_t n_triangles = 0;
  double refinement_gap = 0;  // relative |L_h - L_{h/2}| summed over the check seeds
  bool resolution_warning = false;
};

// Vertex-major cos/sin table of 2 pi <mu, x> over the half set.
struct PhaseTable {
  std::size_t n_vertices = 0, n_half = 0;
  std::vector<double> cs;  // [v][h] -> (cos, sin)

  PhaseTable(const Mesh& mesh, const std::vector<Vec3>& mu) : n_vertices(mesh.vertices.size()), n_half(mu.size()) {
    cs.resize(2 * n_vertices * n_half);
    parallel_for(n_vertices, [&](std::size_t v) {
      for (std::size_t h = 0; h < n_half; ++h) {
        const double th = two_pi * mu[h].dot(mesh.vertices[v]);
        cs[2 * (v * n_half + h)] = std::cos(th);
        cs[2 * (v * n_half + h) + 1] = std::sin(th);
      }
    });
  }

  // Field values for a batch of coefficient vectors, fixed summation order.
  void evaluate(const std::vector<const WaveSample*>& batch, std::vector<std::vector<double>>& out) const {
    out.assign(batch.size(), std::vector<double>(n_vertices));
    const double scale = 2.0 / std::sqrt(static_cast<double>(batch.front()->n_points));
    for (std::size_t v = 0; v < n_vertices; ++v) {
      const double* row = &cs[2 * v * n_half];
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& a = batch[b]->coefficients;
        double acc = 0;
        for (std::size_t h = 0; h < n_half; ++h) acc += a[h].real() * row[2 * h] - a[h].imag() * row[2 * h + 1];
        out[b][v] = scale * acc;
      }
    }
  }
};

inline double max_mesh_step(std::int64_t m) { return 1.0 / (10.0 * std::sqrt(static_cast<double>(m))); }

inline McResult mc_experiment(const LatticeSet& set, const Surface& surface, std::size_t n_samples,
                              std::uint64_t base_seed, double h, const McOptions& opt = {}) {
  const std::int64_t m = set.m;
  if (set.points.empty()) throw DomainError("mc_experiment: m is not a sum of three squares");
  if (n_samples < 2) throw DomainError("mc_experiment: need at least two samples");
  if (!(h > 0) || h > max_mesh_step(m)) {
    throw ResolutionError("mc_experiment: mesh step h = " + std::to_string(h) +
                          " is too coarse; use h <= 1/(10 sqrt(m)) = " + std::to_string(max_mesh_step(m)));
  }
  const Mesh mesh = triangulate(surface, h);
  const Spectrum sp = Spectrum::of(set);
  const PhaseTable table(mesh, sp.mu);

  McResult res;
  res.h = h;
  res.n_vertices = mesh.vertices.size();
  res.n_triangles = mesh.triangles.size();
  res.lengths.assign(n_samples, 0.0);
  const std::size_t batch = std::max<std::size_t>(1, opt.batch);
  const std::size_t n_batches = (n_samples + batch - 1) / batch;
  parallel_for(n_batches, [&](std::size_t b) {
    const std::size_t lo = b * batch, hi = std::min(n_samples, lo + batch);
    std::vector<WaveSample> waves;
    for (std::size_t i = lo; i < hi; ++i) waves.push_back(sample(set, base_seed + i));
    std::vector<const WaveSample*> ptrs;
    for (const auto& w : waves) ptrs.push_back(&w);
    std::vector<std::vector<double>> values;
    table.evaluate(ptrs, values);
    for (std::size_t i = lo; i < hi; ++i) res.lengths[i] = nodal_length(mesh, std::move(values[i - lo]));
  });
  res.stats = summarize(res.lengths, base_seed);

  const std::size_t checks = std::min(opt.check_seeds, n_samples);
  if (checks > 0) {
    const Mesh fine = triangulate(surface, h / 2);
    double gap = 0, base = 0;
    for (std::size_t i = 0; i < checks; ++i) {
      const WaveSample w = sample(set, base_seed + i);
      std::vector<double> f(fine.vertices.size());
      parallel_for(f.size(), [&](std::size_t v) { f[v] = evaluate(w, fine.vertices[v]).value; });
      const double lf = nodal_length(fine, std::move(f));
      gap += std::abs(res.lengths[i] - lf);
      base += lf;
    }
    res.refinement_gap = base > 0 ? gap / base : 0.0;
    res.resolution_warning = res.refinement_gap > opt.check_tol;
  }
  return res;
}

inline nlohmann::json to_json(const McResult& r) {
  return {{"stats", to_json(r.stats)},
          {"h", r.h},
          {"n_vertices", r.n_vertices},
          {"n_triangles", r.n_triangles},
          {"refinement_gap", r.refinement_gap},
          {"resolution_warning", r.resolution_warning}};
}

}  // namespace waves
