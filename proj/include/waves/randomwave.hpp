#pragma once

#include "waves/core.hpp"
#include "waves/lattice.hpp"
#include "waves/philox.hpp"
#include "waves/surface.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <complex>
#include <functional>
#include <optional>

namespace waves {

// M = 4 pi^2 m / 3, the variance of each gradient component.
inline double gradient_variance(std::int64_t m) { return 4.0 * pi * pi * static_cast<double>(m) / 3.0; }

// Half-set frequencies as doubles, shared by the field and covariance sums.
struct Spectrum {
  std::int64_t m = 0;
  std::size_t n_points = 0;
  std::vector<Vec3> mu;  // one representative per antipodal pair

  static Spectrum of(const LatticeSet& set) {
    if (set.points.empty()) throw DomainError("spectrum: empty lattice set");
    Spectrum s;
    s.m = set.m;
    s.n_points = set.points.size();
    for (std::size_t i : set.half_set) s.mu.push_back(set.points[i].vec());
    return s;
  }
};

struct WaveSample {
  std::int64_t m = 0;
  std::uint64_t seed = 0;
  std::size_t n_points = 0;
  std::vector<Vec3> mu;
  std::vector<std::complex<double>> coefficients;  // a_mu over the half set
};

struct FieldJet {
  double value = 0;
  Vec3 gradient = Vec3::Zero();
};

// Coefficient h of the draw (m, seed): the Philox stream is keyed by the seed
// and indexed by (h, m), so draws never depend on evaluation order.
inline std::complex<double> wave_coefficient(std::int64_t m, std::uint64_t seed, std::size_t h) {
  const auto [z1, z2] = philox_normal_pair(seed, h, static_cast<std::uint64_t>(m));
  return {z1 * std::sqrt(0.5), z2 * std::sqrt(0.5)};
}

inline WaveSample sample(const LatticeSet& set, std::uint64_t seed) {
  if (set.points.empty()) throw DomainError("sample: empty lattice set");
  WaveSample w;
  w.m = set.m;
  w.seed = seed;
  w.n_points = set.points.size();
  for (std::size_t h = 0; h < set.half_set.size(); ++h) {
    w.mu.push_back(set.points[set.half_set[h]].vec());
    w.coefficients.push_back(wave_coefficient(set.m, seed, h));
  }
  return w;
}

// F = (1/sqrt N) sum_full a e^{2 pi i <mu,x>} = (2/sqrt N) sum_half Re(a e^{i theta}).
inline FieldJet evaluate(const WaveSample& w, const Vec3& x) {
  FieldJet out;
  double v = 0;
  Vec3 g = Vec3::Zero();
  for (std::size_t h = 0; h < w.mu.size(); ++h) {
    const double th = two_pi * w.mu[h].dot(x);
    const double c = std::cos(th), s = std::sin(th);
    const double re = w.coefficients[h].real(), im = w.coefficients[h].imag();
    v += re * c - im * s;
    g -= (re * s + im * c) * w.mu[h];
  }
  const double scale = 2.0 / std::sqrt(static_cast<double>(w.n_points));
  out.value = scale * v;
  out.gradient = scale * two_pi * g;
  return out;
}

inline nlohmann::json to_json(const WaveSample& w) {
  nlohmann::json c = nlohmann::json::array();
  for (const auto& a : w.coefficients) c.push_back({a.real(), a.imag()});
  return {{"m", w.m}, {"seed", w.seed}, {"coefficients", c}};
}

struct CovarianceJet {
  double r = 0;
  Vec3 D = Vec3::Zero();
  Mat3 H = Mat3::Zero();
  // 1 - r summed as 2 sin^2(theta/2), exact near the diagonal; unset for
  // hand-built jets.
  std::optional<double> one_minus_r;

  double one_minus_r2() const { return one_minus_r ? *one_minus_r * (1.0 + r) : 1.0 - r * r; }
};

inline CovarianceJet covariance_jet(const Spectrum& sp, const Vec3& sigma, const Vec3& sigma_p) {
  const Vec3 d = sigma - sigma_p;
  CovarianceJet j;
  double gap = 0;
  for (const auto& mu : sp.mu) {
    const double th = two_pi * mu.dot(d);
    const double c = std::cos(th), s = std::sin(th);
    const double half = std::sin(0.5 * th);
    gap += 2 * half * half;
    j.r += c;
    j.D -= s * mu;
    j.H -= c * (mu * mu.transpose());
  }
  const double scale = 2.0 / static_cast<double>(sp.n_points);
  j.r *= scale;
  j.one_minus_r = scale * gap;
  j.D *= scale * two_pi;
  j.H *= scale * two_pi * two_pi;
  return j;
}

inline CovarianceJet covariance_jet(const LatticeSet& set, const Vec3& sigma, const Vec3& sigma_p) {
  return covariance_jet(Spectrum::of(set), sigma, sigma_p);
}

// Axis pivot: perm[2] is the axis carrying the largest |n_i| (or a forced
// one), and sign makes the permuted third component positive.
struct Frame {
  std::array<int, 3> perm{0, 1, 2};
  double sign = 1;

  static Frame pivot(const Vec3& n, int forced = -1) {
    int k = forced;
    if (k < 0) {
      n.cwiseAbs().maxCoeff(&k);
    }
    if (k < 0 || k > 2 || n[k] == 0.0) throw DomainError("frame: pivot component must be nonzero");
    Frame f;
    f.perm = {(k + 1) % 3, (k + 2) % 3, k};
    f.sign = n[k] > 0 ? 1.0 : -1.0;
    return f;
  }

  // Columns select the two non-pivot axes (the matrix L in original coordinates).
  Eigen::Matrix<double, 3, 2> selector() const {
    Eigen::Matrix<double, 3, 2> l = Eigen::Matrix<double, 3, 2>::Zero();
    l(perm[0], 0) = 1;
    l(perm[1], 1) = 1;
    return l;
  }
};

inline Mat3 projection_omega(const Vec3& n) { return Mat3::Identity() - n * n.transpose(); }

// Closed-form square root Q with Q^2 (L^T Omega L) = I, for a unit normal
// whose pivot component is positive after the frame permutation.
inline Mat2 q_root(const Vec3& n, const Frame& f) {
  const double n1 = f.sign * n[f.perm[0]], n2 = f.sign * n[f.perm[1]], n3 = f.sign * n[f.perm[2]];
  const double d = n3 * n3 + n3;
  Mat2 q;
  q << n1 * n1 + n3 * n3 + n3, n1 * n2, n1 * n2, n2 * n2 + n3 * n3 + n3;
  return q / d;
}

struct KacRiceMatrices {
  Mat3 omega, omega_p;
  Mat2 q, q_p;
  Mat2 X, X_p, Y, Y_p;
  Mat4 theta_hat;
  Frame frame, frame_p;
  double r = 0;
  double one_minus_r2 = 1;
};

inline constexpr double kNearSingular = 1e-10;

inline KacRiceMatrices kacrice_matrices(const CovarianceJet& jet, const Vec3& n, const Vec3& n_p, std::int64_t m,
                                        int pivot = -1, int pivot_p = -1) {
  if (std::abs(jet.r) >= 1.0 - kNearSingular) throw NumericError("kacrice_matrices: |r| too close to 1");
  const double M = gradient_variance(m);
  KacRiceMatrices k;
  k.omega = projection_omega(n);
  k.omega_p = projection_omega(n_p);
  k.frame = Frame::pivot(n, pivot);
  k.frame_p = Frame::pivot(n_p, pivot_p);
  k.q = q_root(n, k.frame);
  k.q_p = q_root(n_p, k.frame_p);
  const auto L = k.frame.selector();
  const auto Lp = k.frame_p.selector();
  const double r = jet.r;
  const double one_minus = jet.one_minus_r2();
  const Mat3 dd = jet.D * jet.D.transpose();
  const Eigen::Matrix<double, 2, 3> left = k.q * L.transpose() * k.omega;
  const Eigen::Matrix<double, 2, 3> left_p = k.q_p * Lp.transpose() * k.omega_p;
  k.X = -(left * dd * left.transpose()) / (one_minus * M);
  k.X_p = -(left_p * dd * left_p.transpose()) / (one_minus * M);
  const Mat3 core = jet.H + (r / one_minus) * dd;
  k.Y = -(left * core * left_p.transpose()) / M;
  k.Y_p = -(left_p * core * left.transpose()) / M;
  k.r = r;
  k.one_minus_r2 = one_minus;
  k.theta_hat.setIdentity();
  k.theta_hat.block<2, 2>(0, 0) += k.X;
  k.theta_hat.block<2, 2>(0, 2) += k.Y;
  k.theta_hat.block<2, 2>(2, 0) += k.Y_p;
  k.theta_hat.block<2, 2>(2, 2) += k.X_p;
  return k;
}

// Frame-free traces: tr X = -D Omega D^T / ((1-r^2) M), and
// tr(Y'Y) = tr(K Omega' K Omega) / M^2 with K = H + r/(1-r^2) D^T D.
struct TraceTriple {
  double trX = 0, trXp = 0, trYY = 0;
};

inline TraceTriple kacrice_traces(const CovarianceJet& jet, const Vec3& n, const Vec3& n_p, std::int64_t m) {
  const double M = gradient_variance(m);
  const double one_minus = jet.one_minus_r2();
  const double d2 = jet.D.squaredNorm();
  const double dn = jet.D.dot(n), dnp = jet.D.dot(n_p);
  TraceTriple t;
  t.trX = -(d2 - dn * dn) / (one_minus * M);
  t.trXp = -(d2 - dnp * dnp) / (one_minus * M);
  const Mat3 K = jet.H + (jet.r / one_minus) * (jet.D * jet.D.transpose());
  const Mat3 a = K * projection_omega(n_p);
  const Mat3 b = K * projection_omega(n);
  t.trYY = (a.transpose().cwiseProduct(b)).sum() / (M * M);
  return t;
}

inline double k1_density(std::int64_t m) {
  if (m < 1) throw DomainError("k1_density: m must be positive");
  return pi * std::sqrt(static_cast<double>(m)) / std::sqrt(3.0);
}

// ---- E[|(W1,W2)| |(W3,W4)|] for W ~ N(0, Theta) ----------------------------

struct MomentEstimate {
  double value = 0;
  double std_error = 0;
};

namespace detail {

inline void check_theta(const Mat4& theta) {
  if (!theta.allFinite()) throw MatrixError("gaussian moment: non-finite covariance");
  if ((theta - theta.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, theta.cwiseAbs().maxCoeff())) {
    throw MatrixError("gaussian moment: covariance not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Mat4> es(theta, Eigen::EigenvaluesOnly);
  if (!(es.eigenvalues().minCoeff() > 0.0)) throw MatrixError("gaussian moment: covariance not positive definite");
}

// E|U| for U ~ N(0, B) in the plane.
inline double mean_norm_2d(const Mat2& b) {
  const double tr = b.trace(), det = b.determinant();
  const double disc = std::sqrt(std::max(0.0, 0.25 * tr * tr - det));
  const double l1 = 0.5 * tr + disc;
  const double l2 = std::max(0.0, 0.5 * tr - disc);
  if (l1 <= 0) return 0.0;
  const double k = std::sqrt(std::max(0.0, 1.0 - l2 / l1));
  return std::sqrt(2.0 * l1 / pi) * std::comp_ellint_2(k);
}

inline Mat2 adj2(const Mat2& a) {
  Mat2 r;
  r << a(1, 1), -a(0, 1), -a(1, 0), a(0, 0);
  return r;
}

}  // namespace detail

// Deterministic evaluation. With |x| = (1/(2 sqrt pi)) int (1 - e^{-t x^2}) t^{-3/2} dt
// and E exp(-W^T Lambda W) = det(I + 2 Lambda Theta)^{-1/2}, Lambda = diag(t,t,s,s):
//   E|U||V| = E|U| E|V| + (1/4pi) int int t^{-3/2} s^{-3/2} u v ((1+w)^{-1/2} - 1) dt ds
// where u = P(t,0)^{-1/2}, v = P(0,s)^{-1/2}, 1 + w = P(t,s) / (P(t,0) P(0,s)).
// The cross coefficients of P are formed from Schur-complement identities so
// the correction keeps full relative accuracy when the off-diagonal block is
// small. The double integral runs over log t, log s with a sinh map and
// trapezoid steps halved until the estimate settles.
inline double expected_norm_product(const Mat4& theta, double tol = 1e-10) {
  detail::check_theta(theta);
  const Mat2 a = theta.block<2, 2>(0, 0);
  const Mat2 b = theta.block<2, 2>(2, 2);
  const Mat2 c = theta.block<2, 2>(0, 2);
  const double eu = detail::mean_norm_2d(a);
  const double ev = detail::mean_norm_2d(b);
  if (c.cwiseAbs().maxCoeff() == 0.0) return eu * ev;

  const double c10 = 2 * a.trace(), c20 = 4 * a.determinant();
  const double c01 = 2 * b.trace(), c02 = 4 * b.determinant();
  const Mat2 adj_a = detail::adj2(a), adj_b = detail::adj2(b);
  const double d11 = -4 * c.squaredNorm();
  const double d21 = -8 * (c.transpose() * adj_a * c).trace();
  const double d12 = -8 * (c * adj_b * c.transpose()).trace();
  const double d22 = 16 * (c.determinant() * c.determinant() - (adj_b * c.transpose() * adj_a * c).trace());

  // Centre the log variables on the natural scales of each block.
  const double xa = -std::log(std::max(a.trace() * 0.5, 1e-300));
  const double xb = -std::log(std::max(b.trace() * 0.5, 1e-300));
  const double width = 3.0;
  const double smax = 4.0;  // |x - centre| up to 3 sinh(4) ~ 82

  struct Axis {
    std::vector<double> t, wt, u;  // t, dt-weight times t^{-1/2}, P(t,0)^{-1/2}
  };
  auto make_axis = [&](double centre, double h, double k1, double k2) {
    Axis ax;
    const int n = static_cast<int>(std::round(smax / h));
    for (int i = -n; i <= n; ++i) {
      const double xi = i * h;
      const double x = centre + width * std::sinh(xi);
      const double t = std::exp(x);
      const double dx = width * std::cosh(xi) * h;
      ax.t.push_back(t);
      ax.wt.push_back(dx / std::sqrt(t));  // t^{-3/2} dt = t^{-1/2} dx
      ax.u.push_back(1.0 / std::sqrt(1.0 + k1 * t + k2 * t * t));
    }
    return ax;
  };
  auto sum_grid = [&](const Axis& ta, const Axis& sa) {
    double acc = 0;
    for (std::size_t i = 0; i < ta.t.size(); ++i) {
      const double t = ta.t[i];
      const double p1 = 1.0 / (ta.u[i] * ta.u[i]);
      double row = 0;
      for (std::size_t j = 0; j < sa.t.size(); ++j) {
        const double s = sa.t[j];
        const double p2 = 1.0 / (sa.u[j] * sa.u[j]);
        const double w = t * s * (d11 + d21 * t + d12 * s + d22 * t * s) / (p1 * p2);
        row += sa.wt[j] * sa.u[j] * std::expm1(-0.5 * std::log1p(w));
      }
      acc += ta.wt[i] * ta.u[i] * row;
    }
    return acc;
  };

  double h = 0.5;
  double est = sum_grid(make_axis(xa, h, c10, c20), make_axis(xb, h, c01, c02));
  const double scale = eu * ev * 4.0 * pi;
  for (int level = 0; level < 5; ++level) {
    h *= 0.5;
    const double next = sum_grid(make_axis(xa, h, c10, c20), make_axis(xb, h, c01, c02));
    if (std::abs(next - est) <= tol * scale) return eu * ev + next / (4.0 * pi);
    est = next;
  }
  throw NumericError("expected_norm_product: correction integral did not settle");
}

// Randomized quasi-Monte Carlo: a Halton point set in [0,1)^4 with
// `shifts` independent Cranley-Patterson rotations, mapped to normals by
// Box-Muller. The standard error comes from the spread across shifts.
inline MomentEstimate expected_norm_product_qmc(const Mat4& theta, std::size_t n_points = 1 << 20,
                                                std::uint64_t seed = 7, int shifts = 16) {
  detail::check_theta(theta);
  const Eigen::LLT<Mat4> llt(theta);
  if (llt.info() != Eigen::Success) throw MatrixError("gaussian moment: Cholesky failed");
  const Mat4 L = llt.matrixL();
  const std::size_t per = std::max<std::size_t>(1, n_points / shifts);
  auto radical_inverse = [](std::size_t i, unsigned base) {
    double f = 1.0, r = 0.0;
    while (i > 0) {
      f /= base;
      r += f * (i % base);
      i /= base;
    }
    return r;
  };
  std::vector<double> means(shifts);
  parallel_for(static_cast<std::size_t>(shifts), [&](std::size_t k) {
    const auto [s0, s1] = philox_uniform_pair(seed, k, 0x716d63ull);
    const auto [s2, s3] = philox_uniform_pair(seed, k, 0x716d64ull);
    const double shift[4] = {s0, s1, s2, s3};
    double acc = 0;
    for (std::size_t i = 1; i <= per; ++i) {
      double u[4] = {radical_inverse(i, 2), radical_inverse(i, 3), radical_inverse(i, 5), radical_inverse(i, 7)};
      for (int d = 0; d < 4; ++d) {
        u[d] += shift[d];
        if (u[d] >= 1.0) u[d] -= 1.0;
        if (u[d] <= 0.0) u[d] = 0x1.0p-60;
      }
      const double r1 = std::sqrt(-2 * std::log(u[0])), r2 = std::sqrt(-2 * std::log(u[2]));
      const Eigen::Vector4d z(r1 * std::cos(two_pi * u[1]), r1 * std::sin(two_pi * u[1]), r2 * std::cos(two_pi * u[3]),
                              r2 * std::sin(two_pi * u[3]));
      const Eigen::Vector4d w = L * z;
      acc += std::hypot(w[0], w[1]) * std::hypot(w[2], w[3]);
    }
    means[k] = acc / static_cast<double>(per);
  });
  MomentEstimate est;
  for (double v : means) est.value += v;
  est.value /= shifts;
  double ss = 0;
  for (double v : means) ss += (v - est.value) * (v - est.value);
  est.std_error = std::sqrt(ss / (shifts - 1) / shifts);
  return est;
}

enum class K2Method { deterministic, qmc };

struct K2Value {
  double value = 0;
  double std_error = 0;
};

inline K2Value k2_exact(const KacRiceMatrices& mats, double r, K2Method method = K2Method::deterministic,
                        std::size_t qmc_points = 1 << 20, double tol = 1e-10) {
  if (!(std::abs(r) < 1.0)) throw DomainError("k2_exact: |r| must be below 1");
  const Mat4 th = 0.5 * (mats.theta_hat + mats.theta_hat.transpose());
  const double one_minus = r == mats.r ? mats.one_minus_r2 : 1.0 - r * r;
  const double pref = 1.0 / (two_pi * std::sqrt(one_minus));
  if (method == K2Method::qmc) {
    const auto e = expected_norm_product_qmc(th, qmc_points);
    return {pref * e.value, pref * e.std_error};
  }
  return {pref * expected_norm_product(th, tol), 0.0};
}

// Calibrated constant for |k2_exact - k2_expanded| <= C * P with
// P = r^4 + |X|^2 + |X'|^2 + |Y|^4 + |Y'|^4 (Frobenius norms). The worst
// ratio seen over 8000 pairs (sphere and tilted patch, m up to 1001) is 0.096.
inline constexpr double kExpansionConstant = 0.25;

inline double k2_expanded(const KacRiceMatrices& mats, double r) {
  if (std::abs(r) > 0.5) throw DomainError("k2_expanded: expansion needs |r| <= 1/2");
  return 0.25 * (1.0 + 0.5 * r * r + mats.X.trace() / 4 + mats.X_p.trace() / 4 + (mats.Y_p * mats.Y).trace() / 8);
}

struct PerturbedMoment {
  double formula = 0;
  double numeric = 0;
  double gap = 0;
};

inline PerturbedMoment perturbed_gaussian_moment(const Mat2& X, const Mat2& X_p, const Mat2& Y, const Mat2& Y_p) {
  const double tol = 1e-12;
  if ((X - X.transpose()).cwiseAbs().maxCoeff() > tol || (X_p - X_p.transpose()).cwiseAbs().maxCoeff() > tol ||
      (Y_p - Y.transpose()).cwiseAbs().maxCoeff() > tol) {
    throw MatrixError("perturbed_gaussian_moment: need symmetric X, X' and Y' = Y^T");
  }
  Mat4 th = Mat4::Identity();
  th.block<2, 2>(0, 0) += X;
  th.block<2, 2>(0, 2) += Y;
  th.block<2, 2>(2, 0) += Y_p;
  th.block<2, 2>(2, 2) += X_p;
  PerturbedMoment pm;
  pm.formula = 0.5 * pi * (1.0 + X.trace() / 4 + X_p.trace() / 4 + (Y_p * Y).trace() / 8);
  pm.numeric = expected_norm_product(th);
  pm.gap = std::abs(pm.formula - pm.numeric);
  return pm;
}

// ---- smoothed length -----------------------------------------------------

using FieldFunction = std::function<FieldJet(const Vec3&)>;

struct SmoothedLengthOptions {
  // Finest cells have ambient diameter <= resolution * eps / sqrt(3 M).
  double resolution = 0.25;
  int max_depth = 24;
  int leaf_points = 4;  // midpoint rule per side on finest straddling cells
};

// (1/2eps) int_Sigma chi(|F| <= eps) |grad_Sigma F| dsigma by adaptive
// subdivision of chart cells. A cell is classified entirely inside or
// outside the band when |F(centre)| -/+ G * S * d clears eps, where G bounds
// |grad F|, S bounds the chart stretch and d is the parameter half-diagonal.
inline double smoothed_length(const FieldFunction& field, double gradient_bound, double wave_scale,
                              const Surface& surface, double eps, const SmoothedLengthOptions& opt = {}) {
  if (!(eps > 0)) throw DomainError("smoothed_length: eps must be positive");
  const double target = opt.resolution * eps / wave_scale;
  const Rule1D& g3 = gauss_legendre(3);
  double total = 0;
  for (const auto& ch : surface.charts) {
    const auto [su, sv] = ch.max_stretch();
    const double stretch = std::hypot(su, sv);
    const double base = std::max(target, 0.8 / wave_scale);  // about 1/8 wavelength
    const int nu = std::max(1, static_cast<int>(std::ceil(su * (ch.u1 - ch.u0) / base)));
    const int nv = std::max(1, static_cast<int>(std::ceil(sv * (ch.v1 - ch.v0) / base)));
    auto surface_grad = [&](double u, double v, double* fval) {
      const ChartJet j = ch.jet(u, v);
      const Vec3 cr = j.du.cross(j.dv);
      const double a = cr.norm();
      const Vec3 n = cr / a;
      const FieldJet f = field(j.p);
      *fval = f.value;
      return std::pair{(f.gradient - f.gradient.dot(n) * n).norm(), a};
    };
    std::function<double(double, double, double, double, int)> cell = [&](double a0, double a1, double b0,
                                                                         double b1, int depth) -> double {
      const double du = a1 - a0, dv = b1 - b0;
      const double half = 0.5 * std::hypot(du, dv);
      const double fc = field(ch.point(0.5 * (a0 + a1), 0.5 * (b0 + b1))).value;
      const double beta = gradient_bound * stretch * half;
      if (std::abs(fc) - beta > eps) return 0.0;
      const double diam = stretch * 2 * half;
      if (std::abs(fc) + beta < eps) {
        double acc = 0;
        for (int i = 0; i < 3; ++i) {
          for (int k = 0; k < 3; ++k) {
            double fv = 0;
            const auto [gs, ae] = surface_grad(a0 + du * 0.5 * (g3.x[i] + 1), b0 + dv * 0.5 * (g3.x[k] + 1), &fv);
            acc += 0.25 * g3.w[i] * g3.w[k] * gs * ae;
          }
        }
        return acc * du * dv;
      }
      if (diam > target) {
        if (depth >= opt.max_depth) throw ResolutionError("smoothed_length: refinement depth exhausted");
        const double am = 0.5 * (a0 + a1), bm = 0.5 * (b0 + b1);
        return cell(a0, am, b0, bm, depth + 1) + cell(am, a1, b0, bm, depth + 1) + cell(a0, am, bm, b1, depth + 1) +
               cell(am, a1, bm, b1, depth + 1);
      }
      double acc = 0;
      const int k = opt.leaf_points;
      for (int i = 0; i < k; ++i) {
        for (int l = 0; l < k; ++l) {
          double fv = 0;
          const auto [gs, ae] = surface_grad(a0 + du * (i + 0.5) / k, b0 + dv * (l + 0.5) / k, &fv);
          if (std::abs(fv) <= eps) acc += gs * ae;
        }
      }
      return acc * du * dv / (k * k);
    };
    std::vector<double> parts(static_cast<std::size_t>(nu) * nv);
    parallel_for(parts.size(), [&](std::size_t idx) {
      const int i = static_cast<int>(idx / nv), k = static_cast<int>(idx % nv);
      const double a0 = ch.u0 + (ch.u1 - ch.u0) * i / nu, a1 = ch.u0 + (ch.u1 - ch.u0) * (i + 1) / nu;
      const double b0 = ch.v0 + (ch.v1 - ch.v0) * k / nv, b1 = ch.v0 + (ch.v1 - ch.v0) * (k + 1) / nv;
      parts[idx] = cell(a0, a1, b0, b1, 0);
    });
    total += ordered_sum(parts);
  }
  return total / (2 * eps);
}

inline double smoothed_length(const WaveSample& w, const Surface& surface, double eps,
                              const SmoothedLengthOptions& opt = {}) {
  double amp = 0;
  for (const auto& a : w.coefficients) amp += std::abs(a);
  const double grad_bound = 2.0 / std::sqrt(static_cast<double>(w.n_points)) * amp * two_pi *
                            std::sqrt(static_cast<double>(w.m));
  const double scale = std::sqrt(3.0 * gradient_variance(w.m));
  return smoothed_length([&w](const Vec3& x) { return evaluate(w, x); }, grad_bound, scale, surface, eps, opt);
}

}  // namespace waves
