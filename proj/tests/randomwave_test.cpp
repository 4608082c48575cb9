#include "oracles.hpp"
#include "waves/randomwave.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace waves;

namespace {

Vec3 random_unit(std::mt19937_64& g) {
  std::normal_distribution<double> n;
  return Vec3(n(g), n(g), n(g)).normalized();
}

Vec3 random_point(std::mt19937_64& g) {
  std::uniform_real_distribution<double> u(0.1, 0.9);
  return Vec3(u(g), u(g), u(g));
}

}  // namespace

TEST(Philox, KnownAnswers) {
  using P = Philox4x32;
  EXPECT_EQ(P::generate({0, 0, 0, 0}, {0, 0}), (P::Counter{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
  EXPECT_EQ(P::generate({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff}),
            (P::Counter{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
  EXPECT_EQ(P::generate({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0}),
            (P::Counter{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
}

TEST(Sample, DeterministicAndHermitian) {
  const auto set = enumerate(11);
  const auto a = sample(set, 42), b = sample(set, 42), c = sample(set, 43);
  ASSERT_EQ(a.coefficients.size(), set.n_points() / 2);
  EXPECT_EQ(a.coefficients, b.coefficients);
  EXPECT_NE(a.coefficients, c.coefficients);
  EXPECT_THROW(sample(enumerate(7), 1), DomainError);
  double norm = 0;
  for (const auto& z : a.coefficients) norm += std::norm(z);
  std::mt19937_64 g(5);
  for (int i = 0; i < 100; ++i) {
    const Vec3 x = random_point(g);
    const auto full = oracle::full_field(set, a.coefficients, x);
    EXPECT_LT(std::abs(full.imag()), 1e-12 * std::sqrt(norm));
    EXPECT_NEAR(full.real(), evaluate(a, x).value, 1e-12);
  }
}

TEST(Sample, MomentsOverSeeds) {
  const auto set = enumerate(11);
  const auto sp = Spectrum::of(set);
  const Vec3 x0(0.31, 0.42, 0.57), x1(0.35, 0.40, 0.55);
  const int n = 10000;
  double s1 = 0, s2 = 0, s01 = 0;
  Mat3 gg = Mat3::Zero();
  for (int i = 0; i < n; ++i) {
    const auto w = sample(set, 1000 + i);
    const auto f0 = evaluate(w, x0);
    const double f1 = evaluate(w, x1).value;
    s1 += f0.value;
    s2 += f0.value * f0.value;
    s01 += f0.value * f1;
    gg += f0.gradient * f0.gradient.transpose();
  }
  const double mean = s1 / n, var = s2 / n - mean * mean;
  EXPECT_LT(std::abs(mean), 4 * std::sqrt(var / n));
  EXPECT_NEAR(var, 1.0, 0.05);
  EXPECT_NEAR(s01 / n, covariance_jet(sp, x0, x1).r, 4 * std::sqrt(2.0 / n));
  const double M = gradient_variance(11);
  EXPECT_LT(((gg / n) - M * Mat3::Identity()).cwiseAbs().maxCoeff(), 0.05 * M);
}

TEST(Evaluate, UnitCoefficientsMOne) {
  const auto set = enumerate(1);
  auto w = sample(set, 0);
  for (auto& a : w.coefficients) a = 1.0;
  const Vec3 x(0.1, 0.27, 0.8);
  const double ref = 2 / std::sqrt(6.0) * (std::cos(two_pi * x[0]) + std::cos(two_pi * x[1]) + std::cos(two_pi * x[2]));
  EXPECT_NEAR(evaluate(w, x).value, ref, 1e-14);
}

TEST(Evaluate, GradientAndLaplacian) {
  const auto set = enumerate(19);
  const auto w = sample(set, 9);
  std::mt19937_64 g(1);
  for (int t = 0; t < 20; ++t) {
    const Vec3 x = random_point(g);
    const auto f = evaluate(w, x);
    const double h = 1e-6;
    Vec3 fd;
    double lap = 0;
    for (int k = 0; k < 3; ++k) {
      Vec3 e = Vec3::Zero();
      e[k] = h;
      fd[k] = (evaluate(w, x + e).value - evaluate(w, x - e).value) / (2 * h);
      Vec3 e2 = Vec3::Zero();
      e2[k] = 1e-4;
      lap += (evaluate(w, x + e2).value - 2 * f.value + evaluate(w, x - e2).value) / 1e-8;
    }
    EXPECT_LT((fd - f.gradient).norm(), 1e-6 * f.gradient.norm());
    const double target = -4 * pi * pi * 19 * f.value;
    EXPECT_LT(std::abs(lap - target), 1e-4 * std::max(1.0, std::abs(target)));
  }
}

TEST(CovarianceJet, Examples) {
  const auto set = enumerate(1);
  const Vec3 s(0.3, 0.2, 0.6);
  const auto j0 = covariance_jet(set, s, s);
  EXPECT_DOUBLE_EQ(j0.r, 1.0);
  EXPECT_LT(j0.D.norm(), 1e-15);
  EXPECT_LT((j0.H + gradient_variance(1) * Mat3::Identity()).norm(), 1e-12);
  EXPECT_NEAR(covariance_jet(set, s + Vec3(0.5, 0, 0), s).r, 1.0 / 3, 1e-15);
}

TEST(CovarianceJet, DerivativesAndStationarity) {
  const auto set = enumerate(35);
  const auto sp = Spectrum::of(set);
  std::mt19937_64 g(2);
  for (int t = 0; t < 20; ++t) {
    const Vec3 a = random_point(g), b = random_point(g);
    const auto j = covariance_jet(sp, a, b);
    const double h = 1e-5;
    for (int k = 0; k < 3; ++k) {
      Vec3 e = Vec3::Zero();
      e[k] = h;
      const auto p = covariance_jet(sp, a + e, b), m = covariance_jet(sp, a - e, b);
      EXPECT_NEAR((p.r - m.r) / (2 * h), j.D[k], 1e-6 * std::max(1.0, j.D.norm()));
      const Vec3 col = (p.D - m.D) / (2 * h);
      EXPECT_LT((col - j.H.col(k)).norm(), 1e-6 * std::max(1.0, j.H.norm()));
    }
    const Vec3 shift(0.05, -0.03, 0.02);
    const auto js = covariance_jet(sp, a + shift, b + shift);
    EXPECT_NEAR(js.r, j.r, 1e-14);
    EXPECT_LE(std::abs(j.r), 1.0);
  }
}

TEST(KacRice, SimpleCases) {
  CovarianceJet zero;
  const auto k = kacrice_matrices(zero, Vec3(0, 0, 1), Vec3(0, 1, 0), 3);
  EXPECT_LT((k.omega - Vec3(1, 1, 0).asDiagonal().toDenseMatrix()).norm(), 1e-15);
  EXPECT_LT((k.q - Mat2::Identity()).norm(), 1e-15);
  EXPECT_LT((k.theta_hat - Mat4::Identity()).norm(), 1e-15);
  CovarianceJet diag;
  diag.r = 1.0 - 1e-12;
  EXPECT_THROW(kacrice_matrices(diag, Vec3(0, 0, 1), Vec3(0, 0, 1), 3), NumericError);
}

TEST(KacRice, IdentitiesAndFrameInvariance) {
  const auto set = enumerate(19);
  const auto sp = Spectrum::of(set);
  std::mt19937_64 g(3);
  int checked = 0;
  while (checked < 500) {
    const Vec3 a = random_point(g), b = random_point(g);
    const Vec3 n = random_unit(g), np = random_unit(g);
    const auto jet = covariance_jet(sp, a, b);
    if (std::abs(jet.r) > 0.5) continue;
    ++checked;
    const auto k = kacrice_matrices(jet, n, np, 19);
    EXPECT_LT((k.omega * k.omega - k.omega).norm(), 1e-12);
    EXPECT_LT((k.omega * n).norm(), 1e-12);
    const auto L = k.frame.selector();
    EXPECT_LT((k.q * k.q * (L.transpose() * k.omega * L) - Mat2::Identity()).norm(), 1e-12);
    EXPECT_LT((k.theta_hat - k.theta_hat.transpose()).norm(), 1e-12);
    EXPECT_GT(Eigen::SelfAdjointEigenSolver<Mat4>(k.theta_hat).eigenvalues().minCoeff(), 0.0);
    EXPECT_LE(k.X(0, 0), 1e-15);
    EXPECT_LE(k.X(1, 1), 1e-15);
    EXPECT_LE(k.X_p(0, 0), 1e-15);
    const auto t = kacrice_traces(jet, n, np, 19);
    EXPECT_NEAR(t.trX, k.X.trace(), 1e-12);
    EXPECT_NEAR(t.trXp, k.X_p.trace(), 1e-12);
    EXPECT_NEAR(t.trYY, (k.Y_p * k.Y).trace(), 1e-12);
    const double det = k.theta_hat.determinant();
    for (int p = 0; p < 3; ++p) {
      for (int pp = 0; pp < 3; ++pp) {
        if (std::abs(n[p]) < 0.05 || std::abs(np[pp]) < 0.05) continue;
        const auto kk = kacrice_matrices(jet, n, np, 19, p, pp);
        EXPECT_NEAR(kk.X.trace(), k.X.trace(), 1e-10);
        EXPECT_NEAR(kk.X_p.trace(), k.X_p.trace(), 1e-10);
        EXPECT_NEAR((kk.Y_p * kk.Y).trace(), (k.Y_p * k.Y).trace(), 1e-10);
        EXPECT_NEAR(kk.theta_hat.determinant(), det, 1e-10);
      }
    }
  }
}

TEST(KacRice, BlocksBoundedOnSurfacePairs) {
  const auto set = enumerate(11);
  const auto sp = Spectrum::of(set);
  const auto s = make_surface(SphereSpec{});
  const auto nodes = surface_nodes(s, 6);
  double worst = 0;
  for (std::size_t i = 0; i < nodes.size(); i += 3) {
    for (std::size_t j = 0; j < nodes.size(); j += 5) {
      const auto jet = covariance_jet(sp, nodes[i].x, nodes[j].x);
      if (std::abs(jet.r) > 0.5) continue;
      const auto k = kacrice_matrices(jet, nodes[i].n, nodes[j].n, 11);
      worst = std::max({worst, k.X.cwiseAbs().maxCoeff(), k.Y.cwiseAbs().maxCoeff(), k.X_p.cwiseAbs().maxCoeff()});
    }
  }
  EXPECT_LT(worst, 5.0);
}

TEST(K1, Values) {
  EXPECT_NEAR(k1_density(3), pi, 1e-15);
  EXPECT_NEAR(k1_density(1), pi / std::sqrt(3.0), 1e-15);
  EXPECT_NEAR(k1_density(44) / k1_density(11), 2.0, 1e-15);
}

TEST(GaussianMoment, IdentityBlockDiagonalAndQmc) {
  EXPECT_NEAR(expected_norm_product(Mat4::Identity()), pi / 2, 1e-15);
  std::mt19937_64 g(4);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 4; ++t) {
    Mat4 a;
    for (int i = 0; i < 16; ++i) a.data()[i] = 0.3 * nd(g);
    Mat4 th = (Mat4::Identity() + a) * (Mat4::Identity() + a).transpose();
    // block-diagonal: E|U| E|V| with E|U| from the elliptic integral, checked
    // against a one-dimensional angular quadrature
    Mat4 bd = th;
    bd.block<2, 2>(0, 2).setZero();
    bd.block<2, 2>(2, 0).setZero();
    auto angular = [](const Mat2& b) {
      // E|U| = sqrt(pi/2) * (1/2pi) int (theta^T B^-1 theta)^{-3/2} dtheta / sqrt(det B)
      const Mat2 bi = b.inverse();
      double acc = 0;
      const int n = 4000;
      for (int k = 0; k < n; ++k) {
        const Vec2 th(std::cos(two_pi * k / n), std::sin(two_pi * k / n));
        acc += std::pow(th.dot(bi * th), -1.5);
      }
      return std::sqrt(pi / 2) * acc / n / std::sqrt(b.determinant());
    };
    const double ref = angular(bd.block<2, 2>(0, 0)) * angular(bd.block<2, 2>(2, 2));
    EXPECT_NEAR(expected_norm_product(bd), ref, 1e-10 * ref);
    const double det = expected_norm_product(th);
    const auto q = expected_norm_product_qmc(th, 1 << 20);
    EXPECT_LT(std::abs(det - q.value), 5 * q.std_error + 1e-12);
    EXPECT_LT(q.std_error, 1e-3 * q.value);
  }
  Mat4 bad = Mat4::Identity();
  bad(0, 0) = -0.1;
  EXPECT_THROW(expected_norm_product(bad), MatrixError);
}

TEST(K2, ExactAndExpanded) {
  KacRiceMatrices zero = kacrice_matrices(CovarianceJet{}, Vec3(0, 0, 1), Vec3(0, 0, 1), 5);
  EXPECT_NEAR(k2_exact(zero, 0.0).value, 0.25, 1e-15);
  const auto q = k2_exact(zero, 0.0, K2Method::qmc);
  EXPECT_LT(std::abs(q.value - 0.25), 5 * q.std_error);
  EXPECT_DOUBLE_EQ(k2_expanded(zero, 0.0), 0.25);
  EXPECT_NEAR(k2_expanded(zero, 0.1), 0.25125, 1e-15);
  EXPECT_THROW(k2_expanded(zero, 0.6), DomainError);
}

TEST(K2, DiagonalProfile) {
  // M k2 ~ sqrt(m)/|s - s'| as the pair merges along the surface.
  const auto set = enumerate(11);
  const auto sp = Spectrum::of(set);
  const auto s = make_surface(SphereSpec{});
  const auto& ch = s.charts[1];
  const double M = gradient_variance(11);
  std::vector<double> scaled;
  for (double d : {3e-2, 1e-2, 3e-3, 1e-3}) {
    const Vec3 a = ch.point(1.3, 2.0), b = ch.point(1.3 + d / 0.2, 2.0);
    const auto jet = covariance_jet(sp, a, b);
    const auto k = kacrice_matrices(jet, ch.normal(1.3, 2.0), ch.normal(1.3 + d / 0.2, 2.0), 11);
    scaled.push_back(M * k2_exact(k, jet.r).value * (a - b).norm() / std::sqrt(11.0));
  }
  for (double v : scaled) {
    EXPECT_GT(v, 0.1);
    EXPECT_LT(v, 10.0);
  }
  EXPECT_NEAR(scaled[3] / scaled[2], 1.0, 0.02);
}

TEST(PerturbedMoment, Examples) {
  const Mat2 z = Mat2::Zero();
  const auto p0 = perturbed_gaussian_moment(z, z, z, z);
  EXPECT_NEAR(p0.formula, pi / 2, 1e-15);
  EXPECT_NEAR(p0.numeric, pi / 2, 1e-15);
  const auto px = perturbed_gaussian_moment(-0.01 * Mat2::Identity(), z, z, z);
  EXPECT_NEAR(px.formula, pi / 2 * (1 - 0.005), 1e-15);
  EXPECT_LT(px.gap, 1e-4);
  Mat2 ns;
  ns << 0, 0.1, 0, 0;
  EXPECT_THROW(perturbed_gaussian_moment(ns, z, z, z), MatrixError);
  EXPECT_THROW(perturbed_gaussian_moment(z, z, ns, ns), MatrixError);
  EXPECT_THROW(perturbed_gaussian_moment(-2 * Mat2::Identity(), z, z, z), MatrixError);
}

TEST(PerturbedMoment, GapIsHigherOrder) {
  std::mt19937_64 g(6);
  std::normal_distribution<double> nd;
  double worst = 0;
  for (int t = 0; t < 200; ++t) {
    const double eps = std::pow(10.0, -1 - 2 * std::uniform_real_distribution<double>(0, 1)(g));
    Mat2 x, xp, y;
    for (int i = 0; i < 4; ++i) {
      x.data()[i] = eps * nd(g);
      xp.data()[i] = eps * nd(g);
      y.data()[i] = eps * nd(g);
    }
    x = 0.5 * (x + x.transpose()).eval();
    xp = 0.5 * (xp + xp.transpose()).eval();
    const auto p = perturbed_gaussian_moment(x, xp, y, y.transpose());
    const double bound = x.squaredNorm() + xp.squaredNorm() + 2 * std::pow(y.norm(), 3);
    worst = std::max(worst, p.gap / bound);
  }
  EXPECT_LT(worst, 2.0);
}

TEST(SmoothedLength, ShiftedFieldAndBound) {
  const auto set = enumerate(3);
  const auto s = make_surface(SphereSpec{});
  const auto w = sample(set, 17);
  const FieldFunction shifted = [&w](const Vec3& x) {
    auto f = evaluate(w, x);
    f.value += 100.0;
    return f;
  };
  EXPECT_EQ(smoothed_length(shifted, 30.0, 10.9, s, 0.01), 0.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    EXPECT_LE(smoothed_length(sample(set, seed), s, 0.01), 18 * std::sqrt(3.0));
  }
  EXPECT_THROW(smoothed_length(w, s, 0.0), DomainError);
}

TEST(WaveJson, Shape) {
  const auto j = to_json(sample(enumerate(3), 5));
  EXPECT_EQ(j["m"], 3);
  EXPECT_EQ(j["seed"], 5);
  EXPECT_EQ(j["coefficients"].size(), 4u);
  EXPECT_EQ(j["coefficients"][0].size(), 2u);
}
