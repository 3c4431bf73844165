#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "patchnr/analysis.hpp"

namespace patchnr {
namespace {

double normal2(double x, double y, double mx, double my) {
  return std::exp(-0.5 * ((x - mx) * (x - mx) + (y - my) * (y - my))) / (2 * M_PI);
}

TEST(MarginalDensity, StandardNormalMarginals) {
  const auto inst = TinyInstance::gaussian(1, 3, 1, 2, {0, 0, 0});
  for (double a : {-2.0, -0.3, 0.0, 1.1}) {
    for (double b : {-1.5, 0.0, 0.7, 2.4}) {
      const std::vector<double> p{a, b};
      EXPECT_NEAR(marginal_density(inst, p), normal2(a, b, 0, 0), 1e-6);
    }
  }
}

TEST(MarginalDensity, ShiftedMeanGivesMixtureOfMarginals) {
  const auto inst = TinyInstance::gaussian(1, 3, 1, 2, {0, 1, 2});
  for (double a : {-1.0, 0.0, 0.5, 1.5, 3.0}) {
    for (double b : {-0.5, 1.0, 1.7, 2.5}) {
      const std::vector<double> p{a, b};
      const double expected = 0.5 * normal2(a, b, 0, 1) + 0.5 * normal2(a, b, 1, 2);
      EXPECT_NEAR(marginal_density(inst, p), expected, 1e-6);
      EXPECT_NEAR(marginal_closed_form(inst, p), expected, 1e-12);
    }
  }
}

TEST(MarginalDensity, TwoMarginalizedPixels) {
  // 2x2 image, 1x2 patches: two off-patch pixels integrated by nested quadrature.
  Eigen::MatrixXd cov(4, 4);
  cov << 1.0, 0.3, 0.1, 0.0,
         0.3, 1.5, 0.0, 0.2,
         0.1, 0.0, 0.8, 0.1,
         0.0, 0.2, 0.1, 1.2;
  Eigen::VectorXd mu(4);
  mu << 0.2, -0.4, 1.0, 0.0;
  const TinyInstance inst{PatchGeometry(2, 2, 1, 2), PatchGMM({1.0}, {mu}, {cov})};
  const std::vector<double> p{0.3, -0.2};
  EXPECT_NEAR(marginal_density(inst, p, 1e-9), marginal_closed_form(inst, p), 1e-6);
}

TEST(MarginalDensity, EmpiricalHistogramMatchesFormula) {
  const auto inst = TinyInstance::gaussian(1, 3, 1, 2, {0, 1, 2});
  const auto rep = marginal_density_check(inst, 1'000'000, 17);
  EXPECT_LT(rep.max_deviation, 0.01);
  EXPECT_EQ(rep.samples, 1'000'000u);
  EXPECT_GT(rep.grid_points, 100u);
}

TEST(MarginalDensity, QuadratureNonConvergenceIsAnError) {
  EXPECT_THROW(integrate_simpson([](double x) { return 1.0 / (x * x); }, -1.0, 1.0), Error);
  EXPECT_NEAR(integrate_simpson([](double x) { return x * x; }, 0.0, 3.0), 9.0, 1e-12);
}

TEST(DensityBounds, IdentityIsTight) {
  const std::vector<double> a{1, 1, 1, 1}, b{0, 0, 0, 0};
  const auto cf = make_certified_affine(a, b);
  EXPECT_EQ(cf.certificate.K, 1.0);
  EXPECT_EQ(cf.certificate.L, 1.0);
  const auto rep = density_bounds_check(cf.flow, cf.certificate, 1000, 3);
  EXPECT_EQ(rep.violations, 0u);
  EXPECT_NEAR(rep.min_slack, 0.0, 1e-10);
}

TEST(DensityBounds, DoublingMapDirectInequalities) {
  const std::vector<double> a{2, 2}, b{0, 0};
  const auto cf = make_certified_affine(a, b);
  EXPECT_EQ(cf.certificate.K, 2.0);
  EXPECT_EQ(cf.certificate.L, 0.5);
  // Density N(0, 4I). With K = 2 and L = 1/2, L^s K^s = 1 and I / L^2 = 4I,
  // so both bounds equal the density itself.
  auto n2 = [](double x, double y, double var) { return std::exp(-0.5 * (x * x + y * y) / var) / (2 * M_PI * var); };
  Rng rng(5);
  NormalSampler normal;
  for (int t = 0; t < 200; ++t) {
    const double x = 3 * normal(rng), y = 3 * normal(rng);
    const double dens = std::exp(-cf.flow.nll(std::vector<double>{x, y}));
    EXPECT_NEAR(dens, n2(x, y, 4.0), 1e-12);
    EXPECT_GE(4 * n2(x, y, 4.0), dens);
    EXPECT_NEAR(n2(x, y, 1.0 / (0.5 * 0.5)), dens, 1e-12);
  }
  const auto rep = density_bounds_check(cf.flow, cf.certificate, 2000, 6);
  EXPECT_EQ(rep.violations, 0u);
  EXPECT_NEAR(rep.min_slack, 0.0, 1e-10);
}

TEST(DensityBounds, RandomDiagonalAffineFlows) {
  Rng rng(7);
  for (int f = 0; f < 5; ++f) {
    std::vector<double> a(4), b(4);
    for (int j = 0; j < 4; ++j) {
      a[j] = 0.5 + 1.5 * NormalSampler::unit(rng);
      b[j] = 2 * NormalSampler::unit(rng) - 1;
    }
    const auto cf = make_certified_affine(a, b);
    const auto rep = density_bounds_check(cf.flow, cf.certificate, 10000, 100 + f);
    EXPECT_EQ(rep.violations, 0u);
    EXPECT_EQ(rep.points, 10000u);
    EXPECT_GE(rep.min_slack, -1e-10);
  }
}

TEST(TailDecay, RequiresCertificate) {
  const auto cf = make_certified_affine(std::vector<double>{1, 1}, std::vector<double>{0, 0});
  const PatchGeometry g(1, 4, 1, 2);
  EXPECT_THROW(tail_decay_check(cf.flow, std::nullopt, g, 1.0, {2, 4, 6}), Error);
  EXPECT_THROW(tail_decay_check(cf.flow, cf.certificate, PatchGeometry(1, 6, 1, 2), 1.0, {2, 4, 6}), Error);
}

TEST(TailDecay, IdentityFlowClosedForm) {
  const auto cf = make_certified_affine(std::vector<double>{1, 1}, std::vector<double>{0, 0});
  const PatchGeometry g(1, 4, 1, 2);  // coverage 1, 2, 2, 1
  const double rho = 1.0;
  TailOptions opt;
  opt.box_samples = 1'000'000;
  const auto rep = tail_decay_check(cf.flow, cf.certificate, g, rho, {1, 2, 4, 8, 16}, opt);
  const double closed = -rho * 1.0 / (2 * 2.0);
  EXPECT_TRUE(rep.decreasing);
  EXPECT_LT(rep.slope, 0.0);
  EXPECT_NEAR(rep.slope, closed, 0.05 * std::abs(closed));
  for (const auto& row : rep.table) EXPECT_NEAR(row.max_log_phi, closed * row.radius * row.radius, 1e-6);
  // phi = exp(-(rho / 2s) sum_j c_j x_j^2) integrates to prod_j sqrt(4 pi / c_j).
  const double exact = std::pow(4 * M_PI, 2) / 2.0;
  EXPECT_NEAR(rep.outer_integral, exact, 4 * rep.integral_stderr);
  EXPECT_LT(rep.relative_change, 0.01);
}

TEST(TailDecay, AffineFlowWithinSandwichBracket) {
  const auto cf = make_certified_affine(std::vector<double>{2, 2}, std::vector<double>{1, 1});
  const PatchGeometry g(1, 4, 1, 2);
  TailOptions opt;
  opt.box_samples = 200'000;
  const auto rep = tail_decay_check(cf.flow, cf.certificate, g, 1.0, {4, 8, 16, 32, 64}, opt);
  const auto [lo, hi] = tail_slope_bracket(cf.certificate, g, 1.0);
  EXPECT_TRUE(rep.decreasing);
  EXPECT_GE(rep.slope, lo * 1.05);
  EXPECT_LE(rep.slope, hi * 0.95);
}

TEST(TailDecay, BoxIntegralStabilizesAtFullSampleCount) {
  const auto cf = make_certified_affine(std::vector<double>{1, 1}, std::vector<double>{0, 0});
  const PatchGeometry g(1, 4, 1, 2);
  TailOptions opt;  // 1e7 samples
  const auto start = std::chrono::steady_clock::now();
  const auto rep = tail_decay_check(cf.flow, cf.certificate, g, 1.0, {2, 4, 8}, opt);
  EXPECT_LT(rep.relative_change, 0.01);
  EXPECT_GT(rep.inner_integral, 0.0);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 120.0);
}

}  // namespace
}  // namespace patchnr
