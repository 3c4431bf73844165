#include <gtest/gtest.h>

#include <cmath>

#include "patchnr/priors.hpp"
#include "test_support.hpp"

namespace patchnr {
namespace {

using testing::random_cflow;
using testing::random_flow;
using testing::random_grid;
using testing::randomize_params;

constexpr double kLog2Pi = 1.8378770664093453;

PatchFlow<double> identity_flow(std::size_t dim) {
  FlowArchitecture arch;
  arch.dim = dim;
  arch.hidden = 8;
  arch.identity_permutations = true;
  return PatchFlow<double>(arch);
}

double image_grad_error(const std::function<PriorValue<double>(const Image<double>&)>& prior,
                        const Image<double>& x, double step) {
  return grad_check(
             [&](const ValueGrid<double>& v) {
               auto r = prior(v);
               return Evaluation<double>{r.value, r.gradient};
             },
             x, step)
      .max_rel_error;
}

TEST(PatchNR, IdentityFlowClosedForm) {
  const auto flow = identity_flow(36);
  const PatchGeometry g(10, 11, 6, 6);
  const Image<double> cst({10, 11}, 0.7);
  const auto r = patchnr(cst, flow, g, all_patch_indices(g));
  EXPECT_NEAR(r.value, static_cast<double>(g.patch_count()) * 0.49 / 2, 1e-12);

  Rng rng(1);
  const auto x = random_grid({10, 11}, rng);
  const auto idx = sample_patch_indices(g, 40, rng);
  double expected = 0;
  for (auto i : idx)
    for (double v : extract_patch(x, g, i)) expected += 0.5 * v * v;
  const auto rx = patchnr(x, flow, g, idx);
  EXPECT_NEAR(rx.value, expected / 36.0, 1e-12);
  // Gradient of (1/s) sum 0.5|P_i x|^2 is (1/s) sum P_i^T P_i x.
  Mat<double> px = extract_patches(x, g, idx) / 36.0;
  const auto expected_grad = insert_adjoint(px, idx, g);
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(rx.gradient.values()[k], expected_grad.values()[k], 1e-14);
}

TEST(PatchNR, GradientMatchesFiniteDifferences) {
  const auto flow = random_flow(36, 16, 2, 0.15);
  const PatchGeometry g(8, 8, 6, 6);
  Rng rng(3);
  const auto x = random_grid({8, 8}, rng, 0.5);
  const auto idx = sample_patch_indices(g, 6, rng);
  EXPECT_LT(image_grad_error([&](const Image<double>& v) { return patchnr(v, flow, g, idx); }, x, 1e-5), 1e-4);
  EXPECT_LT(image_grad_error([&](const Image<double>& v) { return patchnr(v, flow, g, all_patch_indices(g)); }, x,
                             1e-5),
            1e-4);
}

TEST(PatchNR, ConstantImageShiftInvariance) {
  const auto flow = random_flow(16, 8, 4, 0.2);
  const PatchGeometry g(9, 9, 4, 4);
  const Image<double> cst({9, 9}, 0.3);
  const double base = patchnr(cst, flow, g, {0}).value;
  for (std::size_t i = 1; i < g.patch_count(); ++i) EXPECT_EQ(patchnr(cst, flow, g, {i}).value, base);
}

TEST(PatchNR, PeriodicContentShiftInvariance) {
  const auto flow = random_flow(16, 8, 5, 0.2);
  const PatchGeometry g(10, 10, 4, 4);
  // Period 3 in both directions: windows three pixels apart see identical content.
  auto x = Image<double>::image(10, 10);
  Rng rng(6);
  NormalSampler normal;
  double tile[3][3];
  for (auto& row : tile)
    for (auto& v : row) v = normal(rng);
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t c = 0; c < 10; ++c) x(r, c) = tile[r % 3][c % 3];
  const std::size_t cpr = g.corners_per_row();
  for (std::size_t r = 0; r + 3 < 7; ++r)
    for (std::size_t c = 0; c + 3 < 7; ++c) {
      const double v = patchnr(x, flow, g, {r * cpr + c}).value;
      EXPECT_EQ(patchnr(x, flow, g, {(r + 3) * cpr + c}).value, v);
      EXPECT_EQ(patchnr(x, flow, g, {r * cpr + c + 3}).value, v);
    }
}

TEST(PatchNR, RejectsBadInputs) {
  const auto flow = random_flow(16, 8, 4);
  const PatchGeometry g(9, 9, 4, 4);
  const Image<double> x({9, 9}, 0.0);
  EXPECT_THROW(patchnr(x, flow, g, {}), Error);
  EXPECT_THROW(patchnr(x, flow, PatchGeometry(9, 9, 3, 3), {0}), Error);
  // A blown-up flow gives a non-finite value.
  auto bad = flow;
  for (auto& e : bad.params())
    for (auto& v : e.value.storage()) v = 1e200;
  EXPECT_THROW(patchnr(Image<double>({9, 9}, 1.0), bad, g, {0}), Error);
}

TEST(CPatchNR, ConditionIndependentFlowMatchesUnconditional) {
  FlowArchitecture arch;
  arch.dim = 16;
  arch.hidden = 12;
  arch.blocks = 3;
  arch.identity_permutations = true;
  PatchFlow<double> flow(arch);
  Rng rng(7);
  randomize_params(flow.params(), rng, 0.2);
  arch.condition_dim = 16;
  ConditionalPatchFlow<double> cflow(arch);
  cflow.params().set_zero();
  const std::size_t half = 8, hid = 12;
  for (const auto& e : flow.params()) {
    auto& dst = cflow.params().get(e.name);
    if (e.name.find("fc0.weight") != std::string::npos) {
      // Condition rows follow the half-input rows and stay zero.
      for (std::size_t i = 0; i < half * hid; ++i) dst[i] = e.value[i];
    } else {
      dst = e.value;
    }
  }
  const PatchGeometry g(9, 8, 4, 4);
  const auto x = random_grid({9, 8}, rng);
  const auto cond = random_grid({9, 8}, rng, 3.0);
  const auto idx = sample_patch_indices(g, 20, rng);
  const auto u = patchnr(x, flow, g, idx);
  const auto c = cpatchnr(x, cond, cflow, g, idx);
  EXPECT_EQ(u.value, c.value);
  EXPECT_EQ(u.gradient.storage(), c.gradient.storage());
}

TEST(CPatchNR, GradientMatchesFiniteDifferences) {
  const auto cflow = random_cflow(36, 36, 16, 8, 0.15);
  const PatchGeometry g(8, 8, 6, 6);
  Rng rng(9);
  const auto x = random_grid({8, 8}, rng, 0.5);
  const auto cond = random_grid({8, 8}, rng, 0.5);
  const auto idx = sample_patch_indices(g, 6, rng);
  EXPECT_LT(image_grad_error([&](const Image<double>& v) { return cpatchnr(v, cond, cflow, g, idx); }, x, 1e-5), 1e-4);
}

TEST(CPatchNR, ZeroSubnetFlowAtZeroImage) {
  FlowArchitecture arch;
  arch.dim = 16;
  arch.condition_dim = 16;
  arch.hidden = 8;
  ConditionalPatchFlow<double> cflow(arch);
  const PatchGeometry g(6, 6, 4, 4);
  Rng rng(1);
  const auto cond = random_grid({6, 6}, rng);
  EXPECT_EQ(cpatchnr(Image<double>({6, 6}, 0.0), cond, cflow, g, all_patch_indices(g)).value, 0.0);
}

Mat<double> gaussian_samples(std::size_t n, const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, Rng& rng) {
  const Eigen::MatrixXd l = cov.llt().matrixL();
  NormalSampler normal;
  Mat<double> x(static_cast<Eigen::Index>(n), mean.size());
  Eigen::VectorXd z(mean.size());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = normal(rng);
    x.row(i) = (mean + l * z).transpose();
  }
  return x;
}

TEST(Gmm, SingleGaussianRecovery) {
  Eigen::VectorXd mean(4);
  mean << 0.5, -1.0, 2.0, 0.0;
  Eigen::MatrixXd a(4, 4);
  a << 1.0, 0.2, 0.0, 0.1, 0.0, 0.8, 0.3, 0.0, 0.0, 0.0, 0.5, 0.2, 0.0, 0.0, 0.0, 0.7;
  const Eigen::MatrixXd cov = a * a.transpose();
  Rng rng(10);
  const auto x = gaussian_samples(100000, mean, cov, rng);
  EmConfig cfg;
  cfg.seed = 1;
  const auto fit = gmm_fit(x, 1, cfg);
  const auto& m = fit.gmm.means()[0];
  const auto& c = fit.gmm.covariances()[0];
  EXPECT_LT((m - mean).cwiseAbs().maxCoeff(), 0.01);
  EXPECT_LT((c - cov).norm() / cov.norm(), 0.05);
  // The K = 1 maximum-likelihood fit is exactly the sample mean and covariance.
  const Eigen::VectorXd sm = x.colwise().mean().transpose();
  const Mat<double> d = x.rowwise() - sm.transpose();
  const Eigen::MatrixXd sc = d.transpose() * d / static_cast<double>(x.rows());
  EXPECT_LT((m - sm).norm(), 1e-10);
  EXPECT_LT((c - sc).norm(), 1e-8);
}

TEST(Gmm, TwoSeparatedComponents) {
  Rng rng(11);
  Eigen::VectorXd m1(2), m2(2);
  m1 << -4.0, 1.0;
  m2 << 5.0, -2.0;
  const Eigen::MatrixXd cov = 0.5 * Eigen::MatrixXd::Identity(2, 2);
  Mat<double> x(20000, 2);
  x.topRows(12000) = gaussian_samples(12000, m1, cov, rng);
  x.bottomRows(8000) = gaussian_samples(8000, m2, cov, rng);
  EmConfig cfg;
  cfg.seed = 3;
  const auto fit = gmm_fit(x, 2, cfg);
  const auto& mu = fit.gmm.means();
  const bool swap = (mu[0] - m1).norm() > (mu[1] - m1).norm();
  EXPECT_LT((mu[swap ? 1 : 0] - m1).cwiseAbs().maxCoeff(), 0.05);
  EXPECT_LT((mu[swap ? 0 : 1] - m2).cwiseAbs().maxCoeff(), 0.05);
  EXPECT_NEAR(fit.gmm.weights()[swap ? 1 : 0], 0.6, 0.01);
}

TEST(Gmm, LogLikelihoodTraceIsNonDecreasing) {
  Rng rng(12);
  // Overlapping clusters so EM takes many iterations.
  Mat<double> x(6000, 3);
  for (int k = 0; k < 4; ++k) {
    Eigen::VectorXd m = Eigen::VectorXd::Constant(3, 0.8 * k);
    m(k % 3) += 1.0;
    Eigen::MatrixXd c = Eigen::MatrixXd::Identity(3, 3) * (0.3 + 0.2 * k);
    c(0, 1) = c(1, 0) = 0.1;
    x.middleRows(k * 1500, 1500) = gaussian_samples(1500, m, c, rng);
  }
  EmConfig cfg;
  cfg.seed = 4;
  cfg.max_iterations = 200;
  cfg.tolerance = 0;
  const auto fit = gmm_fit(x, 6, cfg);
  ASSERT_GT(fit.loglik_trace.size(), 20u);
  EXPECT_EQ(fit.reinitialized, 0u);
  for (std::size_t i = 1; i < fit.loglik_trace.size(); ++i)
    EXPECT_GE(fit.loglik_trace[i], fit.loglik_trace[i - 1] - 1e-9) << "iteration " << i;
}

TEST(Gmm, SameSeedSameFit) {
  Rng rng(13);
  const auto x = gaussian_samples(2000, Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3), rng);
  EmConfig cfg;
  cfg.seed = 8;
  cfg.max_iterations = 10;
  const auto a = gmm_fit(x, 3, cfg);
  const auto b = gmm_fit(x, 3, cfg);
  EXPECT_EQ(a.loglik_trace, b.loglik_trace);
}

TEST(Gmm, SingularCovarianceWithoutFloorIsAnError) {
  Rng rng(14);
  Mat<double> x = gaussian_samples(500, Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3), rng);
  x.col(2).setZero();
  EmConfig cfg;
  cfg.covariance_floor = 0;
  EXPECT_THROW(gmm_fit(x, 1, cfg), Error);
  cfg.covariance_floor = 1e-6;
  const auto fit = gmm_fit(x, 1, cfg);
  EXPECT_NEAR(fit.gmm.covariances()[0](2, 2), 1e-6, 1e-12);
}

TEST(Gmm, EmptyComponentIsReinitialized) {
  // Two distinct points only: the third k-means++ center duplicates one and
  // its hard-assignment cluster is empty.
  Mat<double> x(100, 2);
  for (Eigen::Index i = 0; i < 100; ++i) x.row(i) << (i < 50 ? 0.0 : 3.0), (i < 50 ? 1.0 : -1.0);
  EmConfig cfg;
  cfg.max_iterations = 5;
  const auto fit = gmm_fit(x, 3, cfg);
  EXPECT_GT(fit.reinitialized, 0u);
  double wsum = 0;
  for (double w : fit.gmm.weights()) wsum += w;
  EXPECT_NEAR(wsum, 1.0, 1e-12);
  for (double v : fit.loglik_trace) EXPECT_TRUE(std::isfinite(v));
}

TEST(Gmm, RequiresEnoughSamples) {
  Mat<double> x = Mat<double>::Zero(2, 2);
  EXPECT_THROW(gmm_fit(x, 3), Error);
  EXPECT_THROW(gmm_fit(x, 0), Error);
}

PatchGMM standard_gmm(std::size_t s) {
  return PatchGMM({1.0}, {Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s))},
                  {Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(s))});
}

PatchGMM three_component_gmm() {
  Eigen::VectorXd m0(2), m1(2), m2(2);
  m0 << 0.0, 0.0;
  m1 << 1.5, -0.5;
  m2 << -1.0, 1.2;
  Eigen::MatrixXd c0(2, 2), c1(2, 2), c2(2, 2);
  c0 << 0.5, 0.1, 0.1, 0.3;
  c1 << 0.2, -0.05, -0.05, 0.4;
  c2 << 0.6, 0.25, 0.25, 0.3;
  return PatchGMM({0.5, 0.3, 0.2}, {m0, m1, m2}, {c0, c1, c2});
}

TEST(Gmm, StandardNormalAtOrigin) {
  const auto gmm = standard_gmm(36);
  std::vector<double> p(36, 0.0);
  EXPECT_NEAR(gmm_logpdf(gmm, p), -18 * kLog2Pi, 1e-12);
}

TEST(Gmm, DensityIntegratesToOne) {
  const auto gmm = three_component_gmm();
  // Composite Simpson on [-6, 6]^2.
  const int n = 600;
  const double lo = -6, h = 12.0 / n;
  auto wt = [&](int i) { return (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0); };
  double total = 0;
  for (int i = 0; i <= n; ++i)
    for (int j = 0; j <= n; ++j) {
      const double p[2] = {lo + i * h, lo + j * h};
      total += wt(i) * wt(j) * std::exp(gmm_logpdf(gmm, p));
    }
  total *= h * h / 9.0;
  EXPECT_NEAR(total, 1.0, 1e-3);
}

TEST(Gmm, LogpdfGradientMatchesFiniteDifferences) {
  const auto gmm = three_component_gmm();
  Rng rng(15);
  for (int t = 0; t < 20; ++t) {
    const auto p = random_grid({2}, rng);
    const double err = grad_check(
                           [&](const ValueGrid<double>& v) {
                             ValueGrid<double> g({2});
                             const double val = gmm_logpdf(gmm, v.values(), g.storage());
                             return Evaluation<double>{val, g};
                           },
                           p, 1e-5)
                           .max_rel_error;
    EXPECT_LT(err, 1e-6);
  }
}

TEST(Epll, StandardNormalClosedForm) {
  const auto gmm = standard_gmm(16);
  const PatchGeometry g(7, 9, 4, 4);
  Rng rng(16);
  const auto x = random_grid({7, 9}, rng);
  const auto idx = sample_patch_indices(g, 25, rng);
  double expected = 0;
  for (auto i : idx) {
    double q = 0;
    for (double v : extract_patch(x, g, i)) q += v * v;
    expected += 0.5 * q + 8 * kLog2Pi;
  }
  expected /= 25.0;
  const auto r = epll(x, gmm, g, idx);
  EXPECT_NEAR(r.value, expected, 1e-12);
  EXPECT_NEAR(epll(Image<double>({7, 9}, 0.0), gmm, g, idx).value, 8 * kLog2Pi, 1e-12);
}

TEST(Epll, GradientMatchesFiniteDifferences) {
  Rng rng(17);
  Mat<double> data(3000, 4);
  NormalSampler normal;
  for (Eigen::Index i = 0; i < data.size(); ++i) data.data()[i] = normal(rng) * (1 + (i % 3));
  EmConfig cfg;
  cfg.max_iterations = 20;
  const auto gmm = gmm_fit(data, 4, cfg).gmm;
  const PatchGeometry g(6, 7, 2, 2);
  const auto x = random_grid({6, 7}, rng);
  const auto idx = sample_patch_indices(g, 12, rng);
  EXPECT_LT(image_grad_error([&](const Image<double>& v) { return epll(v, gmm, g, idx); }, x, 1e-5), 1e-5);
}

TEST(Regularizers, EffectiveWeightScaling) {
  const PatchGeometry g(10, 10, 6, 6);
  PatchNRRegularizer pnr(std::make_shared<PatchFlow<double>>(identity_flow(36)), g);
  EpllRegularizer ep(std::make_shared<PatchGMM>(standard_gmm(36)), g);
  EXPECT_DOUBLE_EQ(pnr.weight_scale(72), 0.5);
  EXPECT_DOUBLE_EQ(ep.weight_scale(72), 1.0);
  // lambda * scale * R is then lambda times the mean patch NLL in both cases.
  const Image<double> cst({10, 10}, 1.0);
  const auto idx = all_patch_indices(g);
  EXPECT_NEAR(pnr.weight_scale(idx.size()) * pnr.evaluate(cst, idx).value, 18.0, 1e-12);
  EXPECT_NEAR(ep.weight_scale(idx.size()) * ep.evaluate(cst, idx).value, 18.0 + 18 * kLog2Pi, 1e-12);
}

}  // namespace
}  // namespace patchnr
