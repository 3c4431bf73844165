#include <gtest/gtest.h>

#include <cmath>

#include "patchnr/flow.hpp"
#include "test_support.hpp"

namespace patchnr {
namespace {

using testing::gaussian_nll;
using testing::random_cflow;
using testing::random_flow;

std::vector<double> random_vector(std::size_t n, Rng& rng, double scale = 1.0) {
  NormalSampler normal;
  std::vector<double> v(n);
  for (auto& x : v) x = scale * normal(rng);
  return v;
}

Mat<double> random_rows(std::size_t n, std::size_t d, Rng& rng, double scale = 1.0) {
  NormalSampler normal;
  Mat<double> m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal(rng);
  return m;
}

TEST(Flow, RejectsOddDimension) {
  FlowArchitecture arch;
  arch.dim = 5;
  EXPECT_THROW(PatchFlow<double>{arch}, Error);
}

TEST(Flow, DimensionMismatchIsAnError) {
  const auto flow = random_flow(6, 8, 1);
  std::vector<double> z(4, 0.0);
  EXPECT_THROW(flow.forward_map(z), Error);
  EXPECT_THROW(flow.inverse_map(z), Error);
}

TEST(Flow, UntrainedFlowIsPermutationComposition) {
  FlowArchitecture arch;
  arch.dim = 8;
  arch.hidden = 16;
  arch.seed = 3;
  PatchFlow<double> flow(arch);
  Rng rng(4);
  const auto z = random_vector(8, rng);
  const auto r = flow.forward_map(z);
  // Encode applies y_j = x_{perm[j]} after every block; decode undoes them
  // in reverse order.
  std::vector<double> expected = z;
  const auto& perms = flow.core().permutations();
  for (std::size_t k = perms.size(); k-- > 0;) {
    std::vector<double> prev(8);
    for (std::size_t j = 0; j < 8; ++j) prev[perms[k][j]] = expected[j];
    expected = prev;
  }
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(r.value[i], expected[i]);
  EXPECT_EQ(r.logdet, 0.0);

  const std::vector<double> zero(8, 0.0);
  for (double v : flow.forward_map(zero).value) EXPECT_EQ(v, 0.0);
  const auto inv = flow.inverse_map(r.value);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(inv.value[i], z[i]);
  EXPECT_EQ(inv.logdet, 0.0);
}

TEST(Flow, RoundTripAndLogdetConsistency) {
  Rng rng(11);
  double worst_rt = 0, worst_ld = 0;
  for (int f = 0; f < 10; ++f) {
    const auto flow = random_flow(6, 16, 100 + f, 0.3);
    const Mat<double> z = random_rows(100, 6, rng, 1.5);
    Mat<double> p, z2;
    std::vector<double> ld, ldi;
    flow.forward_batch(z, p, ld);
    flow.inverse_batch(p, z2, ldi);
    worst_rt = std::max(worst_rt, (z2 - z).cwiseAbs().maxCoeff());
    for (std::size_t i = 0; i < ld.size(); ++i) worst_ld = std::max(worst_ld, std::abs(ld[i] + ldi[i]));
  }
  EXPECT_LT(worst_rt, 1e-6);
  EXPECT_LT(worst_ld, 1e-6);
}

TEST(Flow, LogdetMatchesFiniteDifferenceJacobian) {
  const auto flow = random_flow(6, 16, 21, 0.3);
  Rng rng(22);
  for (int trial = 0; trial < 5; ++trial) {
    const auto z = random_vector(6, rng);
    const double h = 1e-6;
    Eigen::MatrixXd jac(6, 6);
    for (int j = 0; j < 6; ++j) {
      auto zp = z, zm = z;
      zp[j] += h;
      zm[j] -= h;
      const auto fp = flow.forward_map(zp).value;
      const auto fm = flow.forward_map(zm).value;
      for (int i = 0; i < 6; ++i) jac(i, j) = (fp[i] - fm[i]) / (2 * h);
    }
    const double fd_logdet = std::log(std::abs(jac.partialPivLu().determinant()));
    EXPECT_NEAR(flow.forward_map(z).logdet, fd_logdet, 1e-4);
  }
}

TEST(Flow, SoftClampBoundsLogScales) {
  const auto flow = random_flow(6, 16, 31, 2.0);
  Rng rng(32);
  const FlowArchitecture& a = flow.architecture();
  const double bound = static_cast<double>(a.blocks * a.dim) * a.clamp;
  for (int t = 0; t < 50; ++t) {
    const auto z = random_vector(6, rng, 1000.0);
    EXPECT_LE(std::abs(flow.forward_map(z).logdet), bound);
  }
}

TEST(Flow, IdentityNllIsStandardNormal) {
  FlowArchitecture arch;
  arch.identity_permutations = true;
  arch.hidden = 8;
  PatchFlow<double> flow(arch);
  const std::vector<double> zero(36, 0.0);
  EXPECT_NEAR(flow.nll(zero), 18.0 * std::log(2 * M_PI), 1e-12);
  EXPECT_NEAR(flow.nll(zero), 33.0818, 1e-4);
  Rng rng(41);
  const auto p = random_vector(36, rng);
  double q = 0;
  for (double v : p) q += v * v;
  EXPECT_NEAR(flow.nll(p), 0.5 * q + 18.0 * std::log(2 * M_PI), 1e-10);
}

TEST(Flow, AffineFlowMatchesGaussianDensity) {
  const std::vector<double> a(4, 1.7), b{0.3, -1.0, 2.0, 0.5};
  const auto flow = make_affine_flow<double>(a, b);
  Rng rng(51);
  for (int t = 0; t < 20; ++t) {
    const auto p = random_vector(4, rng, 2.0);
    EXPECT_NEAR(flow.nll(p), gaussian_nll(p, b, 1.7), 1e-8);
  }
  const std::vector<double> z{1, 2, 3, 4};
  const auto r = flow.forward_map(z);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(r.value[i], 1.7 * z[i] + b[i], 1e-12);
}

TEST(Flow, SampleMomentsAndDeterminism) {
  FlowArchitecture arch;
  arch.dim = 4;
  arch.hidden = 8;
  PatchFlow<double> identity(arch);
  const Mat<double> s = identity.sample(100000, 7);
  EXPECT_LT(s.colwise().mean().cwiseAbs().maxCoeff(), 0.05);
  EXPECT_EQ(s, identity.sample(100000, 7));

  const std::vector<double> a(4, 0.5), b{1.0, -2.0, 0.25, 3.0};
  const auto affine = make_affine_flow<double>(a, b);
  const Mat<double> t = affine.sample(100000, 8);
  const RowVec<double> mean = t.colwise().mean();
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(mean(i), b[i], 0.05);
  EXPECT_THROW(affine.sample(0, 1), Error);
}

// Training loss gradient w.r.t. all parameters vs central differences.
TEST(Flow, TrainingLossGradientMatchesFiniteDifferences) {
  auto flow = random_flow(6, 16, 61, 0.2);
  Rng rng(62);
  const Mat<double> batch = random_rows(8, 6, rng);
  const double w = 1.0 / 8.0;
  const auto theta0 = flow.params().flatten();
  ValueGrid<double> point({theta0.size()}, theta0);
  auto fn = [&](const ValueGrid<double>& theta) {
    flow.params().assign_flat(theta.storage());
    ParamSet<double> grads = flow.params().zeros_like();
    const auto nll = flow.backprop(batch, w, &grads, nullptr);
    double loss = 0;
    for (double v : nll) loss += v;
    const auto g = grads.flatten();
    return Evaluation<double>{loss * w, ValueGrid<double>({g.size()}, g)};
  };
  EXPECT_LT(grad_check(fn, point, 1e-6).max_rel_error, 1e-4);
}

TEST(Flow, InputGradientMatchesFiniteDifferences) {
  const auto flow = random_flow(6, 16, 71, 0.3);
  Rng rng(72);
  const Mat<double> batch0 = random_rows(5, 6, rng);
  ValueGrid<double> point({30}, std::vector<double>(batch0.data(), batch0.data() + 30));
  auto fn = [&](const ValueGrid<double>& x) {
    const Mat<double> b = as_matrix(x, 5, 6);
    Mat<double> dx;
    const auto nll = flow.backprop(b, 1.0, nullptr, &dx);
    double v = 0;
    for (double n : nll) v += n;
    return Evaluation<double>{v, ValueGrid<double>({30}, std::vector<double>(dx.data(), dx.data() + 30))};
  };
  EXPECT_LT(grad_check(fn, point, 1e-6).max_rel_error, 1e-6);
}

TEST(FlowTraining, FitsIsotropicGaussianNearEntropy) {
  Rng rng(81);
  const std::vector<double> mu{0.5, -1.0, 2.0, 0.0};
  const double sd = std::sqrt(0.1);
  auto draw = [&](std::size_t n) {
    Mat<double> m = random_rows(n, 4, rng, sd);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (int j = 0; j < 4; ++j) m(i, j) += mu[j];
    return m;
  };
  const Mat<double> train = draw(20000), held = draw(5000);
  FlowArchitecture arch;
  arch.dim = 4;
  arch.hidden = 32;
  arch.seed = 5;
  TrainConfig cfg{1e-3, 64, 3000, 9, Precision::f64};
  PatchFlow<double> init(arch);
  auto mean_nll = [&](const PatchFlow<double>& f) {
    const auto v = f.nll_batch(held);
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const auto result = train_flow<double>(train, arch, cfg);
  const double optimum = 2.0 * std::log(2 * M_PI * M_E * 0.1);
  EXPECT_NEAR(mean_nll(result.flow), optimum, 0.1);
  EXPECT_LT(mean_nll(result.flow), mean_nll(init));
  EXPECT_EQ(result.loss_trace.size(), 3000u);
}

TEST(FlowTraining, RejectsTooFewPatchesAndDivergence) {
  FlowArchitecture arch;
  arch.dim = 4;
  arch.hidden = 8;
  Mat<double> few(3, 4);
  few.setZero();
  EXPECT_THROW(train_flow<double>(few, arch, TrainConfig{1e-3, 32, 10, 0, Precision::f64}), Error);
  Mat<double> bad(64, 4);
  bad.setConstant(std::numeric_limits<double>::quiet_NaN());
  EXPECT_THROW(train_flow<double>(bad, arch, TrainConfig{1e-3, 32, 10, 0, Precision::f64}), Error);
}

TEST(FlowTraining, FullScalePreset) {
  const auto cfg = TrainConfig::full_scale();
  EXPECT_EQ(cfg.learning_rate, 1e-4);
  EXPECT_EQ(cfg.batch_size, 32u);
  EXPECT_EQ(cfg.steps, 700000u);
}

TEST(ConditionalFlow, ZeroSubnetConstantAndRoundTrip) {
  FlowArchitecture arch;
  arch.dim = 36;
  arch.condition_dim = 36;
  arch.hidden = 8;
  ConditionalPatchFlow<double> flow(arch);
  Rng rng(91);
  const std::vector<double> zero(36, 0.0);
  EXPECT_NEAR(flow.cnll(random_vector(36, rng), zero), 18.0 * std::log(2 * M_PI), 1e-12);

  const auto rf = random_cflow(6, 6, 16, 92, 0.3);
  for (int t = 0; t < 20; ++t) {
    const auto c = random_vector(6, rng);
    const auto p = random_vector(6, rng);
    const auto z = rf.inverse_map(c, p);
    const auto back = rf.forward_map(c, z.value);
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(back.value[i], p[i], 1e-6);
    EXPECT_NEAR(back.logdet + z.logdet, 0.0, 1e-6);
  }
}

TEST(ConditionalFlow, ShiftFlowMatchesConditionalGaussian) {
  const auto flow = testing::make_conditional_shift_flow(4, 0.6);
  Rng rng(93);
  for (int t = 0; t < 20; ++t) {
    const auto c = random_vector(4, rng, 2.0);
    const auto p = random_vector(4, rng, 2.0);
    EXPECT_NEAR(flow.cnll(c, p), gaussian_nll(p, c, 0.6), 1e-8);
  }
}

TEST(ConditionalFlow, InputGradientMatchesFiniteDifferences) {
  const auto flow = random_cflow(6, 6, 16, 94, 0.3);
  Rng rng(95);
  const Mat<double> c = random_rows(4, 6, rng);
  const Mat<double> p0 = random_rows(4, 6, rng);
  ValueGrid<double> point({24}, std::vector<double>(p0.data(), p0.data() + 24));
  auto fn = [&](const ValueGrid<double>& x) {
    Mat<double> dx;
    const auto nll = flow.backprop(c, as_matrix(x, 4, 6), 1.0, nullptr, &dx);
    double v = 0;
    for (double n : nll) v += n;
    return Evaluation<double>{v, ValueGrid<double>({24}, std::vector<double>(dx.data(), dx.data() + 24))};
  };
  EXPECT_LT(grad_check(fn, point, 1e-6).max_rel_error, 1e-6);
}

class ConditionalTraining : public ::testing::Test {
 protected:
  static double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
  FlowArchitecture arch(std::size_t cdim) const {
    FlowArchitecture a;
    a.dim = 4;
    a.condition_dim = cdim;
    a.hidden = 32;
    a.seed = 3;
    return a;
  }
  TrainConfig cfg{1e-3, 64, 2000, 17, Precision::f64};
};

TEST_F(ConditionalTraining, ConstantConditionBehavesUnconditionally) {
  Rng rng(101);
  const Mat<double> train = random_rows(10000, 4, rng, 0.5);
  const Mat<double> held = random_rows(3000, 4, rng, 0.5);
  Mat<double> c_train = Mat<double>::Constant(train.rows(), 4, 0.7);
  Mat<double> c_held = Mat<double>::Constant(held.rows(), 4, 0.7);
  const auto cond = train_cflow<double>(train, c_train, arch(4), cfg);
  const auto uncond = train_flow<double>(train, arch(0), cfg);
  EXPECT_NEAR(mean(cond.flow.cnll_batch(c_held, held)), mean(uncond.flow.nll_batch(held)), 0.2);
}

TEST_F(ConditionalTraining, InformativeConditionLowersNll) {
  Rng rng(102);
  auto make = [&](std::size_t n, Mat<double>& c, Mat<double>& p) {
    c = random_rows(n, 4, rng);
    p = c + random_rows(n, 4, rng, 0.1);
  };
  Mat<double> c_tr, p_tr, c_te, p_te;
  make(10000, c_tr, p_tr);
  make(3000, c_te, p_te);
  const auto cond = train_cflow<double>(p_tr, c_tr, arch(4), cfg);
  const auto uncond = train_flow<double>(p_tr, arch(0), cfg);
  const double cn = mean(cond.flow.cnll_batch(c_te, p_te));
  const double un = mean(uncond.flow.nll_batch(p_te));
  // The conditional optimum is ~4 log(0.1) + const, about 9 nats below the
  // unconditional one.
  EXPECT_LT(cn, un - 3.0);

  auto again = train_cflow<double>(p_tr, c_tr, arch(4), TrainConfig{1e-3, 64, 50, 17, Precision::f64});
  auto again2 = train_cflow<double>(p_tr, c_tr, arch(4), TrainConfig{1e-3, 64, 50, 17, Precision::f64});
  EXPECT_EQ(again.loss_trace, again2.loss_trace);
}

TEST_F(ConditionalTraining, MisalignedInputsRejected) {
  Mat<double> p(40, 4), c(39, 4);
  p.setZero();
  c.setZero();
  EXPECT_THROW(train_cflow<double>(p, c, arch(4), cfg), Error);
}

}  // namespace
}  // namespace patchnr
