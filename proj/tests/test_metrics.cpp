#include <gtest/gtest.h>

#include <cmath>

#include "patchnr/metrics.hpp"
#include "patchnr/operators.hpp"
#include "patchnr/patchops.hpp"
#include "test_support.hpp"

namespace patchnr {
namespace {

using testing::uniform_grid;

Image<double> constant_image(std::size_t r, std::size_t c, double v) {
  auto img = Image<double>::image(r, c);
  for (auto& x : img.storage()) x = v;
  return img;
}

Image<double> offset(const Image<double>& x, double d) {
  Image<double> y = x;
  for (auto& v : y.storage()) v += d;
  return y;
}

Image<double> checkerboard(std::size_t n, std::size_t block) {
  auto img = Image<double>::image(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) img(i, j) = ((i / block + j / block) % 2) ? 1.0 : 0.0;
  return img;
}

// Window-by-window SSIM from explicit sums, sample covariance.
double ssim_oracle(const Image<double>& x, const Image<double>& y, std::size_t w, double range) {
  const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  const double n = static_cast<double>(w * w);
  double total = 0;
  int count = 0;
  for (std::size_t i = 0; i + w <= x.rows(); ++i)
    for (std::size_t j = 0; j + w <= x.cols(); ++j) {
      double mx = 0, my = 0;
      for (std::size_t a = 0; a < w; ++a)
        for (std::size_t b = 0; b < w; ++b) {
          mx += x(i + a, j + b);
          my += y(i + a, j + b);
        }
      mx /= n;
      my /= n;
      double vx = 0, vy = 0, cxy = 0;
      for (std::size_t a = 0; a < w; ++a)
        for (std::size_t b = 0; b < w; ++b) {
          const double dx = x(i + a, j + b) - mx, dy = y(i + a, j + b) - my;
          vx += dx * dx;
          vy += dy * dy;
          cxy += dx * dy;
        }
      vx /= n - 1;
      vy /= n - 1;
      cxy /= n - 1;
      total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / count;
}

TEST(Metrics, PsnrExamples) {
  Rng rng(1);
  const auto x = uniform_grid({32, 32}, rng);
  EXPECT_NEAR(psnr(offset(x, 0.1), x), 20.0, 1e-10);
  EXPECT_EQ(psnr(x, x), 100.0);

  auto ct = uniform_grid({32, 32}, rng, 0.0, 0.4);
  ct(0, 0) = 0.0;
  ct(0, 1) = 0.4;
  EXPECT_NEAR(psnr(offset(ct, 0.1), ct, RangeMode::adaptive), 10 * std::log10(0.16 / 0.01), 1e-10);
  EXPECT_NEAR(psnr(offset(ct, 0.1), ct, RangeMode::adaptive), 12.0412, 1e-4);
}

TEST(Metrics, PsnrSymmetryForUnitRange) {
  Rng rng(2);
  const auto x = uniform_grid({20, 24}, rng), y = uniform_grid({20, 24}, rng);
  EXPECT_DOUBLE_EQ(psnr(x, y), psnr(y, x));
  // Adaptive range comes from the second argument only.
  auto wide = y;
  wide(0, 0) = 3.0;
  EXPECT_NE(psnr(x, wide, RangeMode::adaptive), psnr(wide, x, RangeMode::adaptive));
  EXPECT_THROW(psnr(x, Image<double>::image(20, 23)), Error);
}

TEST(Metrics, SsimIdentityAndConstantFormula) {
  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    const auto x = uniform_grid({16, 19}, rng, -1.0, 2.0);
    EXPECT_DOUBLE_EQ(ssim(x, x), 1.0);
  }
  const double a = 0.3, b = 0.7, range = 1.0;
  SsimOptions opt;
  opt.data_range = range;
  const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  const double expected = (2 * a * b + c1) * c2 / ((a * a + b * b + c1) * c2);
  EXPECT_NEAR(ssim(constant_image(12, 12, a), constant_image(12, 12, b), opt), expected, 1e-10);
}

TEST(Metrics, SsimMatchesBruteForceOracle) {
  Rng rng(4);
  for (int t = 0; t < 3; ++t) {
    const auto y = uniform_grid({23, 17}, rng);
    auto x = y;
    for (auto& v : x.storage()) v += 0.2 * (NormalSampler::unit(rng) - 0.5);
    const auto [lo, hi] = std::minmax_element(y.values().begin(), y.values().end());
    EXPECT_NEAR(ssim(x, y), ssim_oracle(x, y, 7, *hi - *lo), 1e-10);
    const double v = ssim(x, y);
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(ssim(Image<double>::image(6, 10), Image<double>::image(6, 10)), Error);
}

TEST(Metrics, BlurEffectOrderingAndRange) {
  const auto sharp = checkerboard(64, 4);
  const ConvolutionOp blur({64, 64}, gaussian_kernel(9, 2.0));
  const auto blurred = blur.apply(sharp);
  EXPECT_LT(blur_effect(sharp), blur_effect(blurred));
  EXPECT_EQ(blur_effect(constant_image(10, 10, 0.5)), 1.0);
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const auto img = uniform_grid({16, 16}, rng);
    const double b = blur_effect(img);
    EXPECT_GE(b, 0.0);
    EXPECT_LE(b, 1.0);
  }
}

TEST(Metrics, CropAndReport) {
  Rng rng(6);
  const auto x = uniform_grid({100, 100}, rng);
  const auto c = crop_border(x, 40);
  ASSERT_EQ(c.rows(), 20u);
  EXPECT_EQ(c(0, 0), x(40, 40));
  EXPECT_EQ(c(19, 19), x(59, 59));
  EXPECT_THROW(crop_border(x, 50), Error);
  auto y = x;
  y(0, 0) += 10.0;  // outside the crop
  const auto rep = evaluate_metrics(y, x, 40);
  EXPECT_EQ(rep.psnr, 100.0);
  EXPECT_DOUBLE_EQ(rep.ssim, 1.0);
  EXPECT_EQ(rep.crop, 40u);
}

TEST(Metrics, NllHistogramIdentityFlow) {
  FlowArchitecture arch;
  arch.dim = 16;
  arch.hidden = 8;
  arch.identity_permutations = true;
  PatchFlow<double> flow(arch);
  const Mat<double> zero = Mat<double>::Zero(50, 16);
  const double target = 8.0 * std::log(2 * M_PI);
  const auto h = nll_histogram(flow, zero, 10, target - 5, target + 5);
  std::size_t total = 0;
  for (std::size_t b = 0; b < 10; ++b) {
    total += h.counts[b];
    if (h.counts[b]) {
      EXPECT_EQ(h.counts[b], 50u);
      EXPECT_LE(h.edges[b], target);
      EXPECT_GE(h.edges[b + 1], target);
    }
  }
  EXPECT_EQ(total, 50u);
  EXPECT_NEAR(h.mean, target, 1e-12);
  const auto d = nll_histogram(flow, zero, 7);  // degenerate automatic range
  EXPECT_EQ(d.counts[3], 50u);
}

TEST(Metrics, NllSeparationOnTrainedFlow) {
  // Degraded patches: motion blur plus Gaussian noise of 5/255, on a
  // held-out texture realization.
  const auto train_img = material_texture(64, 64, 11);
  const auto clean = material_texture(64, 64, 99);
  const ConvolutionOp blur({64, 64}, motion_blur_kernel(19, 5));
  const auto degraded = add_noise(blur.apply(clean), NoiseModel::gaussian(5.0 / 255.0), 8);
  const PatchGeometry g(64, 64, 4, 4);
  FlowArchitecture arch;
  arch.dim = 16;
  arch.hidden = 32;
  arch.blocks = 3;
  arch.seed = 2;
  const auto flow =
      train_flow<double>(extract_all_patches(train_img, g), arch, TrainConfig{1e-3, 64, 1500, 3, Precision::f64}).flow;

  // Interior patches only, so the blur's zero padding plays no role.
  std::vector<std::size_t> idx;
  for (std::size_t i = 10; i < 50; i += 3)
    for (std::size_t j = 10; j < 50; j += 3) idx.push_back(i * g.corners_per_row() + j);
  const auto hc = nll_histogram(flow, extract_patches(clean, g, idx), 30);
  const auto hb = nll_histogram(flow, extract_patches(degraded, g, idx), 30);
  const auto sep = nll_separation(hc, hb);
  EXPECT_LT(hc.mean, hb.mean);
  EXPECT_GT(sep.mean_difference, 0.0);
  EXPECT_GT(sep.t_statistic, 3.0);

  const auto again = nll_histogram(flow, extract_patches(clean, g, idx), 30);
  EXPECT_EQ(again.values, hc.values);
  EXPECT_EQ(again.counts, hc.counts);
}

}  // namespace
}  // namespace patchnr
