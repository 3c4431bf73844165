#pragma once
// Image quality metrics (PSNR, SSIM, blur effect) and patch NLL histograms.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "patchnr/diffcore.hpp"
#include "patchnr/flow.hpp"

namespace patchnr {

enum class RangeMode { unit, adaptive };

namespace detail {
inline void require_same_extents(const Image<double>& a, const Image<double>& b, const char* what) {
  if (a.rank() != 2 || a.shape() != b.shape()) throw Error("metrics", std::string(what) + ": extents differ");
}
inline std::pair<double, double> min_max(const Image<double>& a) {
  const auto [lo, hi] = std::minmax_element(a.values().begin(), a.values().end());
  return {*lo, *hi};
}
}  // namespace detail

constexpr double kPsnrCap = 100.0;

/// 10 log10(range^2 / MSE); adaptive range is max(ref) - min(ref).
/// Identical images report the 100 dB cap.
inline double psnr(const Image<double>& x, const Image<double>& ref, RangeMode mode = RangeMode::unit) {
  detail::require_same_extents(x, ref, "psnr");
  double mse = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x.values()[i] - ref.values()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(x.size());
  double range = 1.0;
  if (mode == RangeMode::adaptive) {
    const auto [lo, hi] = detail::min_max(ref);
    range = hi - lo;
  }
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10 * std::log10(range * range / mse));
}

struct SsimOptions {
  std::size_t window = 7;
  double k1 = 0.01;
  double k2 = 0.03;
  double data_range = 0;  // <= 0: max(ref) - min(ref)
};

/// Mean local SSIM over all fully interior box windows, with sample
/// (N - 1) covariance normalization.
inline double ssim(const Image<double>& x, const Image<double>& ref, const SsimOptions& opt = {}) {
  detail::require_same_extents(x, ref, "ssim");
  const std::size_t w = opt.window;
  if (w < 2 || x.rows() < w || x.cols() < w) throw Error("metrics", "ssim: image smaller than the window");
  double range = opt.data_range;
  if (range <= 0) {
    const auto [lo, hi] = detail::min_max(ref);
    range = hi - lo;
  }
  const double c1 = (opt.k1 * range) * (opt.k1 * range), c2 = (opt.k2 * range) * (opt.k2 * range);
  const double np = static_cast<double>(w * w), cov_norm = np / (np - 1);

  // Summed-area tables of x, y, x^2, y^2, xy.
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> t(5 * (r + 1) * (c + 1), 0.0);
  auto at = [&](int k, std::size_t i, std::size_t j) -> double& { return t[(k * (r + 1) + i) * (c + 1) + j]; };
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double a = x(i, j), b = ref(i, j);
      const double v[5] = {a, b, a * a, b * b, a * b};
      for (int k = 0; k < 5; ++k) at(k, i + 1, j + 1) = v[k] + at(k, i, j + 1) + at(k, i + 1, j) - at(k, i, j);
    }
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i + w <= r; ++i)
    for (std::size_t j = 0; j + w <= c; ++j) {
      double s[5];
      for (int k = 0; k < 5; ++k) s[k] = (at(k, i + w, j + w) - at(k, i, j + w) - at(k, i + w, j) + at(k, i, j)) / np;
      const double ux = s[0], uy = s[1];
      const double vx = cov_norm * (s[2] - ux * ux), vy = cov_norm * (s[3] - uy * uy);
      const double vxy = cov_norm * (s[4] - ux * uy);
      total += ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

/// Crete et al. no-reference blur metric: compare neighbour differences of
/// the image with those of a 9-tap box-blurred copy along each axis; the
/// larger of the two directional scores is returned. A constant image has no
/// gradient energy and is reported as 1 (maximally blurred).
inline double blur_effect(const Image<double>& img, std::size_t taps = 9) {
  if (img.rank() != 2 || img.rows() < 2 || img.cols() < 2) throw Error("metrics", "blur_effect needs a 2-D image");
  if (taps == 0) throw Error("metrics", "blur_effect needs a positive kernel length");
  const long r = static_cast<long>(img.rows()), c = static_cast<long>(img.cols());
  auto reflect = [](long i, long n) {
    // Half-sample symmetric extension: ... b a | a b c ...
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  const long half = static_cast<long>(taps) / 2;
  const long lo = -half, hi = static_cast<long>(taps) - half - 1;
  double worst = 0;
  bool any_energy = false;
  for (int axis = 0; axis < 2; ++axis) {
    Image<double> blurred(img.shape());
    for (long i = 0; i < r; ++i)
      for (long j = 0; j < c; ++j) {
        double acc = 0;
        for (long k = lo; k <= hi; ++k)
          acc += axis == 0 ? img(static_cast<std::size_t>(reflect(i + k, r)), static_cast<std::size_t>(j))
                           : img(static_cast<std::size_t>(i), static_cast<std::size_t>(reflect(j + k, c)));
        blurred(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = acc / static_cast<double>(taps);
      }
    double s_f = 0, s_v = 0;
    for (long i = axis == 0 ? 1 : 0; i < r; ++i)
      for (long j = axis == 1 ? 1 : 0; j < c; ++j) {
        const auto ui = static_cast<std::size_t>(i), uj = static_cast<std::size_t>(j);
        const auto pi = axis == 0 ? ui - 1 : ui, pj = axis == 1 ? uj - 1 : uj;
        const double df = std::abs(img(ui, uj) - img(pi, pj));
        const double db = std::abs(blurred(ui, uj) - blurred(pi, pj));
        s_f += df;
        s_v += std::max(0.0, df - db);
      }
    if (s_f > 0) {
      any_energy = true;
      worst = std::max(worst, (s_f - s_v) / s_f);
    }
  }
  return any_energy ? std::clamp(worst, 0.0, 1.0) : 1.0;
}

/// Removes `width` pixels from every side.
inline Image<double> crop_border(const Image<double>& img, std::size_t width) {
  if (img.rank() != 2 || 2 * width >= img.rows() || 2 * width >= img.cols())
    throw Error("metrics", "crop width leaves no pixels");
  auto out = Image<double>::image(img.rows() - 2 * width, img.cols() - 2 * width);
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = img(i + width, j + width);
  return out;
}

struct MetricReport {
  double psnr = 0;
  double ssim = 0;
  double blur_effect = 0;
  std::size_t crop = 0;
};

inline MetricReport evaluate_metrics(const Image<double>& x, const Image<double>& ref, std::size_t crop = 0,
                                     RangeMode mode = RangeMode::unit) {
  const auto xc = crop ? crop_border(x, crop) : x;
  const auto rc = crop ? crop_border(ref, crop) : ref;
  SsimOptions so;
  if (mode == RangeMode::unit) so.data_range = 1.0;
  return {psnr(xc, rc, mode), ssim(xc, rc, so), blur_effect(xc), crop};
}

struct NllHistogram {
  std::vector<double> values;  // per-patch NLL
  std::vector<double> edges;   // bins + 1
  std::vector<std::size_t> counts;
  double mean = 0;
  double stddev = 0;  // sample standard deviation
};

/// Bins per-patch NLL (with the Gaussian constant) over [lo, hi]; the range
/// defaults to the value range, widened by 0.5 on each side if degenerate.
template <class T>
NllHistogram nll_histogram(const PatchFlow<T>& flow, const Mat<T>& patches, std::size_t bins, double lo = 0,
                           double hi = 0) {
  if (bins == 0) throw Error("metrics", "histogram needs at least one bin");
  if (patches.rows() == 0) throw Error("metrics", "histogram needs at least one patch");
  NllHistogram h;
  for (T v : flow.nll_batch(patches)) h.values.push_back(static_cast<double>(v));
  if (!(hi > lo)) {
    const auto [mn, mx] = std::minmax_element(h.values.begin(), h.values.end());
    lo = *mn;
    hi = *mx;
    if (!(hi > lo)) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
  h.edges.resize(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) h.edges[b] = lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins);
  h.counts.assign(bins, 0);
  for (double v : h.values) {
    if (v < lo || v > hi) continue;
    auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
    ++h.counts[std::min(b, bins - 1)];
  }
  double s = 0;
  for (double v : h.values) s += v;
  h.mean = s / static_cast<double>(h.values.size());
  double q = 0;
  for (double v : h.values) q += (v - h.mean) * (v - h.mean);
  h.stddev = h.values.size() > 1 ? std::sqrt(q / static_cast<double>(h.values.size() - 1)) : 0.0;
  return h;
}

struct Separation {
  double mean_difference = 0;  // degraded - clean
  double t_statistic = 0;      // Welch
};

inline Separation nll_separation(const NllHistogram& clean, const NllHistogram& degraded) {
  const double n1 = static_cast<double>(clean.values.size()), n2 = static_cast<double>(degraded.values.size());
  if (n1 < 2 || n2 < 2) throw Error("metrics", "separation needs at least two values per group");
  const double se = std::sqrt(clean.stddev * clean.stddev / n1 + degraded.stddev * degraded.stddev / n2);
  Separation s;
  s.mean_difference = degraded.mean - clean.mean;
  s.t_statistic = se > 0 ? s.mean_difference / se : 0.0;
  return s;
}

}  // namespace patchnr
