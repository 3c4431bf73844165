#pragma once
// Linear forward operators with adjoints (blur + stride-4 downsampling,
// same-size convolution, parallel-beam Radon), filtered backprojection,
// noise simulation, bicubic upsampling and synthetic test images.

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "patchnr/diffcore.hpp"
#include "patchnr/random.hpp"

namespace patchnr {

using Shape2 = std::array<std::size_t, 2>;

class LinearOperator {
 public:
  virtual ~LinearOperator() = default;
  virtual Shape2 input_shape() const = 0;
  virtual Shape2 output_shape() const = 0;
  virtual Image<double> apply(const Image<double>& x) const = 0;
  virtual Image<double> adjoint(const Image<double>& y) const = 0;
  virtual std::string name() const = 0;

 protected:
  static void require_shape(const Image<double>& g, Shape2 s, const char* what) {
    if (g.rank() != 2 || g.rows() != s[0] || g.cols() != s[1])
      throw Error("operators", std::string(what) + " extents do not match the operator");
  }
};

class IdentityOp final : public LinearOperator {
 public:
  explicit IdentityOp(Shape2 shape) : shape_(shape) {}
  Shape2 input_shape() const override { return shape_; }
  Shape2 output_shape() const override { return shape_; }
  Image<double> apply(const Image<double>& x) const override {
    require_shape(x, shape_, "input");
    return x;
  }
  Image<double> adjoint(const Image<double>& y) const override {
    require_shape(y, shape_, "observation");
    return y;
  }
  std::string name() const override { return "identity"; }

 private:
  Shape2 shape_;
};

/// Normalized size x size Gaussian centred at (size - 1) / 2.
inline Image<double> gaussian_kernel(std::size_t size, double sigma) {
  if (size == 0 || !(sigma > 0)) throw Error("operators", "Gaussian kernel needs size > 0 and sigma > 0");
  auto k = Image<double>::image(size, size);
  const double c = (static_cast<double>(size) - 1) / 2;
  double total = 0;
  for (std::size_t a = 0; a < size; ++a)
    for (std::size_t b = 0; b < size; ++b) {
      const double da = static_cast<double>(a) - c, db = static_cast<double>(b) - c;
      k(a, b) = std::exp(-(da * da + db * db) / (2 * sigma * sigma));
      total += k(a, b);
    }
  for (auto& v : k.storage()) v /= total;
  return k;
}

/// Blur with a k x k kernel, then keep every stride-th sample. Output pixel i
/// is centred at input coordinate stride * i + (stride - 1) / 2.
class BlurDownsampleOp final : public LinearOperator {
 public:
  BlurDownsampleOp(Shape2 input, Image<double> kernel, std::size_t stride)
      : in_(input), kernel_(std::move(kernel)), stride_(stride) {
    if (stride_ == 0) throw Error("operators", "stride must be positive");
    if (kernel_.rows() != kernel_.cols()) throw Error("operators", "blur kernel must be square");
    if (in_[0] < kernel_.rows() || in_[1] < kernel_.cols())
      throw Error("operators", "image extents must be at least the kernel extents");
    kernel_.require_finite("operators");
    pad_ = (static_cast<long>(kernel_.rows()) - static_cast<long>(stride_)) / 2;
    out_ = {(in_[0] + stride_ - 1) / stride_, (in_[1] + stride_ - 1) / stride_};
  }

  /// 16 x 16 Gaussian with sigma 2 and stride 4.
  static BlurDownsampleOp standard(Shape2 input) { return BlurDownsampleOp(input, gaussian_kernel(16, 2.0), 4); }

  Shape2 input_shape() const override { return in_; }
  Shape2 output_shape() const override { return out_; }
  const Image<double>& kernel() const noexcept { return kernel_; }
  std::size_t stride() const noexcept { return stride_; }
  long padding() const noexcept { return pad_; }

  Image<double> apply(const Image<double>& x) const override {
    require_shape(x, in_, "input");
    return ops::correlate2d(x, kernel_, stride_, pad_, pad_, out_[0], out_[1]);
  }
  Image<double> adjoint(const Image<double>& y) const override {
    require_shape(y, out_, "observation");
    return ops::correlate2d_adjoint(y, kernel_, stride_, pad_, pad_, in_[0], in_[1]);
  }
  std::string name() const override { return "blur_downsample"; }

 private:
  Shape2 in_, out_{};
  Image<double> kernel_;
  std::size_t stride_;
  long pad_ = 0;
};

/// Same-size convolution with zero padding; the kernel centre is at
/// ((kh - 1) / 2, (kw - 1) / 2).
class ConvolutionOp final : public LinearOperator {
 public:
  ConvolutionOp(Shape2 shape, Image<double> kernel) : shape_(shape), kernel_(std::move(kernel)) {
    if (kernel_.rank() != 2 || kernel_.size() == 0) throw Error("operators", "convolution kernel must be 2-D");
    if (shape_[0] < kernel_.rows() || shape_[1] < kernel_.cols())
      throw Error("operators", "image extents must be at least the kernel extents");
    kernel_.require_finite("operators");
    const std::size_t kh = kernel_.rows(), kw = kernel_.cols();
    flipped_ = Image<double>::image(kh, kw);
    for (std::size_t a = 0; a < kh; ++a)
      for (std::size_t b = 0; b < kw; ++b) flipped_(a, b) = kernel_(kh - 1 - a, kw - 1 - b);
    pad_r_ = static_cast<long>(kh - 1 - (kh - 1) / 2);
    pad_c_ = static_cast<long>(kw - 1 - (kw - 1) / 2);
  }

  Shape2 input_shape() const override { return shape_; }
  Shape2 output_shape() const override { return shape_; }
  const Image<double>& kernel() const noexcept { return kernel_; }

  Image<double> apply(const Image<double>& x) const override {
    require_shape(x, shape_, "input");
    return ops::correlate2d(x, flipped_, 1, pad_r_, pad_c_, shape_[0], shape_[1]);
  }
  Image<double> adjoint(const Image<double>& y) const override {
    require_shape(y, shape_, "observation");
    return ops::correlate2d_adjoint(y, flipped_, 1, pad_r_, pad_c_, shape_[0], shape_[1]);
  }
  std::string name() const override { return "convolution"; }

 private:
  Shape2 shape_;
  Image<double> kernel_, flipped_;
  long pad_r_ = 0, pad_c_ = 0;
};

/// Normalized motion-blur kernel from a smoothed random walk.
inline Image<double> motion_blur_kernel(std::size_t size, std::uint64_t seed, std::size_t steps = 60) {
  if (size < 3) throw Error("operators", "motion kernel size must be at least 3");
  Rng rng(seed);
  NormalSampler normal;
  auto k = Image<double>::image(size, size);
  const double c = (static_cast<double>(size) - 1) / 2;
  double px = 0, py = 0, vx = 0, vy = 0;
  std::vector<std::array<double, 2>> path;
  for (std::size_t i = 0; i < steps; ++i) {
    vx = 0.8 * vx + 0.35 * normal(rng);
    vy = 0.8 * vy + 0.35 * normal(rng);
    px += vx;
    py += vy;
    path.push_back({px, py});
  }
  double mx = 0, my = 0;
  for (auto& p : path) {
    mx += p[0];
    my += p[1];
  }
  mx /= static_cast<double>(path.size());
  my /= static_cast<double>(path.size());
  double extent = 1e-12;
  for (auto& p : path) extent = std::max({extent, std::abs(p[0] - mx), std::abs(p[1] - my)});
  const double scale = std::min(1.0, (c - 1) / extent);
  for (auto& p : path) {
    const double r = c + (p[1] - my) * scale, q = c + (p[0] - mx) * scale;
    const auto r0 = static_cast<std::size_t>(std::floor(r)), q0 = static_cast<std::size_t>(std::floor(q));
    const double fr = r - static_cast<double>(r0), fq = q - static_cast<double>(q0);
    k(r0, q0) += (1 - fr) * (1 - fq);
    k(r0 + 1, q0) += fr * (1 - fq);
    k(r0, q0 + 1) += (1 - fr) * fq;
    k(r0 + 1, q0 + 1) += fr * fq;
  }
  double total = 0;
  for (double v : k.values()) total += v;
  for (auto& v : k.storage()) v /= total;
  return k;
}

// ---------------------------------------------------------------------------
// Parallel-beam Radon transform

struct RadonGeometry {
  std::size_t rows = 0, cols = 0;
  double width = 1.0;          // physical extent along columns; pixels are square
  std::size_t bins = 0;
  double detector_span = 0;    // total detector length
  std::vector<double> angles;  // radians, strictly increasing in [0, pi)
  double angle_step = 0;       // quadrature weight for backprojection

  /// `n_angles` equidistant angles k pi / n_angles; detector spans the
  /// domain diagonal when `span` <= 0.
  static RadonGeometry parallel(std::size_t rows, std::size_t cols, double width, std::size_t bins,
                                std::size_t n_angles, double span = 0) {
    RadonGeometry g;
    g.rows = rows;
    g.cols = cols;
    g.width = width;
    g.bins = bins;
    g.detector_span = span > 0 ? span : std::hypot(width, g.height());
    g.angle_step = M_PI / static_cast<double>(n_angles);
    for (std::size_t k = 0; k < n_angles; ++k) g.angles.push_back(static_cast<double>(k) * g.angle_step);
    g.validate();
    return g;
  }

  /// Drops the first and last `fraction` of the angles (missing wedge).
  RadonGeometry limited(double fraction = 0.1) const {
    if (!(fraction >= 0 && fraction < 0.5)) throw Error("operators", "limited-angle fraction must be in [0, 0.5)");
    const auto cut = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(angles.size())));
    RadonGeometry g = *this;
    g.angles.assign(angles.begin() + static_cast<long>(cut), angles.end() - static_cast<long>(cut));
    g.validate();
    return g;
  }

  void validate() const {
    if (rows == 0 || cols == 0 || !(width > 0)) throw Error("operators", "Radon image extents must be positive");
    if (bins == 0 || !(detector_span > 0)) throw Error("operators", "Radon geometry needs bins > 0");
    if (angles.empty()) throw Error("operators", "Radon geometry needs at least one angle");
    for (std::size_t k = 0; k < angles.size(); ++k) {
      if (!(angles[k] >= 0 && angles[k] < M_PI)) throw Error("operators", "angles must lie in [0, pi)");
      if (k > 0 && !(angles[k] > angles[k - 1])) throw Error("operators", "angles must be strictly increasing");
    }
  }

  double pixel_size() const { return width / static_cast<double>(cols); }
  double height() const { return pixel_size() * static_cast<double>(rows); }
  double bin_width() const { return detector_span / static_cast<double>(bins); }
  double bin_center(std::size_t b) const { return -detector_span / 2 + (static_cast<double>(b) + 0.5) * bin_width(); }
};

namespace detail {

// Visits the bilinear stencil of every sample on ray (angle k, bin b):
// fn(row, col, weight) with weight = interpolation weight * step length.
template <class Fn>
void trace_ray(const RadonGeometry& g, double theta, double t, Fn&& fn) {
  const double h = g.pixel_size();
  const double step = h / 2;
  const double c = std::cos(theta), s = std::sin(theta);
  const double half_w = g.width / 2, half_h = g.height() / 2;
  // Point at parameter u: (t c - u s, t s + u c) in (x, y); fractional
  // pixel coordinates col = (x + W/2)/h - 1/2, row = (H/2 - y)/h - 1/2.
  const double col0 = (t * c + half_w) / h - 0.5, dcol = -s / h;
  const double row0 = (half_h - t * s) / h - 0.5, drow = -c / h;
  const double reach = std::hypot(half_w, half_h) + h;
  const auto m = static_cast<long>(std::ceil(2 * reach / step));
  double ulo = -reach, uhi = reach;
  auto clip = [&](double p0, double dp, double hi) {
    // Keep p0 + u dp inside (-1, hi).
    if (std::abs(dp) < 1e-15) {
      if (!(p0 > -1 && p0 < hi)) uhi = ulo - 1;
      return;
    }
    double a = (-1 - p0) / dp, b = (hi - p0) / dp;
    if (a > b) std::swap(a, b);
    ulo = std::max(ulo, a);
    uhi = std::min(uhi, b);
  };
  clip(col0, dcol, static_cast<double>(g.cols));
  clip(row0, drow, static_cast<double>(g.rows));
  if (uhi <= ulo) return;
  const long j0 = std::max(0L, static_cast<long>(std::floor((ulo + reach) / step - 0.5)));
  const long j1 = std::min(m - 1, static_cast<long>(std::ceil((uhi + reach) / step - 0.5)));
  const long nr = static_cast<long>(g.rows), nc = static_cast<long>(g.cols);
  for (long j = j0; j <= j1; ++j) {
    const double u = -reach + (static_cast<double>(j) + 0.5) * step;
    const double cf = col0 + u * dcol, rf = row0 + u * drow;
    const double rfl = std::floor(rf), cfl = std::floor(cf);
    const long r = static_cast<long>(rfl), q = static_cast<long>(cfl);
    const double fr = rf - rfl, fc = cf - cfl;
    const double w[4] = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
    const long rr[4] = {r, r, r + 1, r + 1}, qq[4] = {q, q + 1, q, q + 1};
    for (int e = 0; e < 4; ++e)
      if (rr[e] >= 0 && rr[e] < nr && qq[e] >= 0 && qq[e] < nc && w[e] != 0)
        fn(static_cast<std::size_t>(rr[e]), static_cast<std::size_t>(qq[e]), w[e] * step);
  }
}

}  // namespace detail

/// Line integrals (angles x bins) by bilinear ray sampling at half-pixel steps.
inline Image<double> radon_apply(const RadonGeometry& g, const Image<double>& x) {
  if (x.rank() != 2 || x.rows() != g.rows || x.cols() != g.cols)
    throw Error("operators", "image extents do not match the Radon geometry");
  auto sino = Image<double>::image(g.angles.size(), g.bins);
  for (std::size_t k = 0; k < g.angles.size(); ++k)
    for (std::size_t b = 0; b < g.bins; ++b) {
      double acc = 0;
      detail::trace_ray(g, g.angles[k], g.bin_center(b),
                        [&](std::size_t r, std::size_t c, double w) { acc += w * x(r, c); });
      sino(k, b) = acc;
    }
  return sino;
}

inline Image<double> radon_adjoint(const RadonGeometry& g, const Image<double>& sino) {
  if (sino.rank() != 2 || sino.rows() != g.angles.size() || sino.cols() != g.bins)
    throw Error("operators", "sinogram extents do not match the Radon geometry");
  auto x = Image<double>::image(g.rows, g.cols);
  for (std::size_t k = 0; k < g.angles.size(); ++k)
    for (std::size_t b = 0; b < g.bins; ++b) {
      const double v = sino(k, b);
      if (v == 0) continue;
      detail::trace_ray(g, g.angles[k], g.bin_center(b),
                        [&](std::size_t r, std::size_t c, double w) { x(r, c) += w * v; });
    }
  return x;
}

class RadonOp final : public LinearOperator {
 public:
  explicit RadonOp(RadonGeometry g) : g_(std::move(g)) { g_.validate(); }
  Shape2 input_shape() const override { return {g_.rows, g_.cols}; }
  Shape2 output_shape() const override { return {g_.angles.size(), g_.bins}; }
  const RadonGeometry& geometry() const noexcept { return g_; }
  Image<double> apply(const Image<double>& x) const override { return radon_apply(g_, x); }
  Image<double> adjoint(const Image<double>& y) const override { return radon_adjoint(g_, y); }
  std::string name() const override { return "radon"; }

 private:
  RadonGeometry g_;
};

struct FbpOptions {
  std::string filter = "hann";  // "hann" or "ramp"
  double frequency_scaling = 0.641;
};

/// Ramp filtering (spatial-domain ramp kernel, FFT-applied, windowed), then
/// pixel-driven backprojection weighted by the angle step.
inline Image<double> fbp(const RadonGeometry& g, const Image<double>& sino, const FbpOptions& opt = {}) {
  if (g.angles.size() < 2) throw Error("operators", "filtered backprojection needs at least two angles");
  if (sino.rank() != 2 || sino.rows() != g.angles.size() || sino.cols() != g.bins)
    throw Error("operators", "sinogram extents do not match the Radon geometry");
  if (opt.filter != "hann" && opt.filter != "ramp") throw Error("operators", "unknown FBP filter: " + opt.filter);
  if (!(opt.frequency_scaling > 0 && opt.frequency_scaling <= 1))
    throw Error("operators", "frequency scaling must be in (0, 1]");
  const double d = g.bin_width();
  std::size_t n = 1;
  while (n < 2 * g.bins) n <<= 1;

  // Band-limited ramp kernel sampled at the bin spacing, laid out circularly.
  std::vector<double> kernel(n, 0.0);
  kernel[0] = 1 / (4 * d * d);
  for (std::size_t i = 1; i <= n / 2; ++i) {
    if (i % 2 == 0) continue;
    const double v = -1 / (static_cast<double>(i * i) * M_PI * M_PI * d * d);
    kernel[i] = v;
    if (i < n / 2) kernel[n - i] = v;
  }
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> response;
  fft.fwd(response, kernel);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = static_cast<double>(std::min(i, n - i)) / static_cast<double>(n / 2);  // 1 at Nyquist
    double w = 1;
    if (opt.filter == "hann")
      w = f > opt.frequency_scaling ? 0.0 : std::pow(std::cos(M_PI * f / (2 * opt.frequency_scaling)), 2);
    response[i] = std::complex<double>(response[i].real() * w, 0.0);
  }

  auto filtered = Image<double>::image(g.angles.size(), g.bins);
  std::vector<double> row(n);
  std::vector<std::complex<double>> spec;
  std::vector<double> out;
  for (std::size_t k = 0; k < g.angles.size(); ++k) {
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t b = 0; b < g.bins; ++b) row[b] = sino(k, b);
    fft.fwd(spec, row);
    for (std::size_t i = 0; i < spec.size(); ++i) spec[i] *= response[i];
    fft.inv(out, spec);
    for (std::size_t b = 0; b < g.bins; ++b) filtered(k, b) = d * out[b];
  }

  auto x = Image<double>::image(g.rows, g.cols);
  const double h = g.pixel_size();
  const double half_w = g.width / 2, half_h = g.height() / 2;
  for (std::size_t k = 0; k < g.angles.size(); ++k) {
    const double c = std::cos(g.angles[k]), s = std::sin(g.angles[k]);
    for (std::size_t r = 0; r < g.rows; ++r) {
      const double y = half_h - (static_cast<double>(r) + 0.5) * h;
      for (std::size_t q = 0; q < g.cols; ++q) {
        const double xx = -half_w + (static_cast<double>(q) + 0.5) * h;
        const double t = xx * c + y * s;
        const double fb = (t + g.detector_span / 2) / d - 0.5;
        const double fl = std::floor(fb);
        const long b0 = static_cast<long>(fl);
        const double a = fb - fl;
        double v = 0;
        if (b0 >= 0 && b0 < static_cast<long>(g.bins)) v += (1 - a) * filtered(k, static_cast<std::size_t>(b0));
        if (b0 + 1 >= 0 && b0 + 1 < static_cast<long>(g.bins))
          v += a * filtered(k, static_cast<std::size_t>(b0 + 1));
        x(r, q) += g.angle_step * v;
      }
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// Noise

struct NoiseModel {
  enum class Kind { gaussian, poisson_ct } kind = Kind::gaussian;
  double sigma = 0.0;   // gaussian
  double n0 = 4096.0;   // poisson_ct: mean photon count per bin

  static NoiseModel gaussian(double sigma) { return {Kind::gaussian, sigma, 4096.0}; }
  static NoiseModel poisson_ct(double n0) { return {Kind::poisson_ct, 0.0, n0}; }
};

/// Gaussian: y = f(x) + sigma eps. Poisson: y = -log(N1 / N0) with
/// N1 ~ Pois(N0 exp(-f(x))) clamped to at least one count.
inline Image<double> add_noise(const Image<double>& fx, const NoiseModel& noise, std::uint64_t seed) {
  Rng rng(seed);
  Image<double> y = fx;
  if (noise.kind == NoiseModel::Kind::gaussian) {
    if (!(noise.sigma >= 0)) throw Error("operators", "noise sigma must be non-negative");
    if (noise.sigma == 0) return y;
    NormalSampler normal;
    for (auto& v : y.storage()) v += noise.sigma * normal(rng);
  } else {
    if (!(noise.n0 > 0)) throw Error("operators", "photon count N0 must be positive");
    for (auto& v : y.storage()) {
      std::poisson_distribution<long long> pois(noise.n0 * std::exp(-v));
      const double counts = static_cast<double>(std::max<long long>(1, pois(rng)));
      v = -std::log(counts / noise.n0);
    }
  }
  return y;
}

inline Image<double> simulate_observation(const LinearOperator& op, const Image<double>& x, const NoiseModel& noise,
                                          std::uint64_t seed) {
  return add_noise(op.apply(x), noise, seed);
}

// ---------------------------------------------------------------------------
// Bicubic upsampling and synthetic images

namespace detail {
inline double keys_cubic(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1) return ((a + 2) * t - (a + 3)) * t * t + 1;
  if (t < 2) return ((a * t - 5 * a) * t + 8 * a) * t - 4 * a;
  return 0;
}
}  // namespace detail

/// Keys bicubic interpolation with replicated edges. High-res pixel u maps
/// to low-res coordinate (u - (factor - 1) / 2) / factor, the inverse of the
/// blur-downsample sampling grid.
inline Image<double> bicubic_upsample(const Image<double>& lr, std::size_t factor, Shape2 out) {
  if (factor == 0 || lr.rank() != 2 || lr.size() == 0) throw Error("operators", "bicubic needs a 2-D image");
  const double off = (static_cast<double>(factor) - 1) / 2;
  const long lr_rows = static_cast<long>(lr.rows()), lr_cols = static_cast<long>(lr.cols());
  auto at = [&](long r, long c) {
    return lr(static_cast<std::size_t>(std::clamp(r, 0L, lr_rows - 1)),
              static_cast<std::size_t>(std::clamp(c, 0L, lr_cols - 1)));
  };
  auto hr = Image<double>::image(out[0], out[1]);
  for (std::size_t u = 0; u < out[0]; ++u) {
    const double fr = (static_cast<double>(u) - off) / static_cast<double>(factor);
    const long r0 = static_cast<long>(std::floor(fr));
    for (std::size_t v = 0; v < out[1]; ++v) {
      const double fc = (static_cast<double>(v) - off) / static_cast<double>(factor);
      const long c0 = static_cast<long>(std::floor(fc));
      double acc = 0;
      for (long i = -1; i <= 2; ++i) {
        const double wr = detail::keys_cubic(fr - static_cast<double>(r0 + i));
        for (long j = -1; j <= 2; ++j) acc += wr * detail::keys_cubic(fc - static_cast<double>(c0 + j)) * at(r0 + i, c0 + j);
      }
      hr(u, v) = acc;
    }
  }
  return hr;
}

/// Modified Shepp-Logan head phantom on [-1, 1]^2, intensities in [0, 1].
inline Image<double> shepp_logan(std::size_t n) {
  struct Ellipse {
    double value, a, b, x0, y0, phi_deg;
  };
  static constexpr Ellipse table[] = {
      {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},         {-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0},
      {-0.2, 0.11, 0.31, 0.22, 0.0, -18.0},     {-0.2, 0.16, 0.41, -0.22, 0.0, 18.0},
      {0.1, 0.21, 0.25, 0.0, 0.35, 0.0},        {0.1, 0.046, 0.046, 0.0, 0.1, 0.0},
      {0.1, 0.046, 0.046, 0.0, -0.1, 0.0},      {0.1, 0.046, 0.023, -0.08, -0.605, 0.0},
      {0.1, 0.023, 0.023, 0.0, -0.606, 0.0},    {0.1, 0.023, 0.046, 0.06, -0.605, 0.0},
  };
  auto img = Image<double>::image(n, n);
  const double h = 2.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      const double x = -1 + (static_cast<double>(c) + 0.5) * h, y = 1 - (static_cast<double>(r) + 0.5) * h;
      double v = 0;
      for (const auto& e : table) {
        const double phi = e.phi_deg * M_PI / 180;
        const double dx = x - e.x0, dy = y - e.y0;
        const double u = dx * std::cos(phi) + dy * std::sin(phi), w = -dx * std::sin(phi) + dy * std::cos(phi);
        if ((u * u) / (e.a * e.a) + (w * w) / (e.b * e.b) <= 1) v += e.value;
      }
      img(r, c) = v;
    }
  return img;
}

/// Centred disk of the given radius (fraction of the half-width) and value;
/// edge pixels hold the covered area fraction (8 x 8 supersampling).
inline Image<double> disk_phantom(std::size_t n, double radius = 0.5, double value = 1.0) {
  constexpr int sub = 8;
  auto img = Image<double>::image(n, n);
  const double h = 2.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      int inside = 0;
      for (int a = 0; a < sub; ++a)
        for (int b = 0; b < sub; ++b) {
          const double x = -1 + (static_cast<double>(c) + (b + 0.5) / sub) * h;
          const double y = 1 - (static_cast<double>(r) + (a + 0.5) / sub) * h;
          inside += x * x + y * y <= radius * radius;
        }
      img(r, c) = value * inside / (sub * sub);
    }
  return img;
}

/// Two-phase material-like texture in [0, 1]: smoothed white noise pushed
/// through a steep sigmoid, with a faint fine-scale grain.
inline Image<double> material_texture(std::size_t rows, std::size_t cols, std::uint64_t seed,
                                      double feature_sigma = 3.0, double grain = 0.01) {
  Rng rng(seed);
  NormalSampler normal;
  auto noise = Image<double>::image(rows, cols);
  for (auto& v : noise.storage()) v = normal(rng);
  const auto width = static_cast<std::size_t>(2 * std::ceil(3 * feature_sigma) + 1);
  const ConvolutionOp smooth({rows, cols}, gaussian_kernel(width, feature_sigma));
  auto field = smooth.apply(noise);
  double mean = 0, sq = 0;
  for (double v : field.values()) {
    mean += v;
    sq += v * v;
  }
  mean /= static_cast<double>(field.size());
  const double sd = std::sqrt(std::max(1e-300, sq / static_cast<double>(field.size()) - mean * mean));
  auto img = Image<double>::image(rows, cols);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double z = (field.values()[i] - mean) / sd;
    img.storage()[i] = 0.15 + 0.7 / (1 + std::exp(-4 * z)) + grain * normal(rng);
  }
  for (auto& v : img.storage()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

}  // namespace patchnr
