#pragma once
// Numerical checks of the induced patch density, the Gaussian sandwich
// bounds for bi-Lipschitz flows, and integrability of exp(-rho patchNR)
// on tiny images.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "patchnr/diffcore.hpp"
#include "patchnr/flow.hpp"
#include "patchnr/patchops.hpp"
#include "patchnr/priors.hpp"
#include "patchnr/random.hpp"

namespace patchnr {

/// Image of at most six pixels with a Gaussian-mixture density p_X.
struct TinyInstance {
  PatchGeometry geometry;
  PatchGMM density;

  std::size_t image_dim() const noexcept { return geometry.rows * geometry.cols; }

  void validate() const {
    geometry.validate();
    if (image_dim() > 6) throw Error("analysis", "tiny instance allows at most 6 pixels");
    if (density.dim() != image_dim()) throw Error("analysis", "density dimension does not match the image");
  }

  /// p_X = N(mean, sigma^2 I) on a rows x cols image.
  static TinyInstance gaussian(std::size_t rows, std::size_t cols, std::size_t prow, std::size_t pcol,
                               std::vector<double> mean, double sigma = 1.0) {
    const auto d = static_cast<Eigen::Index>(rows * cols);
    if (mean.size() != rows * cols) throw Error("analysis", "mean has the wrong length");
    Eigen::VectorXd mu = Eigen::Map<const Eigen::VectorXd>(mean.data(), d);
    TinyInstance t{PatchGeometry(rows, cols, prow, pcol),
                   PatchGMM({1.0}, {mu}, {sigma * sigma * Eigen::MatrixXd::Identity(d, d)})};
    t.validate();
    return t;
  }
};

namespace detail {

struct SimpsonState {
  std::size_t evaluations = 0;
  std::size_t max_evaluations = 0;
};

inline double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double fa, double fm,
                               double fb, double whole, double tol, int depth, SimpsonState& st) {
  const double m = 0.5 * (a + b), lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  st.evaluations += 2;
  const double left = (m - a) / 6 * (fa + 4 * flm + fm), right = (b - m) / 6 * (fm + 4 * frm + fb);
  const double diff = left + right - whole;
  if (std::abs(diff) <= 15 * tol) return left + right + diff / 15;
  if (depth <= 0 || st.evaluations > st.max_evaluations)
    throw Error("analysis", "adaptive quadrature did not converge");
  return adaptive_simpson(f, a, m, fa, flm, fm, left, tol / 2, depth - 1, st) +
         adaptive_simpson(f, m, b, fm, frm, fb, right, tol / 2, depth - 1, st);
}

}  // namespace detail

/// Adaptive composite Simpson on [a, b]: `panels` uniform panels, each
/// refined until the Richardson estimate meets its share of `tol`.
inline double integrate_simpson(const std::function<double(double)>& f, double a, double b, double tol = 1e-10,
                                std::size_t panels = 32) {
  detail::SimpsonState st{0, 20'000'000};
  double total = 0;
  const double h = (b - a) / static_cast<double>(panels);
  for (std::size_t k = 0; k < panels; ++k) {
    const double lo = a + h * static_cast<double>(k), hi = lo + h, mid = 0.5 * (lo + hi);
    const double flo = f(lo), fmid = f(mid), fhi = f(hi);
    const double whole = h / 6 * (flo + 4 * fmid + fhi);
    total += detail::adaptive_simpson(f, lo, hi, flo, fmid, fhi, whole, tol / static_cast<double>(panels), 40, st);
  }
  return total;
}

/// Induced patch density q(p) = (1/N_p) sum_i integral p_X(P_i^T p + Pt_i^T xt) dxt,
/// marginalizing every off-patch pixel by nested quadrature over
/// [mu - 10 sigma, mu + 10 sigma] (hull over mixture components).
inline double marginal_density(const TinyInstance& inst, std::span<const double> p, double tol = 1e-10) {
  inst.validate();
  const auto& g = inst.geometry;
  if (p.size() != g.patch_dim()) throw Error("analysis", "patch has the wrong length");
  const std::size_t d = inst.image_dim();
  std::vector<double> lo(d, std::numeric_limits<double>::infinity()), hi(d, -lo[0]);
  for (std::size_t k = 0; k < inst.density.components(); ++k)
    for (std::size_t j = 0; j < d; ++j) {
      const auto jj = static_cast<Eigen::Index>(j);
      const double mu = inst.density.means()[k](jj), sd = std::sqrt(inst.density.covariances()[k](jj, jj));
      lo[j] = std::min(lo[j], mu - 10 * sd);
      hi[j] = std::max(hi[j], mu + 10 * sd);
    }

  double total = 0;
  std::vector<double> x(d);
  for (std::size_t i = 0; i < g.patch_count(); ++i) {
    const auto c = g.corner(i);
    std::vector<bool> in_patch(d, false);
    std::size_t k = 0;
    for (std::size_t a = 0; a < g.patch_rows; ++a)
      for (std::size_t b = 0; b < g.patch_cols; ++b) {
        const std::size_t j = (c.row + a) * g.cols + c.col + b;
        in_patch[j] = true;
        x[j] = p[k++];
      }
    std::vector<std::size_t> free;
    for (std::size_t j = 0; j < d; ++j)
      if (!in_patch[j]) free.push_back(j);
    std::function<double(std::size_t)> nested = [&](std::size_t level) -> double {
      if (level == free.size()) return std::exp(inst.density.logpdf(x));
      const std::size_t j = free[level];
      return integrate_simpson(
          [&](double v) {
            x[j] = v;
            return nested(level + 1);
          },
          lo[j], hi[j], tol);
    };
    total += nested(0);
  }
  return total / static_cast<double>(g.patch_count());
}

/// Same density from the closed-form marginals of the Gaussian mixture.
inline double marginal_closed_form(const TinyInstance& inst, std::span<const double> p) {
  inst.validate();
  const auto& g = inst.geometry;
  if (p.size() != g.patch_dim()) throw Error("analysis", "patch has the wrong length");
  const auto s = static_cast<Eigen::Index>(g.patch_dim());
  const Eigen::Map<const Eigen::VectorXd> pv(p.data(), s);
  double total = 0;
  for (std::size_t i = 0; i < g.patch_count(); ++i) {
    const auto c = g.corner(i);
    std::vector<Eigen::Index> idx;
    for (std::size_t a = 0; a < g.patch_rows; ++a)
      for (std::size_t b = 0; b < g.patch_cols; ++b)
        idx.push_back(static_cast<Eigen::Index>((c.row + a) * g.cols + c.col + b));
    for (std::size_t k = 0; k < inst.density.components(); ++k) {
      Eigen::VectorXd mu(s);
      Eigen::MatrixXd cov(s, s);
      for (Eigen::Index u = 0; u < s; ++u) {
        mu(u) = inst.density.means()[k](idx[u]);
        for (Eigen::Index v = 0; v < s; ++v) cov(u, v) = inst.density.covariances()[k](idx[u], idx[v]);
      }
      const Eigen::LLT<Eigen::MatrixXd> llt(cov);
      const Eigen::VectorXd r = llt.matrixL().solve(pv - mu);
      const double logdet = 2 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
      total += inst.density.weights()[k] *
               std::exp(-0.5 * r.squaredNorm() - 0.5 * logdet - 0.5 * static_cast<double>(s) * std::log(2 * M_PI));
    }
  }
  return total / static_cast<double>(g.patch_count());
}

/// n draws of X ~ p_X (rows of the result).
inline Mat<double> sample_images(const TinyInstance& inst, std::size_t n, Rng& rng) {
  const auto d = static_cast<Eigen::Index>(inst.image_dim());
  std::vector<Eigen::MatrixXd> chol;
  for (const auto& c : inst.density.covariances()) chol.push_back(Eigen::LLT<Eigen::MatrixXd>(c).matrixL());
  std::vector<double> cdf;
  double acc = 0;
  for (double w : inst.density.weights()) cdf.push_back(acc += w);
  NormalSampler normal;
  Mat<double> out(static_cast<Eigen::Index>(n), d);
  Eigen::VectorXd z(d);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double u = NormalSampler::unit(rng) * acc;
    std::size_t k = 0;
    while (k + 1 < cdf.size() && u >= cdf[k]) ++k;
    for (Eigen::Index j = 0; j < d; ++j) z(j) = normal(rng);
    out.row(i) = (inst.density.means()[k] + chol[k] * z).transpose();
  }
  return out;
}

struct HistogramGrid {
  double lo = 0, hi = 0;  // per patch coordinate; lo == hi selects mu -/+ 4 sigma
  std::size_t bins = 28;
};

struct MarginalReport {
  double max_deviation = 0;  // sup over bin centres of |empirical - formula|
  double bin_width = 0;
  std::size_t grid_points = 0;
  std::size_t samples = 0;
};

/// Samples X ~ p_X and a uniform patch index, bins the patches, and
/// compares the empirical density with `marginal_density` at every bin centre.
/// Patch dimension must be 1 or 2.
inline MarginalReport marginal_density_check(const TinyInstance& inst, std::size_t n_samples, std::uint64_t seed,
                                 HistogramGrid grid = {}) {
  inst.validate();
  const auto& g = inst.geometry;
  const std::size_t s = g.patch_dim();
  if (s > 2) throw Error("analysis", "histogram check supports patch dimension 1 or 2");
  if (n_samples == 0 || grid.bins == 0) throw Error("analysis", "need samples and bins");
  if (!(grid.hi > grid.lo)) {
    grid.lo = std::numeric_limits<double>::infinity();
    grid.hi = -grid.lo;
    for (std::size_t k = 0; k < inst.density.components(); ++k)
      for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(inst.image_dim()); ++j) {
        const double mu = inst.density.means()[k](j), sd = std::sqrt(inst.density.covariances()[k](j, j));
        grid.lo = std::min(grid.lo, mu - 4 * sd);
        grid.hi = std::max(grid.hi, mu + 4 * sd);
      }
  }
  const double h = (grid.hi - grid.lo) / static_cast<double>(grid.bins);
  const std::size_t cells = s == 1 ? grid.bins : grid.bins * grid.bins;
  std::vector<std::size_t> counts(cells, 0);

  Rng rng(seed);
  constexpr std::size_t kChunk = 100000;
  for (std::size_t done = 0; done < n_samples; done += kChunk) {
    const std::size_t m = std::min(kChunk, n_samples - done);
    const Mat<double> xs = sample_images(inst, m, rng);
    for (Eigen::Index r = 0; r < xs.rows(); ++r) {
      const auto c = g.corner(static_cast<std::size_t>(uniform_index(rng, g.patch_count())));
      std::size_t cell = 0;
      bool inside = true;
      std::size_t k = 0;
      for (std::size_t a = 0; a < g.patch_rows; ++a)
        for (std::size_t b = 0; b < g.patch_cols; ++b, ++k) {
          const double v = xs(r, static_cast<Eigen::Index>((c.row + a) * g.cols + c.col + b));
          const double t = std::floor((v - grid.lo) / h);
          if (t < 0 || t >= static_cast<double>(grid.bins)) inside = false;
          else cell = cell * grid.bins + static_cast<std::size_t>(t);
        }
      if (inside) ++counts[cell];
    }
  }

  MarginalReport rep;
  rep.bin_width = h;
  rep.grid_points = cells;
  rep.samples = n_samples;
  const double vol = s == 1 ? h : h * h;
  std::vector<double> p(s);
  for (std::size_t cell = 0; cell < cells; ++cell) {
    if (s == 1) {
      p[0] = grid.lo + (static_cast<double>(cell) + 0.5) * h;
    } else {
      p[0] = grid.lo + (static_cast<double>(cell / grid.bins) + 0.5) * h;
      p[1] = grid.lo + (static_cast<double>(cell % grid.bins) + 0.5) * h;
    }
    const double empirical = static_cast<double>(counts[cell]) / (static_cast<double>(n_samples) * vol);
    rep.max_deviation = std::max(rep.max_deviation, std::abs(empirical - marginal_density(inst, p)));
  }
  return rep;
}

/// Lipschitz constants K = Lip(T), L = Lip(T^{-1}) known exactly for a flow.
struct LipschitzCertificate {
  double K = 1;
  double L = 1;
};

struct CertifiedFlow {
  PatchFlow<double> flow;
  LipschitzCertificate certificate;
};

/// T(z) = diag(a) z + b with K = max a and L = 1 / min a.
inline CertifiedFlow make_certified_affine(std::span<const double> a, std::span<const double> b) {
  auto flow = make_affine_flow<double>(a, b);
  const auto [mn, mx] = std::minmax_element(a.begin(), a.end());
  return {std::move(flow), {*mx, 1.0 / *mn}};
}

struct DensityBoundsReport {
  double min_slack = std::numeric_limits<double>::infinity();  // in log-density units
  std::size_t violations = 0;
  std::size_t points = 0;
};

/// Checks (1/(L^s K^s)) N(p | T(0), I/L^2) <= p_T(p) <= L^s K^s N(p | T(0), K^2 I)
/// at n random points around T(0). Slack is the smaller log-margin; a
/// violation is a margin below -1e-10.
inline DensityBoundsReport density_bounds_check(const PatchFlow<double>& flow, const LipschitzCertificate& cert, std::size_t n_points,
                                 std::uint64_t seed) {
  if (!(cert.K > 0) || !(cert.L > 0)) throw Error("analysis", "Lipschitz constants must be positive");
  const std::size_t s = flow.dim();
  const double ds = static_cast<double>(s);
  const std::vector<double> zero(s, 0.0);
  const auto t0 = flow.forward_map(zero).value;
  const double log_ratio = ds * std::log(cert.L * cert.K);
  auto log_normal = [&](const std::vector<double>& p, double var) {
    double q = 0;
    for (std::size_t j = 0; j < s; ++j) q += (p[j] - t0[j]) * (p[j] - t0[j]);
    return -0.5 * q / var - 0.5 * ds * std::log(2 * M_PI * var);
  };
  Rng rng(seed);
  NormalSampler normal;
  DensityBoundsReport rep;
  std::vector<double> p(s);
  for (std::size_t i = 0; i < n_points; ++i) {
    for (std::size_t j = 0; j < s; ++j) p[j] = t0[j] + 2 * cert.K * normal(rng);
    const double logp = -flow.nll(p);
    const double lower = -log_ratio + log_normal(p, 1.0 / (cert.L * cert.L));
    const double upper = log_ratio + log_normal(p, cert.K * cert.K);
    const double slack = std::min(logp - lower, upper - logp);
    rep.min_slack = std::min(rep.min_slack, slack);
    if (slack < -1e-10) ++rep.violations;
    ++rep.points;
  }
  return rep;
}

struct TailOptions {
  std::size_t starts = 24;          // random directions for the sphere maximization
  std::size_t ascent_steps = 200;   // projected-gradient iterations per start
  std::size_t box_samples = 10'000'000;
  double inner_box = 6;
  double outer_box = 8;
  std::uint64_t seed = 0;
};

struct TailRow {
  double radius = 0;
  double max_log_phi = 0;  // max over the sphere of -rho patchNR(x)
};

struct TailReport {
  std::vector<TailRow> table;
  double slope = 0;      // coefficient of r^2 in a fit a r^2 + b r + c
  double linear = 0;
  double intercept = 0;
  bool decreasing = false;
  double inner_integral = 0;  // integral of phi over [-inner, inner]^d
  double outer_integral = 0;
  double relative_change = 0;
  double integral_stderr = 0;  // Monte-Carlo standard error of the outer integral
};

/// Closed-form bracket for the r^2 decay coefficient implied by the
/// sandwich bounds: [-rho L^2 c_min / (2s), -rho c_min / (2 s K^2)], c_min
/// the smallest patch coverage count.
inline std::pair<double, double> tail_slope_bracket(const LipschitzCertificate& cert, const PatchGeometry& g,
                                                     double rho) {
  const auto cov = coverage_counts(g);
  const double cmin = *std::min_element(cov.values().begin(), cov.values().end());
  const double s = static_cast<double>(g.patch_dim());
  return {-rho * cert.L * cert.L * cmin / (2 * s), -rho * cmin / (2 * s * cert.K * cert.K)};
}

namespace detail {

// patchNR over all patches for each row of `xs` (images in row-major order).
inline std::vector<double> patchnr_rows(const PatchFlow<double>& flow, const PatchGeometry& g, const Mat<double>& xs) {
  const std::size_t np = g.patch_count(), s = g.patch_dim();
  Mat<double> patches(xs.rows() * static_cast<Eigen::Index>(np), static_cast<Eigen::Index>(s));
  for (Eigen::Index r = 0; r < xs.rows(); ++r)
    for (std::size_t i = 0; i < np; ++i) {
      const auto c = g.corner(i);
      std::size_t k = 0;
      for (std::size_t a = 0; a < g.patch_rows; ++a)
        for (std::size_t b = 0; b < g.patch_cols; ++b)
          patches(r * static_cast<Eigen::Index>(np) + static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k++)) =
              xs(r, static_cast<Eigen::Index>((c.row + a) * g.cols + c.col + b));
    }
  const auto nll = flow.nll_constant_free_batch(patches);
  std::vector<double> out(static_cast<std::size_t>(xs.rows()), 0.0);
  for (std::size_t r = 0; r < out.size(); ++r) {
    for (std::size_t i = 0; i < np; ++i) out[r] += nll[r * np + i];
    out[r] /= static_cast<double>(s);
  }
  return out;
}

}  // namespace detail

/// Decay of phi(x) = exp(-rho patchNR(x)): maxima on spheres of the given
/// radii, a quadratic fit of log phi against r, and Monte-Carlo integrals of
/// phi over two nested boxes (one sample set, restricted for the inner box).
inline TailReport tail_decay_check(const PatchFlow<double>& flow, const std::optional<LipschitzCertificate>& cert,
                                    const PatchGeometry& g, double rho, const std::vector<double>& radii,
                                    const TailOptions& opt = {}) {
  if (!cert || !(cert->K > 0) || !(cert->L > 0) || !std::isfinite(cert->K) || !std::isfinite(cert->L))
    throw Error("analysis", "flow is not certified bi-Lipschitz");
  g.validate();
  const std::size_t d = g.rows * g.cols;
  if (d > 4) throw Error("analysis", "integrability check needs an image of at most 4 pixels");
  if (g.patch_dim() != flow.dim()) throw Error("analysis", "patch size does not match the flow dimension");
  if (!(rho > 0)) throw Error("analysis", "rho must be positive");
  if (radii.size() < 3) throw Error("analysis", "need at least three radii");
  if (!(opt.outer_box > opt.inner_box) || !(opt.inner_box > 0)) throw Error("analysis", "invalid box sizes");

  const auto all = all_patch_indices(g);
  auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) {
    auto img = Image<double>::image(g.rows, g.cols);
    std::copy(x.data(), x.data() + x.size(), img.storage().begin());
    const auto pv = patchnr(img, flow, g, all);
    if (grad) *grad = Eigen::Map<const Eigen::VectorXd>(pv.gradient.values().data(), x.size());
    return pv.value;
  };

  Rng rng(opt.seed);
  NormalSampler normal;
  const auto dd = static_cast<Eigen::Index>(d);
  std::vector<Eigen::VectorXd> starts;
  for (Eigen::Index j = 0; j < dd; ++j)
    for (double sign : {1.0, -1.0}) starts.push_back(sign * Eigen::VectorXd::Unit(dd, j));
  for (std::size_t k = 0; k < opt.starts; ++k) {
    Eigen::VectorXd u(dd);
    for (Eigen::Index j = 0; j < dd; ++j) u(j) = normal(rng);
    starts.push_back(u.normalized());
  }

  TailReport rep;
  for (double r : radii) {
    if (!(r > 0)) throw Error("analysis", "radii must be positive");
    double best = std::numeric_limits<double>::infinity();
    for (const auto& u0 : starts) {
      // Projected gradient descent of patchNR on the sphere of radius r.
      Eigen::VectorXd u = u0, grad(dd);
      double f = objective(r * u, &grad);
      double step = 0.5;
      for (std::size_t it = 0; it < opt.ascent_steps; ++it) {
        Eigen::VectorXd t = r * grad;
        t -= t.dot(u) * u;
        const double tn = t.norm();
        if (tn < 1e-14 * (1 + std::abs(f))) break;
        bool moved = false;
        for (int ls = 0; ls < 50; ++ls) {
          const Eigen::VectorXd cand = (u - (step / tn) * t).normalized();
          Eigen::VectorXd cg(dd);
          const double fc = objective(r * cand, &cg);
          if (fc < f) {
            u = cand;
            f = fc;
            grad = cg;
            step = std::min(1.0, 2 * step);
            moved = true;
            break;
          }
          step *= 0.5;
        }
        if (!moved) break;
      }
      best = std::min(best, f);
    }
    rep.table.push_back({r, -rho * best});
  }

  const auto n = static_cast<Eigen::Index>(radii.size());
  Eigen::MatrixXd A(n, 3);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double r = rep.table[static_cast<std::size_t>(i)].radius;
    A(i, 0) = r * r;
    A(i, 1) = r;
    A(i, 2) = 1;
    y(i) = rep.table[static_cast<std::size_t>(i)].max_log_phi;
  }
  const Eigen::Vector3d coef = A.colPivHouseholderQr().solve(y);
  rep.slope = coef(0);
  rep.linear = coef(1);
  rep.intercept = coef(2);
  auto sorted = rep.table;
  std::sort(sorted.begin(), sorted.end(), [](const TailRow& a, const TailRow& b) { return a.radius < b.radius; });
  rep.decreasing = rep.slope < 0;
  for (std::size_t i = 1; i < sorted.size(); ++i)
    rep.decreasing = rep.decreasing && sorted[i].max_log_phi < sorted[i - 1].max_log_phi;

  // Box integrals from one uniform sample set on the outer box.
  const double volume = std::pow(2 * opt.outer_box, static_cast<double>(d));
  constexpr std::size_t kChunk = 100000;
  double sum_outer = 0, sum_inner = 0, sum_sq = 0;
  for (std::size_t done = 0; done < opt.box_samples; done += kChunk) {
    const std::size_t m = std::min(kChunk, opt.box_samples - done);
    Mat<double> xs(static_cast<Eigen::Index>(m), dd);
    for (Eigen::Index i = 0; i < xs.size(); ++i) xs.data()[i] = opt.outer_box * (2 * NormalSampler::unit(rng) - 1);
    const auto vals = detail::patchnr_rows(flow, g, xs);
    double chunk_outer = 0, chunk_inner = 0, chunk_sq = 0;
    for (std::size_t i = 0; i < m; ++i) {
      const double phi = std::exp(-rho * vals[i]);
      chunk_outer += phi;
      chunk_sq += phi * phi;
      if (xs.row(static_cast<Eigen::Index>(i)).cwiseAbs().maxCoeff() <= opt.inner_box) chunk_inner += phi;
    }
    sum_outer += chunk_outer;
    sum_inner += chunk_inner;
    sum_sq += chunk_sq;
  }
  const double ns = static_cast<double>(opt.box_samples);
  const double mean = sum_outer / ns;
  rep.outer_integral = volume * mean;
  rep.inner_integral = volume * sum_inner / ns;
  rep.integral_stderr = volume * std::sqrt(std::max(0.0, sum_sq / ns - mean * mean) / ns);
  rep.relative_change = std::abs(rep.outer_integral - rep.inner_integral) / rep.outer_integral;
  return rep;
}

}  // namespace patchnr
