#pragma once
// Patch-based regularizers and their image-space gradients: patchNR,
// conditional patchNR, and the EPLL Gaussian-mixture baseline (with EM).

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "patchnr/flow.hpp"
#include "patchnr/patchops.hpp"

namespace patchnr {

template <class T>
struct PriorValue {
  T value{};
  Image<T> gradient;
};

namespace detail {
template <class T>
void require_finite_value(T v, const char* what) {
  if (!std::isfinite(v)) throw Error("priors", std::string("non-finite ") + what + " value");
}
}  // namespace detail

/// patchNR(x) = (1/s) sum_{i in subset} 0.5|T^{-1}(P_i x)|^2 - log|det dT^{-1}(P_i x)|
template <class T>
PriorValue<T> patchnr(const Image<T>& image, const PatchFlow<T>& flow, const PatchGeometry& g,
                      const std::vector<std::size_t>& subset) {
  if (subset.empty()) throw Error("priors", "patch subset is empty");
  if (g.patch_dim() != flow.dim()) throw Error("priors", "patch size does not match the flow dimension");
  const T inv_s = T(1) / static_cast<T>(g.patch_dim());
  Mat<T> dp;
  const auto nll = flow.backprop(extract_patches(image, g, subset), inv_s, nullptr, &dp);
  T value = 0;
  for (T v : nll) value += v;
  value *= inv_s;
  detail::require_finite_value(value, "patchNR");
  return {value, insert_adjoint(dp, subset, g)};
}

/// Conditional variant; conditions are windows of `cond_image` and are
/// treated as constants.
template <class T>
PriorValue<T> cpatchnr(const Image<T>& image, const Image<T>& cond_image, const ConditionalPatchFlow<T>& flow,
                       const PatchGeometry& g, const std::vector<std::size_t>& subset) {
  if (subset.empty()) throw Error("priors", "patch subset is empty");
  if (g.patch_dim() != flow.dim() || g.patch_dim() != flow.condition_dim())
    throw Error("priors", "patch size does not match the conditional flow");
  const T inv_s = T(1) / static_cast<T>(g.patch_dim());
  Mat<T> dp;
  const auto nll = flow.backprop(condition_patches(cond_image, g, subset), extract_patches(image, g, subset), inv_s,
                                 nullptr, &dp);
  T value = 0;
  for (T v : nll) value += v;
  value *= inv_s;
  detail::require_finite_value(value, "cPatchNR");
  return {value, insert_adjoint(dp, subset, g)};
}

// ---------------------------------------------------------------------------
// Gaussian mixture model over patch vectors

class PatchGMM {
 public:
  using Vector = Eigen::VectorXd;
  using Matrix = Eigen::MatrixXd;

  PatchGMM() = default;

  PatchGMM(std::vector<double> weights, std::vector<Vector> means, std::vector<Matrix> covariances)
      : weights_(std::move(weights)), means_(std::move(means)), covs_(std::move(covariances)) {
    refresh();
  }

  std::size_t components() const noexcept { return weights_.size(); }
  std::size_t dim() const noexcept { return means_.empty() ? 0 : static_cast<std::size_t>(means_[0].size()); }
  const std::vector<double>& weights() const noexcept { return weights_; }
  const std::vector<Vector>& means() const noexcept { return means_; }
  const std::vector<Matrix>& covariances() const noexcept { return covs_; }

  /// log sum_k w_k N(p | mu_k, Sigma_k); optional gradient w.r.t. p.
  double logpdf(std::span<const double> p, std::span<double> grad = {}) const {
    Mat<double> x = Eigen::Map<const Mat<double>>(p.data(), 1, static_cast<Eigen::Index>(p.size()));
    Mat<double> g;
    const auto v = logpdf_batch(x, grad.empty() ? nullptr : &g);
    if (!grad.empty()) std::copy(g.data(), g.data() + g.size(), grad.begin());
    return v[0];
  }

  /// Row-wise log-density with optional row-wise gradients.
  std::vector<double> logpdf_batch(const Mat<double>& x, Mat<double>* grad) const {
    if (x.cols() != static_cast<Eigen::Index>(dim())) throw Error("priors", "GMM dimension mismatch");
    const Eigen::Index n = x.rows();
    const std::size_t k_count = components();
    Eigen::MatrixXd logp(n, static_cast<Eigen::Index>(k_count));
    std::vector<Eigen::MatrixXd> whitened(grad ? k_count : 0);
    for (std::size_t k = 0; k < k_count; ++k) {
      Eigen::MatrixXd d = (x.rowwise() - means_[k].transpose()).transpose();  // s x n
      chol_[k].matrixL().solveInPlace(d);
      logp.col(static_cast<Eigen::Index>(k)) =
          (log_norm_[k] + std::log(weights_[k])) - 0.5 * d.colwise().squaredNorm().transpose().array();
      if (grad) {
        chol_[k].matrixU().solveInPlace(d);  // Sigma^{-1}(x - mu)
        whitened[k] = std::move(d);
      }
    }
    std::vector<double> out(static_cast<std::size_t>(n));
    if (grad) grad->setZero(n, static_cast<Eigen::Index>(dim()));
    for (Eigen::Index i = 0; i < n; ++i) {
      const double m = logp.row(i).maxCoeff();
      double acc = 0;
      for (std::size_t k = 0; k < k_count; ++k) acc += std::exp(logp(i, static_cast<Eigen::Index>(k)) - m);
      const double lse = m + std::log(acc);
      out[static_cast<std::size_t>(i)] = lse;
      if (grad) {
        for (std::size_t k = 0; k < k_count; ++k) {
          const double r = std::exp(logp(i, static_cast<Eigen::Index>(k)) - lse);
          grad->row(i) -= r * whitened[k].col(i).transpose();
        }
      }
    }
    return out;
  }

  /// Per-component log N(x_i | mu_k, Sigma_k) + log w_k as an n x K matrix.
  Eigen::MatrixXd weighted_component_logpdf(const Mat<double>& x) const {
    Eigen::MatrixXd logp(x.rows(), static_cast<Eigen::Index>(components()));
    for (std::size_t k = 0; k < components(); ++k) {
      Eigen::MatrixXd d = (x.rowwise() - means_[k].transpose()).transpose();
      chol_[k].matrixL().solveInPlace(d);
      logp.col(static_cast<Eigen::Index>(k)) =
          (log_norm_[k] + std::log(weights_[k])) - 0.5 * d.colwise().squaredNorm().transpose().array();
    }
    return logp;
  }

 private:
  void refresh() {
    if (weights_.empty() || weights_.size() != means_.size() || weights_.size() != covs_.size())
      throw Error("priors", "GMM component arrays are inconsistent");
    double wsum = 0;
    for (double w : weights_) {
      if (!(w > 0)) throw Error("priors", "GMM weights must be positive");
      wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-8) throw Error("priors", "GMM weights must sum to 1");
    chol_.clear();
    log_norm_.clear();
    const double s = static_cast<double>(dim());
    for (const auto& c : covs_) {
      if (c.rows() != static_cast<Eigen::Index>(dim()) || c.cols() != c.rows())
        throw Error("priors", "GMM covariance shape mismatch");
      Eigen::LLT<Eigen::MatrixXd> llt(c);
      if (llt.info() != Eigen::Success) throw Error("priors", "GMM covariance is not positive definite");
      double logdet = 0;
      for (Eigen::Index i = 0; i < c.rows(); ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
      log_norm_.push_back(-0.5 * (s * std::log(2 * M_PI) + logdet));
      chol_.push_back(std::move(llt));
    }
  }

  std::vector<double> weights_;
  std::vector<Vector> means_;
  std::vector<Matrix> covs_;
  std::vector<Eigen::LLT<Eigen::MatrixXd>> chol_;
  std::vector<double> log_norm_;
};

struct EmConfig {
  std::size_t max_iterations = 100;
  double covariance_floor = 1e-6;
  std::uint64_t seed = 0;
  double tolerance = 1e-8;  // stop when the mean log-likelihood gains less
};

struct GmmFitResult {
  PatchGMM gmm;
  std::vector<double> loglik_trace;  // mean per-sample log-likelihood
  std::size_t reinitialized = 0;
};

namespace detail {

// Maximizer of the Gaussian likelihood term subject to eigenvalues >= floor.
inline Eigen::MatrixXd floor_covariance(const Eigen::MatrixXd& s, double floor) {
  if (floor <= 0) {
    Eigen::LLT<Eigen::MatrixXd> llt(s);
    if (llt.info() != Eigen::Success) throw Error("priors", "singular covariance in EM (no covariance floor)");
    return s;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(floor);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// EM fit with k-means++ seeding and eigenvalue-floored covariances.
inline GmmFitResult gmm_fit(const Mat<double>& x, std::size_t k_count, const EmConfig& cfg = {}) {
  const Eigen::Index n = x.rows();
  if (k_count == 0 || n < static_cast<Eigen::Index>(k_count)) throw Error("priors", "gmm_fit requires N >= K > 0");
  Rng rng(cfg.seed);

  // k-means++ seeding
  std::vector<Eigen::VectorXd> centers;
  centers.push_back(x.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n)))).transpose());
  Eigen::VectorXd d2 = (x.rowwise() - centers[0].transpose()).rowwise().squaredNorm();
  while (centers.size() < k_count) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      double u = NormalSampler::unit(rng) * total;
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2(pick);
        if (u < 0) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::uint64_t>(n)));
    }
    centers.push_back(x.row(pick).transpose());
    d2 = d2.cwiseMin((x.rowwise() - centers.back().transpose()).rowwise().squaredNorm());
  }

  const Eigen::RowVectorXd global_mean = x.colwise().mean();
  const Mat<double> xc = x.rowwise() - global_mean;
  const Eigen::MatrixXd global_cov = (xc.transpose() * xc) / static_cast<double>(n);

  // Hard assignment to the nearest center gives the initial responsibilities.
  Eigen::MatrixXd resp = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(k_count));
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < k_count; ++k) {
      const double d = (x.row(i).transpose() - centers[k]).squaredNorm();
      if (d < bd) {
        bd = d;
        best = static_cast<Eigen::Index>(k);
      }
    }
    resp(i, best) = 1.0;
  }

  GmmFitResult result;
  PatchGMM gmm;
  auto m_step = [&]() {
    std::vector<double> w(k_count);
    std::vector<Eigen::VectorXd> mu(k_count);
    std::vector<Eigen::MatrixXd> cov(k_count);
    for (std::size_t k = 0; k < k_count; ++k) {
      const Eigen::Index kk = static_cast<Eigen::Index>(k);
      double nk = resp.col(kk).sum();
      if (nk < 1e-10 * static_cast<double>(n) || nk < 1e-12) {
        // Empty component: restart at the point worst explained by the others.
        Eigen::Index far = 0;
        if (result.loglik_trace.empty()) {
          (x.rowwise() - global_mean).rowwise().squaredNorm().maxCoeff(&far);
        } else {
          Eigen::VectorXd ll(n);
          const Eigen::MatrixXd lp = gmm.weighted_component_logpdf(x);
          for (Eigen::Index i = 0; i < n; ++i) ll(i) = lp.row(i).maxCoeff();
          ll.minCoeff(&far);
        }
        resp.col(kk).setZero();
        resp(far, kk) = 1.0;
        nk = 1.0;
        mu[k] = x.row(far).transpose();
        cov[k] = detail::floor_covariance(global_cov, cfg.covariance_floor);
        w[k] = nk;
        ++result.reinitialized;
        continue;
      }
      w[k] = nk;
      mu[k] = (resp.col(kk).transpose() * x).transpose() / nk;
      const Mat<double> d = x.rowwise() - mu[k].transpose();
      const Eigen::MatrixXd sk = (d.transpose() * resp.col(kk).asDiagonal() * d) / nk;
      cov[k] = detail::floor_covariance(0.5 * (sk + sk.transpose()), cfg.covariance_floor);
    }
    double wsum = 0;
    for (double v : w) wsum += v;
    for (double& v : w) v /= wsum;
    gmm = PatchGMM(std::move(w), std::move(mu), std::move(cov));
  };

  m_step();
  for (std::size_t it = 0; it < cfg.max_iterations; ++it) {
    const Eigen::MatrixXd lp = gmm.weighted_component_logpdf(x);
    double total = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double m = lp.row(i).maxCoeff();
      const double lse = m + std::log((lp.row(i).array() - m).exp().sum());
      total += lse;
      resp.row(i) = (lp.row(i).array() - lse).exp();
    }
    const double mean_ll = total / static_cast<double>(n);
    if (!std::isfinite(mean_ll)) throw Error("priors", "non-finite log-likelihood in EM");
    const bool converged = !result.loglik_trace.empty() && mean_ll - result.loglik_trace.back() < cfg.tolerance;
    result.loglik_trace.push_back(mean_ll);
    if (converged) break;
    m_step();
  }
  result.gmm = gmm;
  return result;
}

inline double gmm_logpdf(const PatchGMM& gmm, std::span<const double> p, std::span<double> grad = {}) {
  return gmm.logpdf(p, grad);
}

/// EPLL(x) = (1/|subset|) sum_i -log p(P_i x)
inline PriorValue<double> epll(const Image<double>& image, const PatchGMM& gmm, const PatchGeometry& g,
                               const std::vector<std::size_t>& subset) {
  if (subset.empty()) throw Error("priors", "patch subset is empty");
  if (g.patch_dim() != gmm.dim()) throw Error("priors", "patch size does not match the GMM dimension");
  Mat<double> grad;
  const auto lp = gmm.logpdf_batch(extract_patches(image, g, subset), &grad);
  const double inv_n = 1.0 / static_cast<double>(subset.size());
  double value = 0;
  for (double v : lp) value -= v;
  value *= inv_n;
  detail::require_finite_value(value, "EPLL");
  grad *= -inv_n;
  return {value, insert_adjoint(grad, subset, g)};
}

// ---------------------------------------------------------------------------
// Type-erased regularizer used by the solver.

/// R(x) evaluated on a patch subset. `weight_scale(n)` converts the user
/// lambda into the effective weight: s/n for the (1/s)-scaled flow priors,
/// 1 for EPLL, which is already a mean over the subset.
class Regularizer {
 public:
  virtual ~Regularizer() = default;
  virtual PriorValue<double> evaluate(const Image<double>& x, const std::vector<std::size_t>& subset) const = 0;
  virtual const PatchGeometry& geometry() const = 0;
  virtual double weight_scale(std::size_t subset_size) const = 0;
  virtual std::string name() const = 0;
};

class PatchNRRegularizer final : public Regularizer {
 public:
  PatchNRRegularizer(std::shared_ptr<const PatchFlow<double>> flow, PatchGeometry g) : flow_(std::move(flow)), g_(g) {}
  PriorValue<double> evaluate(const Image<double>& x, const std::vector<std::size_t>& subset) const override {
    return patchnr(x, *flow_, g_, subset);
  }
  const PatchGeometry& geometry() const override { return g_; }
  double weight_scale(std::size_t n) const override {
    return static_cast<double>(g_.patch_dim()) / static_cast<double>(n);
  }
  std::string name() const override { return "patchnr"; }

 private:
  std::shared_ptr<const PatchFlow<double>> flow_;
  PatchGeometry g_;
};

class CondPatchNRRegularizer final : public Regularizer {
 public:
  CondPatchNRRegularizer(std::shared_ptr<const ConditionalPatchFlow<double>> flow, Image<double> cond_image,
                         PatchGeometry g)
      : flow_(std::move(flow)), cond_(std::move(cond_image)), g_(g) {
    g_.require_image(cond_);
  }
  PriorValue<double> evaluate(const Image<double>& x, const std::vector<std::size_t>& subset) const override {
    return cpatchnr(x, cond_, *flow_, g_, subset);
  }
  const PatchGeometry& geometry() const override { return g_; }
  double weight_scale(std::size_t n) const override {
    return static_cast<double>(g_.patch_dim()) / static_cast<double>(n);
  }
  std::string name() const override { return "cpatchnr"; }

 private:
  std::shared_ptr<const ConditionalPatchFlow<double>> flow_;
  Image<double> cond_;
  PatchGeometry g_;
};

class EpllRegularizer final : public Regularizer {
 public:
  EpllRegularizer(std::shared_ptr<const PatchGMM> gmm, PatchGeometry g) : gmm_(std::move(gmm)), g_(g) {}
  PriorValue<double> evaluate(const Image<double>& x, const std::vector<std::size_t>& subset) const override {
    return epll(x, *gmm_, g_, subset);
  }
  const PatchGeometry& geometry() const override { return g_; }
  double weight_scale(std::size_t) const override { return 1.0; }
  std::string name() const override { return "epll"; }

 private:
  std::shared_ptr<const PatchGMM> gmm_;
  PatchGeometry g_;
};

}  // namespace patchnr
