#pragma once
// Patch normalizing flow T: R^s -> R^s built from Glow-style affine coupling
// blocks alternating with fixed permutations, plus its conditional variant.
//
// Layers are stored in the data -> latent ("encode", T^{-1}) direction:
//   p -> [coupling_1, perm_1, ..., coupling_B, perm_B] -> z
// Each coupling splits x = (x1, x2) into halves of s/2 and computes
//   a1 = x1 * exp(sA(x2, c)) + tA(x2, c)
//   a2 = x2 * exp(sB(a1, c)) + tB(a1, c)
// with log-scales soft-clamped to (-clamp, clamp).

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchnr/diffcore.hpp"
#include "patchnr/random.hpp"

namespace patchnr {

struct FlowArchitecture {
  std::size_t dim = 36;
  std::size_t blocks = 5;
  std::size_t hidden = 512;
  std::size_t condition_dim = 0;
  double clamp = 1.9;
  std::uint64_t seed = 0;
  bool identity_permutations = false;

  void validate() const {
    if (dim == 0 || dim % 2 != 0) throw Error("flow", "patch dimension must be positive and even");
    if (blocks == 0 || hidden == 0) throw Error("flow", "blocks and hidden width must be positive");
    if (!(clamp > 0)) throw Error("flow", "clamp must be positive");
  }
};

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::size_t steps = 10000;
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;

  /// Full-scale setting: lr 1e-4, batch 32, 700000 steps.
  static TrainConfig full_scale() { return {1e-4, 32, 700000, 0, Precision::f32}; }

  void validate() const {
    if (!(learning_rate > 0) || batch_size == 0 || steps == 0)
      throw Error("flow", "train config: learning rate, batch size and steps must be positive");
  }
};

namespace detail {

template <class T>
using ConstMatRef = Eigen::Ref<const Mat<T>>;

template <class T>
struct SubnetCache {
  Mat<T> in, h1, h2;
};

template <class T>
struct BlockCache {
  Mat<T> x;
  SubnetCache<T> a, b;
  Mat<T> raw_a, exp_a, raw_b, exp_b;
};

/// Shared implementation of conditional and unconditional coupling flows.
/// An unconditional flow has condition_dim == 0 and takes empty conditions.
template <class T>
class CouplingFlow {
 public:
  static constexpr std::size_t kChunk = 1024;

  explicit CouplingFlow(FlowArchitecture arch) : arch_(arch) {
    arch_.validate();
    Rng rng(arch_.seed);
    const std::size_t half = arch_.dim / 2;
    const std::size_t in = half + arch_.condition_dim;
    const std::size_t out = 2 * half;
    for (std::size_t k = 0; k < arch_.blocks; ++k) {
      for (const char* sub : {"a", "b"}) {
        const std::string base = "block" + std::to_string(k) + "." + sub;
        add_layer(base + ".fc0", in, arch_.hidden, rng, false);
        add_layer(base + ".fc1", arch_.hidden, arch_.hidden, rng, false);
        add_layer(base + ".fc2", arch_.hidden, out, rng, true);
      }
    }
    for (std::size_t k = 0; k < arch_.blocks; ++k) {
      std::vector<std::uint32_t> p(arch_.dim);
      if (arch_.identity_permutations)
        std::iota(p.begin(), p.end(), 0u);
      else
        p = random_permutation(arch_.dim, rng);
      perms_.push_back(p);
    }
  }

  const FlowArchitecture& architecture() const noexcept { return arch_; }
  std::size_t dim() const noexcept { return arch_.dim; }
  std::size_t condition_dim() const noexcept { return arch_.condition_dim; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }
  const std::vector<std::vector<std::uint32_t>>& permutations() const noexcept { return perms_; }

  /// p -> z with log|det dT^{-1}(p)| per row.
  void encode(const ConstMatRef<T>& p, const ConstMatRef<T>& c, Mat<T>& z, std::vector<T>& logdet) const {
    check_inputs(p, c);
    const Eigen::Index n = p.rows();
    z.resize(n, static_cast<Eigen::Index>(dim()));
    logdet.assign(static_cast<std::size_t>(n), T(0));
    for (Eigen::Index r0 = 0; r0 < n; r0 += kChunk) {
      const Eigen::Index m = std::min<Eigen::Index>(kChunk, n - r0);
      Mat<T> x = p.middleRows(r0, m);
      const Mat<T> cc = c.middleRows(r0, m);
      Eigen::Matrix<T, Eigen::Dynamic, 1> ld = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(m);
      for (std::size_t k = 0; k < arch_.blocks; ++k) x = encode_block(k, x, cc, ld, nullptr);
      z.middleRows(r0, m) = x;
      for (Eigen::Index i = 0; i < m; ++i) logdet[static_cast<std::size_t>(r0 + i)] = ld(i);
    }
  }

  /// z -> p with log|det dT(z)| per row.
  void decode(const ConstMatRef<T>& z, const ConstMatRef<T>& c, Mat<T>& p, std::vector<T>& logdet) const {
    check_inputs(z, c);
    const Eigen::Index n = z.rows();
    p.resize(n, static_cast<Eigen::Index>(dim()));
    logdet.assign(static_cast<std::size_t>(n), T(0));
    for (Eigen::Index r0 = 0; r0 < n; r0 += kChunk) {
      const Eigen::Index m = std::min<Eigen::Index>(kChunk, n - r0);
      Mat<T> y = z.middleRows(r0, m);
      const Mat<T> cc = c.middleRows(r0, m);
      Eigen::Matrix<T, Eigen::Dynamic, 1> ld = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(m);
      for (std::size_t k = arch_.blocks; k-- > 0;) y = decode_block(k, y, cc, ld);
      p.middleRows(r0, m) = y;
      for (Eigen::Index i = 0; i < m; ++i) logdet[static_cast<std::size_t>(r0 + i)] = ld(i);
    }
  }

  /// Constant-free negative log-likelihood per row:
  ///   nll_i = 0.5 |T^{-1}(p_i)|^2 - log|det dT^{-1}(p_i)|.
  /// Gradients of weight * sum_i nll_i are accumulated into param_grads
  /// and/or written to input_grads (n x s) when non-null.
  std::vector<T> backprop(const ConstMatRef<T>& p, const ConstMatRef<T>& c, T weight, ParamSet<T>* param_grads,
                          Mat<T>* input_grads) const {
    check_inputs(p, c);
    if (param_grads && !param_grads->aligned_with(params_))
      throw Error("flow", "gradient set does not match flow parameters");
    const Eigen::Index n = p.rows();
    std::vector<T> nll(static_cast<std::size_t>(n));
    if (input_grads) input_grads->resize(n, static_cast<Eigen::Index>(dim()));
    std::vector<BlockCache<T>> caches(arch_.blocks);
    for (Eigen::Index r0 = 0; r0 < n; r0 += kChunk) {
      const Eigen::Index m = std::min<Eigen::Index>(kChunk, n - r0);
      Mat<T> x = p.middleRows(r0, m);
      const Mat<T> cc = c.middleRows(r0, m);
      Eigen::Matrix<T, Eigen::Dynamic, 1> ld = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(m);
      for (std::size_t k = 0; k < arch_.blocks; ++k) x = encode_block(k, x, cc, ld, &caches[k]);
      for (Eigen::Index i = 0; i < m; ++i)
        nll[static_cast<std::size_t>(r0 + i)] = T(0.5) * x.row(i).squaredNorm() - ld(i);
      if (!param_grads && !input_grads) continue;
      Mat<T> dy = weight * x;
      for (std::size_t k = arch_.blocks; k-- > 0;) dy = backward_block(k, caches[k], dy, weight, param_grads);
      if (input_grads) input_grads->middleRows(r0, m) = dy;
    }
    return nll;
  }

 private:
  struct LayerIndex {
    std::size_t w, b;
  };

  void add_layer(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool zero) {
    ValueGrid<T> w({in, out});
    ValueGrid<T> b({out});
    if (!zero) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      for (auto& v : w.storage()) v = static_cast<T>((2.0 * NormalSampler::unit(rng) - 1.0) * bound);
      for (auto& v : b.storage()) v = static_cast<T>((2.0 * NormalSampler::unit(rng) - 1.0) * bound);
    }
    layers_.push_back({params_.count(), params_.count() + 1});
    params_.add(name + ".weight", std::move(w));
    params_.add(name + ".bias", std::move(b));
  }

  // Layer l (0..2) of subnet `sub` (0 = a, 1 = b) in block k.
  const LayerIndex& layer(std::size_t k, int sub, int l) const { return layers_[(k * 2 + sub) * 3 + l]; }

  Eigen::Map<const Mat<T>> weight(const LayerIndex& li) const {
    const auto& g = params_[li.w];
    return {g.storage().data(), static_cast<Eigen::Index>(g.shape()[0]), static_cast<Eigen::Index>(g.shape()[1])};
  }
  Eigen::Map<const RowVec<T>> bias(const LayerIndex& li) const {
    const auto& g = params_[li.b];
    return {g.storage().data(), static_cast<Eigen::Index>(g.size())};
  }

  void check_inputs(const ConstMatRef<T>& x, const ConstMatRef<T>& c) const {
    if (x.cols() != static_cast<Eigen::Index>(dim()))
      throw Error("flow", "dimension mismatch: expected " + std::to_string(dim()) + " got " +
                              std::to_string(x.cols()));
    if (c.cols() != static_cast<Eigen::Index>(condition_dim()) || (condition_dim() > 0 && c.rows() != x.rows()))
      throw Error("flow", "condition dimension mismatch");
  }

  Mat<T> subnet_input(const Mat<T>& half, const Mat<T>& c) const {
    if (condition_dim() == 0) return half;
    Mat<T> in(half.rows(), half.cols() + c.cols());
    in << half, c;
    return in;
  }

  Mat<T> subnet_forward(std::size_t k, int sub, const Mat<T>& in, SubnetCache<T>* cache) const {
    const auto& l0 = layer(k, sub, 0);
    const auto& l1 = layer(k, sub, 1);
    const auto& l2 = layer(k, sub, 2);
    Mat<T> h1 = ops::relu<T>(ops::affine<T>(in, weight(l0), bias(l0)));
    Mat<T> h2 = ops::relu<T>(ops::affine<T>(h1, weight(l1), bias(l1)));
    Mat<T> out = ops::affine<T>(h2, weight(l2), bias(l2));
    if (cache) {
      cache->in = in;
      cache->h1 = std::move(h1);
      cache->h2 = std::move(h2);
    }
    return out;
  }

  Mat<T> subnet_backward(std::size_t k, int sub, const SubnetCache<T>& cache, const Mat<T>& dout,
                         ParamSet<T>* grads) const {
    const auto& l0 = layer(k, sub, 0);
    const auto& l1 = layer(k, sub, 1);
    const auto& l2 = layer(k, sub, 2);
    Mat<T> dw2(cache.h2.cols(), dout.cols()), dw1(cache.h1.cols(), cache.h2.cols()), dw0(cache.in.cols(), cache.h1.cols());
    RowVec<T> db2(dout.cols()), db1(cache.h2.cols()), db0(cache.h1.cols());
    dw2.setZero(); dw1.setZero(); dw0.setZero(); db2.setZero(); db1.setZero(); db0.setZero();
    Mat<T> dh2 = ops::affine_backward<T>(cache.h2, weight(l2), dout, dw2, db2);
    Mat<T> dz2 = ops::relu_backward<T>(cache.h2, dh2);
    Mat<T> dh1 = ops::affine_backward<T>(cache.h1, weight(l1), dz2, dw1, db1);
    Mat<T> dz1 = ops::relu_backward<T>(cache.h1, dh1);
    Mat<T> din = ops::affine_backward<T>(cache.in, weight(l0), dz1, dw0, db0);
    if (grads) {
      accumulate((*grads)[l2.w], dw2); accumulate((*grads)[l2.b], db2);
      accumulate((*grads)[l1.w], dw1); accumulate((*grads)[l1.b], db1);
      accumulate((*grads)[l0.w], dw0); accumulate((*grads)[l0.b], db0);
    }
    return din;
  }

  template <class Derived>
  static void accumulate(ValueGrid<T>& g, const Eigen::MatrixBase<Derived>& d) {
    auto& s = g.storage();
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < d.rows(); ++i)
      for (Eigen::Index j = 0; j < d.cols(); ++j) s[static_cast<std::size_t>(k++)] += d(i, j);
  }

  Mat<T> encode_block(std::size_t k, const Mat<T>& x, const Mat<T>& c, Eigen::Matrix<T, Eigen::Dynamic, 1>& ld,
                      BlockCache<T>* cache) const {
    const Eigen::Index h = static_cast<Eigen::Index>(dim() / 2);
    const T clamp = static_cast<T>(arch_.clamp);
    const Mat<T> x1 = x.leftCols(h);
    const Mat<T> x2 = x.rightCols(h);

    Mat<T> out_a = subnet_forward(k, 0, subnet_input(x2, c), cache ? &cache->a : nullptr);
    Mat<T> raw_a = out_a.leftCols(h);
    Mat<T> s_a = ops::soft_clamp<T>(raw_a, clamp);
    Mat<T> e_a = ops::exp<T>(s_a);
    Mat<T> a1 = (x1.array() * e_a.array() + out_a.rightCols(h).array()).matrix();

    Mat<T> out_b = subnet_forward(k, 1, subnet_input(a1, c), cache ? &cache->b : nullptr);
    Mat<T> raw_b = out_b.leftCols(h);
    Mat<T> s_b = ops::soft_clamp<T>(raw_b, clamp);
    Mat<T> e_b = ops::exp<T>(s_b);
    Mat<T> a2 = (x2.array() * e_b.array() + out_b.rightCols(h).array()).matrix();

    ld += s_a.rowwise().sum() + s_b.rowwise().sum();
    if (cache) {
      cache->x = x;
      cache->raw_a = std::move(raw_a);
      cache->exp_a = std::move(e_a);
      cache->raw_b = std::move(raw_b);
      cache->exp_b = std::move(e_b);
    }
    const auto& perm = perms_[k];
    Mat<T> y(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const Eigen::Index src = perm[static_cast<std::size_t>(j)];
      y.col(j) = src < h ? a1.col(src) : a2.col(src - h);
    }
    return y;
  }

  Mat<T> decode_block(std::size_t k, const Mat<T>& y, const Mat<T>& c, Eigen::Matrix<T, Eigen::Dynamic, 1>& ld) const {
    const Eigen::Index h = static_cast<Eigen::Index>(dim() / 2);
    const T clamp = static_cast<T>(arch_.clamp);
    const auto& perm = perms_[k];
    Mat<T> a(y.rows(), y.cols());
    for (Eigen::Index j = 0; j < y.cols(); ++j) a.col(perm[static_cast<std::size_t>(j)]) = y.col(j);
    const Mat<T> a1 = a.leftCols(h);
    const Mat<T> a2 = a.rightCols(h);

    const Mat<T> out_b = subnet_forward(k, 1, subnet_input(a1, c), nullptr);
    const Mat<T> s_b = ops::soft_clamp<T>(Mat<T>(out_b.leftCols(h)), clamp);
    Mat<T> x2 = ((a2.array() - out_b.rightCols(h).array()) * (-s_b.array()).exp()).matrix();

    const Mat<T> out_a = subnet_forward(k, 0, subnet_input(x2, c), nullptr);
    const Mat<T> s_a = ops::soft_clamp<T>(Mat<T>(out_a.leftCols(h)), clamp);
    Mat<T> x1 = ((a1.array() - out_a.rightCols(h).array()) * (-s_a.array()).exp()).matrix();

    ld -= s_a.rowwise().sum() + s_b.rowwise().sum();
    Mat<T> x(y.rows(), y.cols());
    x << x1, x2;
    return x;
  }

  // dy: gradient w.r.t. the block output (after permutation). Each row's loss
  // carries -weight * logdet, so every log-scale receives -weight directly.
  Mat<T> backward_block(std::size_t k, const BlockCache<T>& cache, const Mat<T>& dy, T weight,
                        ParamSet<T>* grads) const {
    const Eigen::Index h = static_cast<Eigen::Index>(dim() / 2);
    const T clamp = static_cast<T>(arch_.clamp);
    const auto& perm = perms_[k];
    Mat<T> da(dy.rows(), dy.cols());
    for (Eigen::Index j = 0; j < dy.cols(); ++j) da.col(perm[static_cast<std::size_t>(j)]) = dy.col(j);
    Mat<T> da1 = da.leftCols(h);
    const Mat<T> da2 = da.rightCols(h);
    const Mat<T> x1 = cache.x.leftCols(h);
    const Mat<T> x2 = cache.x.rightCols(h);

    Mat<T> dx2 = (da2.array() * cache.exp_b.array()).matrix();
    Mat<T> ds_b = (da2.array() * x2.array() * cache.exp_b.array() - weight).matrix();
    Mat<T> dout_b(dy.rows(), 2 * h);
    dout_b << ops::soft_clamp_backward<T>(cache.raw_b, ds_b, clamp), da2;
    const Mat<T> din_b = subnet_backward(k, 1, cache.b, dout_b, grads);
    da1 += din_b.leftCols(h);

    Mat<T> dx1 = (da1.array() * cache.exp_a.array()).matrix();
    Mat<T> ds_a = (da1.array() * x1.array() * cache.exp_a.array() - weight).matrix();
    Mat<T> dout_a(dy.rows(), 2 * h);
    dout_a << ops::soft_clamp_backward<T>(cache.raw_a, ds_a, clamp), da1;
    const Mat<T> din_a = subnet_backward(k, 0, cache.a, dout_a, grads);
    dx2 += din_a.leftCols(h);

    Mat<T> dx(dy.rows(), dy.cols());
    dx << dx1, dx2;
    return dx;
  }

  FlowArchitecture arch_;
  ParamSet<T> params_;
  std::vector<LayerIndex> layers_;
  std::vector<std::vector<std::uint32_t>> perms_;
};

template <class T>
T gaussian_constant(std::size_t dim) {
  return static_cast<T>(0.5 * static_cast<double>(dim) * std::log(2.0 * M_PI));
}

}  // namespace detail

template <class T>
struct MapResult {
  std::vector<T> value;
  T logdet{};
};

/// Unconditional patch flow.
template <class T>
class PatchFlow {
 public:
  using Scalar = T;

  explicit PatchFlow(FlowArchitecture arch) : core_(checked(arch)) {}

  const FlowArchitecture& architecture() const noexcept { return core_.architecture(); }
  std::size_t dim() const noexcept { return core_.dim(); }
  ParamSet<T>& params() noexcept { return core_.params(); }
  const ParamSet<T>& params() const noexcept { return core_.params(); }
  const detail::CouplingFlow<T>& core() const noexcept { return core_; }

  /// p = T(z) and log|det dT(z)|.
  MapResult<T> forward_map(std::span<const T> z) const {
    Mat<T> out;
    std::vector<T> ld;
    core_.decode(row(z), empty(1), out, ld);
    return {std::vector<T>(out.data(), out.data() + out.size()), ld[0]};
  }

  /// z = T^{-1}(p) and log|det dT^{-1}(p)|.
  MapResult<T> inverse_map(std::span<const T> p) const {
    Mat<T> out;
    std::vector<T> ld;
    core_.encode(row(p), empty(1), out, ld);
    return {std::vector<T>(out.data(), out.data() + out.size()), ld[0]};
  }

  void forward_batch(const Mat<T>& z, Mat<T>& p, std::vector<T>& logdet) const {
    core_.decode(z, empty(z.rows()), p, logdet);
  }
  void inverse_batch(const Mat<T>& p, Mat<T>& z, std::vector<T>& logdet) const {
    core_.encode(p, empty(p.rows()), z, logdet);
  }

  /// Normalized negative log density, including (s/2) log 2pi.
  T nll(std::span<const T> p) const {
    const T v = nll_constant_free_batch(row(p))[0] + detail::gaussian_constant<T>(dim());
    if (!std::isfinite(v)) throw Error("flow", "non-finite negative log-likelihood");
    return v;
  }

  std::vector<T> nll_batch(const Mat<T>& p) const {
    auto v = nll_constant_free_batch(p);
    const T k = detail::gaussian_constant<T>(dim());
    for (auto& x : v) x += k;
    return v;
  }

  /// 0.5 |T^{-1}(p)|^2 - log|det dT^{-1}(p)| per row.
  std::vector<T> nll_constant_free_batch(const Mat<T>& p) const {
    return core_.backprop(p, empty(p.rows()), T(1), nullptr, nullptr);
  }

  /// Per-row constant-free nll; gradients of weight * sum(nll) into the
  /// optional outputs.
  std::vector<T> backprop(const Mat<T>& p, T weight, ParamSet<T>* param_grads, Mat<T>* input_grads) const {
    return core_.backprop(p, empty(p.rows()), weight, param_grads, input_grads);
  }

  /// n draws T(z_i), z_i ~ N(0, I).
  Mat<T> sample(std::size_t n, std::uint64_t seed) const {
    if (n == 0) throw Error("flow", "sample count must be positive");
    Rng rng(seed);
    NormalSampler normal;
    Mat<T> z(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim()));
    for (Eigen::Index i = 0; i < z.rows(); ++i)
      for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = static_cast<T>(normal(rng));
    Mat<T> p;
    std::vector<T> ld;
    forward_batch(z, p, ld);
    return p;
  }

 private:
  static FlowArchitecture checked(FlowArchitecture a) {
    if (a.condition_dim != 0) throw Error("flow", "unconditional flow requires condition_dim == 0");
    return a;
  }
  static Mat<T> empty(Eigen::Index rows) { return Mat<T>(rows, 0); }
  Mat<T> row(std::span<const T> v) const {
    if (v.size() != dim()) throw Error("flow", "dimension mismatch");
    return Eigen::Map<const Mat<T>>(v.data(), 1, static_cast<Eigen::Index>(v.size()));
  }

  detail::CouplingFlow<T> core_;
};

/// Conditional patch flow T(c; .), invertible in its second argument.
template <class T>
class ConditionalPatchFlow {
 public:
  using Scalar = T;

  explicit ConditionalPatchFlow(FlowArchitecture arch) : core_(checked(arch)) {}

  const FlowArchitecture& architecture() const noexcept { return core_.architecture(); }
  std::size_t dim() const noexcept { return core_.dim(); }
  std::size_t condition_dim() const noexcept { return core_.condition_dim(); }
  ParamSet<T>& params() noexcept { return core_.params(); }
  const ParamSet<T>& params() const noexcept { return core_.params(); }

  MapResult<T> forward_map(std::span<const T> c, std::span<const T> z) const {
    Mat<T> out;
    std::vector<T> ld;
    core_.decode(row(z, dim()), row(c, condition_dim()), out, ld);
    return {std::vector<T>(out.data(), out.data() + out.size()), ld[0]};
  }

  MapResult<T> inverse_map(std::span<const T> c, std::span<const T> p) const {
    Mat<T> out;
    std::vector<T> ld;
    core_.encode(row(p, dim()), row(c, condition_dim()), out, ld);
    return {std::vector<T>(out.data(), out.data() + out.size()), ld[0]};
  }

  void forward_batch(const Mat<T>& c, const Mat<T>& z, Mat<T>& p, std::vector<T>& logdet) const {
    core_.decode(z, c, p, logdet);
  }
  void inverse_batch(const Mat<T>& c, const Mat<T>& p, Mat<T>& z, std::vector<T>& logdet) const {
    core_.encode(p, c, z, logdet);
  }

  T cnll(std::span<const T> c, std::span<const T> p) const {
    const T v = core_.backprop(row(p, dim()), row(c, condition_dim()), T(1), nullptr, nullptr)[0] +
                detail::gaussian_constant<T>(dim());
    if (!std::isfinite(v)) throw Error("flow", "non-finite negative log-likelihood");
    return v;
  }

  std::vector<T> cnll_batch(const Mat<T>& c, const Mat<T>& p) const {
    auto v = core_.backprop(p, c, T(1), nullptr, nullptr);
    const T k = detail::gaussian_constant<T>(dim());
    for (auto& x : v) x += k;
    return v;
  }

  std::vector<T> backprop(const Mat<T>& c, const Mat<T>& p, T weight, ParamSet<T>* param_grads,
                          Mat<T>* input_grads) const {
    return core_.backprop(p, c, weight, param_grads, input_grads);
  }

  Mat<T> sample(const Mat<T>& c, std::uint64_t seed) const {
    Rng rng(seed);
    NormalSampler normal;
    Mat<T> z(c.rows(), static_cast<Eigen::Index>(dim()));
    for (Eigen::Index i = 0; i < z.rows(); ++i)
      for (Eigen::Index j = 0; j < z.cols(); ++j) z(i, j) = static_cast<T>(normal(rng));
    Mat<T> p;
    std::vector<T> ld;
    forward_batch(c, z, p, ld);
    return p;
  }

 private:
  static FlowArchitecture checked(FlowArchitecture a) {
    if (a.condition_dim == 0) throw Error("flow", "conditional flow requires condition_dim > 0");
    return a;
  }
  static Mat<T> row(std::span<const T> v, std::size_t n) {
    if (v.size() != n) throw Error("flow", "dimension mismatch");
    return Eigen::Map<const Mat<T>>(v.data(), 1, static_cast<Eigen::Index>(v.size()));
  }

  detail::CouplingFlow<T> core_;
};

// ---------------------------------------------------------------------------
// Training

template <class Flow>
struct TrainResult {
  Flow flow;
  std::vector<double> loss_trace;
};

using TrainProgress = std::function<void(std::size_t step, double loss)>;

namespace detail {

template <class T>
Mat<T> gather_rows(const Mat<T>& src, const std::vector<std::size_t>& idx) {
  Mat<T> out(static_cast<Eigen::Index>(idx.size()), src.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = src.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

// Minibatch Adam on the mean constant-free nll; `step_fn(batch_idx, grads)`
// returns the batch loss and fills grads.
template <class T, class Flow, class StepFn>
std::vector<double> run_training(Flow& flow, std::size_t n, const TrainConfig& cfg, StepFn step_fn,
                                 const TrainProgress& progress) {
  cfg.validate();
  if (n < cfg.batch_size) throw Error("flow", "fewer training patches than the batch size");
  Rng rng(cfg.seed);
  AdamState<T> adam = AdamState<T>::fresh(flow.params(), AdamOptions{cfg.learning_rate});
  ParamSet<T> grads = flow.params().zeros_like();
  std::vector<double> trace;
  trace.reserve(cfg.steps);
  std::vector<std::size_t> idx(cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (auto& i : idx) i = static_cast<std::size_t>(uniform_index(rng, n));
    grads.set_zero();
    const double loss = step_fn(idx, grads);
    if (!std::isfinite(loss))
      throw Error("flow", "non-finite training loss at step " + std::to_string(step));
    adam_step(flow.params(), grads, adam);
    trace.push_back(loss);
    if (progress) progress(step, loss);
  }
  return trace;
}

}  // namespace detail

/// Forward-KL training: minimizes the mean of 0.5|T^{-1}(p)|^2 - log|det dT^{-1}(p)|.
template <class T>
TrainResult<PatchFlow<T>> train_flow(const Mat<T>& patches, const FlowArchitecture& arch, const TrainConfig& cfg,
                                     const TrainProgress& progress = {}) {
  if (patches.cols() != static_cast<Eigen::Index>(arch.dim)) throw Error("flow", "patch dimension mismatch");
  PatchFlow<T> flow(arch);
  const T w = T(1) / static_cast<T>(cfg.batch_size);
  auto trace = detail::run_training<T>(
      flow, static_cast<std::size_t>(patches.rows()), cfg,
      [&](const std::vector<std::size_t>& idx, ParamSet<T>& grads) {
        const auto nll = flow.backprop(detail::gather_rows(patches, idx), w, &grads, nullptr);
        double acc = 0;
        for (T v : nll) acc += v;
        return acc / static_cast<double>(nll.size());
      },
      progress);
  return {std::move(flow), std::move(trace)};
}

template <class T>
TrainResult<ConditionalPatchFlow<T>> train_cflow(const Mat<T>& patches, const Mat<T>& conditions,
                                                 const FlowArchitecture& arch, const TrainConfig& cfg,
                                                 const TrainProgress& progress = {}) {
  if (patches.rows() != conditions.rows()) throw Error("flow", "patches and conditions are not aligned");
  if (patches.cols() != static_cast<Eigen::Index>(arch.dim) ||
      conditions.cols() != static_cast<Eigen::Index>(arch.condition_dim))
    throw Error("flow", "patch or condition dimension mismatch");
  ConditionalPatchFlow<T> flow(arch);
  const T w = T(1) / static_cast<T>(cfg.batch_size);
  auto trace = detail::run_training<T>(
      flow, static_cast<std::size_t>(patches.rows()), cfg,
      [&](const std::vector<std::size_t>& idx, ParamSet<T>& grads) {
        const auto nll =
            flow.backprop(detail::gather_rows(conditions, idx), detail::gather_rows(patches, idx), w, &grads, nullptr);
        double acc = 0;
        for (T v : nll) acc += v;
        return acc / static_cast<double>(nll.size());
      },
      progress);
  return {std::move(flow), std::move(trace)};
}

/// Flow parameters converted to another precision (same architecture).
template <class U, class T>
PatchFlow<U> convert_flow(const PatchFlow<T>& f) {
  PatchFlow<U> out(f.architecture());
  out.params() = f.params().template cast<U>();
  return out;
}

template <class U, class T>
ConditionalPatchFlow<U> convert_flow(const ConditionalPatchFlow<T>& f) {
  ConditionalPatchFlow<U> out(f.architecture());
  out.params() = f.params().template cast<U>();
  return out;
}

/// Raw subnet output whose soft-clamped value equals `log_scale`.
inline double soft_clamp_preimage(double log_scale, double clamp) {
  if (std::abs(log_scale) >= clamp) throw Error("flow", "log-scale outside the clamp range");
  return clamp * std::tan(M_PI * log_scale / (2.0 * clamp));
}

/// Coupling flow realizing T(z) = diag(a) z + b exactly: identity
/// permutations, constant subnets in block 0, zero elsewhere.
template <class T>
PatchFlow<T> make_affine_flow(std::span<const double> a, std::span<const double> b, double clamp = 1.9,
                              std::size_t blocks = 1, std::size_t hidden = 4) {
  if (a.size() != b.size()) throw Error("flow", "affine flow: scale/shift size mismatch");
  FlowArchitecture arch;
  arch.dim = a.size();
  arch.blocks = blocks;
  arch.hidden = hidden;
  arch.clamp = clamp;
  arch.identity_permutations = true;
  PatchFlow<T> flow(arch);
  flow.params().set_zero();
  const std::size_t h = arch.dim / 2;
  // Decoding computes (z - t) exp(-s), so s = -log a and t = -b / a.
  for (int sub = 0; sub < 2; ++sub) {
    auto& bias = flow.params().get(std::string("block0.") + (sub == 0 ? "a" : "b") + ".fc2.bias");
    for (std::size_t j = 0; j < h; ++j) {
      const std::size_t coord = sub == 0 ? j : h + j;
      if (!(a[coord] > 0)) throw Error("flow", "affine flow scales must be positive");
      bias[j] = static_cast<T>(soft_clamp_preimage(-std::log(a[coord]), clamp));
      bias[h + j] = static_cast<T>(-b[coord] / a[coord]);
    }
  }
  return flow;
}

}  // namespace patchnr
