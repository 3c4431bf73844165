#pragma once
// Dense value grids, parameter sets, differentiable primitives with
// hand-derived vector-Jacobian products, and the Adam optimizer.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "patchnr/error.hpp"

namespace patchnr {

enum class Precision { f32, f64 };

inline Precision parse_precision(std::string_view s) {
  if (s == "f32" || s == "float32") return Precision::f32;
  if (s == "f64" || s == "float64") return Precision::f64;
  throw Error("diffcore", "unknown precision '" + std::string(s) + "'");
}

/// Row-major array of reals with an explicit shape.
template <class T>
class ValueGrid {
 public:
  using value_type = T;

  ValueGrid() = default;

  explicit ValueGrid(std::vector<std::size_t> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(extent_product(shape_), fill) {}

  ValueGrid(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (extent_product(shape_) != data_.size())
      throw Error("diffcore", "shape does not match data length");
  }

  static ValueGrid image(std::size_t rows, std::size_t cols, T fill = T(0)) {
    return ValueGrid({rows, cols}, fill);
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const { return rank() >= 1 ? shape_[0] : 0; }
  std::size_t cols() const { return rank() >= 2 ? shape_[1] : 1; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  bool same_shape(const ValueGrid& o) const noexcept { return shape_ == o.shape_; }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  /// Rejects NaN/Inf at a module boundary.
  void require_finite(std::string_view module) const {
    if (!all_finite()) throw Error(std::string(module), "non-finite value in grid");
  }

  template <class U>
  ValueGrid<U> cast() const {
    return ValueGrid<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const ValueGrid& a, const ValueGrid& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t extent_product(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

template <class T>
using Image = ValueGrid<T>;

template <class T>
T dot(const ValueGrid<T>& a, const ValueGrid<T>& b) {
  if (a.size() != b.size()) throw Error("diffcore", "dot: size mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// Named parameter blocks in insertion order.
template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    ValueGrid<T> value;
  };

  ValueGrid<T>& add(std::string name, ValueGrid<T> value) {
    for (const auto& e : entries_)
      if (e.name == name) throw Error("diffcore", "duplicate parameter name '" + name + "'");
    entries_.push_back({std::move(name), std::move(value)});
    return entries_.back().value;
  }

  std::size_t count() const noexcept { return entries_.size(); }
  Entry& entry(std::size_t i) { return entries_[i]; }
  const Entry& entry(std::size_t i) const { return entries_[i]; }
  ValueGrid<T>& operator[](std::size_t i) { return entries_[i].value; }
  const ValueGrid<T>& operator[](std::size_t i) const { return entries_[i].value; }

  const ValueGrid<T>& get(std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e.value;
    throw Error("diffcore", "no parameter named '" + std::string(name) + "'");
  }
  ValueGrid<T>& get(std::string_view name) {
    return const_cast<ValueGrid<T>&>(std::as_const(*this).get(name));
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& e : entries_) out.entries_.push_back({e.name, ValueGrid<T>(e.value.shape())});
    return out;
  }

  bool aligned_with(const ParamSet& o) const {
    if (o.count() != count()) return false;
    for (std::size_t i = 0; i < count(); ++i)
      if (entries_[i].name != o.entries_[i].name || !entries_[i].value.same_shape(o.entries_[i].value))
        return false;
    return true;
  }

  std::vector<T> flatten() const {
    std::vector<T> out;
    out.reserve(total_size());
    for (const auto& e : entries_) out.insert(out.end(), e.value.storage().begin(), e.value.storage().end());
    return out;
  }

  void assign_flat(std::span<const T> flat) {
    if (flat.size() != total_size()) throw Error("diffcore", "assign_flat: size mismatch");
    std::size_t k = 0;
    for (auto& e : entries_)
      for (auto& v : e.value.storage()) v = flat[k++];
  }

  void set_zero() {
    for (auto& e : entries_) std::fill(e.value.storage().begin(), e.value.storage().end(), T(0));
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>());
    return out;
  }

 private:
  std::vector<Entry> entries_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  ParamSet<T> m;
  ParamSet<T> v;
  long long t = 0;
  AdamOptions options;

  static AdamState fresh(const ParamSet<T>& params, AdamOptions opts = {}) {
    return AdamState{params.zeros_like(), params.zeros_like(), 0, opts};
  }
};

/// One bias-corrected Adam update, in place.
template <class T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamState<T>& state) {
  if (!params.aligned_with(grads) || !params.aligned_with(state.m) || !params.aligned_with(state.v))
    throw Error("diffcore", "adam_step: parameter/gradient/state shape mismatch");
  const AdamOptions& o = state.options;
  if (!(o.lr > 0)) throw Error("diffcore", "adam_step: learning rate must be positive");
  ++state.t;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.count(); ++k) {
    auto& w = params[k].storage();
    const auto& g = grads[k].storage();
    auto& m = state.m[k].storage();
    auto& v = state.v[k].storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      const double vi = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      w[i] = static_cast<T>(w[i] - o.lr * mhat / (std::sqrt(vhat) + o.eps));
    }
  }
}

/// Scalar value together with its gradient.
template <class T>
struct Evaluation {
  T value{};
  ValueGrid<T> gradient;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::size_t worst_index = 0;
};

/// Compares the analytic gradient with central differences:
/// max_i |g_i - fd_i| / max(1, |g_i|).
inline GradCheckReport grad_check(const std::function<Evaluation<double>(const ValueGrid<double>&)>& fn,
                                  const ValueGrid<double>& point, double step) {
  if (!(step > 0)) throw Error("diffcore", "grad_check: step must be positive");
  const Evaluation<double> base = fn(point);
  if (!std::isfinite(base.value)) throw Error("diffcore", "non-finite evaluation");
  if (base.gradient.size() != point.size()) throw Error("diffcore", "grad_check: gradient size mismatch");
  GradCheckReport report;
  ValueGrid<double> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x0 = point[i];
    probe[i] = x0 + step;
    const double fp = fn(probe).value;
    probe[i] = x0 - step;
    const double fm = fn(probe).value;
    probe[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw Error("diffcore", "non-finite evaluation");
    const double fd = (fp - fm) / (2 * step);
    const double g = base.gradient[i];
    const double err = std::abs(g - fd) / std::max(1.0, std::abs(g));
    if (err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  return report;
}

// Batched row-major matrices used by the primitives below.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
Eigen::Map<Mat<T>> as_matrix(ValueGrid<T>& g, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<Mat<T>>(g.storage().data(), rows, cols);
}
template <class T>
Eigen::Map<const Mat<T>> as_matrix(const ValueGrid<T>& g, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Mat<T>>(g.storage().data(), rows, cols);
}

namespace ops {

// Y = X W + 1 b^T with X (n x in), W (in x out), b (out).
template <class T>
Mat<T> affine(const Mat<T>& x, const Eigen::Ref<const Mat<T>>& w, const Eigen::Ref<const RowVec<T>>& b) {
  Mat<T> y = x * w;
  y.rowwise() += b;
  return y;
}

/// Accumulates dW += X^T dY, db += colsum(dY); returns dX = dY W^T.
template <class T>
Mat<T> affine_backward(const Mat<T>& x, const Eigen::Ref<const Mat<T>>& w, const Mat<T>& dy,
                       Eigen::Ref<Mat<T>> dw, Eigen::Ref<RowVec<T>> db) {
  dw.noalias() += x.transpose() * dy;
  db += dy.colwise().sum();
  return dy * w.transpose();
}

template <class T>
Mat<T> relu(const Mat<T>& x) {
  return x.cwiseMax(T(0));
}

// Subgradient at 0 is 0.
template <class T>
Mat<T> relu_backward(const Mat<T>& x, const Mat<T>& dy) {
  return (x.array() > T(0)).select(dy, T(0));
}

template <class T>
Mat<T> tanh(const Mat<T>& x) {
  return x.array().tanh().matrix();
}

template <class T>
Mat<T> tanh_backward(const Mat<T>& x, const Mat<T>& dy) {
  const auto th = x.array().tanh();
  return (dy.array() * (T(1) - th * th)).matrix();
}

template <class T>
Mat<T> exp(const Mat<T>& x) {
  return x.array().exp().matrix();
}

template <class T>
Mat<T> exp_backward(const Mat<T>& x, const Mat<T>& dy) {
  return (dy.array() * x.array().exp()).matrix();
}

/// Bounded log-scale: clamp * (2/pi) * atan(x / clamp), range (-clamp, clamp).
template <class T>
Mat<T> soft_clamp(const Mat<T>& x, T clamp) {
  const T k = clamp * T(2) / T(M_PI);
  return (k * (x.array() / clamp).atan()).matrix();
}

template <class T>
Mat<T> soft_clamp_backward(const Mat<T>& x, const Mat<T>& dy, T clamp) {
  const auto r = x.array() / clamp;
  return (dy.array() * (T(2) / T(M_PI)) / (T(1) + r * r)).matrix();
}

/// Fixed row-major left-to-right summation.
template <class T>
T sum(std::span<const T> v) {
  T acc = 0;
  for (T x : v) acc += x;
  return acc;
}

/// Zero-padded strided cross-correlation:
/// y(i, j) = sum_{a,b} k(a, b) x(stride*i + a - pad_r, stride*j + b - pad_c).
template <class T>
ValueGrid<T> correlate2d(const ValueGrid<T>& x, const ValueGrid<T>& k, std::size_t stride, long pad_r, long pad_c,
                         std::size_t out_rows, std::size_t out_cols) {
  if (x.rank() != 2 || k.rank() != 2) throw Error("diffcore", "correlate2d expects 2-D grids");
  if (stride == 0) throw Error("diffcore", "correlate2d: stride must be positive");
  const long xr = static_cast<long>(x.rows()), xc = static_cast<long>(x.cols());
  const long kr = static_cast<long>(k.rows()), kc = static_cast<long>(k.cols());
  ValueGrid<T> y = ValueGrid<T>::image(out_rows, out_cols);
  for (std::size_t i = 0; i < out_rows; ++i) {
    for (std::size_t j = 0; j < out_cols; ++j) {
      const long r0 = static_cast<long>(stride * i) - pad_r;
      const long c0 = static_cast<long>(stride * j) - pad_c;
      T acc = 0;
      for (long a = std::max(0L, -r0); a < std::min(kr, xr - r0); ++a)
        for (long b = std::max(0L, -c0); b < std::min(kc, xc - c0); ++b) acc += k(a, b) * x(r0 + a, c0 + b);
      y(i, j) = acc;
    }
  }
  return y;
}

/// Adjoint of correlate2d with respect to x.
template <class T>
ValueGrid<T> correlate2d_adjoint(const ValueGrid<T>& y, const ValueGrid<T>& k, std::size_t stride, long pad_r,
                                 long pad_c, std::size_t in_rows, std::size_t in_cols) {
  if (y.rank() != 2 || k.rank() != 2) throw Error("diffcore", "correlate2d_adjoint expects 2-D grids");
  const long xr = static_cast<long>(in_rows), xc = static_cast<long>(in_cols);
  const long kr = static_cast<long>(k.rows()), kc = static_cast<long>(k.cols());
  ValueGrid<T> x = ValueGrid<T>::image(in_rows, in_cols);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    for (std::size_t j = 0; j < y.cols(); ++j) {
      const long r0 = static_cast<long>(stride * i) - pad_r;
      const long c0 = static_cast<long>(stride * j) - pad_c;
      const T g = y(i, j);
      for (long a = std::max(0L, -r0); a < std::min(kr, xr - r0); ++a)
        for (long b = std::max(0L, -c0); b < std::min(kc, xc - c0); ++b) x(r0 + a, c0 + b) += k(a, b) * g;
    }
  }
  return x;
}

}  // namespace ops
}  // namespace patchnr
