#pragma once
// Data-fidelity terms D(f(x), y) with gradients with respect to f(x).

#include <cmath>
#include <string>

#include "patchnr/diffcore.hpp"

namespace patchnr {

struct FidelityValue {
  double value = 0;
  Image<double> gradient;  // with respect to f(x)
};

namespace detail {
inline void require_same_shape(const Image<double>& fx, const Image<double>& y) {
  if (fx.shape() != y.shape()) throw Error("fidelity", "f(x) and y have different extents");
}
}  // namespace detail

/// ||fx - y||^2, or ||fx - y||^2 / (2 sigma^2) when `scaled`.
inline FidelityValue gaussian_fidelity(const Image<double>& fx, const Image<double>& y, bool scaled = false,
                                       double sigma = 1.0) {
  detail::require_same_shape(fx, y);
  if (scaled && !(sigma > 0)) throw Error("fidelity", "sigma must be positive");
  const double w = scaled ? 1 / (2 * sigma * sigma) : 1.0;
  FidelityValue out{0.0, Image<double>(fx.shape())};
  for (std::size_t i = 0; i < fx.size(); ++i) {
    const double r = fx.values()[i] - y.values()[i];
    out.value += w * r * r;
    out.gradient.storage()[i] = 2 * w * r;
  }
  return out;
}

/// sum_i N0 e^{-fx_i} - N0 e^{-y_i} (log N0 - fx_i), the negative Poisson
/// log-likelihood of post-log data up to fx-independent terms.
inline FidelityValue poisson_fidelity(const Image<double>& fx, const Image<double>& y, double n0) {
  detail::require_same_shape(fx, y);
  if (!(n0 > 0)) throw Error("fidelity", "N0 must be positive");
  const double log_n0 = std::log(n0);
  FidelityValue out{0.0, Image<double>(fx.shape())};
  const std::size_t cols = fx.rank() == 2 ? fx.cols() : fx.size();
  for (std::size_t i = 0; i < fx.size(); ++i) {
    const double t = fx.values()[i], yi = y.values()[i];
    const double et = std::exp(-t), ey = std::exp(-yi);
    if (!std::isfinite(t) || !std::isfinite(yi) || !std::isfinite(et * n0))
      throw Error("fidelity", "Poisson fidelity overflow at (" + std::to_string(i / cols) + ", " +
                                  std::to_string(i % cols) + ")");
    out.value += n0 * et - n0 * ey * (log_n0 - t);
    out.gradient.storage()[i] = n0 * (ey - et);
  }
  return out;
}

struct Fidelity {
  enum class Kind { gaussian, poisson_ct } kind = Kind::gaussian;
  double n0 = 4096;
  bool scaled = false;
  double sigma = 1.0;

  static Fidelity gaussian() { return {}; }
  static Fidelity poisson(double n0) { return {Kind::poisson_ct, n0, false, 1.0}; }

  FidelityValue operator()(const Image<double>& fx, const Image<double>& y) const {
    return kind == Kind::gaussian ? gaussian_fidelity(fx, y, scaled, sigma) : poisson_fidelity(fx, y, n0);
  }
  std::string name() const { return kind == Kind::gaussian ? "gaussian" : "poisson_ct"; }
};

}  // namespace patchnr
