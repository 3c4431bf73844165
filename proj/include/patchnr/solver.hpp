#pragma once
// Variational reconstruction: Adam on J(x) = D(f(x), y) + lambda_eff R(x),
// with a fresh random patch subset every iteration.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "patchnr/diffcore.hpp"
#include "patchnr/fidelity.hpp"
#include "patchnr/operators.hpp"
#include "patchnr/priors.hpp"

namespace patchnr {

enum class InitPolicy { bicubic, fbp, observation, zeros };

inline InitPolicy parse_init_policy(const std::string& s) {
  if (s == "bicubic") return InitPolicy::bicubic;
  if (s == "fbp") return InitPolicy::fbp;
  if (s == "y" || s == "observation") return InitPolicy::observation;
  if (s == "zeros") return InitPolicy::zeros;
  throw Error("solver", "unknown initialization policy: " + s);
}

inline std::string to_string(InitPolicy p) {
  switch (p) {
    case InitPolicy::bicubic: return "bicubic";
    case InitPolicy::fbp: return "fbp";
    case InitPolicy::observation: return "y";
    case InitPolicy::zeros: return "zeros";
  }
  return "?";
}

struct ReconstructConfig {
  std::size_t iterations = 500;
  double learning_rate = 0.03;
  double lambda = 0.15;            // user scale; effective weight lambda * s / n for patchNR
  std::size_t subset_size = 130000;  // n patches drawn with replacement per iteration
  bool full_subset = false;        // use every patch once, in index order
  std::uint64_t seed = 0;
  InitPolicy init = InitPolicy::bicubic;
  bool clamp01 = false;            // clamp to [0, 1] after the final iteration
  bool progress = false;           // CSV lines on stderr

  void validate() const {
    if (iterations == 0) throw Error("solver", "iterations must be positive");
    if (!(learning_rate > 0)) throw Error("solver", "learning rate must be positive");
    if (!(lambda >= 0)) throw Error("solver", "lambda must be non-negative");
    if (subset_size == 0 && !full_subset) throw Error("solver", "patch subset size must be positive");
  }
};

/// Named per-task profiles (subnet-scale hyperparameters of the original setup).
inline ReconstructConfig preset(const std::string& name) {
  ReconstructConfig c;
  if (name == "sr") {
    c.lambda = 0.15;
    c.subset_size = 130000;
    c.iterations = 500;
    c.learning_rate = 0.03;
    c.init = InitPolicy::bicubic;
  } else if (name == "ct_full" || name == "ct_limited") {
    c.lambda = 700;
    c.subset_size = 40000;
    c.iterations = name == "ct_full" ? 300 : 3000;
    c.learning_rate = 0.005;
    c.init = InitPolicy::fbp;
  } else if (name == "deblur") {
    c.lambda = 0.87;
    c.subset_size = 40000;
    c.iterations = 600;
    c.learning_rate = 0.005;
    c.init = InitPolicy::observation;
  } else {
    throw Error("solver", "unknown preset: " + name);
  }
  return c;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"sr", "ct_full", "ct_limited", "deblur"};
  return names;
}

struct IterationRecord {
  std::size_t iteration = 0;
  double fidelity = 0;
  double prior = 0;       // R(x) on the sampled subset
  double weight = 0;      // lambda_eff
  double objective = 0;   // fidelity + weight * prior
};

struct ReconstructResult {
  Image<double> image;
  std::vector<IterationRecord> trace;
  bool aborted = false;
  std::string diagnostic;
};

/// Starting point for the given policy; bicubic needs a blur-downsample
/// operator, FBP a Radon operator.
inline Image<double> initial_image(InitPolicy policy, const Image<double>& y, const LinearOperator& op) {
  const auto in = op.input_shape();
  switch (policy) {
    case InitPolicy::zeros: return Image<double>::image(in[0], in[1]);
    case InitPolicy::observation:
      if (op.output_shape() != in) throw Error("solver", "observation init needs equal image and data extents");
      return y;
    case InitPolicy::bicubic: {
      const auto* sr = dynamic_cast<const BlurDownsampleOp*>(&op);
      if (!sr) throw Error("solver", "bicubic init needs a blur-downsample operator");
      return bicubic_upsample(y, sr->stride(), in);
    }
    case InitPolicy::fbp: {
      const auto* radon = dynamic_cast<const RadonOp*>(&op);
      if (!radon) throw Error("solver", "FBP init needs a Radon operator");
      return fbp(radon->geometry(), y);
    }
  }
  throw Error("solver", "unknown initialization policy");
}

/// Adam iterations from `init` (or from the config's policy when absent).
/// A non-finite objective stops the run and returns the last finite iterate.
inline ReconstructResult reconstruct(const Image<double>& y, const LinearOperator& op, const Fidelity& fidelity,
                                     const Regularizer* prior, const ReconstructConfig& cfg,
                                     std::optional<Image<double>> init = std::nullopt) {
  cfg.validate();
  if (y.rank() != 2 || y.rows() != op.output_shape()[0] || y.cols() != op.output_shape()[1])
    throw Error("solver", "observation extents do not match the operator");
  const bool use_prior = prior != nullptr && cfg.lambda > 0;
  if (use_prior) prior->geometry().require_image(Image<double>::image(op.input_shape()[0], op.input_shape()[1]));

  ParamSet<double> x;
  x.add("x", init ? *init : initial_image(cfg.init, y, op));
  if (x[0].rows() != op.input_shape()[0] || x[0].cols() != op.input_shape()[1])
    throw Error("solver", "initial image extents do not match the operator");
  AdamState<double> adam = AdamState<double>::fresh(x, AdamOptions{cfg.learning_rate});
  Rng rng(cfg.seed);
  const std::vector<std::size_t> all = use_prior && cfg.full_subset ? all_patch_indices(prior->geometry())
                                                                    : std::vector<std::size_t>{};

  ReconstructResult result;
  result.image = x[0];
  result.trace.reserve(cfg.iterations);
  if (cfg.progress) std::cerr << "iter,fidelity,prior,objective\n";
  ParamSet<double> grad = x.zeros_like();
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    IterationRecord rec;
    rec.iteration = it;
    try {
      const auto fid = fidelity(op.apply(x[0]), y);
      grad[0] = op.adjoint(fid.gradient);
      rec.fidelity = fid.value;
      if (use_prior) {
        const auto subset = cfg.full_subset ? all : sample_patch_indices(prior->geometry(), cfg.subset_size, rng);
        const auto pv = prior->evaluate(x[0], subset);
        rec.weight = cfg.lambda * prior->weight_scale(subset.size());
        rec.prior = pv.value;
        auto& g = grad[0].storage();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += rec.weight * pv.gradient.values()[i];
      }
    } catch (const Error& e) {
      result.aborted = true;
      result.diagnostic = "iteration " + std::to_string(it) + ": " + e.what();
      break;
    }
    rec.objective = rec.fidelity + rec.weight * rec.prior;
    bool finite = std::isfinite(rec.objective);
    for (double v : grad[0].values()) finite = finite && std::isfinite(v);
    if (!finite) {
      result.aborted = true;
      result.diagnostic = "non-finite objective or gradient at iteration " + std::to_string(it);
      break;
    }
    result.trace.push_back(rec);
    result.image = x[0];
    if (cfg.progress)
      std::cerr << it << ',' << rec.fidelity << ',' << rec.prior << ',' << rec.objective << '\n';
    adam_step(x, grad, adam);
  }
  if (!result.aborted) result.image = x[0];
  if (cfg.clamp01)
    for (auto& v : result.image.storage()) v = std::clamp(v, 0.0, 1.0);
  return result;
}

}  // namespace patchnr
