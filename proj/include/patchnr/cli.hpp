#pragma once
// Command-line front end: train priors, simulate observations, reconstruct,
// evaluate and run the validation checks. Every command that writes an
// artifact also writes a JSON run manifest next to it (<output>.json).

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "patchnr/analysis.hpp"
#include "patchnr/fidelity.hpp"
#include "patchnr/flow.hpp"
#include "patchnr/io.hpp"
#include "patchnr/metrics.hpp"
#include "patchnr/operators.hpp"
#include "patchnr/patchops.hpp"
#include "patchnr/priors.hpp"
#include "patchnr/solver.hpp"

namespace patchnr::cli {

/// Exit codes.
constexpr int kOk = 0;
constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

// ------------------------------------------------------------ helpers

/// Records inputs, outputs and metrics of one run; written as <primary>.json.
class Manifest {
 public:
  Manifest(std::string command, int argc, const char* const* argv) {
    j_["tool"] = "patchnr";
    j_["command"] = std::move(command);
    std::vector<std::string> args(argv, argv + argc);
    if (!args.empty()) args[0] = "patchnr";
    j_["argv"] = args;
    j_["inputs"] = nlohmann::json::array();
    j_["outputs"] = nlohmann::json::array();
    j_["metrics"] = nlohmann::json::object();
  }
  void seed(std::uint64_t s) { j_["seed"] = s; }
  void config(const std::string& canonical) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(canonical);
    j_["config_hash"] = os.str();
    j_["config"] = canonical;
  }
  void input(const std::string& path) {
    j_["inputs"].push_back({{"path", path}, {"crc32", file_crc32(path)}});
  }
  void output(const std::string& path) { j_["outputs"].push_back(path); }
  template <class V>
  void metric(const std::string& key, const V& v) {
    j_["metrics"][key] = v;
  }
  void write(const std::string& primary) const {
    std::ofstream out(primary + ".json", std::ios::trunc);
    if (!out) throw Error("cli", "cannot write manifest for '" + primary + "'");
    out << j_.dump(2) << '\n';
  }

 private:
  nlohmann::json j_;
};

inline std::size_t square_side(std::size_t dim, const char* what) {
  const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(dim))));
  if (s * s != dim) throw Error("cli", std::string(what) + " dimension " + std::to_string(dim) + " is not a square patch");
  return s;
}

inline std::size_t default_bins(std::size_t rows, std::size_t cols) {
  return static_cast<std::size_t>(std::llround(std::hypot(static_cast<double>(rows), static_cast<double>(cols)))) + 4;
}

inline RadonGeometry ct_geometry(const ExperimentConfig& cfg, std::size_t rows, std::size_t cols) {
  const std::size_t bins = cfg.op.bins ? cfg.op.bins : default_bins(rows, cols);
  auto g = RadonGeometry::parallel(rows, cols, cfg.op.width, bins, cfg.op.angles);
  return cfg.task == "ct_limited" ? g.limited(cfg.op.limited_fraction) : g;
}

constexpr std::size_t kDefaultKernelSize = 19;

inline Image<double> task_kernel(const ExperimentConfig& cfg) {
  return cfg.op.kernel.empty() ? motion_blur_kernel(kDefaultKernelSize, 0) : read_image(cfg.op.kernel);
}

/// Forward operator of the task for images of the given extents.
inline std::unique_ptr<LinearOperator> make_operator(const ExperimentConfig& cfg, std::size_t rows, std::size_t cols) {
  if (cfg.task == "sr") return std::make_unique<BlurDownsampleOp>(BlurDownsampleOp::standard({rows, cols}));
  if (cfg.task == "deblur") return std::make_unique<ConvolutionOp>(Shape2{rows, cols}, task_kernel(cfg));
  return std::make_unique<RadonOp>(ct_geometry(cfg, rows, cols));
}

/// Image extents from the observation when they are implied by the task.
inline Shape2 infer_extents(const ExperimentConfig& cfg, const Image<double>& y, std::size_t rows, std::size_t cols) {
  if (rows && cols) return {rows, cols};
  if (cfg.task == "sr") return {4 * y.rows(), 4 * y.cols()};
  if (cfg.task == "deblur") return {y.rows(), y.cols()};
  throw Error("cli", "CT reconstruction needs --rows and --cols");
}

inline NoiseModel noise_model(const ExperimentConfig& cfg) {
  return cfg.noise.kind == "poisson" ? NoiseModel::poisson_ct(cfg.noise.n0) : NoiseModel::gaussian(cfg.noise.sigma);
}

inline Fidelity fidelity_of(const ExperimentConfig& cfg) {
  return cfg.fidelity.kind == "poisson" ? Fidelity::poisson(cfg.fidelity.n0) : Fidelity::gaussian();
}

/// Noise and texture draws use decorrelated streams of the one run seed.
inline std::uint64_t noise_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ull; }

inline Mat<double> patches_of(const std::vector<Image<double>>& images, std::size_t side) {
  std::vector<Mat<double>> parts;
  Eigen::Index total = 0;
  for (const auto& img : images) {
    parts.push_back(extract_all_patches(img, PatchGeometry::for_image(img, side, side)));
    total += parts.back().rows();
  }
  Mat<double> out(total, static_cast<Eigen::Index>(side * side));
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p;
    r += p.rows();
  }
  return out;
}

inline std::vector<Image<double>> read_images(const std::vector<std::string>& paths, Manifest& m) {
  std::vector<Image<double>> out;
  for (const auto& p : paths) {
    out.push_back(read_image(p));
    m.input(p);
  }
  return out;
}

inline std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// ------------------------------------------------------------ options

struct FlowTrainOptions {
  std::vector<std::string> images, conditions;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t patch = 6, steps = 10000, hidden = 512, blocks = 5, batch = 32;
  double lr = 1e-4;
  std::string precision = "f32";
  bool progress = false;
};

struct GmmOptions {
  std::vector<std::string> images;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t patch = 6, components = 10, iterations = 100, max_patches = 0;
  double floor = 1e-6;
};

struct DegradeOptions {
  std::string task, in, out, truth_out, config, kernel;
  std::size_t make_texture = 0, make_phantom = 0, make_kernel = 0;
  std::uint64_t seed = 0;
  double noise_sigma = -1, n0 = -1;
};

struct ReconstructOptions {
  std::string task, observation, out, config, prior = "patchnr", flow, cflow, gmm, condition, trace, kernel, fidelity;
  std::uint64_t seed = 0;
  std::size_t rows = 0, cols = 0, iterations = 0, subset = 0;
  double lambda = -1, lr = -1, n0 = -1;
  std::string init;
  bool clamp01 = false, full_subset = false, progress = false;
};

struct FbpCliOptions {
  std::string task = "ct_full", sinogram, out, filter = "hann", config;
  std::size_t rows = 0, cols = 0, angles = 0;
  double frequency_scaling = 0.641;
};

struct EvaluateOptions {
  std::string truth, out, range = "unit";
  std::vector<std::string> images;
  std::size_t crop = 0;
};

struct ScoreOptions {
  std::string flow, clean, degraded, out;
  std::size_t bins = 30, stride = 1;
};

struct AnalysisOptions {
  std::string check = "all", out;
  std::uint64_t seed = 0;
  std::size_t samples = 1'000'000, box_samples = 10'000'000;
};

// ------------------------------------------------------------ commands

template <class T>
PatchFlow<double> train_flow_as(const Mat<double>& patches, const FlowArchitecture& arch, const TrainConfig& tc,
                                const TrainProgress& progress, double& last_loss) {
  auto res = train_flow<T>(patches.cast<T>(), arch, tc, progress);
  last_loss = res.loss_trace.back();
  return convert_flow<double>(res.flow);
}

inline int cmd_train_flow(const FlowTrainOptions& o, bool conditional, int argc, const char* const* argv) {
  Manifest m(conditional ? "train-cflow" : "train-flow", argc, argv);
  m.seed(o.seed);
  const auto images = read_images(o.images, m);
  FlowArchitecture arch;
  arch.dim = o.patch * o.patch;
  arch.hidden = o.hidden;
  arch.blocks = o.blocks;
  arch.seed = o.seed;
  if (o.precision != "f32" && o.precision != "f64") throw Error("cli", "precision must be f32 or f64");
  const TrainConfig tc{o.lr, o.batch, o.steps, o.seed, o.precision == "f32" ? Precision::f32 : Precision::f64};
  TrainProgress progress;
  if (o.progress)
    progress = [](std::size_t step, double loss) {
      if (step % 100 == 0) std::cerr << step << ',' << loss << '\n';
    };
  std::ostringstream canon;
  canon << "patch=" << o.patch << ";hidden=" << o.hidden << ";blocks=" << o.blocks << ";steps=" << o.steps
        << ";lr=" << o.lr << ";batch=" << o.batch << ";precision=" << o.precision;
  m.config(canon.str());
  const Mat<double> patches = patches_of(images, o.patch);
  double last = 0;
  if (!conditional) {
    const auto flow = o.precision == "f32" ? train_flow_as<float>(patches, arch, tc, progress, last)
                                           : train_flow_as<double>(patches, arch, tc, progress, last);
    save_checkpoint(flow, o.out);
  } else {
    if (o.conditions.size() != o.images.size()) throw Error("cli", "need one condition image per training image");
    const auto conds = read_images(o.conditions, m);
    for (std::size_t i = 0; i < conds.size(); ++i)
      if (conds[i].shape() != images[i].shape()) throw Error("cli", "condition image extents differ from the image");
    const Mat<double> cpatches = patches_of(conds, o.patch);
    arch.condition_dim = arch.dim;
    if (o.precision == "f32") {
      auto res = train_cflow<float>(patches.cast<float>(), cpatches.cast<float>(), arch, tc, progress);
      last = res.loss_trace.back();
      save_checkpoint(res.flow, o.out);
    } else {
      auto res = train_cflow<double>(patches, cpatches, arch, tc, progress);
      last = res.loss_trace.back();
      save_checkpoint(res.flow, o.out);
    }
  }
  m.output(o.out);
  m.metric("training_patches", static_cast<std::size_t>(patches.rows()));
  m.metric("final_loss", last);
  m.write(o.out);
  std::cout << "wrote " << o.out << " (" << patches.rows() << " patches, final loss " << fmt(last) << ")\n";
  return kOk;
}

inline int cmd_fit_gmm(const GmmOptions& o, int argc, const char* const* argv) {
  Manifest m("fit-gmm", argc, argv);
  m.seed(o.seed);
  const auto images = read_images(o.images, m);
  Mat<double> patches = patches_of(images, o.patch);
  if (o.max_patches && static_cast<std::size_t>(patches.rows()) > o.max_patches) {
    Rng rng(o.seed);
    const auto perm = random_permutation(static_cast<std::size_t>(patches.rows()), rng);
    std::vector<std::size_t> keep(perm.begin(), perm.begin() + static_cast<long>(o.max_patches));
    patches = detail::gather_rows(patches, keep);
  }
  EmConfig em;
  em.max_iterations = o.iterations;
  em.covariance_floor = o.floor;
  em.seed = o.seed;
  std::ostringstream canon;
  canon << "patch=" << o.patch << ";components=" << o.components << ";iterations=" << o.iterations
        << ";floor=" << o.floor << ";max_patches=" << o.max_patches;
  m.config(canon.str());
  const auto fit = gmm_fit(patches, o.components, em);
  save_checkpoint(fit.gmm, o.out);
  m.output(o.out);
  m.metric("mean_loglik", fit.loglik_trace.back());
  m.metric("em_iterations", fit.loglik_trace.size());
  m.write(o.out);
  std::cout << "wrote " << o.out << " (" << o.components << " components, mean log-likelihood "
            << fmt(fit.loglik_trace.back()) << ")\n";
  return kOk;
}

inline int cmd_degrade(const DegradeOptions& o, int argc, const char* const* argv) {
  Manifest m("degrade", argc, argv);
  m.seed(o.seed);
  if (o.make_kernel) {
    const auto k = motion_blur_kernel(o.make_kernel, o.seed);
    write_image(k, o.out);
    m.config("kernel=" + std::to_string(o.make_kernel));
    m.output(o.out);
    m.write(o.out);
    std::cout << "wrote " << o.out << '\n';
    return kOk;
  }
  if (o.task.empty()) throw Error("cli", "degrade needs --task");
  if (!o.config.empty()) m.input(o.config);
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig::preset(o.task) : load_experiment_config(o.config);
  if (cfg.task != o.task) throw Error("cli", "--task conflicts with the config file");
  if (!o.kernel.empty()) cfg.op.kernel = o.kernel;
  if (o.noise_sigma >= 0) cfg.noise = {"gaussian", o.noise_sigma, cfg.noise.n0};
  if (o.n0 > 0) cfg.noise = {"poisson", 0.0, o.n0};
  cfg.seed = o.seed;

  const int sources = (!o.in.empty()) + (o.make_texture > 0) + (o.make_phantom > 0);
  if (sources != 1) throw Error("cli", "give exactly one of --in, --make-texture, --make-phantom");
  Image<double> x;
  if (!o.in.empty()) {
    x = read_image(o.in);
    m.input(o.in);
  } else {
    if (o.truth_out.empty()) throw Error("cli", "generated images need --truth-out");
    x = o.make_texture ? material_texture(o.make_texture, o.make_texture, o.seed) : shepp_logan(o.make_phantom);
    write_image(x, o.truth_out);
    m.output(o.truth_out);
  }
  if (!cfg.op.kernel.empty() && cfg.task == "deblur") m.input(cfg.op.kernel);
  m.config(cfg.to_toml());
  const auto op = make_operator(cfg, x.rows(), x.cols());
  const auto y = simulate_observation(*op, x, noise_model(cfg), noise_seed(o.seed));
  write_image(y, o.out);
  m.output(o.out);
  m.metric("observation_rows", y.rows());
  m.metric("observation_cols", y.cols());
  m.write(o.out);
  std::cout << "wrote " << o.out << " (" << y.rows() << "x" << y.cols() << ")\n";
  return kOk;
}

/// Naive reconstruction used as the conditioning image of cPatchNR.
inline InitPolicy condition_policy(const std::string& task) {
  if (task == "sr") return InitPolicy::bicubic;
  if (task == "deblur") return InitPolicy::observation;
  return InitPolicy::fbp;
}

inline int cmd_reconstruct(const ReconstructOptions& o, int argc, const char* const* argv) {
  Manifest m("reconstruct", argc, argv);
  m.seed(o.seed);
  ExperimentConfig cfg;
  if (!o.config.empty()) {
    cfg = load_experiment_config(o.config);
    m.input(o.config);
    if (!o.task.empty() && o.task != cfg.task) throw Error("cli", "--task conflicts with the config file");
  } else {
    if (o.task.empty()) throw Error("cli", "reconstruct needs --task or --config");
    cfg = ExperimentConfig::preset(o.task);
  }
  cfg.seed = o.seed;
  cfg.solver.seed = o.seed;
  cfg.prior.kind = o.prior;
  if (!o.kernel.empty()) cfg.op.kernel = o.kernel;
  if (o.iterations) cfg.solver.iterations = o.iterations;
  if (o.subset) cfg.solver.subset_size = o.subset;
  if (o.lambda >= 0) cfg.solver.lambda = o.lambda;
  if (o.lr > 0) cfg.solver.learning_rate = o.lr;
  if (!o.init.empty()) cfg.solver.init = parse_init_policy(o.init);
  if (o.clamp01) cfg.solver.clamp01 = true;
  if (o.full_subset) cfg.solver.full_subset = true;
  if (!o.fidelity.empty()) cfg.fidelity.kind = o.fidelity;
  if (o.n0 > 0) cfg.fidelity.n0 = o.n0;
  cfg.solver.progress = o.progress;
  cfg.validate();

  const auto y = read_image(o.observation);
  m.input(o.observation);
  if (cfg.task == "deblur" && !cfg.op.kernel.empty()) m.input(cfg.op.kernel);
  const auto ext = infer_extents(cfg, y, o.rows, o.cols);
  const auto op = make_operator(cfg, ext[0], ext[1]);

  std::unique_ptr<Regularizer> prior;
  if (cfg.prior.kind == "patchnr") {
    if (o.flow.empty()) throw Error("cli", "patchnr prior needs --flow");
    auto flow = std::make_shared<const PatchFlow<double>>(load_flow<double>(o.flow));
    m.input(o.flow);
    const auto side = square_side(flow->dim(), "flow");
    prior = std::make_unique<PatchNRRegularizer>(flow, PatchGeometry(ext[0], ext[1], side, side));
  } else if (cfg.prior.kind == "cpatchnr") {
    if (o.cflow.empty()) throw Error("cli", "cpatchnr prior needs --cflow");
    auto flow = std::make_shared<const ConditionalPatchFlow<double>>(load_cflow<double>(o.cflow));
    m.input(o.cflow);
    const auto side = square_side(flow->dim(), "conditional flow");
    Image<double> cond;
    if (!o.condition.empty()) {
      cond = read_image(o.condition);
      m.input(o.condition);
    } else {
      cond = initial_image(condition_policy(cfg.task), y, *op);
    }
    prior = std::make_unique<CondPatchNRRegularizer>(flow, cond, PatchGeometry(ext[0], ext[1], side, side));
  } else if (cfg.prior.kind == "epll") {
    if (o.gmm.empty()) throw Error("cli", "epll prior needs --gmm");
    auto gmm = std::make_shared<const PatchGMM>(load_gmm(o.gmm));
    m.input(o.gmm);
    const auto side = square_side(gmm->dim(), "GMM");
    prior = std::make_unique<EpllRegularizer>(gmm, PatchGeometry(ext[0], ext[1], side, side));
  }
  m.config(cfg.to_toml());

  const auto res = reconstruct(y, *op, fidelity_of(cfg), prior.get(), cfg.solver);
  write_image(res.image, o.out);
  m.output(o.out);
  if (!o.trace.empty()) {
    std::ofstream t(o.trace, std::ios::trunc);
    if (!t) throw Error("cli", "cannot write '" + o.trace + "'");
    t << "iteration,fidelity,prior,weight,objective\n" << std::setprecision(17);
    for (const auto& r : res.trace)
      t << r.iteration << ',' << r.fidelity << ',' << r.prior << ',' << r.weight << ',' << r.objective << '\n';
    m.output(o.trace);
  }
  m.metric("iterations_run", res.trace.size());
  if (!res.trace.empty()) m.metric("final_objective", res.trace.back().objective);
  m.metric("aborted", res.aborted);
  if (res.aborted) m.metric("diagnostic", res.diagnostic);
  m.write(o.out);
  if (res.aborted) {
    std::cerr << "error: solver: " << res.diagnostic << " (last finite iterate written to " << o.out << ")\n";
    return kRuntimeError;
  }
  std::cout << "wrote " << o.out << " (" << res.trace.size() << " iterations)\n";
  return kOk;
}

inline int cmd_fbp(const FbpCliOptions& o, int argc, const char* const* argv) {
  Manifest m("fbp", argc, argv);
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig::preset(o.task) : load_experiment_config(o.config);
  if (cfg.task != "ct_full" && cfg.task != "ct_limited") throw Error("cli", "fbp needs a CT task");
  if (o.angles) cfg.op.angles = o.angles;
  const auto sino = read_image(o.sinogram);
  m.input(o.sinogram);
  if (!o.rows || !o.cols) throw Error("cli", "fbp needs --rows and --cols");
  const auto g = ct_geometry(cfg, o.rows, o.cols);
  if (sino.rows() != g.angles.size() || sino.cols() != g.bins)
    throw Error("cli", "sinogram is " + std::to_string(sino.rows()) + "x" + std::to_string(sino.cols()) +
                           ", geometry expects " + std::to_string(g.angles.size()) + "x" + std::to_string(g.bins));
  FbpOptions fo;
  fo.filter = o.filter;
  fo.frequency_scaling = o.frequency_scaling;
  m.config(cfg.to_toml() + "filter=" + o.filter + ";scaling=" + fmt(o.frequency_scaling, 17));
  write_image(fbp(g, sino, fo), o.out);
  m.output(o.out);
  m.write(o.out);
  std::cout << "wrote " << o.out << '\n';
  return kOk;
}

inline int cmd_evaluate(const EvaluateOptions& o, int argc, const char* const* argv) {
  Manifest m("evaluate", argc, argv);
  if (o.range != "unit" && o.range != "adaptive") throw Error("cli", "--range must be unit or adaptive");
  const auto truth = read_image(o.truth);
  m.input(o.truth);
  std::ostringstream csv;
  csv << "image,psnr,ssim,blur_effect\n" << std::setprecision(10);
  for (const auto& path : o.images) {
    const auto x = read_image(path);
    m.input(path);
    const auto rep = evaluate_metrics(x, truth, o.crop, o.range == "unit" ? RangeMode::unit : RangeMode::adaptive);
    csv << path << ',' << rep.psnr << ',' << rep.ssim << ',' << rep.blur_effect << '\n';
  }
  std::cout << csv.str();
  if (!o.out.empty()) {
    std::ofstream f(o.out, std::ios::trunc);
    if (!f) throw Error("cli", "cannot write '" + o.out + "'");
    f << csv.str();
    m.config("crop=" + std::to_string(o.crop) + ";range=" + o.range);
    m.output(o.out);
    m.write(o.out);
  }
  return kOk;
}

inline int cmd_score_patches(const ScoreOptions& o, int argc, const char* const* argv) {
  Manifest m("score-patches", argc, argv);
  const auto flow = load_flow<double>(o.flow);
  m.input(o.flow);
  const auto side = square_side(flow.dim(), "flow");
  if (o.stride == 0) throw Error("cli", "--stride must be positive");
  auto strided = [&](const Image<double>& img) {
    const PatchGeometry g(img.rows(), img.cols(), side, side);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i + side <= img.rows(); i += o.stride)
      for (std::size_t j = 0; j + side <= img.cols(); j += o.stride) idx.push_back(i * g.corners_per_row() + j);
    return extract_patches(img, g, idx);
  };
  const auto clean = read_image(o.clean);
  m.input(o.clean);
  const Mat<double> pc = strided(clean);
  std::optional<Mat<double>> pd;
  if (!o.degraded.empty()) {
    pd = strided(read_image(o.degraded));
    m.input(o.degraded);
  }
  // Shared bin range over both sets.
  const auto vc = flow.nll_batch(pc);
  double lo = *std::min_element(vc.begin(), vc.end()), hi = *std::max_element(vc.begin(), vc.end());
  if (pd) {
    const auto vd = flow.nll_batch(*pd);
    lo = std::min(lo, *std::min_element(vd.begin(), vd.end()));
    hi = std::max(hi, *std::max_element(vd.begin(), vd.end()));
  }
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  const auto hc = nll_histogram(flow, pc, o.bins, lo, hi);
  std::optional<NllHistogram> hd;
  if (pd) hd = nll_histogram(flow, *pd, o.bins, lo, hi);

  std::ostringstream csv;
  csv << std::setprecision(10) << "bin_lo,bin_hi,clean" << (hd ? ",degraded" : "") << '\n';
  for (std::size_t b = 0; b < o.bins; ++b) {
    csv << hc.edges[b] << ',' << hc.edges[b + 1] << ',' << hc.counts[b];
    if (hd) csv << ',' << hd->counts[b];
    csv << '\n';
  }
  std::cout << "clean: " << hc.values.size() << " patches, mean nll " << fmt(hc.mean) << '\n';
  m.metric("clean_mean", hc.mean);
  if (hd) {
    const auto sep = nll_separation(hc, *hd);
    std::cout << "degraded: " << hd->values.size() << " patches, mean nll " << fmt(hd->mean) << '\n'
              << "mean difference " << fmt(sep.mean_difference) << ", t = " << fmt(sep.t_statistic) << '\n';
    m.metric("degraded_mean", hd->mean);
    m.metric("mean_difference", sep.mean_difference);
    m.metric("t_statistic", sep.t_statistic);
  }
  if (!o.out.empty()) {
    std::ofstream f(o.out, std::ios::trunc);
    if (!f) throw Error("cli", "cannot write '" + o.out + "'");
    f << csv.str();
    m.config("bins=" + std::to_string(o.bins) + ";stride=" + std::to_string(o.stride));
    m.output(o.out);
    m.write(o.out);
  } else {
    std::cout << csv.str();
  }
  return kOk;
}

inline int cmd_analysis(const AnalysisOptions& o, int argc, const char* const* argv) {
  if (o.check != "all" && o.check != "marginal" && o.check != "bounds" && o.check != "tail")
    throw Error("cli", "--check must be marginal, bounds, tail or all");
  struct Row {
    std::string check, statistic;
    double value, threshold;
    bool pass;
  };
  std::vector<Row> rows;
  const bool all = o.check == "all";
  if (all || o.check == "marginal") {
    const auto inst = TinyInstance::gaussian(1, 3, 1, 2, {0, 1, 2});
    const auto rep = marginal_density_check(inst, o.samples, o.seed);
    rows.push_back({"marginal", "sup |empirical - formula|", rep.max_deviation, 0.01, rep.max_deviation < 0.01});
  }
  if (all || o.check == "bounds") {
    Rng rng(o.seed);
    std::size_t violations = 0;
    double slack = std::numeric_limits<double>::infinity();
    for (int f = 0; f < 20; ++f) {
      std::vector<double> a(4), b(4);
      for (int j = 0; j < 4; ++j) {
        a[j] = 0.5 + 1.5 * NormalSampler::unit(rng);
        b[j] = 2 * NormalSampler::unit(rng) - 1;
      }
      const auto cf = make_certified_affine(a, b);
      const auto rep = density_bounds_check(cf.flow, cf.certificate, 10000, o.seed + 1 + static_cast<std::uint64_t>(f));
      violations += rep.violations;
      slack = std::min(slack, rep.min_slack);
    }
    rows.push_back({"bounds", "violations (20 flows x 1e4 points)", static_cast<double>(violations), 0,
                    violations == 0});
    rows.push_back({"bounds", "min log slack", slack, -1e-10, slack >= -1e-10});
  }
  if (all || o.check == "tail") {
    const auto cf = make_certified_affine(std::vector<double>{1, 1}, std::vector<double>{0, 0});
    const PatchGeometry g(1, 4, 1, 2);
    TailOptions opt;
    opt.box_samples = o.box_samples;
    opt.seed = o.seed;
    const auto rep = tail_decay_check(cf.flow, cf.certificate, g, 1.0, {1, 2, 4, 8, 16}, opt);
    const double closed = tail_slope_bracket(cf.certificate, g, 1.0).second;
    const double rel = std::abs(rep.slope - closed) / std::abs(closed);
    rows.push_back({"tail", "decay slope (identity flow)", rep.slope, 0, rep.slope < 0 && rep.decreasing});
    rows.push_back({"tail", "relative slope error vs closed form", rel, 0.05, rel < 0.05});
    rows.push_back({"tail", "box integral change [-6,6]^4 -> [-8,8]^4", rep.relative_change, 0.01,
                    rep.relative_change < 0.01});
  }
  std::ostringstream table;
  table << std::left << std::setw(10) << "check" << std::setw(44) << "statistic" << std::setw(16) << "value"
        << std::setw(12) << "threshold" << "result\n";
  bool ok = true;
  for (const auto& r : rows) {
    table << std::setw(10) << r.check << std::setw(44) << r.statistic << std::setw(16) << fmt(r.value)
          << std::setw(12) << fmt(r.threshold) << (r.pass ? "PASS" : "FAIL") << '\n';
    ok = ok && r.pass;
  }
  std::cout << table.str();
  if (!o.out.empty()) {
    Manifest m("analysis", argc, argv);
    m.seed(o.seed);
    m.config("check=" + o.check + ";samples=" + std::to_string(o.samples) +
             ";box_samples=" + std::to_string(o.box_samples));
    std::ofstream f(o.out, std::ios::trunc);
    if (!f) throw Error("cli", "cannot write '" + o.out + "'");
    f << table.str();
    m.output(o.out);
    m.metric("all_pass", ok);
    m.write(o.out);
  }
  return ok ? kOk : kRuntimeError;
}

inline int cmd_presets(const std::string& toml_task) {
  if (!toml_task.empty()) {
    std::cout << ExperimentConfig::preset(toml_task).to_toml();
    return kOk;
  }
  std::cout << std::left << std::setw(12) << "preset" << std::setw(10) << "lambda" << std::setw(14) << "subset"
            << std::setw(12) << "iterations" << std::setw(8) << "lr" << "init\n";
  for (const auto& name : preset_names()) {
    const auto c = preset(name);
    std::cout << std::setw(12) << name << std::setw(10) << fmt(c.lambda) << std::setw(14) << c.subset_size
              << std::setw(12) << c.iterations << std::setw(8) << fmt(c.learning_rate) << to_string(c.init) << '\n';
  }
  return kOk;
}

// ------------------------------------------------------------ dispatch

inline int run(int argc, const char* const* argv) {
  CLI::App app{"patchnr: patch normalizing-flow regularization for imaging inverse problems"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "patchnr 1.0");

  FlowTrainOptions tf, tcf;
  auto add_train = [&](CLI::App* sub, FlowTrainOptions& o, bool conditional) {
    sub->add_option("--images", o.images, "training images (PFM/PNG)")->required();
    if (conditional) sub->add_option("--conditions", o.conditions, "paired conditioning images")->required();
    sub->add_option("--out", o.out, "checkpoint path")->required();
    sub->add_option("--seed", o.seed, "random seed")->required();
    sub->add_option("--patch", o.patch, "patch side length")->capture_default_str();
    sub->add_option("--steps", o.steps, "optimizer steps")->capture_default_str();
    sub->add_option("--hidden", o.hidden, "subnet hidden width")->capture_default_str();
    sub->add_option("--blocks", o.blocks, "coupling blocks")->capture_default_str();
    sub->add_option("--batch", o.batch, "batch size")->capture_default_str();
    sub->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str();
    sub->add_option("--precision", o.precision, "f32 or f64")->capture_default_str();
    sub->add_flag("--progress", o.progress, "print step,loss every 100 steps to stderr");
  };
  auto* train_flow_cmd = app.add_subcommand("train-flow", "train a patch flow on clean images");
  add_train(train_flow_cmd, tf, false);
  auto* train_cflow_cmd = app.add_subcommand("train-cflow", "train a conditional patch flow on image pairs");
  add_train(train_cflow_cmd, tcf, true);

  GmmOptions go;
  auto* gmm_cmd = app.add_subcommand("fit-gmm", "fit a patch GMM by EM");
  gmm_cmd->add_option("--images", go.images, "training images")->required();
  gmm_cmd->add_option("--out", go.out, "checkpoint path")->required();
  gmm_cmd->add_option("--seed", go.seed, "random seed")->required();
  gmm_cmd->add_option("--patch", go.patch, "patch side length")->capture_default_str();
  gmm_cmd->add_option("--components", go.components, "mixture components")->capture_default_str();
  gmm_cmd->add_option("--iterations", go.iterations, "EM iterations")->capture_default_str();
  gmm_cmd->add_option("--floor", go.floor, "covariance eigenvalue floor")->capture_default_str();
  gmm_cmd->add_option("--max-patches", go.max_patches, "random training subset size (0 = all)");

  DegradeOptions dg;
  auto* degrade_cmd = app.add_subcommand("degrade", "simulate an observation, or generate synthetic data");
  degrade_cmd->add_option("--task", dg.task, "sr | ct_full | ct_limited | deblur");
  degrade_cmd->add_option("--in", dg.in, "ground-truth image");
  degrade_cmd->add_option("--make-texture", dg.make_texture, "generate an N x N synthetic texture as ground truth");
  degrade_cmd->add_option("--make-phantom", dg.make_phantom, "generate an N x N Shepp-Logan phantom as ground truth");
  degrade_cmd->add_option("--make-kernel", dg.make_kernel, "write an N x N motion-blur kernel to --out and stop");
  degrade_cmd->add_option("--truth-out", dg.truth_out, "where to write a generated ground truth");
  degrade_cmd->add_option("--out", dg.out, "observation path")->required();
  degrade_cmd->add_option("--seed", dg.seed, "random seed")->required();
  degrade_cmd->add_option("--config", dg.config, "TOML experiment config");
  degrade_cmd->add_option("--kernel", dg.kernel, "deblurring kernel (PFM)");
  degrade_cmd->add_option("--noise-sigma", dg.noise_sigma, "Gaussian noise standard deviation");
  degrade_cmd->add_option("--n0", dg.n0, "Poisson photon count (CT)");

  ReconstructOptions ro;
  auto* rec_cmd = app.add_subcommand("reconstruct", "variational reconstruction with a patch prior");
  rec_cmd->add_option("--task", ro.task, "sr | ct_full | ct_limited | deblur");
  rec_cmd->add_option("--config", ro.config, "TOML experiment config");
  rec_cmd->add_option("--observation", ro.observation, "observation image")->required();
  rec_cmd->add_option("--out", ro.out, "reconstruction path")->required();
  rec_cmd->add_option("--seed", ro.seed, "random seed")->required();
  rec_cmd->add_option("--prior", ro.prior, "patchnr | cpatchnr | epll | none")->capture_default_str();
  rec_cmd->add_option("--flow", ro.flow, "patch flow checkpoint");
  rec_cmd->add_option("--cflow", ro.cflow, "conditional flow checkpoint");
  rec_cmd->add_option("--gmm", ro.gmm, "GMM checkpoint");
  rec_cmd->add_option("--condition", ro.condition, "conditioning image (default: naive reconstruction)");
  rec_cmd->add_option("--rows", ro.rows, "image rows (required for CT)");
  rec_cmd->add_option("--cols", ro.cols, "image columns (required for CT)");
  rec_cmd->add_option("--iterations", ro.iterations, "override iterations");
  rec_cmd->add_option("--lambda", ro.lambda, "override regularization weight");
  rec_cmd->add_option("--lr", ro.lr, "override learning rate");
  rec_cmd->add_option("--subset", ro.subset, "override patches per iteration");
  rec_cmd->add_option("--init", ro.init, "bicubic | fbp | y | zeros");
  rec_cmd->add_option("--kernel", ro.kernel, "deblurring kernel (PFM)");
  rec_cmd->add_option("--fidelity", ro.fidelity, "gaussian | poisson");
  rec_cmd->add_option("--n0", ro.n0, "Poisson photon count");
  rec_cmd->add_option("--trace", ro.trace, "per-iteration CSV");
  rec_cmd->add_flag("--clamp01", ro.clamp01, "clamp the result to [0, 1]");
  rec_cmd->add_flag("--full-subset", ro.full_subset, "use every patch each iteration");
  rec_cmd->add_flag("--progress", ro.progress, "per-iteration CSV on stderr");

  FbpCliOptions fo;
  auto* fbp_cmd = app.add_subcommand("fbp", "filtered backprojection of a sinogram");
  fbp_cmd->add_option("--sinogram", fo.sinogram, "sinogram image")->required();
  fbp_cmd->add_option("--out", fo.out, "output image")->required();
  fbp_cmd->add_option("--rows", fo.rows, "image rows")->required();
  fbp_cmd->add_option("--cols", fo.cols, "image columns")->required();
  fbp_cmd->add_option("--task", fo.task, "ct_full | ct_limited")->capture_default_str();
  fbp_cmd->add_option("--config", fo.config, "TOML experiment config");
  fbp_cmd->add_option("--angles", fo.angles, "angles of the full geometry");
  fbp_cmd->add_option("--filter", fo.filter, "hann | ramp")->capture_default_str();
  fbp_cmd->add_option("--frequency-scaling", fo.frequency_scaling, "Hann cut-off (fraction of Nyquist)")
      ->capture_default_str();

  EvaluateOptions eo;
  auto* eval_cmd = app.add_subcommand("evaluate", "PSNR, SSIM and blur effect as CSV");
  eval_cmd->add_option("--truth", eo.truth, "ground truth")->required();
  eval_cmd->add_option("--images", eo.images, "images to score")->required();
  eval_cmd->add_option("--crop", eo.crop, "boundary crop width")->capture_default_str();
  eval_cmd->add_option("--range", eo.range, "unit | adaptive")->capture_default_str();
  eval_cmd->add_option("--out", eo.out, "CSV path (also printed)");

  ScoreOptions so;
  auto* score_cmd = app.add_subcommand("score-patches", "patch NLL histograms, clean vs degraded");
  score_cmd->add_option("--flow", so.flow, "patch flow checkpoint")->required();
  score_cmd->add_option("--clean", so.clean, "clean image")->required();
  score_cmd->add_option("--degraded", so.degraded, "degraded image");
  score_cmd->add_option("--bins", so.bins, "histogram bins")->capture_default_str();
  score_cmd->add_option("--stride", so.stride, "patch corner stride")->capture_default_str();
  score_cmd->add_option("--out", so.out, "histogram CSV");

  AnalysisOptions ao;
  auto* analysis_cmd = app.add_subcommand("analysis", "numerical density and integrability checks");
  analysis_cmd->add_option("--check", ao.check, "marginal | bounds | tail | all")->capture_default_str();
  analysis_cmd->add_option("--seed", ao.seed, "random seed")->required();
  analysis_cmd->add_option("--samples", ao.samples, "density-check samples")->capture_default_str();
  analysis_cmd->add_option("--box-samples", ao.box_samples, "integrability samples")->capture_default_str();
  analysis_cmd->add_option("--out", ao.out, "report path");

  std::string toml_task;
  auto* presets_cmd = app.add_subcommand("presets", "list the per-task solver profiles");
  presets_cmd->add_option("--toml", toml_task, "print the full TOML config of one task");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (*train_flow_cmd) return cmd_train_flow(tf, false, argc, argv);
    if (*train_cflow_cmd) return cmd_train_flow(tcf, true, argc, argv);
    if (*gmm_cmd) return cmd_fit_gmm(go, argc, argv);
    if (*degrade_cmd) return cmd_degrade(dg, argc, argv);
    if (*rec_cmd) return cmd_reconstruct(ro, argc, argv);
    if (*fbp_cmd) return cmd_fbp(fo, argc, argv);
    if (*eval_cmd) return cmd_evaluate(eo, argc, argv);
    if (*score_cmd) return cmd_score_patches(so, argc, argv);
    if (*analysis_cmd) return cmd_analysis(ao, argc, argv);
    if (*presets_cmd) return cmd_presets(toml_task);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}

}  // namespace patchnr::cli
