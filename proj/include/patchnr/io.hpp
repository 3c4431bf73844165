#pragma once
// Image files (PFM, PNG), model checkpoints and TOML experiment configs.

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <toml.hpp>

#include "patchnr/diffcore.hpp"
#include "patchnr/flow.hpp"
#include "patchnr/priors.hpp"
#include "patchnr/solver.hpp"

namespace patchnr {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io", "cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("io", "write failed for '" + path + "'");
}

// Little-endian serialization.
class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    std::uint8_t raw[sizeof(U)];
    std::memcpy(raw, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    bytes_.insert(bytes_.end(), raw, raw + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
  template <class U>
  U get() {
    if (pos_ + sizeof(U) > size_) throw Error("io", "unexpected end of data");
    std::uint8_t raw[sizeof(U)];
    std::memcpy(raw, data_ + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, raw, sizeof(U));
    return v;
  }
  std::size_t remaining() const { return size_ - pos_; }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline std::string lower_extension(const std::string& path) {
  auto ext = std::filesystem::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

}  // namespace detail

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::uint32_t file_crc32(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  return crc32_of(bytes.data(), bytes.size());
}

/// 64-bit FNV-1a, used for config fingerprints in run manifests.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// ---------------------------------------------------------------- images

/// Grayscale PFM ("Pf"), little-endian, rows stored bottom to top.
inline void write_pfm(const Image<double>& img, const std::string& path) {
  if (img.rank() != 2) throw Error("io", "PFM needs a 2-D image");
  std::ostringstream header;
  header << "Pf\n" << img.cols() << ' ' << img.rows() << "\n-1.0\n";
  detail::ByteWriter w;
  const auto h = header.str();
  w.put_bytes(h.data(), h.size());
  for (std::size_t r = img.rows(); r-- > 0;)
    for (std::size_t c = 0; c < img.cols(); ++c) w.put(static_cast<float>(img(r, c)));
  detail::write_file_bytes(path, w.bytes());
}

inline Image<double> read_pfm(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
    return t;
  };
  const auto magic = token();
  if (magic == "PF") throw Error("io", "colour PFM is not supported: '" + path + "'");
  if (magic != "Pf") throw Error("io", "corrupt PFM header in '" + path + "'");
  std::size_t cols = 0, rows = 0;
  double scale = 0;
  try {
    cols = std::stoul(token());
    rows = std::stoul(token());
    scale = std::stod(token());
  } catch (const std::exception&) {
    throw Error("io", "corrupt PFM header in '" + path + "'");
  }
  if (pos >= bytes.size() || !std::isspace(bytes[pos]) || rows == 0 || cols == 0 || scale == 0)
    throw Error("io", "corrupt PFM header in '" + path + "'");
  ++pos;  // single whitespace before the raster
  if (bytes.size() - pos != rows * cols * 4) throw Error("io", "PFM raster size mismatch in '" + path + "'");
  const bool little = scale < 0;
  auto img = Image<double>::image(rows, cols);
  for (std::size_t r = rows; r-- > 0;)
    for (std::size_t c = 0; c < cols; ++c) {
      std::uint8_t raw[4];
      std::memcpy(raw, bytes.data() + pos, 4);
      pos += 4;
      if (little != (std::endian::native == std::endian::little)) std::reverse(raw, raw + 4);
      float f;
      std::memcpy(&f, raw, 4);
      img(r, c) = static_cast<double>(f);
    }
  return img;
}

/// Grayscale PNG, values clamped to [0, 1] and quantized to 8 or 16 bits.
inline void write_png(const Image<double>& img, const std::string& path, int bit_depth = 8) {
  if (img.rank() != 2) throw Error("io", "PNG needs a 2-D image");
  if (bit_depth != 8 && bit_depth != 16) throw Error("io", "PNG bit depth must be 8 or 16");
  const double maxv = bit_depth == 8 ? 255.0 : 65535.0;
  const std::size_t bpp = bit_depth / 8;
  std::vector<std::uint8_t> raster(img.rows() * img.cols() * bpp);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const auto q = static_cast<std::uint32_t>(std::lround(std::clamp(img.values()[i], 0.0, 1.0) * maxv));
    if (bpp == 1) {
      raster[i] = static_cast<std::uint8_t>(q);
    } else {
      raster[2 * i] = static_cast<std::uint8_t>(q >> 8);  // PNG samples are big-endian
      raster[2 * i + 1] = static_cast<std::uint8_t>(q & 0xff);
    }
  }
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("io", "cannot write '" + path + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("io", "libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("io", "PNG encoding failed for '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.cols()), static_cast<png_uint_32>(img.rows()), bit_depth,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < img.rows(); ++r) png_write_row(png, raster.data() + r * img.cols() * bpp);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Grayscale PNG (1-16 bit, optional alpha dropped) mapped to [0, 1].
inline Image<double> read_png(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw Error("io", "cannot open '" + path + "'");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw Error("io", "corrupt PNG header in '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("io", "libpng initialization failed");
  }
  std::vector<std::uint8_t> raster;
  std::vector<png_bytep> ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("io", "corrupt PNG data in '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("io", "unsupported PNG colour type in '" + path + "' (grayscale required)");
  }
  int depth = png_get_bit_depth(png, info);
  if (depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  depth = png_get_bit_depth(png, info);
  const std::size_t rows = png_get_image_height(png, info), cols = png_get_image_width(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  raster.resize(rows * rowbytes);
  ptrs.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) ptrs[r] = raster.data() + r * rowbytes;
  png_read_image(png, ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  auto img = Image<double>::image(rows, cols);
  const double maxv = depth == 16 ? 65535.0 : 255.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::uint8_t* p = ptrs[r] + (depth == 16 ? 2 * c : c);
      const unsigned v = depth == 16 ? (static_cast<unsigned>(p[0]) << 8 | p[1]) : p[0];
      img(r, c) = static_cast<double>(v) / maxv;
    }
  return img;
}

/// Dispatch on the extension (.pfm or .png).
inline Image<double> read_image(const std::string& path) {
  const auto ext = detail::lower_extension(path);
  if (!std::filesystem::exists(path)) throw Error("io", "missing file '" + path + "'");
  if (ext == ".pfm") return read_pfm(path);
  if (ext == ".png") return read_png(path);
  throw Error("io", "unsupported image format '" + ext + "'");
}

inline void write_image(const Image<double>& img, const std::string& path, int png_bit_depth = 8) {
  const auto ext = detail::lower_extension(path);
  if (ext == ".pfm") return write_pfm(img, path);
  if (ext == ".png") return write_png(img, path, png_bit_depth);
  throw Error("io", "unsupported image format '" + ext + "'");
}

// ----------------------------------------------------------- checkpoints

enum class ModelKind : std::uint8_t { flow = 0, cflow = 1, gmm = 2 };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::flow: return "flow";
    case ModelKind::cflow: return "cflow";
    case ModelKind::gmm: return "gmm";
  }
  return "?";
}

constexpr char kCheckpointMagic[4] = {'P', 'N', 'R', 'K'};
constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  enum class Code { bad_magic, version_mismatch, crc_mismatch, kind_mismatch, malformed };
  CheckpointError(Code code, const std::string& what) : Error("io", what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

/// Decoded checkpoint: architecture metadata and the raw f32 payload.
struct Checkpoint {
  ModelKind kind = ModelKind::flow;
  FlowArchitecture arch;                 // flow and cflow
  std::uint32_t components = 0, dim = 0;  // gmm
  std::vector<float> payload;
};

namespace detail {

template <class T>
void append_params(std::vector<float>& out, const ParamSet<T>& params) {
  for (const auto& e : params)
    for (T v : e.value.storage()) out.push_back(static_cast<float>(v));
}

template <class T>
void assign_params(ParamSet<T>& params, const std::vector<float>& payload) {
  if (payload.size() != params.total_size())
    throw CheckpointError(CheckpointError::Code::malformed, "checkpoint payload does not match the architecture");
  std::size_t k = 0;
  for (auto& e : params)
    for (auto& v : e.value.storage()) v = static_cast<T>(payload[k++]);
}

inline void write_checkpoint(const Checkpoint& ck, const std::string& path) {
  ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint8_t>(ck.kind));
  if (ck.kind == ModelKind::gmm) {
    w.put(ck.components);
    w.put(ck.dim);
  } else {
    w.put(static_cast<std::uint32_t>(ck.arch.dim));
    w.put(static_cast<std::uint32_t>(ck.arch.blocks));
    w.put(static_cast<std::uint32_t>(ck.arch.hidden));
    w.put(static_cast<std::uint32_t>(ck.arch.condition_dim));
    w.put(ck.arch.clamp);
    w.put(static_cast<std::uint64_t>(ck.arch.seed));
    w.put(static_cast<std::uint8_t>(ck.arch.identity_permutations ? 1 : 0));
  }
  w.put(static_cast<std::uint64_t>(ck.payload.size()));
  for (float f : ck.payload) w.put(f);
  w.put(crc32_of(w.bytes().data(), w.bytes().size()));
  write_file_bytes(path, w.bytes());
}

}  // namespace detail

/// Reads and validates a checkpoint: magic, then version, then CRC.
inline Checkpoint load_checkpoint(const std::string& path) {
  using Code = CheckpointError::Code;
  const auto bytes = detail::read_file_bytes(path);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError(Code::bad_magic, "'" + path + "' is not a checkpoint (bad magic)");
  detail::ByteReader head(bytes.data() + 4, bytes.size() - 4);
  std::uint16_t version = 0;
  try {
    version = head.get<std::uint16_t>();
  } catch (const Error&) {
    throw CheckpointError(Code::crc_mismatch, "checkpoint '" + path + "' is truncated (CRC check failed)");
  }
  if (version != kCheckpointVersion)
    throw CheckpointError(Code::version_mismatch, "checkpoint '" + path + "' has format version " +
                                                     std::to_string(version) + ", expected " +
                                                     std::to_string(kCheckpointVersion));
  if (bytes.size() < 10)
    throw CheckpointError(Code::crc_mismatch, "checkpoint '" + path + "' is truncated (CRC check failed)");
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader tail(bytes.data() + body, 4);
  if (tail.get<std::uint32_t>() != crc32_of(bytes.data(), body))
    throw CheckpointError(Code::crc_mismatch, "checkpoint '" + path + "' failed its CRC check");

  Checkpoint ck;
  try {
    detail::ByteReader r(bytes.data() + 6, body - 6);
    const auto kind = r.get<std::uint8_t>();
    if (kind > 2) throw CheckpointError(Code::malformed, "unknown model kind in '" + path + "'");
    ck.kind = static_cast<ModelKind>(kind);
    if (ck.kind == ModelKind::gmm) {
      ck.components = r.get<std::uint32_t>();
      ck.dim = r.get<std::uint32_t>();
    } else {
      ck.arch.dim = r.get<std::uint32_t>();
      ck.arch.blocks = r.get<std::uint32_t>();
      ck.arch.hidden = r.get<std::uint32_t>();
      ck.arch.condition_dim = r.get<std::uint32_t>();
      ck.arch.clamp = r.get<double>();
      ck.arch.seed = r.get<std::uint64_t>();
      ck.arch.identity_permutations = r.get<std::uint8_t>() != 0;
    }
    const auto n = r.get<std::uint64_t>();
    if (n * 4 != r.remaining()) throw CheckpointError(Code::malformed, "payload length mismatch in '" + path + "'");
    ck.payload.resize(n);
    for (auto& f : ck.payload) f = r.get<float>();
  } catch (const CheckpointError&) {
    throw;
  } catch (const Error& e) {
    throw CheckpointError(Code::malformed, "malformed checkpoint '" + path + "': " + e.what());
  }
  return ck;
}

/// Parameters are stored as 32-bit reals; double models are rounded.
template <class T>
void save_checkpoint(const PatchFlow<T>& flow, const std::string& path) {
  Checkpoint ck;
  ck.kind = ModelKind::flow;
  ck.arch = flow.architecture();
  detail::append_params(ck.payload, flow.params());
  detail::write_checkpoint(ck, path);
}

template <class T>
void save_checkpoint(const ConditionalPatchFlow<T>& flow, const std::string& path) {
  Checkpoint ck;
  ck.kind = ModelKind::cflow;
  ck.arch = flow.architecture();
  detail::append_params(ck.payload, flow.params());
  detail::write_checkpoint(ck, path);
}

/// Weights, then means, then row-major covariances.
inline void save_checkpoint(const PatchGMM& gmm, const std::string& path) {
  Checkpoint ck;
  ck.kind = ModelKind::gmm;
  ck.components = static_cast<std::uint32_t>(gmm.components());
  ck.dim = static_cast<std::uint32_t>(gmm.dim());
  for (double w : gmm.weights()) ck.payload.push_back(static_cast<float>(w));
  for (const auto& m : gmm.means())
    for (Eigen::Index j = 0; j < m.size(); ++j) ck.payload.push_back(static_cast<float>(m(j)));
  for (const auto& c : gmm.covariances())
    for (Eigen::Index i = 0; i < c.rows(); ++i)
      for (Eigen::Index j = 0; j < c.cols(); ++j) ck.payload.push_back(static_cast<float>(c(i, j)));
  detail::write_checkpoint(ck, path);
}

namespace detail {
inline void require_kind(const Checkpoint& ck, ModelKind want, const std::string& path) {
  if (ck.kind != want)
    throw CheckpointError(CheckpointError::Code::kind_mismatch,
                          "'" + path + "' holds a " + to_string(ck.kind) + " model, expected " + to_string(want));
}
}  // namespace detail

template <class T>
PatchFlow<T> load_flow(const std::string& path) {
  const auto ck = load_checkpoint(path);
  detail::require_kind(ck, ModelKind::flow, path);
  PatchFlow<T> flow(ck.arch);
  detail::assign_params(flow.params(), ck.payload);
  return flow;
}

template <class T>
ConditionalPatchFlow<T> load_cflow(const std::string& path) {
  const auto ck = load_checkpoint(path);
  detail::require_kind(ck, ModelKind::cflow, path);
  ConditionalPatchFlow<T> flow(ck.arch);
  detail::assign_params(flow.params(), ck.payload);
  return flow;
}

inline PatchGMM load_gmm(const std::string& path) {
  const auto ck = load_checkpoint(path);
  detail::require_kind(ck, ModelKind::gmm, path);
  const std::size_t k = ck.components, d = ck.dim;
  if (ck.payload.size() != k * (1 + d + d * d))
    throw CheckpointError(CheckpointError::Code::malformed, "GMM payload does not match its metadata");
  std::size_t pos = 0;
  std::vector<double> w(k);
  for (auto& v : w) v = ck.payload[pos++];
  std::vector<Eigen::VectorXd> means(k, Eigen::VectorXd(static_cast<Eigen::Index>(d)));
  for (auto& m : means)
    for (Eigen::Index j = 0; j < m.size(); ++j) m(j) = ck.payload[pos++];
  std::vector<Eigen::MatrixXd> covs(k, Eigen::MatrixXd(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)));
  for (auto& c : covs)
    for (Eigen::Index i = 0; i < c.rows(); ++i)
      for (Eigen::Index j = 0; j < c.cols(); ++j) c(i, j) = ck.payload[pos++];
  return PatchGMM(std::move(w), std::move(means), std::move(covs));
}

// ------------------------------------------------------ experiment config

struct ExperimentConfig {
  std::string task = "sr";  // sr | ct_full | ct_limited | deblur
  std::uint64_t seed = 0;

  struct Operator {
    std::size_t angles = 180;        // CT
    std::size_t bins = 0;            // CT; 0 = ceil(sqrt(2) n) + 4
    double width = 1.0;              // CT domain width
    double limited_fraction = 0.1;   // CT limited: dropped fraction at each end
    std::string kernel;              // deblur: PFM kernel; empty = built-in 19x19 motion kernel
  } op;

  struct Noise {
    std::string kind = "gaussian";  // gaussian | poisson
    double sigma = 0.01;
    double n0 = 4096;
  } noise;

  struct FidelityCfg {
    std::string kind = "gaussian";  // gaussian | poisson
    double n0 = 4096;
  } fidelity;

  struct Prior {
    std::string kind = "patchnr";  // patchnr | cpatchnr | epll | none
    std::size_t patch = 6;
    std::string flow, gmm;
  } prior;

  ReconstructConfig solver;

  struct Paths {
    std::string observation, output, truth, condition;
  } paths;

  static const std::vector<std::string>& tasks() {
    static const std::vector<std::string> t{"sr", "ct_full", "ct_limited", "deblur"};
    return t;
  }

  /// Task profile with the matching solver preset and noise model.
  static ExperimentConfig preset(const std::string& task) {
    ExperimentConfig c;
    c.task = task;
    c.solver = patchnr::preset(task);
    if (task == "ct_full" || task == "ct_limited") {
      c.noise = {"poisson", 0.0, 4096};
      c.fidelity = {"poisson", 4096};
    } else if (task == "deblur") {
      c.noise = {"gaussian", 5.0 / 255.0, 4096};
    }
    return c;
  }

  void validate() const {
    if (std::find(tasks().begin(), tasks().end(), task) == tasks().end())
      throw Error("io", "config: unknown task '" + task + "'");
    if (noise.kind != "gaussian" && noise.kind != "poisson") throw Error("io", "config: unknown noise kind");
    if (fidelity.kind != "gaussian" && fidelity.kind != "poisson") throw Error("io", "config: unknown fidelity kind");
    if (prior.kind != "patchnr" && prior.kind != "cpatchnr" && prior.kind != "epll" && prior.kind != "none")
      throw Error("io", "config: unknown prior kind '" + prior.kind + "'");
    if (prior.patch == 0) throw Error("io", "config: patch size must be positive");
    if (op.angles == 0) throw Error("io", "config: angle count must be positive");
    solver.validate();
  }

  std::string to_toml() const {
    toml::table t{
        {"task", task},
        {"seed", static_cast<std::int64_t>(seed)},
        {"operator", toml::table{{"angles", static_cast<std::int64_t>(op.angles)},
                                 {"bins", static_cast<std::int64_t>(op.bins)},
                                 {"width", op.width},
                                 {"limited_fraction", op.limited_fraction},
                                 {"kernel", op.kernel}}},
        {"noise", toml::table{{"kind", noise.kind}, {"sigma", noise.sigma}, {"n0", noise.n0}}},
        {"fidelity", toml::table{{"kind", fidelity.kind}, {"n0", fidelity.n0}}},
        {"prior", toml::table{{"kind", prior.kind},
                              {"patch", static_cast<std::int64_t>(prior.patch)},
                              {"flow", prior.flow},
                              {"gmm", prior.gmm}}},
        {"solver", toml::table{{"iterations", static_cast<std::int64_t>(solver.iterations)},
                               {"learning_rate", solver.learning_rate},
                               {"lambda", solver.lambda},
                               {"subset_size", static_cast<std::int64_t>(solver.subset_size)},
                               {"full_subset", solver.full_subset},
                               {"init", to_string(solver.init)},
                               {"clamp01", solver.clamp01}}},
        {"paths", toml::table{{"observation", paths.observation},
                              {"output", paths.output},
                              {"truth", paths.truth},
                              {"condition", paths.condition}}},
    };
    std::ostringstream os;
    os << t << '\n';
    return os.str();
  }
};

namespace detail {

class TomlReader {
 public:
  explicit TomlReader(const toml::table& t, std::string prefix = "") : t_(t), prefix_(std::move(prefix)) {}

  void allow(std::initializer_list<const char*> keys) {
    std::set<std::string> ok(keys.begin(), keys.end());
    for (const auto& [k, v] : t_)
      if (!ok.count(std::string(k.str())))
        throw Error("io", "config: unknown key '" + prefix_ + std::string(k.str()) + "'");
  }

  template <class U>
  void read(const char* key, U& target) const {
    const auto* node = t_.get(key);
    if (!node) return;
    const std::string name = prefix_ + key;
    if constexpr (std::is_same_v<U, std::string>) {
      if (auto v = node->value<std::string>()) target = *v;
      else throw Error("io", "config: '" + name + "' must be a string");
    } else if constexpr (std::is_same_v<U, bool>) {
      if (auto v = node->value<bool>()) target = *v;
      else throw Error("io", "config: '" + name + "' must be a boolean");
    } else if constexpr (std::is_floating_point_v<U>) {
      if (auto v = node->value<double>()) target = static_cast<U>(*v);
      else throw Error("io", "config: '" + name + "' must be a number");
    } else {
      auto v = node->value<std::int64_t>();
      if (!v || !node->is_integer()) throw Error("io", "config: '" + name + "' must be an integer");
      if (*v < 0) throw Error("io", "config: '" + name + "' must be non-negative");
      target = static_cast<U>(*v);
    }
  }

  const toml::table* sub(const char* key) const {
    const auto* node = t_.get(key);
    if (!node) return nullptr;
    if (!node->is_table()) throw Error("io", "config: '" + prefix_ + key + "' must be a table");
    return node->as_table();
  }

 private:
  const toml::table& t_;
  std::string prefix_;
};

}  // namespace detail

/// Parses a TOML experiment config on top of the task preset; unknown keys
/// and mistyped values are errors.
inline ExperimentConfig parse_experiment_config(std::string_view text, std::string_view source = "config") {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config: " << e.description() << " at " << e.source().begin;
    throw Error("io", os.str());
  }
  detail::TomlReader top(root);
  top.allow({"task", "seed", "operator", "noise", "fidelity", "prior", "solver", "paths"});
  std::string task = "sr";
  top.read("task", task);
  if (std::find(ExperimentConfig::tasks().begin(), ExperimentConfig::tasks().end(), task) ==
      ExperimentConfig::tasks().end())
    throw Error("io", "config: unknown task '" + task + "'");
  auto c = ExperimentConfig::preset(task);
  top.read("seed", c.seed);
  if (const auto* t = top.sub("operator")) {
    detail::TomlReader r(*t, "operator.");
    r.allow({"angles", "bins", "width", "limited_fraction", "kernel"});
    r.read("angles", c.op.angles);
    r.read("bins", c.op.bins);
    r.read("width", c.op.width);
    r.read("limited_fraction", c.op.limited_fraction);
    r.read("kernel", c.op.kernel);
  }
  if (const auto* t = top.sub("noise")) {
    detail::TomlReader r(*t, "noise.");
    r.allow({"kind", "sigma", "n0"});
    r.read("kind", c.noise.kind);
    r.read("sigma", c.noise.sigma);
    r.read("n0", c.noise.n0);
  }
  if (const auto* t = top.sub("fidelity")) {
    detail::TomlReader r(*t, "fidelity.");
    r.allow({"kind", "n0"});
    r.read("kind", c.fidelity.kind);
    r.read("n0", c.fidelity.n0);
  }
  if (const auto* t = top.sub("prior")) {
    detail::TomlReader r(*t, "prior.");
    r.allow({"kind", "patch", "flow", "gmm"});
    r.read("kind", c.prior.kind);
    r.read("patch", c.prior.patch);
    r.read("flow", c.prior.flow);
    r.read("gmm", c.prior.gmm);
  }
  if (const auto* t = top.sub("solver")) {
    detail::TomlReader r(*t, "solver.");
    r.allow({"iterations", "learning_rate", "lambda", "subset_size", "full_subset", "init", "clamp01"});
    r.read("iterations", c.solver.iterations);
    r.read("learning_rate", c.solver.learning_rate);
    r.read("lambda", c.solver.lambda);
    r.read("subset_size", c.solver.subset_size);
    r.read("full_subset", c.solver.full_subset);
    std::string init = to_string(c.solver.init);
    r.read("init", init);
    c.solver.init = parse_init_policy(init);
    r.read("clamp01", c.solver.clamp01);
  }
  if (const auto* t = top.sub("paths")) {
    detail::TomlReader r(*t, "paths.");
    r.allow({"observation", "output", "truth", "condition"});
    r.read("observation", c.paths.observation);
    r.read("output", c.paths.output);
    r.read("truth", c.paths.truth);
    r.read("condition", c.paths.condition);
  }
  c.solver.seed = c.seed;
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  return parse_experiment_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), path);
}

}  // namespace patchnr
