#pragma once
// Patch extraction P_i, its adjoint (scatter-add), condition windows and
// random patch-subset sampling on a stride-1 dense grid without padding.

#include <cstdint>
#include <vector>

#include "patchnr/diffcore.hpp"
#include "patchnr/random.hpp"

namespace patchnr {

struct PatchGeometry {
  std::size_t rows = 0;  // d1
  std::size_t cols = 0;  // d2
  std::size_t patch_rows = 6;  // s1
  std::size_t patch_cols = 6;  // s2

  PatchGeometry() = default;
  PatchGeometry(std::size_t d1, std::size_t d2, std::size_t s1, std::size_t s2)
      : rows(d1), cols(d2), patch_rows(s1), patch_cols(s2) {
    validate();
  }

  template <class T>
  static PatchGeometry for_image(const Image<T>& img, std::size_t s1, std::size_t s2) {
    return PatchGeometry(img.rows(), img.cols(), s1, s2);
  }

  void validate() const {
    if (patch_rows == 0 || patch_cols == 0 || patch_rows > rows || patch_cols > cols)
      throw Error("patchops", "patch extents must satisfy 1 <= s_i <= d_i");
  }

  std::size_t patch_dim() const noexcept { return patch_rows * patch_cols; }
  std::size_t corners_per_row() const noexcept { return cols - patch_cols + 1; }
  std::size_t patch_count() const noexcept { return (rows - patch_rows + 1) * corners_per_row(); }

  struct Corner {
    std::size_t row, col;
  };

  Corner corner(std::size_t index) const {
    if (index >= patch_count()) throw Error("patchops", "patch index out of range");
    return {index / corners_per_row(), index % corners_per_row()};
  }

  template <class T>
  void require_image(const Image<T>& img) const {
    if (img.rank() != 2 || img.rows() != rows || img.cols() != cols)
      throw Error("patchops", "image extents do not match the patch geometry");
  }
};

/// Row-major vectorization of the window at corner(index).
template <class T>
void extract_patch_into(const Image<T>& image, const PatchGeometry& g, std::size_t index, T* out) {
  const auto c = g.corner(index);
  for (std::size_t a = 0; a < g.patch_rows; ++a)
    for (std::size_t b = 0; b < g.patch_cols; ++b) *out++ = image(c.row + a, c.col + b);
}

template <class T>
std::vector<T> extract_patch(const Image<T>& image, const PatchGeometry& g, std::size_t index) {
  g.require_image(image);
  std::vector<T> p(g.patch_dim());
  extract_patch_into(image, g, index, p.data());
  return p;
}

/// One patch per row, in the order of `indices`.
template <class T>
Mat<T> extract_patches(const Image<T>& image, const PatchGeometry& g, const std::vector<std::size_t>& indices) {
  g.require_image(image);
  Mat<T> out(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(g.patch_dim()));
  for (std::size_t i = 0; i < indices.size(); ++i)
    extract_patch_into(image, g, indices[i], out.data() + i * g.patch_dim());
  return out;
}

/// All N_p patches in index order.
template <class T>
Mat<T> extract_all_patches(const Image<T>& image, const PatchGeometry& g) {
  std::vector<std::size_t> idx(g.patch_count());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return extract_patches(image, g, idx);
}

/// Sum_i P_i^T g_i, accumulated in the order of `indices`.
template <class T>
Image<T> insert_adjoint(const Mat<T>& patches, const std::vector<std::size_t>& indices, const PatchGeometry& g) {
  if (patches.rows() != static_cast<Eigen::Index>(indices.size()) ||
      patches.cols() != static_cast<Eigen::Index>(g.patch_dim()))
    throw Error("patchops", "patch gradients and indices are not aligned");
  Image<T> out = Image<T>::image(g.rows, g.cols);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto c = g.corner(indices[i]);
    const T* src = patches.data() + i * g.patch_dim();
    for (std::size_t a = 0; a < g.patch_rows; ++a)
      for (std::size_t b = 0; b < g.patch_cols; ++b) out(c.row + a, c.col + b) += *src++;
  }
  return out;
}

/// n indices uniform with replacement over {0..N_p-1}.
inline std::vector<std::size_t> sample_patch_indices(const PatchGeometry& g, std::size_t n, Rng& rng) {
  if (n == 0) throw Error("patchops", "subset size must be positive");
  std::vector<std::size_t> idx(n);
  const std::uint64_t np = g.patch_count();
  for (auto& i : idx) i = static_cast<std::size_t>(uniform_index(rng, np));
  return idx;
}

inline std::vector<std::size_t> all_patch_indices(const PatchGeometry& g) {
  std::vector<std::size_t> idx(g.patch_count());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

/// Condition vector C_i: the same window taken from the conditioning image
/// (a naive reconstruction with the geometry's image extents).
template <class T>
std::vector<T> condition_patch(const Image<T>& cond_image, const PatchGeometry& g, std::size_t index) {
  return extract_patch(cond_image, g, index);
}

template <class T>
Mat<T> condition_patches(const Image<T>& cond_image, const PatchGeometry& g, const std::vector<std::size_t>& indices) {
  return extract_patches(cond_image, g, indices);
}

/// Number of patches covering each pixel.
template <class T = double>
Image<T> coverage_counts(const PatchGeometry& g) {
  Mat<T> ones = Mat<T>::Ones(static_cast<Eigen::Index>(g.patch_count()), static_cast<Eigen::Index>(g.patch_dim()));
  return insert_adjoint(ones, all_patch_indices(g), g);
}

}  // namespace patchnr
