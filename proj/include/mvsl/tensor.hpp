// Dense array types shared across the library.
//
// All verification math runs in binary64. Matrices are row-major so that a
// row (one sample / one token / one class) is contiguous, which keeps the
// serialization story ("row-major payload") and Eigen views aligned.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <vector>

#include "mvsl/errors.hpp"
#include "mvsl/prng.hpp"

namespace mvsl {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

// Minimal rank-3 array (d0 x d1 x d2), row-major. Used for per-block
// activations (B x N x d) and patch similarities (B x (N-1) x C).
struct Array3 {
  int d0 = 0, d1 = 0, d2 = 0;
  std::vector<double> v;

  Array3() = default;
  Array3(int a, int b, int c)
      : d0(a), d1(b), d2(c), v(static_cast<std::size_t>(a) * b * c, 0.0) {}

  double& at(int i, int j, int k) {
    return v[(static_cast<std::size_t>(i) * d1 + j) * d2 + k];
  }
  double at(int i, int j, int k) const {
    return v[(static_cast<std::size_t>(i) * d1 + j) * d2 + k];
  }

  // View of slab i as a d1 x d2 matrix (no copy).
  Eigen::Map<Mat> slab(int i) {
    return Eigen::Map<Mat>(v.data() + static_cast<std::size_t>(i) * d1 * d2, d1, d2);
  }
  Eigen::Map<const Mat> slab(int i) const {
    return Eigen::Map<const Mat>(v.data() + static_cast<std::size_t>(i) * d1 * d2, d1, d2);
  }

  void set_slab(int i, const Mat& m) {
    if (m.rows() != d1 || m.cols() != d2) throw InputError("Array3::set_slab: shape mismatch");
    slab(i) = m;
  }

  std::size_t size() const { return v.size(); }
};

inline bool all_finite(const Mat& m) { return m.allFinite(); }

inline bool all_finite(const Array3& a) {
  for (double x : a.v)
    if (!std::isfinite(x)) return false;
  return true;
}

// Seeded Gaussian fill, std = scale. Row-major visitation order is part of
// the determinism contract.
inline Mat random_gaussian(int rows, int cols, SplitMix64& rng, double scale) {
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.next_normal() * scale;
  return m;
}

// FNV-1a over raw bytes; used for weight checksums and config fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xCBF29CE484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t checksum(const Mat& m, std::uint64_t h = 0xCBF29CE484222325ULL) {
  static_assert(sizeof(double) == 8, "binary64 required");
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    h = fnv1a(m.data() + i * m.cols(), static_cast<std::size_t>(m.cols()) * 8, h);
  return h;
}

}  // namespace mvsl
