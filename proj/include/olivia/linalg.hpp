#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "olivia/common.hpp"

namespace olivia {

/// Dense row-major matrix of doubles. Small and boring on purpose: every
/// matrix in this library is desk-scale (T <= 4096, typically much less).
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Vec a;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

  std::span<double> row(std::size_t i) { return {a.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {a.data() + i * cols, cols}; }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

inline Mat transpose(const Mat& m) {
  Mat t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
  return t;
}

/// C = A * B
inline Mat matmul(const Mat& A, const Mat& B) {
  require(A.cols == B.rows, "matmul: inner dimensions differ");
  Mat C(A.rows, B.cols);
  for (std::size_t i = 0; i < A.rows; ++i) {
    for (std::size_t k = 0; k < A.cols; ++k) {
      const double aik = A(i, k);
      if (aik == 0.0) continue;
      const double* brow = B.a.data() + k * B.cols;
      double* crow = C.a.data() + i * C.cols;
      for (std::size_t j = 0; j < B.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return C;
}

/// C = A^T * B
inline Mat matmul_tn(const Mat& A, const Mat& B) {
  require(A.rows == B.rows, "matmul_tn: inner dimensions differ");
  Mat C(A.cols, B.cols);
  for (std::size_t k = 0; k < A.rows; ++k) {
    const double* arow = A.a.data() + k * A.cols;
    const double* brow = B.a.data() + k * B.cols;
    for (std::size_t i = 0; i < A.cols; ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = C.a.data() + i * C.cols;
      for (std::size_t j = 0; j < B.cols; ++j) crow[j] += aki * brow[j];
    }
  }
  return C;
}

/// C = A * B^T
inline Mat matmul_nt(const Mat& A, const Mat& B) {
  require(A.cols == B.cols, "matmul_nt: inner dimensions differ");
  Mat C(A.rows, B.rows);
  for (std::size_t i = 0; i < A.rows; ++i)
    for (std::size_t j = 0; j < B.rows; ++j) C(i, j) = dot(A.row(i), B.row(j));
  return C;
}

inline double frobenius_norm(const Mat& m) {
  double s = 0.0;
  for (double x : m.a) s += x * x;
  return std::sqrt(s);
}

inline double max_abs(const Mat& m) {
  double s = 0.0;
  for (double x : m.a) s = std::max(s, std::abs(x));
  return s;
}

inline double trace(const Mat& m) {
  double s = 0.0;
  for (std::size_t i = 0; i < std::min(m.rows, m.cols); ++i) s += m(i, i);
  return s;
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in `evals` (unsorted); if `evecs` is non-null its
/// columns hold the matching eigenvectors. Adequate for the n <= 256
/// matrices this library touches.
inline void jacobi_eigen_sym(const Mat& A, Vec& evals, Mat* evecs = nullptr) {
  require(A.rows == A.cols, "jacobi_eigen_sym: matrix not square");
  const std::size_t n = A.rows;
  Mat S = A;
  Mat V = Mat::identity(n);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += S(p, q) * S(p, q);
    if (off < 1e-30) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = S(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (S(q, q) - S(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double skp = S(k, p), skq = S(k, q);
          S(k, p) = c * skp - s * skq;
          S(k, q) = s * skp + c * skq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double spk = S(p, k), sqk = S(q, k);
          S(p, k) = c * spk - s * sqk;
          S(q, k) = s * spk + c * sqk;
        }
        if (evecs) {
          for (std::size_t k = 0; k < n; ++k) {
            const double vkp = V(k, p), vkq = V(k, q);
            V(k, p) = c * vkp - s * vkq;
            V(k, q) = s * vkp + c * vkq;
          }
        }
      }
    }
  }

  evals.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) evals[i] = S(i, i);
  if (evecs) *evecs = V;
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// (numerical noise) are clipped at zero.
inline Mat sym_sqrt_psd(const Mat& A) {
  Vec evals;
  Mat V;
  jacobi_eigen_sym(A, evals, &V);
  const std::size_t n = A.rows;
  Mat R(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double s = evals[k] > 0.0 ? std::sqrt(evals[k]) : 0.0;
    if (s == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      const double vis = V(i, k) * s;
      if (vis == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) R(i, j) += vis * V(j, k);
    }
  }
  return R;
}

/// Spectral norm of a symmetric matrix (largest |eigenvalue|).
inline double sym_spectral_norm(const Mat& A) {
  Vec evals;
  jacobi_eigen_sym(A, evals);
  double m = 0.0;
  for (double e : evals) m = std::max(m, std::abs(e));
  return m;
}

}  // namespace olivia
