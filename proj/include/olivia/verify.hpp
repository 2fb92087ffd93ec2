#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "olivia/common.hpp"
#include "olivia/harmonizer.hpp"
#include "olivia/linalg.hpp"
#include "olivia/rng.hpp"

#include "json.hpp"

namespace olivia {

namespace detail {

/// G^T G for Gaussian G, divided by its trace. Symmetric PSD with unit
/// trace by construction.
inline Mat random_psd(std::size_t n, CounterRng& rng) {
  Mat g(n, n);
  for (double& x : g.a) x = rng.next_gaussian();
  Mat a = matmul_tn(g, g);
  const double tr = trace(a);
  for (double& x : a.a) x /= tr;
  return a;
}

inline Mat random_orthogonal(std::size_t n, CounterRng& rng) {
  const HouseholderStack s = HouseholderStack::random_init(n, n, rng);
  return build_q(s);
}

inline Mat block_diag(const Mat& top, const Mat& bottom) {
  Mat out(top.rows + bottom.rows, top.cols + bottom.cols);
  for (std::size_t i = 0; i < top.rows; ++i)
    for (std::size_t j = 0; j < top.cols; ++j) out(i, j) = top(i, j);
  for (std::size_t i = 0; i < bottom.rows; ++i)
    for (std::size_t j = 0; j < bottom.cols; ++j)
      out(top.rows + i, top.cols + j) = bottom(i, j);
  return out;
}

}  // namespace detail

/// Frobenius norm of the two off-diagonal blocks of a square matrix split
/// after row/column r.
inline double offdiagonal_block_frobenius(const Mat& m, std::size_t r) {
  require(m.rows == m.cols && r < m.rows, "offdiagonal blocks: bad split");
  double s = 0.0;
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) {
      const bool off = (i < r) != (j < r);
      if (off) s += m(i, j) * m(i, j);
    }
  return std::sqrt(s);
}

struct Prop1Report {
  int dim = 0;       // T
  int shared = 0;    // r
  int datasets = 0;
  std::uint64_t seed = 0;
  double max_offdiag_frob = 0.0;
  double negative_control_defect = 0.0;
  bool pass = false;
};

/// Constructive oracle for the shared-invariant-subspace claim: plant
/// per-dataset PSD blocks behind one shared random orthogonal Q, then check
/// that conjugating each moment matrix by Q recovers an (up to round-off)
/// block-diagonal form, while an unrelated orthogonal basis does not.
inline Prop1Report check_prop1(int t, int r, int n_datasets, std::uint64_t seed) {
  require(t >= 2 && r >= 1 && r < t, "check_prop1: need 1 <= r < T");
  require(n_datasets >= 1, "check_prop1: need at least one dataset");

  Prop1Report report;
  report.dim = t;
  report.shared = r;
  report.datasets = n_datasets;
  report.seed = seed;

  CounterRng rng(seed, "prop1");
  const Mat q = detail::random_orthogonal(t, rng);
  CounterRng wrong_rng(seed, "prop1-negative-control");
  const Mat q_wrong = detail::random_orthogonal(t, wrong_rng);

  report.negative_control_defect = 1e300;
  for (int i = 0; i < n_datasets; ++i) {
    const Mat lambda = detail::random_psd(r, rng);
    const Mat phi = detail::random_psd(t - r, rng);
    const Mat planted = detail::block_diag(lambda, phi);
    // Sigma = Q^T diag(Lambda, Phi) Q
    const Mat sigma = matmul(matmul_tn(q, planted), q);

    const Mat recovered = matmul_nt(matmul(q, sigma), q);
    report.max_offdiag_frob =
        std::max(report.max_offdiag_frob, offdiagonal_block_frobenius(recovered, r));

    const Mat misaligned = matmul_nt(matmul(q_wrong, sigma), q_wrong);
    report.negative_control_defect = std::min(
        report.negative_control_defect, offdiagonal_block_frobenius(misaligned, r));
  }

  report.pass =
      report.max_offdiag_frob < 1e-9 && report.negative_control_defect > 1e-2;
  return report;
}

struct Prop2Report {
  int dim = 0;      // T
  int shared = 0;   // r
  int token_dim = 0;  // d
  int tokens = 0;     // L
  std::uint64_t seed = 0;
  double decomposition_err = 0.0;
  int numerical_rank = 0;
  int rank_bound = 0;
  double max_bound_violation = 0.0;
  double min_eig_ratio = 0.0;        // min eigenvalue / max eigenvalue of C^(r)
  double factorization_err = 0.0;    // ||C^(r) - G G^T||_max
  bool pass = false;
};

/// Numerical oracle for the low-rank token Gram decomposition: computes
/// every Gram entry through the blockwise traces and through the dense
/// tr(M Sigma M'^T) route, checks rank(C^(r)) <= d*r, the Cauchy-Schwarz
/// error bound, and PSD-ness of the truncated Gram both by eigenvalues and
/// by its explicit G G^T factorization.
inline Prop2Report check_prop2(int t, int r, int d, int l, std::uint64_t seed) {
  require(t >= 2 && r >= 1 && r < t, "check_prop2: need 1 <= r < T");
  require(d >= 1 && l >= 1, "check_prop2: need positive d and L");

  Prop2Report report;
  report.dim = t;
  report.shared = r;
  report.token_dim = d;
  report.tokens = l;
  report.seed = seed;
  report.rank_bound = d * r;

  CounterRng rng(seed, "prop2");
  const Mat lambda = detail::random_psd(r, rng);
  const Mat phi = detail::random_psd(t - r, rng);
  const Mat sigma = detail::block_diag(lambda, phi);

  std::vector<Mat> ops;  // M_l, d x T
  for (int i = 0; i < l; ++i) {
    Mat m(d, t);
    for (double& x : m.a) x = rng.next_gaussian();
    ops.push_back(std::move(m));
  }
  const auto a_block = [&](int i) {
    Mat a(d, r);
    for (int row = 0; row < d; ++row)
      for (int col = 0; col < r; ++col) a(row, col) = ops[i](row, col);
    return a;
  };
  const auto b_block = [&](int i) {
    Mat b(d, t - r);
    for (int row = 0; row < d; ++row)
      for (int col = 0; col < t - r; ++col) b(row, col) = ops[i](row, r + col);
    return b;
  };

  Mat gram(l, l), truncated(l, l);
  for (int i = 0; i < l; ++i) {
    for (int j = 0; j < l; ++j) {
      const Mat ai = a_block(i), aj = a_block(j);
      const Mat bi = b_block(i), bj = b_block(j);
      const double top = trace(matmul_nt(matmul(ai, lambda), aj));
      const double bottom = trace(matmul_nt(matmul(bi, phi), bj));
      const double dense = trace(matmul_nt(matmul(ops[i], sigma), ops[j]));
      gram(i, j) = top + bottom;
      truncated(i, j) = top;
      report.decomposition_err =
          std::max(report.decomposition_err, std::abs(gram(i, j) - dense));
    }
  }

  // Numerical rank of C^(r) from its (symmetric) eigenvalues.
  Vec evals;
  jacobi_eigen_sym(truncated, evals);
  double max_abs_eval = 0.0, min_eval = evals.empty() ? 0.0 : evals[0],
         max_eval = evals.empty() ? 0.0 : evals[0];
  for (double e : evals) {
    max_abs_eval = std::max(max_abs_eval, std::abs(e));
    min_eval = std::min(min_eval, e);
    max_eval = std::max(max_eval, e);
  }
  report.numerical_rank = 0;
  for (double e : evals)
    if (std::abs(e) > 1e-9 * max_abs_eval) ++report.numerical_rank;
  report.min_eig_ratio = max_eval > 0.0 ? min_eval / max_eval : 0.0;

  // Entrywise error bound |C - C^(r)| <= ||Phi||_2 ||B_i||_F ||B_j||_F.
  const double phi_norm = sym_spectral_norm(phi);
  Vec b_frob(l);
  for (int i = 0; i < l; ++i) b_frob[i] = frobenius_norm(b_block(i));
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j) {
      const double gap = std::abs(gram(i, j) - truncated(i, j));
      const double bound = phi_norm * b_frob[i] * b_frob[j] + 1e-10;
      report.max_bound_violation =
          std::max(report.max_bound_violation, gap - bound);
    }

  // PSD via the explicit factorization C^(r) = G G^T with rows
  // g_i = vec(A_i Lambda^{1/2}).
  const Mat lambda_half = sym_sqrt_psd(lambda);
  Mat g(l, d * r);
  for (int i = 0; i < l; ++i) {
    const Mat al = matmul(a_block(i), lambda_half);
    for (int row = 0; row < d; ++row)
      for (int col = 0; col < r; ++col) g(i, row * r + col) = al(row, col);
  }
  const Mat ggt = matmul_nt(g, g);
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j)
      report.factorization_err =
          std::max(report.factorization_err, std::abs(ggt(i, j) - truncated(i, j)));

  report.pass = report.decomposition_err < 1e-11 &&
                report.numerical_rank <= report.rank_bound &&
                report.max_bound_violation <= 0.0 &&
                report.min_eig_ratio >= -1e-9 && report.factorization_err < 1e-11;
  return report;
}

inline nlohmann::json prop1_json(const Prop1Report& r) {
  nlohmann::json j;
  j["proposition"] = 1;
  j["params"] = {{"T", r.dim}, {"r", r.shared}, {"datasets", r.datasets}, {"seed", r.seed}};
  j["metrics"] = {{"max_offdiag_frob", r.max_offdiag_frob},
                  {"negative_control_defect", r.negative_control_defect}};
  j["pass"] = r.pass;
  return j;
}

inline nlohmann::json prop2_json(const Prop2Report& r) {
  nlohmann::json j;
  j["proposition"] = 2;
  j["params"] = {{"T", r.dim}, {"r", r.shared}, {"d", r.token_dim}, {"L", r.tokens},
                 {"seed", r.seed}};
  j["metrics"] = {{"decomposition_err", r.decomposition_err},
                  {"numerical_rank", r.numerical_rank},
                  {"rank_bound", r.rank_bound},
                  {"max_bound_violation", r.max_bound_violation},
                  {"min_eig_ratio", r.min_eig_ratio},
                  {"factorization_err", r.factorization_err}};
  j["pass"] = r.pass;
  return j;
}

}  // namespace olivia
