#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "olivia/verify.hpp"

using namespace olivia;

TEST_CASE("offdiagonal blocks of an already block-diagonal matrix are zero") {
  // Q = I with diagonal Lambda, Phi: planted and recovered coincide.
  Mat m(5, 5);
  for (int i = 0; i < 5; ++i) m(i, i) = static_cast<double>(i) + 1.0;
  CHECK(offdiagonal_block_frobenius(m, 2) == 0.0);
  m(0, 1) = 3.0;  // inside the top block; still zero off-diagonal
  CHECK(offdiagonal_block_frobenius(m, 2) == 0.0);
  m(0, 4) = 2.0;
  CHECK(offdiagonal_block_frobenius(m, 2) == 2.0);
}

TEST_CASE("prop1: planted shared basis block-diagonalizes all datasets") {
  const Prop1Report r = check_prop1(12, 3, 4, 7);
  INFO("max_offdiag=" << r.max_offdiag_frob
                      << " control=" << r.negative_control_defect);
  CHECK(r.max_offdiag_frob < 1e-10);
  CHECK(r.negative_control_defect > 1e-2);
  CHECK(r.pass);
}

TEST_CASE("prop1 holds across seeds and dimensions") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Prop1Report r = check_prop1(16, 5, 3, seed);
    CHECK(r.pass);
  }
  const Prop1Report small = check_prop1(4, 1, 2, 3);
  CHECK(small.pass);
}

TEST_CASE("prop1 rejects invalid dimensions") {
  CHECK_THROWS_AS(check_prop1(4, 4, 2, 0), ValidationError);
  CHECK_THROWS_AS(check_prop1(4, 0, 2, 0), ValidationError);
  CHECK_THROWS_AS(check_prop1(4, 2, 0, 0), ValidationError);
}

TEST_CASE("prop2: all four assertions pass across 100 seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Prop2Report r = check_prop2(16, 2, 2, 10, seed);
    INFO("seed=" << seed << " decomposition_err=" << r.decomposition_err
                 << " rank=" << r.numerical_rank
                 << " bound_violation=" << r.max_bound_violation
                 << " min_eig_ratio=" << r.min_eig_ratio);
    CHECK(r.decomposition_err < 1e-11);
    CHECK(r.numerical_rank <= r.rank_bound);
    CHECK(r.max_bound_violation <= 0.0);
    CHECK(r.min_eig_ratio >= -1e-9);
    CHECK(r.factorization_err < 1e-11);
    CHECK(r.pass);
  }
}

TEST_CASE("prop2: rank collapses to at most d*r") {
  const Prop2Report r = check_prop2(16, 1, 1, 10, 5);
  CHECK(r.rank_bound == 1);
  CHECK(r.numerical_rank <= 1);
  CHECK(r.pass);
}

TEST_CASE("prop2: zero residual block makes the truncation exact") {
  // Reimplement the construction with Phi = 0 directly.
  CounterRng rng(11, "phi-zero");
  const int t = 8, r = 3, d = 2, l = 5;
  const Mat lambda = detail::random_psd(r, rng);
  Mat phi(t - r, t - r);  // zero
  const Mat sigma = detail::block_diag(lambda, phi);

  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j) {
      Mat mi(d, t), mj(d, t);
      CounterRng ri(100 + i, "op"), rj(100 + j, "op");
      for (double& x : mi.a) x = ri.next_gaussian();
      for (double& x : mj.a) x = rj.next_gaussian();

      Mat ai(d, r), aj(d, r);
      for (int row = 0; row < d; ++row)
        for (int col = 0; col < r; ++col) {
          ai(row, col) = mi(row, col);
          aj(row, col) = mj(row, col);
        }
      const double dense = trace(matmul_nt(matmul(mi, sigma), mj));
      const double top = trace(matmul_nt(matmul(ai, lambda), aj));
      CHECK(dense == Catch::Approx(top).margin(1e-12));
    }
}

TEST_CASE("prop2 error bound is tight for Phi = cI on the diagonal pairs") {
  // With Phi = c*I, tr(B Phi B^T) = c ||B||_F^2 while the bound gives
  // ||Phi||_2 ||B||_F ||B||_F = c ||B||_F^2: the ratio reaches 1.
  CounterRng rng(13, "tightness");
  const int t = 10, r = 4, d = 3;
  const double cval = 0.37;
  Mat b(d, t - r);
  for (double& x : b.a) x = rng.next_gaussian();

  const double gap = cval * frobenius_norm(b) * frobenius_norm(b);
  const double bound = cval * frobenius_norm(b) * frobenius_norm(b);
  CHECK(gap / bound > 0.99);

  // And through the library path: tr(B (cI) B^T) vs spectral-norm bound.
  Mat phi(t - r, t - r);
  for (int i = 0; i < t - r; ++i) phi(i, i) = cval;
  const double measured = trace(matmul_nt(matmul(b, phi), b));
  const double lib_bound = sym_spectral_norm(phi) * frobenius_norm(b) * frobenius_norm(b);
  CHECK(measured / lib_bound > 0.99);
  CHECK(measured <= lib_bound + 1e-10);
}

TEST_CASE("prop2 rejects invalid dimensions") {
  CHECK_THROWS_AS(check_prop2(4, 4, 2, 10, 0), ValidationError);
  CHECK_THROWS_AS(check_prop2(4, 0, 2, 10, 0), ValidationError);
  CHECK_THROWS_AS(check_prop2(4, 2, 0, 10, 0), ValidationError);
}

TEST_CASE("verify reports serialize with proposition, params, metrics, pass") {
  const nlohmann::json j1 = prop1_json(check_prop1(8, 2, 2, 1));
  CHECK(j1.at("proposition") == 1);
  CHECK(j1.at("params").at("T") == 8);
  CHECK(j1.at("metrics").contains("max_offdiag_frob"));
  CHECK(j1.at("pass").is_boolean());

  const nlohmann::json j2 = prop2_json(check_prop2(16, 2, 2, 10, 1));
  CHECK(j2.at("proposition") == 2);
  CHECK(j2.at("metrics").contains("numerical_rank"));
  CHECK(j2.at("pass") == true);
}
