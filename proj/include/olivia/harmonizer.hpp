#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "olivia/common.hpp"
#include "olivia/linalg.hpp"
#include "olivia/rng.hpp"

#include "json.hpp"

namespace olivia {

/// Reflections shorter than this behave as the identity (and receive zero
/// gradient), which removes the normalization singularity at v = 0.
inline constexpr double kReflectionNormFloor = 1e-12;

/// K raw (unnormalized) Householder reflection vectors of dimension T.
/// Vectors are normalized to unit length at every use, so the stored
/// parameters stay unconstrained for the optimizer while each H_k remains a
/// true reflection. The induced orthogonal map is Q = H_1 H_2 ... H_K with
/// H_k = I - 2 v_k v_k^T.
struct HouseholderStack {
  std::size_t dim = 0;
  std::vector<Vec> vectors;  // K entries, each of length dim

  std::size_t count() const { return vectors.size(); }

  void validate() const {
    require(dim >= 1, "householder stack: dimension must be positive");
    for (const Vec& v : vectors) {
      require(v.size() == dim, "householder stack: vector length mismatch");
      require(all_finite(v), "householder stack: non-finite entry");
    }
  }

  /// K must be even: vector 2i+1 duplicates vector 2i (an i.i.d. unit
  /// Gaussian direction), so adjacent reflections cancel and Q starts as
  /// the identity while every vector remains independently trainable.
  static HouseholderStack paired_identity(std::size_t t, std::size_t k, CounterRng& rng) {
    require(k % 2 == 0, "paired-identity init requires an even reflection count");
    HouseholderStack s;
    s.dim = t;
    s.vectors.reserve(k);
    for (std::size_t i = 0; i < k / 2; ++i) {
      Vec v(t);
      for (double& x : v) x = rng.next_gaussian();
      const double n = norm2(v);
      if (n > 0.0)
        for (double& x : v) x /= n;
      s.vectors.push_back(v);
      s.vectors.push_back(v);
    }
    return s;
  }

  /// Independent Gaussian directions; Q is then a random orthogonal matrix.
  static HouseholderStack random_init(std::size_t t, std::size_t k, CounterRng& rng) {
    HouseholderStack s;
    s.dim = t;
    s.vectors.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      Vec v(t);
      for (double& x : v) x = rng.next_gaussian();
      const double n = norm2(v);
      if (n > 0.0)
        for (double& x : v) x /= n;
      s.vectors.push_back(std::move(v));
    }
    return s;
  }
};

namespace detail {

// y := (I - 2 vhat vhat^T) y for the normalized direction of v; identity if
// ||v|| is below the floor.
inline void apply_reflection(const Vec& v, std::span<double> y) {
  const double n = norm2(v);
  if (n < kReflectionNormFloor) return;
  double proj = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) proj += v[i] * y[i];
  const double c = 2.0 * proj / (n * n);
  for (std::size_t i = 0; i < v.size(); ++i) y[i] -= c * v[i];
}

// A := (I - 2 vhat vhat^T) A applied to each column, i.e. a left-multiply.
inline void apply_reflection_rows(const Vec& v, Mat& m) {
  const double n = norm2(v);
  if (n < kReflectionNormFloor) return;
  const std::size_t t = v.size();
  Vec proj(m.cols, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    const double* row = m.a.data() + i * m.cols;
    for (std::size_t j = 0; j < m.cols; ++j) proj[j] += vi * row[j];
  }
  const double s = 2.0 / (n * n);
  for (std::size_t i = 0; i < t; ++i) {
    const double c = s * v[i];
    if (c == 0.0) continue;
    double* row = m.a.data() + i * m.cols;
    for (std::size_t j = 0; j < m.cols; ++j) row[j] -= c * proj[j];
  }
}

}  // namespace detail

/// Dense Q = H_1 H_2 ... H_K, materialized in O(K T^2). The implicit align /
/// restore paths below are the default; this is for diagnostics, oracles,
/// and one-shot inverse application where a T x T buffer is acceptable.
inline Mat build_q(const HouseholderStack& stack) {
  stack.validate();
  Mat q = Mat::identity(stack.dim);
  for (std::size_t k = stack.count(); k-- > 0;)
    detail::apply_reflection_rows(stack.vectors[k], q);
  return q;
}

/// Aligner: x -> x Q^T, computed as K sequential rank-1 updates (H_K is
/// applied first). O(KT) per call; Q is never materialized.
inline Vec align(const HouseholderStack& stack, std::span<const double> x) {
  require(x.size() == stack.dim, "align: input length does not match stack dimension");
  Vec y(x.begin(), x.end());
  for (std::size_t k = stack.count(); k-- > 0;)
    detail::apply_reflection(stack.vectors[k], y);
  return y;
}

/// Restorer: y -> y Q, the exact inverse of align (reflections in reversed
/// order).
inline Vec restore(const HouseholderStack& stack, std::span<const double> y) {
  require(y.size() == stack.dim, "restore: input length does not match stack dimension");
  Vec x(y.begin(), y.end());
  for (std::size_t k = 0; k < stack.count(); ++k)
    detail::apply_reflection(stack.vectors[k], x);
  return x;
}

struct ReflectionGrads {
  std::vector<Vec> grad_vectors;  // w.r.t. the raw (unnormalized) vectors
  Vec grad_input;
};

namespace detail {

// Shared reverse pass for a chain of reflections applied in `order` (indices
// into stack.vectors, first-applied first). Computes exact gradients of
// <upstream, chain(x)> w.r.t. every raw vector and the input, including the
// Jacobian (I - vhat vhat^T)/||v|| of the unit normalization.
inline ReflectionGrads reflection_chain_backward(const HouseholderStack& stack,
                                                 std::span<const double> x,
                                                 std::span<const double> upstream,
                                                 const std::vector<std::size_t>& order) {
  require(x.size() == stack.dim, "reflection backward: input length mismatch");
  require(upstream.size() == stack.dim, "reflection backward: upstream length mismatch");
  const std::size_t t = stack.dim;
  const std::size_t k = order.size();

  // Forward, retaining the input of every reflection.
  std::vector<Vec> states;
  states.reserve(k + 1);
  states.emplace_back(x.begin(), x.end());
  for (std::size_t s = 0; s < k; ++s) {
    Vec y = states.back();
    apply_reflection(stack.vectors[order[s]], y);
    states.push_back(std::move(y));
  }

  ReflectionGrads out;
  out.grad_vectors.assign(stack.count(), Vec(t, 0.0));
  Vec g(upstream.begin(), upstream.end());

  for (std::size_t s = k; s-- > 0;) {
    const Vec& v = stack.vectors[order[s]];
    const Vec& in = states[s];
    const double n = norm2(v);
    if (n < kReflectionNormFloor) continue;  // identity; zero gradient to v

    Vec vhat(t);
    for (std::size_t i = 0; i < t; ++i) vhat[i] = v[i] / n;
    const double vs = dot(vhat, in);
    const double gv = dot(g, vhat);

    // d<g, H in>/d vhat = -2 (vhat.in) g - 2 (g.vhat) in
    Vec gh(t);
    for (std::size_t i = 0; i < t; ++i) gh[i] = -2.0 * (vs * g[i] + gv * in[i]);
    // Chain through vhat = v/||v||.
    const double ghv = dot(gh, vhat);
    Vec& gr = out.grad_vectors[order[s]];
    for (std::size_t i = 0; i < t; ++i) gr[i] += (gh[i] - ghv * vhat[i]) / n;

    // Propagate to the reflection input: H is symmetric.
    apply_reflection(v, g);
  }
  out.grad_input = std::move(g);
  return out;
}

}  // namespace detail

/// Gradients of <upstream, align(stack, x)>.
inline ReflectionGrads align_backward(const HouseholderStack& stack,
                                      std::span<const double> x,
                                      std::span<const double> upstream) {
  std::vector<std::size_t> order(stack.count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = stack.count() - 1 - i;
  return detail::reflection_chain_backward(stack, x, upstream, order);
}

/// Gradients of <upstream, restore(stack, y)>.
inline ReflectionGrads restore_backward(const HouseholderStack& stack,
                                        std::span<const double> y,
                                        std::span<const double> upstream) {
  std::vector<std::size_t> order(stack.count());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  return detail::reflection_chain_backward(stack, y, upstream, order);
}

inline nlohmann::json stack_to_json(const HouseholderStack& stack) {
  nlohmann::json j;
  j["T"] = stack.dim;
  j["K"] = stack.count();
  j["vectors"] = stack.vectors;
  return j;
}

inline HouseholderStack stack_from_json(const nlohmann::json& j) {
  require(j.contains("T") && j.contains("K") && j.contains("vectors"),
          "householder stack json: missing T, K, or vectors");
  HouseholderStack s;
  s.dim = j.at("T").get<std::size_t>();
  s.vectors = j.at("vectors").get<std::vector<Vec>>();
  require(s.vectors.size() == j.at("K").get<std::size_t>(),
          "householder stack json: K does not match vector count");
  s.validate();
  return s;
}

}  // namespace olivia
