#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "olivia/common.hpp"
#include "olivia/linalg.hpp"
#include "olivia/rng.hpp"

namespace olivia {

/// Per-mechanism parameters. Each head owns one projection W_h (d x P) that
/// serves as input and (transposed) output map. The per-resonator offsets
/// break the degeneracy of the shared query template 1_M (x) r: without
/// them every column of the pre-softmax logits is identical and the M x M
/// interaction collapses. literal_resonators=true drops the offsets and
/// reproduces the printed formula verbatim.
struct HarmonicAttentionParams {
  int heads = 1;       // H
  int proj_dim = 1;    // P
  int resonators = 1;  // M
  double gamma = 0.1;
  bool literal_resonators = false;
  std::vector<Mat> proj;     // H entries, d x P
  std::vector<Mat> offsets;  // H entries, M x P

  int embed_dim() const { return proj.empty() ? 0 : static_cast<int>(proj.front().rows); }

  void validate(std::size_t l, std::size_t d) const {
    require(heads >= 1 && proj_dim >= 1 && resonators >= 1,
            "attention params: H, P, M must be positive");
    require(static_cast<std::size_t>(resonators) <= l,
            "attention params: more resonators than tokens (M > L)");
    require(proj.size() == static_cast<std::size_t>(heads),
            "attention params: projection count != heads");
    require(offsets.size() == static_cast<std::size_t>(heads),
            "attention params: offset count != heads");
    for (const Mat& w : proj)
      require(w.rows == d && w.cols == static_cast<std::size_t>(proj_dim),
              "attention params: projection shape mismatch");
    for (const Mat& e : offsets)
      require(e.rows == static_cast<std::size_t>(resonators) &&
                  e.cols == static_cast<std::size_t>(proj_dim),
              "attention params: offset shape mismatch");
  }

  static HarmonicAttentionParams init(int d, int h, int p, int m, double gamma,
                                      bool literal, CounterRng& rng) {
    HarmonicAttentionParams out;
    out.heads = h;
    out.proj_dim = p;
    out.resonators = m;
    out.gamma = gamma;
    out.literal_resonators = literal;
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (int i = 0; i < h; ++i) {
      Mat w(d, p);
      for (double& x : w.a) x = (2.0 * rng.next_unit() - 1.0) * bound;
      out.proj.push_back(std::move(w));
      Mat e(m, p);
      for (double& x : e.a) x = rng.next_gaussian() * 0.02;
      out.offsets.push_back(std::move(e));
    }
    return out;
  }
};

/// Token-to-resonator aggregation matrix; every column is a distribution
/// over the L tokens.
struct AggregationWeights {
  Mat a;  // L x M
};

struct AttentionGrads {
  std::vector<Mat> d_proj;
  std::vector<Mat> d_offsets;
  double d_gamma = 0.0;
  Mat d_tokens;  // L x d
};

namespace detail {

inline void softmax_columns(Mat& m) {
  for (std::size_t j = 0; j < m.cols; ++j) {
    double mx = m(0, j);
    for (std::size_t i = 1; i < m.rows; ++i) mx = std::max(mx, m(i, j));
    double sum = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) {
      m(i, j) = std::exp(m(i, j) - mx);
      sum += m(i, j);
    }
    for (std::size_t i = 0; i < m.rows; ++i) m(i, j) /= sum;
  }
}

inline void softmax_rows(Mat& m) {
  for (std::size_t i = 0; i < m.rows; ++i) {
    auto r = m.row(i);
    double mx = r[0];
    for (double v : r) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : r) v /= sum;
  }
}

// d logits for y = softmax(logits) along rows: dl = y * (dy - sum(dy*y)).
inline Mat softmax_rows_backward(const Mat& y, const Mat& dy) {
  Mat dl(y.rows, y.cols);
  for (std::size_t i = 0; i < y.rows; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < y.cols; ++j) acc += dy(i, j) * y(i, j);
    for (std::size_t j = 0; j < y.cols; ++j) dl(i, j) = y(i, j) * (dy(i, j) - acc);
  }
  return dl;
}

inline Mat softmax_columns_backward(const Mat& y, const Mat& dy) {
  Mat dl(y.rows, y.cols);
  for (std::size_t j = 0; j < y.cols; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.rows; ++i) acc += dy(i, j) * y(i, j);
    for (std::size_t i = 0; i < y.rows; ++i) dl(i, j) = y(i, j) * (dy(i, j) - acc);
  }
  return dl;
}

}  // namespace detail

struct HarmonicAttentionCache {
  Mat tokens;                 // Z, L x d
  std::vector<Mat> projected; // Z~ per head, L x P
  std::vector<Vec> resonator_template;  // r~ per head, P
  std::vector<Mat> agg;       // A per head, L x M
  std::vector<Mat> resonated; // R per head, M x P
  std::vector<Mat> interact;  // row-softmax(R R^T / sqrt(P)) per head, M x M
  std::vector<Mat> activated; // ResAct(R) per head, M x P
  std::vector<Mat> head_out;  // A * ResAct per head, L x P
  Mat combined;               // sum_h Head W_h^T, L x d
};

/// Aggregation weights for one head: logits[l][m] = <Z~_l, r~ + E_m>/sqrt(P)
/// followed by a column-wise max-subtracted softmax over tokens.
inline AggregationWeights aggregation_weights(const Mat& tokens,
                                              const HarmonicAttentionParams& params,
                                              int head) {
  params.validate(tokens.rows, tokens.cols);
  require(head >= 0 && head < params.heads, "aggregation_weights: head out of range");
  const std::size_t l = tokens.rows;
  const std::size_t d = tokens.cols;
  const std::size_t p = static_cast<std::size_t>(params.proj_dim);
  const std::size_t m = static_cast<std::size_t>(params.resonators);
  const Mat& w = params.proj[head];

  const Mat zt = matmul(tokens, w);
  Vec g(d, 0.0);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < d; ++j) g[j] += tokens(i, j);
  for (double& v : g) v /= static_cast<double>(l);
  Vec rt(p, 0.0);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < p; ++k) rt[k] += g[j] * w(j, k);

  const double scale = 1.0 / std::sqrt(static_cast<double>(p));
  Mat logits(l, m);
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t r = 0; r < m; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        const double q = params.literal_resonators ? rt[k] : rt[k] + params.offsets[head](r, k);
        acc += zt(i, k) * q;
      }
      require(std::isfinite(acc), "aggregation_weights: non-finite logit");
      logits(i, r) = acc * scale;
    }
  }
  detail::softmax_columns(logits);
  return AggregationWeights{std::move(logits)};
}

/// HarmonicAttention: tokens aggregate into M resonators, resonators
/// interact in the compact M x M space, and the result is redistributed with
/// the same aggregation weights. out = Z + gamma * sum_h Head_h W_h^T.
/// `mul_count`, when given, accumulates the exact number of scalar
/// multiplications performed by the matrix kernels.
inline Mat harmonic_attention(const Mat& tokens, const HarmonicAttentionParams& params,
                              HarmonicAttentionCache* cache = nullptr,
                              std::uint64_t* mul_count = nullptr) {
  params.validate(tokens.rows, tokens.cols);
  require(all_finite(tokens.a), "harmonic_attention: non-finite token");
  const std::size_t l = tokens.rows;
  const std::size_t d = tokens.cols;
  const std::size_t p = static_cast<std::size_t>(params.proj_dim);
  const std::size_t m = static_cast<std::size_t>(params.resonators);
  const double scale = 1.0 / std::sqrt(static_cast<double>(p));

  if (cache) {
    *cache = HarmonicAttentionCache{};
    cache->tokens = tokens;
  }

  Vec g(d, 0.0);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < d; ++j) g[j] += tokens(i, j);
  for (double& v : g) v /= static_cast<double>(l);

  Mat combined(l, d);
  for (int head = 0; head < params.heads; ++head) {
    const Mat& w = params.proj[head];

    Mat zt = matmul(tokens, w);
    if (mul_count) *mul_count += l * d * p;

    Vec rt(p, 0.0);
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < p; ++k) rt[k] += g[j] * w(j, k);
    if (mul_count) *mul_count += d * p;

    Mat agg(l, m);
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k < p; ++k) {
          const double q =
              params.literal_resonators ? rt[k] : rt[k] + params.offsets[head](r, k);
          acc += zt(i, k) * q;
        }
        agg(i, r) = acc * scale;
      }
    if (mul_count) *mul_count += l * m * (p + 1);
    detail::softmax_columns(agg);

    Mat res = matmul_tn(agg, zt);  // M x P
    if (mul_count) *mul_count += m * l * p;

    Mat inter = matmul_nt(res, res);  // M x M
    for (double& v : inter.a) v *= scale;
    if (mul_count) *mul_count += m * m * p + m * m;
    detail::softmax_rows(inter);

    Mat act = matmul(inter, res);  // M x P
    if (mul_count) *mul_count += m * m * p;

    Mat head_out = matmul(agg, act);  // L x P
    if (mul_count) *mul_count += l * m * p;

    // Back to token space with the tied output projection W_h^T.
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t k = 0; k < p; ++k) {
        const double ho = head_out(i, k);
        if (ho == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) combined(i, j) += ho * w(j, k);
      }
    if (mul_count) *mul_count += l * p * d;

    if (cache) {
      cache->projected.push_back(std::move(zt));
      cache->resonator_template.push_back(rt);
      cache->agg.push_back(std::move(agg));
      cache->resonated.push_back(std::move(res));
      cache->interact.push_back(std::move(inter));
      cache->activated.push_back(std::move(act));
      cache->head_out.push_back(std::move(head_out));
    }
  }

  Mat out = tokens;
  for (std::size_t i = 0; i < out.a.size(); ++i) out.a[i] += params.gamma * combined.a[i];
  if (mul_count) *mul_count += l * d;
  require(all_finite(out.a), "harmonic_attention: non-finite output");
  if (cache) cache->combined = std::move(combined);
  return out;
}

/// Exact reverse pass for harmonic_attention given the forward cache.
inline AttentionGrads harmonic_attention_backward(const HarmonicAttentionCache& cache,
                                                  const HarmonicAttentionParams& params,
                                                  const Mat& d_out) {
  const Mat& tokens = cache.tokens;
  const std::size_t l = tokens.rows;
  const std::size_t d = tokens.cols;
  const std::size_t p = static_cast<std::size_t>(params.proj_dim);
  const std::size_t m = static_cast<std::size_t>(params.resonators);
  const double scale = 1.0 / std::sqrt(static_cast<double>(p));

  AttentionGrads grads;
  grads.d_tokens = d_out;  // residual path
  grads.d_proj.assign(params.heads, Mat(d, p));
  grads.d_offsets.assign(params.heads, Mat(m, p));
  for (std::size_t i = 0; i < d_out.a.size(); ++i)
    grads.d_gamma += d_out.a[i] * cache.combined.a[i];

  Vec g(d, 0.0);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < d; ++j) g[j] += tokens(i, j);
  for (double& v : g) v /= static_cast<double>(l);

  Vec d_g(d, 0.0);
  for (int head = 0; head < params.heads; ++head) {
    const Mat& w = params.proj[head];
    const Mat& zt = cache.projected[head];
    const Vec& rt = cache.resonator_template[head];
    const Mat& agg = cache.agg[head];
    const Mat& res = cache.resonated[head];
    const Mat& inter = cache.interact[head];
    const Mat& act = cache.activated[head];
    const Mat& head_out = cache.head_out[head];

    // combined += head_out W^T, scaled by gamma at the output.
    Mat d_head(l, p);
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t k = 0; k < p; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += params.gamma * d_out(i, j) * w(j, k);
        d_head(i, k) = acc;
      }
    Mat& d_w = grads.d_proj[head];
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < p; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < l; ++i) acc += params.gamma * d_out(i, j) * head_out(i, k);
        d_w(j, k) += acc;
      }

    // head_out = agg * act
    Mat d_agg = matmul_nt(d_head, act);   // L x M
    Mat d_act = matmul_tn(agg, d_head);   // M x P

    // act = inter * res
    Mat d_inter = matmul_nt(d_act, res);  // M x M
    Mat d_res = matmul_tn(inter, d_act);  // M x P

    // inter = row-softmax(res res^T * scale)
    const Mat d_logits_mm = detail::softmax_rows_backward(inter, d_inter);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const double c = (d_logits_mm(i, j) + d_logits_mm(j, i)) * scale;
        if (c == 0.0) continue;
        for (std::size_t k = 0; k < p; ++k) d_res(i, k) += c * res(j, k);
      }

    // res = agg^T zt
    Mat d_zt = matmul(agg, d_res);  // L x P
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (std::size_t k = 0; k < p; ++k) acc += zt(i, k) * d_res(r, k);
        d_agg(i, r) += acc;
      }

    // agg = column-softmax(logits), logits = zt (rt + E_m)^T * scale
    const Mat d_logits = detail::softmax_columns_backward(agg, d_agg);
    Vec d_rt(p, 0.0);
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t r = 0; r < m; ++r) {
        const double c = d_logits(i, r) * scale;
        if (c == 0.0) continue;
        for (std::size_t k = 0; k < p; ++k) {
          const double q =
              params.literal_resonators ? rt[k] : rt[k] + params.offsets[head](r, k);
          d_zt(i, k) += c * q;
          d_rt[k] += c * zt(i, k);
          if (!params.literal_resonators) grads.d_offsets[head](r, k) += c * zt(i, k);
        }
      }

    // rt = g W
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        acc += w(j, k) * d_rt[k];
        d_w(j, k) += g[j] * d_rt[k];
      }
      d_g[j] += acc;
    }

    // zt = tokens W
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < p; ++k) acc += d_zt(i, k) * w(j, k);
        grads.d_tokens(i, j) += acc;
      }
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < p; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < l; ++i) acc += tokens(i, j) * d_zt(i, k);
        d_w(j, k) += acc;
      }
  }

  // g = column mean of tokens
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < d; ++j)
      grads.d_tokens(i, j) += d_g[j] / static_cast<double>(l);

  return grads;
}

struct FullAttentionCache {
  Mat tokens;
  std::vector<Mat> projected;  // Z~ per head, L x P
  std::vector<Mat> attn;       // row-stochastic L x L per head
  std::vector<Mat> mixed;      // attn * Z~ per head, L x P
  Mat combined;
};

/// Dense multi-head self-attention baseline with the same tied projection,
/// residual, and gamma shape as HarmonicAttention: queries, keys and values
/// all equal Z W_h. Without a cache the L x L matrix is never materialized
/// (one logit row at a time), which keeps the scaling benchmark memory-flat.
inline Mat full_attention(const Mat& tokens, const HarmonicAttentionParams& params,
                          FullAttentionCache* cache = nullptr,
                          std::uint64_t* mul_count = nullptr) {
  require(params.heads >= 1 && params.proj_dim >= 1,
          "full_attention: H and P must be positive");
  require(params.proj.size() == static_cast<std::size_t>(params.heads),
          "full_attention: projection count != heads");
  for (const Mat& w : params.proj)
    require(w.rows == tokens.cols && w.cols == static_cast<std::size_t>(params.proj_dim),
            "full_attention: projection shape mismatch");
  require(all_finite(tokens.a), "full_attention: non-finite token");

  const std::size_t l = tokens.rows;
  const std::size_t d = tokens.cols;
  const std::size_t p = static_cast<std::size_t>(params.proj_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(p));

  if (cache) {
    *cache = FullAttentionCache{};
    cache->tokens = tokens;
  }

  Mat combined(l, d);
  Vec logits(l);
  for (int head = 0; head < params.heads; ++head) {
    const Mat& w = params.proj[head];
    Mat zt = matmul(tokens, w);
    if (mul_count) *mul_count += l * d * p;

    Mat attn_rows(cache ? l : 0, cache ? l : 0);
    Mat mixed(l, p);
    for (std::size_t i = 0; i < l; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < l; ++j) {
        logits[j] = dot(zt.row(i), zt.row(j)) * scale;
        mx = std::max(mx, logits[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < l; ++j) {
        logits[j] = std::exp(logits[j] - mx);
        sum += logits[j];
      }
      for (std::size_t j = 0; j < l; ++j) {
        const double a = logits[j] / sum;
        if (cache) attn_rows(i, j) = a;
        for (std::size_t k = 0; k < p; ++k) mixed(i, k) += a * zt(j, k);
      }
    }
    if (mul_count) *mul_count += l * l * (p + 1) + l * l * p;

    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t k = 0; k < p; ++k) {
        const double v = mixed(i, k);
        if (v == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) combined(i, j) += v * w(j, k);
      }
    if (mul_count) *mul_count += l * p * d;

    if (cache) {
      cache->projected.push_back(std::move(zt));
      cache->attn.push_back(std::move(attn_rows));
      cache->mixed.push_back(std::move(mixed));
    }
  }

  Mat out = tokens;
  for (std::size_t i = 0; i < out.a.size(); ++i) out.a[i] += params.gamma * combined.a[i];
  if (mul_count) *mul_count += l * d;
  require(all_finite(out.a), "full_attention: non-finite output");
  if (cache) cache->combined = std::move(combined);
  return out;
}

inline AttentionGrads full_attention_backward(const FullAttentionCache& cache,
                                              const HarmonicAttentionParams& params,
                                              const Mat& d_out) {
  const Mat& tokens = cache.tokens;
  const std::size_t l = tokens.rows;
  const std::size_t d = tokens.cols;
  const std::size_t p = static_cast<std::size_t>(params.proj_dim);
  const std::size_t m = static_cast<std::size_t>(params.resonators);
  const double scale = 1.0 / std::sqrt(static_cast<double>(p));

  AttentionGrads grads;
  grads.d_tokens = d_out;
  grads.d_proj.assign(params.heads, Mat(d, p));
  grads.d_offsets.assign(params.heads, Mat(m, p));
  for (std::size_t i = 0; i < d_out.a.size(); ++i)
    grads.d_gamma += d_out.a[i] * cache.combined.a[i];

  for (int head = 0; head < params.heads; ++head) {
    const Mat& w = params.proj[head];
    const Mat& zt = cache.projected[head];
    const Mat& attn = cache.attn[head];
    const Mat& mixed = cache.mixed[head];
    Mat& d_w = grads.d_proj[head];

    Mat d_mixed(l, p);
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t k = 0; k < p; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += params.gamma * d_out(i, j) * w(j, k);
        d_mixed(i, k) = acc;
      }
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < p; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < l; ++i) acc += params.gamma * d_out(i, j) * mixed(i, k);
        d_w(j, k) += acc;
      }

    // mixed = attn * zt
    Mat d_attn = matmul_nt(d_mixed, zt);  // L x L
    Mat d_zt = matmul_tn(attn, d_mixed);  // L x P

    // attn = row-softmax(zt zt^T * scale)
    const Mat d_logits = detail::softmax_rows_backward(attn, d_attn);
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < l; ++j) {
        const double c = d_logits(i, j) * scale;
        if (c == 0.0) continue;
        for (std::size_t k = 0; k < p; ++k) {
          d_zt(i, k) += c * zt(j, k);
          d_zt(j, k) += c * zt(i, k);
        }
      }

    // zt = tokens W
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < p; ++k) acc += d_zt(i, k) * w(j, k);
        grads.d_tokens(i, j) += acc;
      }
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < p; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < l; ++i) acc += tokens(i, j) * d_zt(i, k);
        d_w(j, k) += acc;
      }
  }
  return grads;
}

}  // namespace olivia
