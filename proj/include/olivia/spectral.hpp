#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "olivia/common.hpp"
#include "olivia/harmonizer.hpp"
#include "olivia/linalg.hpp"
#include "olivia/rng.hpp"

#include "json.hpp"

namespace olivia {

inline constexpr double kStandardizeEps = 1e-8;

/// Fixed-length univariate sequence tagged with its source domain.
struct Window {
  Vec values;
  std::string domain_id;

  std::size_t length() const { return values.size(); }

  void validate() const {
    require(values.size() >= 2, "window: length must be at least 2");
    require(all_finite(values), "window: non-finite sample");
  }
};

/// One-sided spectral energy over F = floor(T/2)+1 frequency bins.
struct Psd {
  Vec power;
  bool normalized = false;

  std::size_t bins() const { return power.size(); }

  void validate() const {
    require(!power.empty(), "psd: empty");
    for (double p : power) {
      require(std::isfinite(p) && p >= 0.0, "psd: negative or non-finite bin");
    }
    if (normalized) {
      double s = 0.0;
      for (double p : power) s += p;
      require(std::abs(s - 1.0) < 1e-9, "psd: flagged normalized but does not sum to 1");
    }
  }
};

enum class DivergenceKind { kKl, kJs };

/// Pairwise JS divergence matrix (nats) between domain-level PSDs.
struct DivergenceReport {
  std::vector<std::string> labels;
  Mat matrix;
};

struct MomentMatrix {
  Mat sigma;
  std::size_t sample_count = 0;
};

namespace detail {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// Direct O(T^2) DFT magnitudes via a precomputed twiddle table:
// cos/sin(2 pi (k t mod T) / T).
inline Vec periodogram_direct(const Vec& x) {
  const std::size_t t = x.size();
  const std::size_t f = t / 2 + 1;
  Vec cos_tab(t), sin_tab(t);
  for (std::size_t j = 0; j < t; ++j) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(t);
    cos_tab[j] = std::cos(a);
    sin_tab[j] = std::sin(a);
  }
  Vec s(f, 0.0);
  for (std::size_t k = 0; k < f; ++k) {
    double re = 0.0, im = 0.0;
    std::size_t idx = 0;
    for (std::size_t n = 0; n < t; ++n) {
      re += x[n] * cos_tab[idx];
      im -= x[n] * sin_tab[idx];
      idx += k;
      if (idx >= t) idx -= t;
    }
    s[k] = (re * re + im * im) / static_cast<double>(t);
  }
  return s;
}

// Iterative radix-2 Cooley-Tukey; T must be a power of two.
inline void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

inline Vec periodogram_fft(const Vec& x) {
  const std::size_t t = x.size();
  std::vector<std::complex<double>> a(t);
  for (std::size_t i = 0; i < t; ++i) a[i] = x[i];
  fft_radix2(a);
  Vec s(t / 2 + 1, 0.0);
  for (std::size_t k = 0; k < s.size(); ++k) s[k] = std::norm(a[k]) / static_cast<double>(t);
  return s;
}

}  // namespace detail

/// S_X(w_k) = |sum_t X_t e^{-j w_k t}|^2 / T at w_k = 2 pi k / T,
/// k = 0..floor(T/2). Radix-2 FFT for power-of-two T, direct summation
/// otherwise; the two paths agree within 1e-9 and the pairing doubles as a
/// self-check in the tests.
inline Psd periodogram(const Window& w) {
  w.validate();
  Psd p;
  p.power = detail::is_pow2(w.length()) ? detail::periodogram_fft(w.values)
                                        : detail::periodogram_direct(w.values);
  for (double& v : p.power)
    if (v < 0.0) v = 0.0;  // guard against -0 style round-off
  p.normalized = false;
  return p;
}

/// Dataset-level PSD: the mean periodogram normalized by its own sum (the
/// normalize-the-mean form, not the mean of normalized periodograms).
inline Psd dataset_psd(const std::vector<Window>& windows) {
  require(!windows.empty(), "dataset_psd: empty window list");
  const std::size_t t = windows.front().length();
  for (const Window& w : windows)
    require(w.length() == t, "dataset_psd: windows have mixed lengths");

  Vec mean(t / 2 + 1, 0.0);
  for (const Window& w : windows) {
    const Psd s = periodogram(w);
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += s.power[k];
  }
  const double n = static_cast<double>(windows.size());
  double sum = 0.0;
  for (double& v : mean) {
    v /= n;
    sum += v;
  }
  require(sum > 0.0, "dataset_psd: degenerate spectrum (aggregate power is zero)");
  Psd p;
  p.power.resize(mean.size());
  for (std::size_t k = 0; k < mean.size(); ++k) p.power[k] = mean[k] / sum;
  p.normalized = true;
  return p;
}

/// KL or JS divergence in nats between normalized PSDs. KL uses the
/// convention 0 log(0/q) = 0; a bin with p > 0 and q = 0 yields +infinity.
/// JS never hits that case because the mixture dominates both arguments, so
/// it stays within [0, ln 2].
inline double divergence(const Psd& p, const Psd& q, DivergenceKind kind) {
  require(p.normalized && q.normalized, "divergence: inputs must be normalized");
  require(p.bins() == q.bins(), "divergence: bin count mismatch");
  p.validate();
  q.validate();

  const auto kl = [](const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (a[k] == 0.0) continue;
      if (b[k] == 0.0) return std::numeric_limits<double>::infinity();
      s += a[k] * std::log(a[k] / b[k]);
    }
    return s;
  };

  if (kind == DivergenceKind::kKl) return kl(p.power, q.power);

  Vec m(p.bins());
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = 0.5 * (p.power[k] + q.power[k]);
  return 0.5 * kl(p.power, m) + 0.5 * kl(q.power, m);
}

/// (x - mean) / (population std + eps); a constant window maps to zeros via
/// the eps guard.
inline Window standardize_window(const Window& w, double eps = kStandardizeEps) {
  w.validate();
  require(eps > 0.0, "standardize: eps must be positive");
  const std::size_t t = w.length();
  double mu = 0.0;
  for (double v : w.values) mu += v;
  mu /= static_cast<double>(t);
  double var = 0.0;
  for (double v : w.values) var += (v - mu) * (v - mu);
  var /= static_cast<double>(t);
  const double denom = std::sqrt(var) + eps;
  Window out;
  out.domain_id = w.domain_id;
  out.values.resize(t);
  for (std::size_t i = 0; i < t; ++i) out.values[i] = (w.values[i] - mu) / denom;
  return out;
}

/// N windows of length T with start indices drawn uniformly from
/// [0, len-T] by the counter stream (seed, "windows").
inline std::vector<Window> sample_windows(const Vec& series, std::size_t t, std::size_t n,
                                          std::uint64_t seed, bool standardize,
                                          const std::string& domain_id = "") {
  require(t >= 2, "sample_windows: window length must be at least 2");
  require(series.size() >= t, "sample_windows: series shorter than window length");
  require(n >= 1, "sample_windows: need at least one window");

  CounterRng rng(seed, "windows");
  const std::uint64_t span = series.size() - t + 1;
  std::vector<Window> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t start = static_cast<std::size_t>(rng.next_below(span));
    Window w;
    w.domain_id = domain_id;
    w.values.assign(series.begin() + start, series.begin() + start + t);
    out.push_back(standardize ? standardize_window(w) : std::move(w));
  }
  return out;
}

/// E[x^T x] over the windows, reduced in index order.
inline MomentMatrix moment_matrix(const std::vector<Window>& windows) {
  require(!windows.empty(), "moment_matrix: empty window list");
  const std::size_t t = windows.front().length();
  for (const Window& w : windows)
    require(w.length() == t, "moment_matrix: windows have mixed lengths");

  MomentMatrix m;
  m.sigma = Mat(t, t);
  m.sample_count = windows.size();
  for (const Window& w : windows) {
    for (std::size_t i = 0; i < t; ++i) {
      const double xi = w.values[i];
      if (xi == 0.0) continue;
      for (std::size_t j = 0; j < t; ++j) m.sigma(i, j) += xi * w.values[j];
    }
  }
  const double n = static_cast<double>(windows.size());
  for (double& v : m.sigma.a) v /= n;
  return m;
}

/// Pairwise JS divergence between domain-level PSDs, optionally after
/// passing every window through the Aligner. This is the diagnostic form of
/// the harmonization objective: it measures the gap, nothing minimizes it
/// directly.
inline DivergenceReport harmonization_gap(
    const std::map<std::string, std::vector<Window>>& corpora,
    const HouseholderStack* transform = nullptr) {
  require(corpora.size() >= 2, "harmonization_gap: need at least two domains");

  std::size_t t = 0;
  for (const auto& [label, windows] : corpora) {
    require(!windows.empty(), "harmonization_gap: empty domain '" + label + "'");
    for (const Window& w : windows) {
      if (t == 0) t = w.length();
      require(w.length() == t, "harmonization_gap: windows have mixed lengths");
    }
  }
  if (transform)
    require(transform->dim == t, "harmonization_gap: transform dimension does not match windows");

  DivergenceReport rep;
  std::vector<Psd> psds;
  for (const auto& [label, windows] : corpora) {
    rep.labels.push_back(label);
    if (transform) {
      std::vector<Window> aligned;
      aligned.reserve(windows.size());
      for (const Window& w : windows)
        aligned.push_back(Window{align(*transform, w.values), w.domain_id});
      psds.push_back(dataset_psd(aligned));
    } else {
      psds.push_back(dataset_psd(windows));
    }
  }

  const std::size_t n = psds.size();
  rep.matrix = Mat(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double js = divergence(psds[i], psds[j], DivergenceKind::kJs);
      rep.matrix(i, j) = js;
      rep.matrix(j, i) = js;
    }
  }
  return rep;
}

inline double mean_offdiagonal(const DivergenceReport& rep) {
  const std::size_t n = rep.labels.size();
  if (n < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) s += rep.matrix(i, j);
  return s / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

/// {"T":int,"labels":[...],"psd":{label:[...]},"js_matrix":[[...]]}
inline nlohmann::json spectral_report_json(std::size_t t,
                                           const std::vector<std::string>& labels,
                                           const std::map<std::string, Psd>& psds,
                                           const Mat* js_matrix = nullptr) {
  nlohmann::json j;
  j["T"] = t;
  j["labels"] = labels;
  nlohmann::json psd_obj = nlohmann::json::object();
  for (const auto& [label, p] : psds) psd_obj[label] = p.power;
  j["psd"] = psd_obj;
  if (js_matrix) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < js_matrix->rows; ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t k = 0; k < js_matrix->cols; ++k) row.push_back((*js_matrix)(i, k));
      rows.push_back(row);
    }
    j["js_matrix"] = rows;
  }
  return j;
}

/// Headerless CSV, T rows by T columns, for external heatmap plotting.
inline void write_matrix_csv(std::ostream& os, const Mat& m) {
  os.precision(17);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      if (j) os << ',';
      os << m(i, j);
    }
    os << '\n';
  }
}

}  // namespace olivia
