#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "olivia/common.hpp"
#include "olivia/rng.hpp"
#include "olivia/spectral.hpp"

#include "json.hpp"

namespace olivia {

struct SyntheticComponent {
  int frequency_bin = 0;
  double amplitude = 1.0;
  double phase = 0.0;
};

/// Recipe for one synthetic domain: a sum of sinusoids at integer frequency
/// bins of the full series length, plus optional linear trend and Gaussian
/// noise. Stands in for the heterogeneous multi-domain pretraining corpora.
struct SyntheticDomainSpec {
  std::string domain_id;
  std::vector<SyntheticComponent> components;
  double noise_std = 0.0;
  double trend_slope = 0.0;
  std::size_t length = 0;

  void validate() const {
    require(!domain_id.empty(), "domain spec: empty domain_id");
    require(length >= 2, "domain spec: length must be at least 2");
    for (const SyntheticComponent& c : components)
      require(c.frequency_bin >= 0 &&
                  static_cast<std::size_t>(c.frequency_bin) <= length / 2,
              "domain spec: frequency bin outside [0, length/2]");
    require(noise_std >= 0.0, "domain spec: negative noise std");
  }
};

/// x_t = slope*t + sum_c amp*sin(2 pi bin t / length + phase) + noise*N(0,1),
/// with the noise stream keyed by (seed, "domain:<id>").
inline Vec generate_domain(const SyntheticDomainSpec& spec, std::uint64_t seed) {
  spec.validate();
  CounterRng rng(seed, "domain:" + spec.domain_id);
  Vec x(spec.length, 0.0);
  for (std::size_t t = 0; t < spec.length; ++t) {
    double v = spec.trend_slope * static_cast<double>(t);
    for (const SyntheticComponent& c : spec.components)
      v += c.amplitude * std::sin(2.0 * std::numbers::pi * c.frequency_bin *
                                      static_cast<double>(t) /
                                      static_cast<double>(spec.length) +
                                  c.phase);
    if (spec.noise_std > 0.0) v += spec.noise_std * rng.next_gaussian();
    x[t] = v;
  }
  return x;
}

/// Multi-domain window collection with a 9:1 train/validation split by
/// shuffled window index (|train| = floor(0.9 n), remainder to validation).
struct Corpus {
  std::map<std::string, std::vector<Window>> train;
  std::map<std::string, std::vector<Window>> val;

  std::size_t window_len() const {
    for (const auto& [id, ws] : train)
      if (!ws.empty()) return ws.front().length();
    for (const auto& [id, ws] : val)
      if (!ws.empty()) return ws.front().length();
    return 0;
  }

  std::size_t train_count() const {
    std::size_t n = 0;
    for (const auto& [id, ws] : train) n += ws.size();
    return n;
  }
};

inline Corpus split_windows(const std::map<std::string, std::vector<Window>>& by_domain,
                            std::uint64_t seed) {
  Corpus corpus;
  for (const auto& [id, windows] : by_domain) {
    const std::size_t n = windows.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    CounterRng rng(seed, "split:" + id);
    for (std::size_t i = n; i > 1; --i)
      std::swap(idx[i - 1], idx[rng.next_below(i)]);
    const std::size_t n_train = static_cast<std::size_t>(0.9 * static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      (i < n_train ? corpus.train[id] : corpus.val[id]).push_back(windows[idx[i]]);
    }
  }
  return corpus;
}

inline Corpus build_corpus(const std::vector<SyntheticDomainSpec>& specs, std::size_t t,
                           std::size_t windows_per_domain, std::uint64_t seed) {
  require(!specs.empty(), "build_corpus: no domain specs");
  std::map<std::string, std::vector<Window>> by_domain;
  for (const SyntheticDomainSpec& spec : specs) {
    require(by_domain.count(spec.domain_id) == 0,
            "build_corpus: duplicate domain " + spec.domain_id);
    const Vec series = generate_domain(spec, seed);
    const std::uint64_t domain_seed = CounterRng(seed, "corpus:" + spec.domain_id).next_u64();
    by_domain[spec.domain_id] =
        sample_windows(series, t, windows_per_domain, domain_seed, false, spec.domain_id);
  }
  return split_windows(by_domain, seed);
}

/// Three disjoint-band presets plus one broadband preset, echoing the
/// heterogeneity of real multi-domain corpora at desk scale. Band positions
/// scale with the window length: a window of `window_len` samples sees the
/// low/mid/high domains at roughly bins 2, 10, 30 of a length-128 window.
inline std::vector<SyntheticDomainSpec> preset_specs(std::size_t series_len,
                                                     std::size_t window_len) {
  require(window_len >= 8, "presets: window length must be at least 8");
  require(series_len >= window_len && series_len % window_len == 0,
          "presets: series length must be a multiple of the window length");
  const std::size_t ratio = series_len / window_len;
  const auto window_bin = [&](std::size_t b128) {
    const std::size_t scaled = b128 * window_len / 128;
    return std::clamp<std::size_t>(scaled, 1, window_len / 2 - 1);
  };
  const int low = static_cast<int>(window_bin(2) * ratio);
  const int mid = static_cast<int>(std::max(window_bin(10), window_bin(2) + 1) * ratio);
  const int high = static_cast<int>(std::max(window_bin(30), window_bin(10) + 1) * ratio);

  std::vector<SyntheticDomainSpec> specs;
  specs.push_back({"low_band", {{low, 1.0, 0.0}}, 0.05, 0.0, series_len});
  specs.push_back({"mid_band", {{mid, 1.0, 0.7}}, 0.05, 0.0, series_len});
  specs.push_back({"high_band", {{high, 1.0, 1.4}}, 0.05, 0.0, series_len});
  SyntheticDomainSpec broad{"broadband", {}, 0.1, 0.0, series_len};
  for (std::size_t b128 : {3u, 7u, 15u, 27u})
    broad.components.push_back(
        {static_cast<int>(window_bin(b128) * ratio), 0.6, 0.1 * b128});
  specs.push_back(broad);
  return specs;
}

/// CSV with header `series_id,value`; rows within a series id are in
/// temporal order. Errors name the offending 1-based row number.
inline std::map<std::string, Vec> load_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "load_csv: cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "load_csv: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == "series_id,value",
          "load_csv: missing 'series_id,value' header in " + path);

  std::map<std::string, Vec> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    require(comma != std::string::npos,
            "load_csv: missing comma at row " + std::to_string(row));
    const std::string id = line.substr(0, comma);
    const std::string value_text = line.substr(comma + 1);
    try {
      std::size_t used = 0;
      const double v = std::stod(value_text, &used);
      require(used == value_text.size(), "trailing characters");
      out[id].push_back(v);
    } catch (const std::exception&) {
      throw ValidationError("load_csv: non-numeric value at row " + std::to_string(row) +
                            " of " + path);
    }
  }
  return out;
}

/// Inverse of load_csv; 17 significant digits so finite doubles round-trip.
inline void emit_csv(std::ostream& os, const std::map<std::string, Vec>& series) {
  os << "series_id,value\n";
  os.precision(17);
  for (const auto& [id, vals] : series)
    for (double v : vals) os << id << ',' << v << '\n';
}

/// {domain_id: {train: n, val: n}}
inline nlohmann::json corpus_manifest(const Corpus& corpus) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [id, ws] : corpus.train) j[id]["train"] = ws.size();
  for (const auto& [id, ws] : corpus.val) j[id]["val"] = ws.size();
  return j;
}

}  // namespace olivia
