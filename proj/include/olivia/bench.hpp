#pragma once

#include <algorithm>
#include <chrono>
#include <ostream>
#include <string>
#include <vector>

#include "olivia/attention.hpp"
#include "olivia/rng.hpp"

namespace olivia {

struct BenchRow {
  std::string mechanism;
  int tokens = 0;  // L
  int resonators = 0;
  int proj_dim = 0;
  int heads = 0;
  double median_seconds = 0.0;
  int repeats = 0;
};

/// Wall-clock medians for harmonic and full attention at each L with fixed
/// seeded inputs. Runs single-threaded so the medians reflect arithmetic
/// cost; the token matrices are regenerated per L from the same stream.
inline std::vector<BenchRow> bench_scaling(const std::vector<int>& token_counts,
                                           int resonators, int proj_dim, int heads,
                                           int repeats, std::uint64_t seed) {
  require(repeats >= 3, "bench_scaling: need at least 3 repeats");
  for (int l : token_counts)
    require(l >= resonators, "bench_scaling: L must be at least M");

  const int d = heads * proj_dim;
  CounterRng rng(seed, "bench");
  HarmonicAttentionParams params =
      HarmonicAttentionParams::init(d, heads, proj_dim, resonators, 0.1, false, rng);

  std::vector<BenchRow> rows;
  volatile double sink = 0.0;  // keep the optimizer honest
  for (const std::string& mechanism : {std::string("harmonic"), std::string("full")}) {
    for (int l : token_counts) {
      Mat tokens(l, d);
      CounterRng data_rng(seed, "bench-tokens-" + std::to_string(l));
      for (double& x : tokens.a) x = data_rng.next_gaussian();

      // One untimed pass to warm caches and the allocator.
      sink = sink + (mechanism == "harmonic" ? harmonic_attention(tokens, params)
                                             : full_attention(tokens, params))
                        .a[0];

      std::vector<double> times;
      times.reserve(repeats);
      for (int r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const Mat out = mechanism == "harmonic" ? harmonic_attention(tokens, params)
                                                : full_attention(tokens, params);
        const auto t1 = std::chrono::steady_clock::now();
        sink = sink + out.a[0];
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
      }
      std::sort(times.begin(), times.end());
      const double median = times[times.size() / 2];
      rows.push_back({mechanism, l, resonators, proj_dim, heads, median, repeats});
    }
  }
  return rows;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "mechanism,L,M,P,H,median_seconds,repeats\n";
  os.precision(9);
  for (const BenchRow& r : rows)
    os << r.mechanism << ',' << r.tokens << ',' << r.resonators << ',' << r.proj_dim
       << ',' << r.heads << ',' << r.median_seconds << ',' << r.repeats << '\n';
}

}  // namespace olivia
