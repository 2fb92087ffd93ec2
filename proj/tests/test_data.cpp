#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "olivia/data.hpp"

using namespace olivia;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& text) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream out(path);
  out << text;
  return path;
}

}  // namespace

TEST_CASE("generate_domain: single component concentrates spectral energy") {
  SyntheticDomainSpec spec{"pure", {{4, 1.0, 0.0}}, 0.0, 0.0, 64};
  const Vec series = generate_domain(spec, 1);
  REQUIRE(series.size() == 64);

  const Psd p = periodogram(Window{series, "pure"});
  double total = 0.0;
  for (double v : p.power) total += v;
  CHECK(p.power[4] / total > 0.99);
}

TEST_CASE("generate_domain: no components and no noise gives zeros") {
  SyntheticDomainSpec spec{"flat", {}, 0.0, 0.0, 32};
  const Vec series = generate_domain(spec, 5);
  for (double v : series) CHECK(v == 0.0);
}

TEST_CASE("generate_domain is deterministic and respects trend") {
  SyntheticDomainSpec spec{"noisy", {{3, 0.5, 0.2}}, 0.3, 0.01, 128};
  const Vec a = generate_domain(spec, 42);
  const Vec b = generate_domain(spec, 42);
  CHECK(a == b);
  const Vec c = generate_domain(spec, 43);
  CHECK(a != c);

  SyntheticDomainSpec trend{"trend", {}, 0.0, 2.0, 16};
  const Vec t = generate_domain(trend, 0);
  for (std::size_t i = 0; i < 16; ++i) CHECK(t[i] == 2.0 * static_cast<double>(i));
}

TEST_CASE("generate_domain rejects out-of-range bins") {
  SyntheticDomainSpec spec{"bad", {{40, 1.0, 0.0}}, 0.0, 0.0, 64};
  CHECK_THROWS_AS(generate_domain(spec, 1), ValidationError);
}

TEST_CASE("build_corpus: 9:1 split with disjoint train and val") {
  std::vector<SyntheticDomainSpec> specs;
  specs.push_back({"a", {{4, 1.0, 0.0}}, 0.05, 0.0, 512});
  specs.push_back({"b", {{9, 1.0, 0.3}}, 0.05, 0.0, 512});
  const Corpus corpus = build_corpus(specs, 32, 100, 3);

  for (const std::string& id : {"a", "b"}) {
    CHECK(corpus.train.at(id).size() == 90);
    CHECK(corpus.val.at(id).size() == 10);
  }

  // Remainder goes to validation for non-multiples of 10.
  const Corpus odd = build_corpus(specs, 32, 7, 3);
  CHECK(odd.train.at("a").size() == 6);  // floor(0.9*7)
  CHECK(odd.val.at("a").size() == 1);
}

TEST_CASE("split assigns every window instance to exactly one side") {
  // Tag each window with its index so identity is observable.
  std::map<std::string, std::vector<Window>> by_domain;
  for (int i = 0; i < 100; ++i) {
    Window w;
    w.domain_id = "tagged";
    w.values = {static_cast<double>(i), 0.0};
    by_domain["tagged"].push_back(w);
  }
  const Corpus corpus = split_windows(by_domain, 17);
  std::vector<int> seen(100, 0);
  for (const Window& w : corpus.train.at("tagged")) ++seen[static_cast<int>(w.values[0])];
  for (const Window& w : corpus.val.at("tagged")) ++seen[static_cast<int>(w.values[0])];
  for (int count : seen) CHECK(count == 1);
  CHECK(corpus.train.at("tagged").size() == 90);
  CHECK(corpus.val.at("tagged").size() == 10);
}

TEST_CASE("build_corpus: disjoint-band specs produce a large harmonization gap") {
  // Three single-band domains at bins 2, 10, 30 of T=128 windows.
  std::vector<SyntheticDomainSpec> specs;
  specs.push_back({"low", {{2 * 8, 1.0, 0.0}}, 0.0, 0.0, 1024});
  specs.push_back({"mid", {{10 * 8, 1.0, 0.7}}, 0.0, 0.0, 1024});
  specs.push_back({"high", {{30 * 8, 1.0, 1.4}}, 0.0, 0.0, 1024});
  const Corpus corpus = build_corpus(specs, 128, 40, 4);

  const DivergenceReport rep = harmonization_gap(corpus.train);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) CHECK(rep.matrix(i, j) > 0.4);
}

TEST_CASE("preset specs cover three disjoint bands plus broadband") {
  const auto specs = preset_specs(1024, 128);
  REQUIRE(specs.size() == 4);
  CHECK(specs[0].domain_id == "low_band");
  CHECK(specs[3].components.size() == 4);
  for (const auto& s : specs) s.validate();
}

TEST_CASE("load_csv parses multiple series in order") {
  const auto path = write_temp("olivia_csv_ok.csv",
                               "series_id,value\n"
                               "a,1.5\n"
                               "a,2.5\n"
                               "a,3.5\n"
                               "b,-1\n"
                               "b,-2\n"
                               "b,-3\n");
  const auto series = load_csv(path.string());
  REQUIRE(series.size() == 2);
  CHECK(series.at("a") == Vec{1.5, 2.5, 3.5});
  CHECK(series.at("b") == Vec{-1, -2, -3});
  std::filesystem::remove(path);
}

TEST_CASE("load_csv error paths name the offending row") {
  const auto bad = write_temp("olivia_csv_bad.csv",
                              "series_id,value\n"
                              "a,1.0\n"
                              "a,abc\n");
  CHECK_THROWS_WITH(load_csv(bad.string()),
                    Catch::Matchers::ContainsSubstring("row 3"));
  std::filesystem::remove(bad);

  const auto no_header = write_temp("olivia_csv_nohdr.csv", "a,1.0\n");
  CHECK_THROWS_WITH(load_csv(no_header.string()),
                    Catch::Matchers::ContainsSubstring("header"));
  std::filesystem::remove(no_header);

  const auto empty = write_temp("olivia_csv_empty.csv", "");
  CHECK_THROWS_AS(load_csv(empty.string()), ValidationError);
  std::filesystem::remove(empty);

  const auto header_only = write_temp("olivia_csv_hdr.csv", "series_id,value\n");
  const auto series = load_csv(header_only.string());
  CHECK(series.empty());
  std::filesystem::remove(header_only);
}

TEST_CASE("csv round trip is lossless for double-precision values") {
  std::map<std::string, Vec> series;
  CounterRng rng(8, "csv-roundtrip");
  Vec v(50);
  for (double& x : v) x = rng.next_gaussian() * 1e3;
  v.push_back(0.1);  // not exactly representable; still round-trips at 17 digits
  v.push_back(-1e-300);
  series["s"] = v;

  std::ostringstream os;
  emit_csv(os, series);
  const auto path = write_temp("olivia_csv_rt.csv", os.str());
  const auto back = load_csv(path.string());
  CHECK(back.at("s") == v);
  std::filesystem::remove(path);
}

TEST_CASE("corpus manifest reports per-domain split sizes") {
  std::vector<SyntheticDomainSpec> specs;
  specs.push_back({"a", {{4, 1.0, 0.0}}, 0.0, 0.0, 256});
  const Corpus corpus = build_corpus(specs, 32, 20, 1);
  const nlohmann::json j = corpus_manifest(corpus);
  CHECK(j.at("a").at("train") == 18);
  CHECK(j.at("a").at("val") == 2);
}
