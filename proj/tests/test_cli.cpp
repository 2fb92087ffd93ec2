#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* p = std::getenv("OLIVIA_CLI");
  REQUIRE(p != nullptr);
  return p;
}

struct RunResult {
  int exit_code = -1;
  std::string stdout_text;
};

RunResult run(const std::string& args) {
  const fs::path out = fs::temp_directory_path() / "olivia_cli_stdout.txt";
  const std::string cmd = cli_path() + " " + args + " > " + out.string() + " 2>/dev/null";
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  r.stdout_text = ss.str();
  return r;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("olivia_cli_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("cli: unknown subcommand exits 1") {
  CHECK(run("frobnicate").exit_code == 1);
  CHECK(run("").exit_code == 1);
}

TEST_CASE("cli: psd writes normalized spectra and exits 0") {
  TempDir dir;
  const std::string csv = dir / "data.csv";
  {
    std::ofstream f(csv);
    f << "series_id,value\n";
    for (int i = 0; i < 400; ++i) f << "a," << std::sin(0.3 * i) << "\n";
    for (int i = 0; i < 400; ++i) f << "b," << std::sin(1.1 * i) << "\n";
  }
  const std::string out = dir / "psd.json";
  const RunResult r =
      run("psd --input " + csv + " --window 64 --samples 50 --seed 1 --out " + out);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(out));

  std::ifstream in(out);
  nlohmann::json j;
  in >> j;
  CHECK(j.at("T") == 64);
  REQUIRE(j.at("labels").size() == 2);
  for (const auto& [label, psd] : j.at("psd").items()) {
    double sum = 0.0;
    for (double v : psd) sum += v;
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
  CHECK(j.at("js_matrix")[0][1] == j.at("js_matrix")[1][0]);
}

TEST_CASE("cli: identical flags and seed produce byte-identical outputs") {
  TempDir dir;
  const std::string csv = dir / "gen.csv";
  REQUIRE(run("gen --out " + csv + " --window 32 --seed 9").exit_code == 0);
  const std::string csv2 = dir / "gen2.csv";
  REQUIRE(run("gen --out " + csv2 + " --window 32 --seed 9").exit_code == 0);
  CHECK(file_bytes(csv) == file_bytes(csv2));

  const std::string p1 = dir / "p1.json", p2 = dir / "p2.json";
  REQUIRE(run("psd --input " + csv + " --window 32 --samples 20 --seed 4 --out " + p1)
              .exit_code == 0);
  REQUIRE(run("psd --input " + csv + " --window 32 --samples 20 --seed 4 --out " + p2)
              .exit_code == 0);
  CHECK(file_bytes(p1) == file_bytes(p2));
}

TEST_CASE("cli: verify prop 1 reports pass and exits 0") {
  const RunResult r = run("verify --prop 1 --T 12 --r 3 --seed 7 --json");
  REQUIRE(r.exit_code == 0);
  const nlohmann::json j = nlohmann::json::parse(r.stdout_text);
  CHECK(j.at("pass") == true);
  CHECK(j.at("proposition") == 1);
}

TEST_CASE("cli: verify rejects bad proposition number") {
  CHECK(run("verify --prop 3").exit_code == 1);
}

TEST_CASE("cli: corr emits headerless T x T matrices") {
  TempDir dir;
  const std::string csv = dir / "gen.csv";
  REQUIRE(run("gen --out " + csv + " --window 16 --seed 2").exit_code == 0);
  const std::string outdir = dir / "corr";
  REQUIRE(run("corr --input " + csv + " --window 16 --samples 10 --seed 3 --out " +
              outdir)
              .exit_code == 0);
  REQUIRE(fs::exists(fs::path(outdir) / "low_band.csv"));
  std::ifstream f(fs::path(outdir) / "low_band.csv");
  std::string line;
  int rows = 0;
  while (std::getline(f, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 15);
  }
  CHECK(rows == 16);
}

TEST_CASE("cli: pretrain then tune then forecast round trip") {
  TempDir dir;
  const std::string csv = dir / "gen.csv";
  REQUIRE(run("gen --out " + csv + " --window 32 --seed 12").exit_code == 0);

  const std::string cfg = dir / "cfg.json";
  {
    std::ofstream f(cfg);
    f << R"({"T": 32, "patch_len": 8, "d": 16, "H": 2, "P": 8, "M": 1,
             "enc_layers": 1, "dec_layers": 1, "K": 4, "horizons": [4], "seed": 3})";
  }

  const std::string pre = dir / "pre.bin";
  const RunResult rp = run("pretrain --config " + cfg + " --input " + csv +
                           " --samples 20 --epochs 2 --batch 8 --out " + pre);
  REQUIRE(rp.exit_code == 0);
  REQUIRE(fs::exists(pre));

  const std::string tuned = dir / "tuned.bin";
  const RunResult rt = run("tune --checkpoint " + pre + " --input " + csv +
                           " --samples 20 --epochs 1 --batch 8 --out " + tuned);
  REQUIRE(rt.exit_code == 0);

  const std::string fc = dir / "forecast.json";
  const RunResult rf =
      run("forecast --checkpoint " + tuned + " --input " + csv + " --out " + fc);
  REQUIRE(rf.exit_code == 0);
  std::ifstream in(fc);
  nlohmann::json j;
  in >> j;
  CHECK(j.at("low_band").at("4").size() == 4);

  const std::string metrics = dir / "metrics.json";
  const RunResult re = run("evaluate --checkpoint " + tuned + " --input " + csv +
                           " --samples 5 --seed 1 --out " + metrics);
  REQUIRE(re.exit_code == 0);
  std::ifstream min(metrics);
  nlohmann::json mj;
  min >> mj;
  CHECK(mj.contains("avg_mse"));

  // jsd through the trained aligner must run and stay bounded.
  const std::string jsd = dir / "jsd.json";
  const RunResult rj = run("jsd --input " + csv + " --samples 20 --seed 1 --checkpoint " +
                           tuned + " --out " + jsd);
  REQUIRE(rj.exit_code == 0);
}

TEST_CASE("cli: validation failures exit 1") {
  TempDir dir;
  // M > L in config
  const std::string cfg = dir / "bad.json";
  {
    std::ofstream f(cfg);
    f << R"({"T": 32, "patch_len": 8, "d": 16, "H": 2, "P": 8, "M": 9,
             "enc_layers": 1, "dec_layers": 1, "K": 4, "horizons": [4]})";
  }
  const std::string csv = dir / "gen.csv";
  REQUIRE(run("gen --out " + csv + " --window 32 --seed 12").exit_code == 0);
  CHECK(run("pretrain --config " + cfg + " --input " + csv + " --samples 10 --out " +
            (dir / "x.bin"))
            .exit_code == 1);

  // Unknown config key
  const std::string cfg2 = dir / "bad2.json";
  {
    std::ofstream f(cfg2);
    f << R"({"T": 32, "patch_len": 8, "banana": 1})";
  }
  CHECK(run("pretrain --config " + cfg2 + " --input " + csv + " --out " +
            (dir / "y.bin"))
            .exit_code == 1);

  // Missing input file
  CHECK(run("psd --input " + (dir / "nope.csv") + " --window 8 --out " +
            (dir / "z.json"))
            .exit_code == 1);
}

TEST_CASE("cli: gradcheck passes and the corrupt control fails") {
  const RunResult ok = run("gradcheck --json");
  REQUIRE(ok.exit_code == 0);
  const nlohmann::json j = nlohmann::json::parse(ok.stdout_text);
  CHECK(j.at("pass") == true);
  CHECK(j.at("max_rel_err").get<double>() < 1e-4);

  const RunResult bad = run("gradcheck --corrupt");
  CHECK(bad.exit_code == 2);
}

TEST_CASE("cli: bench emits the documented CSV header") {
  TempDir dir;
  const std::string out = dir / "bench.csv";
  const RunResult r =
      run("bench --Ls 8,16 --M 4 --P 4 --H 2 --repeats 3 --seed 1 --out " + out);
  REQUIRE(r.exit_code == 0);
  std::ifstream f(out);
  std::string header;
  std::getline(f, header);
  CHECK(header == "mechanism,L,M,P,H,median_seconds,repeats");
  int rows = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4);
}
