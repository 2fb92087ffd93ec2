// Command-line front end: analysis (psd, jsd, corr), data generation (gen),
// training (pretrain, tune), inference (forecast, evaluate), and the
// numerical harnesses (gradcheck, bench, verify). Exit codes: 0 success,
// 1 validation error, 2 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "olivia/bench.hpp"
#include "olivia/data.hpp"
#include "olivia/model.hpp"
#include "olivia/spectral.hpp"
#include "olivia/training.hpp"
#include "olivia/verify.hpp"

namespace {

using namespace olivia;

struct CommonOpts {
  std::string config_path;
  std::string input_path;
  std::string out_path;
  std::string checkpoint_path;
  std::string log_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  int window = 0;
  int samples = 100;
  bool json_stdout = false;
  bool literal_resonators = false;
  bool no_instance_norm = false;
  bool loss_paper_exact = false;
  std::vector<int> horizons;
  std::string attention = "harmonic";
  int epochs = -1;
  int batch = 64;
  double lr = 0.0;
};

ModelConfig load_config(const CommonOpts& o) {
  ModelConfig c;
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    require(in.good(), "cannot open config file " + o.config_path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const std::exception& e) {
      throw ValidationError(std::string("config parse error: ") + e.what());
    }
    c = config_from_json(j);
  }
  if (o.seed_given) c.seed = o.seed;
  if (o.literal_resonators) c.literal_resonators = true;
  if (o.no_instance_norm) c.instance_norm = false;
  if (!o.horizons.empty()) c.horizons = o.horizons;
  c.validate();
  return c;
}

AttentionKind attention_kind(const CommonOpts& o) {
  if (o.attention == "harmonic") return AttentionKind::kHarmonic;
  if (o.attention == "full") return AttentionKind::kFull;
  throw ValidationError("unknown attention mechanism: " + o.attention);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  require(out.good(), "cannot open output file " + path);
  out << text;
  require(out.good(), "write failed for " + path);
}

std::map<std::string, std::vector<Window>> sampled_corpora(const CommonOpts& o,
                                                           int window_len) {
  require(!o.input_path.empty(), "missing --input");
  require(window_len >= 2, "missing or invalid --window");
  const auto series = load_csv(o.input_path);
  require(!series.empty(), "input file has no series");
  std::map<std::string, std::vector<Window>> corpora;
  for (const auto& [id, values] : series) {
    const std::uint64_t domain_seed = CounterRng(o.seed, "corpus:" + id).next_u64();
    corpora[id] = sample_windows(values, window_len, o.samples, domain_seed,
                                 !o.no_instance_norm, id);
  }
  return corpora;
}

nlohmann::json psd_report(const CommonOpts& o, const HouseholderStack* stack) {
  const auto corpora = sampled_corpora(o, o.window);
  std::vector<std::string> labels;
  std::map<std::string, Psd> psds;
  for (const auto& [id, windows] : corpora) {
    labels.push_back(id);
    if (stack) {
      std::vector<Window> aligned;
      aligned.reserve(windows.size());
      for (const Window& w : windows)
        aligned.push_back(Window{align(*stack, w.values), w.domain_id});
      psds[id] = dataset_psd(aligned);
    } else {
      psds[id] = dataset_psd(windows);
    }
  }
  if (corpora.size() >= 2) {
    const DivergenceReport gap = harmonization_gap(corpora, stack);
    return spectral_report_json(o.window, labels, psds, &gap.matrix);
  }
  return spectral_report_json(o.window, labels, psds, nullptr);
}

Corpus corpus_for_training(const CommonOpts& o, const ModelConfig& c, int window_len) {
  require(!o.input_path.empty(), "missing --input");
  const auto series = load_csv(o.input_path);
  require(!series.empty(), "input file has no series");
  std::map<std::string, std::vector<Window>> by_domain;
  for (const auto& [id, values] : series) {
    const std::uint64_t domain_seed = CounterRng(c.seed, "corpus:" + id).next_u64();
    by_domain[id] = sample_windows(values, window_len, o.samples, domain_seed, false, id);
  }
  return split_windows(by_domain, c.seed);
}

int run_training(const CommonOpts& o, bool tuning) {
  ModelConfig c;
  Checkpoint warm;
  bool have_warm = false;
  if (tuning) {
    require(!o.checkpoint_path.empty(), "tune: missing --checkpoint");
    warm = load_checkpoint(o.checkpoint_path);
    if (!o.horizons.empty() && o.horizons != warm.config.horizons)
      warm = adapt_horizons(warm, o.horizons);
    c = warm.config;
    if (o.seed_given) c.seed = o.seed;
    if (o.no_instance_norm) c.instance_norm = false;
    have_warm = true;
  } else {
    c = load_config(o);
  }
  require(!o.out_path.empty(), "missing --out");

  StageSchedule schedule;
  schedule.pretrain_epochs = tuning ? 0 : (o.epochs >= 0 ? o.epochs : 10);
  schedule.tune_epochs = tuning ? (o.epochs >= 0 ? o.epochs : 2) : 0;
  schedule.batch_size = o.batch;
  schedule.loss_paper_exact = o.loss_paper_exact;
  if (o.lr > 0.0) {
    schedule.lr_pretrain = o.lr;
    schedule.lr_tune = o.lr;
  }

  const int needed = tuning ? c.input_len + c.max_horizon() : c.input_len;
  const Corpus corpus = corpus_for_training(o, c, needed);
  std::cerr << "corpus: " << corpus_manifest(corpus).dump() << "\n";

  std::ofstream log_file;
  std::ostream* log = &std::cerr;
  if (!o.log_path.empty()) {
    log_file.open(o.log_path);
    require(log_file.good(), "cannot open log file " + o.log_path);
    log = &log_file;
  }

  const AttentionKind kind = tuning ? warm.attention : attention_kind(o);
  const TrainResult result =
      train(c, corpus, schedule, log, kind, have_warm ? &warm.params : nullptr);
  save_checkpoint(o.out_path, result.final);

  nlohmann::json summary;
  summary["stage"] = stage_name(result.final.stage);
  summary["epochs"] = result.history.size();
  if (!result.history.empty()) {
    summary["final_train_loss"] = result.history.back().train_loss;
    summary["final_val_loss"] = result.history.back().val_loss;
  }
  summary["checkpoint"] = o.out_path;
  if (o.json_stdout) std::cout << summary.dump() << "\n";
  std::cerr << "saved checkpoint to " << o.out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"olivia: spectral harmonization toolkit for time-series models"};
  app.require_subcommand(1);

  CommonOpts o;

  const auto add_common = [&](CLI::App* cmd, bool with_training_flags) {
    cmd->add_option("--config", o.config_path, "model config JSON");
    cmd->add_option("--input", o.input_path, "input CSV (series_id,value)");
    cmd->add_option("--out", o.out_path, "output path");
    cmd->add_option("--checkpoint", o.checkpoint_path, "checkpoint path");
    cmd->add_option("--seed", o.seed, "PRNG seed")->each([&](const std::string&) {
      o.seed_given = true;
    });
    cmd->add_option("--window", o.window, "window length T");
    cmd->add_option("--samples", o.samples, "windows per domain");
    cmd->add_flag("--json", o.json_stdout, "print machine-readable JSON to stdout");
    cmd->add_flag("--literal-resonators", o.literal_resonators,
                  "use the degenerate shared resonator template verbatim");
    cmd->add_flag("--no-instance-norm", o.no_instance_norm,
                  "disable per-window standardization");
    cmd->add_flag("--loss-paper-exact", o.loss_paper_exact,
                  "unnormalized horizon terms in the tuning loss");
    cmd->add_option("--horizons", o.horizons, "forecast horizons")->delimiter(',');
    if (with_training_flags) {
      cmd->add_option("--attention", o.attention, "attention mechanism: harmonic|full");
      cmd->add_option("--epochs", o.epochs, "epoch count for this stage");
      cmd->add_option("--batch", o.batch, "batch size");
      cmd->add_option("--lr", o.lr, "learning rate override");
      cmd->add_option("--log", o.log_path, "JSON-lines training log path");
    }
  };

  CLI::App* psd = app.add_subcommand("psd", "dataset-level normalized PSDs per domain");
  add_common(psd, false);
  CLI::App* jsd = app.add_subcommand(
      "jsd", "pairwise JS divergence, optionally through a trained Aligner");
  add_common(jsd, false);
  CLI::App* corr = app.add_subcommand("corr", "second-order moment matrices per domain");
  add_common(corr, false);
  CLI::App* gen = app.add_subcommand("gen", "synthetic multi-domain corpus CSV");
  add_common(gen, false);
  CLI::App* pretrain = app.add_subcommand("pretrain", "reconstruction pretraining");
  add_common(pretrain, true);
  CLI::App* tune = app.add_subcommand("tune", "forecast tuning from a checkpoint");
  add_common(tune, true);
  CLI::App* forecast = app.add_subcommand("forecast", "forecasts for each input series");
  add_common(forecast, false);
  CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "MSE/MAE per horizon");
  add_common(evaluate_cmd, false);

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_common(gradcheck, false);
  double tolerance = 1e-4;
  bool corrupt = false;
  gradcheck->add_option("--tolerance", tolerance, "max relative error allowed");
  gradcheck->add_flag("--corrupt", corrupt, "flip one gradient sign (negative control)");

  CLI::App* bench = app.add_subcommand("bench", "attention scaling benchmark");
  add_common(bench, false);
  std::vector<int> bench_ls = {1024, 2048, 4096};
  int bench_m = 16, bench_p = 16, bench_h = 4, bench_repeats = 5;
  bench->add_option("--Ls", bench_ls, "token counts")->delimiter(',');
  bench->add_option("--M", bench_m, "resonator count");
  bench->add_option("--P", bench_p, "head dimension");
  bench->add_option("--H", bench_h, "head count");
  bench->add_option("--repeats", bench_repeats, "timing repeats per point");

  CLI::App* verify = app.add_subcommand("verify", "numerical proposition oracles");
  add_common(verify, false);
  int prop = 1, v_t = 12, v_r = 3, v_d = 2, v_l = 10, v_datasets = 4, v_seeds = 1;
  verify->add_option("--prop", prop, "proposition number (1 or 2)")->required();
  verify->add_option("--T", v_t, "signal dimension");
  verify->add_option("--r", v_r, "shared subspace dimension");
  verify->add_option("--d", v_d, "token dimension (prop 2)");
  verify->add_option("--L", v_l, "token count (prop 2)");
  verify->add_option("--datasets", v_datasets, "dataset count (prop 1)");
  verify->add_option("--seeds", v_seeds, "number of consecutive seeds to run");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (psd->parsed() || jsd->parsed()) {
      const HouseholderStack* stack_ptr = nullptr;
      HouseholderStack stack;
      if (jsd->parsed() && !o.checkpoint_path.empty()) {
        const Checkpoint ckpt = load_checkpoint(o.checkpoint_path);
        if (o.window == 0) o.window = ckpt.config.input_len;
        stack = stack_from_params(ckpt.config, ckpt.params);
        require(static_cast<int>(stack.dim) == o.window,
                "checkpoint aligner dimension does not match --window");
        stack_ptr = &stack;
      }
      const nlohmann::json report = psd_report(o, stack_ptr);
      require(!o.out_path.empty(), "missing --out");
      write_text(o.out_path, report.dump(2) + "\n");
      if (o.json_stdout) std::cout << report.dump() << "\n";
      std::cerr << "wrote " << o.out_path << "\n";
      return 0;
    }

    if (corr->parsed()) {
      require(!o.out_path.empty(), "missing --out");
      const auto corpora = sampled_corpora(o, o.window);
      std::filesystem::create_directories(o.out_path);
      for (const auto& [id, windows] : corpora) {
        const MomentMatrix m = moment_matrix(windows);
        std::ofstream f(std::filesystem::path(o.out_path) / (id + ".csv"));
        require(f.good(), "cannot write moment matrix for domain " + id);
        write_matrix_csv(f, m.sigma);
      }
      std::cerr << "wrote " << corpora.size() << " moment matrices to " << o.out_path
                << "\n";
      return 0;
    }

    if (gen->parsed()) {
      require(!o.out_path.empty(), "missing --out");
      require(o.window >= 8, "gen: need --window of at least 8");
      const std::size_t series_len = 16 * static_cast<std::size_t>(o.window);
      std::map<std::string, Vec> series;
      nlohmann::json manifest = nlohmann::json::object();
      for (const SyntheticDomainSpec& spec : preset_specs(series_len, static_cast<std::size_t>(o.window))) {
        series[spec.domain_id] = generate_domain(spec, o.seed);
        manifest[spec.domain_id] = {{"length", series_len}};
      }
      std::ofstream out(o.out_path);
      require(out.good(), "cannot open output file " + o.out_path);
      emit_csv(out, series);
      if (o.json_stdout) std::cout << manifest.dump() << "\n";
      std::cerr << "wrote " << o.out_path << "\n";
      return 0;
    }

    if (pretrain->parsed()) return run_training(o, false);
    if (tune->parsed()) return run_training(o, true);

    if (forecast->parsed()) {
      require(!o.checkpoint_path.empty(), "missing --checkpoint");
      require(!o.input_path.empty(), "missing --input");
      require(!o.out_path.empty(), "missing --out");
      const Checkpoint ckpt = load_checkpoint(o.checkpoint_path);
      const auto series = load_csv(o.input_path);
      nlohmann::json out = nlohmann::json::object();
      for (const auto& [id, values] : series) {
        require(values.size() >= static_cast<std::size_t>(ckpt.config.input_len),
                "series '" + id + "' shorter than model context");
        const Vec past(values.end() - ckpt.config.input_len, values.end());
        const ForwardOutput fo =
            forward(ckpt.config, ckpt.params, past, Stage::kInfer, nullptr,
                    ckpt.attention);
        for (const auto& [h, f] : fo.forecasts) out[id][std::to_string(h)] = f;
      }
      write_text(o.out_path, out.dump(2) + "\n");
      if (o.json_stdout) std::cout << out.dump() << "\n";
      return 0;
    }

    if (evaluate_cmd->parsed()) {
      require(!o.checkpoint_path.empty(), "missing --checkpoint");
      require(!o.out_path.empty(), "missing --out");
      const Checkpoint ckpt = load_checkpoint(o.checkpoint_path);
      const std::vector<int> horizons =
          o.horizons.empty() ? ckpt.config.horizons : o.horizons;
      int max_h = 0;
      for (int h : horizons) max_h = std::max(max_h, h);
      CommonOpts eval_opts = o;
      eval_opts.no_instance_norm = true;  // raw windows; the model normalizes
      const auto corpora = sampled_corpora(eval_opts, ckpt.config.input_len + max_h);
      std::vector<Window> items;
      for (const auto& [id, ws] : corpora) items.insert(items.end(), ws.begin(), ws.end());
      const EvalMetrics metrics = evaluate(ckpt, items, horizons);
      const nlohmann::json j = metrics_json(metrics);
      write_text(o.out_path, j.dump(2) + "\n");
      if (o.json_stdout) std::cout << j.dump() << "\n";
      return 0;
    }

    if (gradcheck->parsed()) {
      ModelConfig c;
      if (o.config_path.empty()) {
        // Built-in tiny configuration sized for O(#params) finite differences.
        c.input_len = 8;
        c.patch_len = 4;
        c.embed_dim = 4;
        c.heads = 2;
        c.head_dim = 2;
        c.resonators = 2;
        c.enc_layers = 1;
        c.dec_layers = 1;
        c.householder_count = 2;
        c.horizons = {2};
        if (o.seed_given) c.seed = o.seed;
      } else {
        c = load_config(o);
      }
      const GradCheckReport report = grad_check(c, tolerance, corrupt);
      const nlohmann::json j = grad_check_json(report, tolerance);
      if (!o.out_path.empty()) write_text(o.out_path, j.dump(2) + "\n");
      std::cout << j.dump() << "\n";
      return report.pass ? 0 : 2;
    }

    if (bench->parsed()) {
      require(!o.out_path.empty(), "missing --out");
      const auto rows =
          bench_scaling(bench_ls, bench_m, bench_p, bench_h, bench_repeats, o.seed);
      std::ofstream out(o.out_path);
      require(out.good(), "cannot open output file " + o.out_path);
      write_bench_csv(out, rows);
      if (o.json_stdout) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : rows)
          j.push_back({{"mechanism", r.mechanism},
                       {"L", r.tokens},
                       {"median_seconds", r.median_seconds}});
        std::cout << j.dump() << "\n";
      }
      std::cerr << "wrote " << o.out_path << "\n";
      return 0;
    }

    if (verify->parsed()) {
      require(prop == 1 || prop == 2, "verify: --prop must be 1 or 2");
      require(v_seeds >= 1, "verify: --seeds must be positive");
      nlohmann::json j;
      bool pass = true;
      if (prop == 1) {
        Prop1Report worst;
        for (int s = 0; s < v_seeds; ++s) {
          const Prop1Report r = check_prop1(v_t, v_r, v_datasets, o.seed + s);
          pass = pass && r.pass;
          if (s == 0 || r.max_offdiag_frob > worst.max_offdiag_frob) worst = r;
        }
        worst.pass = pass;
        j = prop1_json(worst);
        j["seeds"] = v_seeds;
      } else {
        Prop2Report worst;
        for (int s = 0; s < v_seeds; ++s) {
          const Prop2Report r = check_prop2(v_t, v_r, v_d, v_l, o.seed + s);
          pass = pass && r.pass;
          if (s == 0 || r.decomposition_err > worst.decomposition_err) worst = r;
        }
        worst.pass = pass;
        j = prop2_json(worst);
        j["seeds"] = v_seeds;
      }
      if (!o.out_path.empty()) write_text(o.out_path, j.dump(2) + "\n");
      std::cout << j.dump() << "\n";
      return pass ? 0 : 2;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
