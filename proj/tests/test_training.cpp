#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "olivia/data.hpp"
#include "olivia/training.hpp"

using namespace olivia;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.input_len = 8;
  c.patch_len = 4;
  c.embed_dim = 4;
  c.heads = 2;
  c.head_dim = 2;
  c.resonators = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.householder_count = 2;
  c.horizons = {2, 3};
  c.seed = 21;
  return c;
}

ForwardOutput fake_output(Vec x_hat, std::map<int, Vec> forecasts = {}) {
  ForwardOutput o;
  o.x_hat = std::move(x_hat);
  o.forecasts = std::move(forecasts);
  return o;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("loss: perfect outputs give zero") {
  const Vec x = {1, 2, 3, 4};
  const LossBreakdown lb = loss(fake_output(x), x, {}, Stage::kPretrain);
  CHECK(lb.total == 0.0);
  CHECK(lb.recon == 0.0);
}

TEST_CASE("loss: pretrain residual of ones gives 1.0") {
  const Vec x = {0, 0, 0, 0};
  const LossBreakdown lb = loss(fake_output({1, 1, 1, 1}), x, {}, Stage::kPretrain);
  CHECK(lb.recon == Catch::Approx(1.0).margin(1e-15));
  CHECK(lb.total == lb.recon);
}

TEST_CASE("loss: tune-stage under both normalization conventions") {
  // Recon residual [1,1,1,1] (T=4), one horizon tau=2 with residual [3,0].
  const Vec x = {0, 0, 0, 0};
  std::map<int, Vec> targets;
  targets[2] = {0, 0};
  const ForwardOutput out = fake_output({1, 1, 1, 1}, {{2, {3, 0}}});

  const LossBreakdown norm = loss(out, x, targets, Stage::kTune, false);
  CHECK(norm.recon == Catch::Approx(1.0).margin(1e-15));
  CHECK(norm.per_horizon.at(2) == Catch::Approx(4.5).margin(1e-15));
  CHECK(norm.total == Catch::Approx(5.5).margin(1e-15));

  const LossBreakdown paper = loss(out, x, targets, Stage::kTune, true);
  CHECK(paper.per_horizon.at(2) == Catch::Approx(9.0).margin(1e-15));
  CHECK(paper.total == Catch::Approx(10.0).margin(1e-15));

  // total = recon + sum of horizon terms, and all parts nonnegative
  double s = norm.recon;
  for (const auto& [h, v] : norm.per_horizon) {
    CHECK(v >= 0.0);
    s += v;
  }
  CHECK(norm.total == Catch::Approx(s).margin(1e-12));

  CHECK_THROWS_AS(loss(out, x, {}, Stage::kTune), ValidationError);
}

TEST_CASE("adamw: zero gradient and zero decay is the identity") {
  ModelConfig c = tiny_config();
  ParameterSet ps = init_params(c);
  const Vec before = ps.at("recon.weight").values;
  AdamWConfig acfg;
  acfg.weight_decay = 0.0;
  AdamW opt(acfg);
  ps.zero_grads();
  opt.step(ps);
  CHECK(ps.at("recon.weight").values == before);
}

TEST_CASE("adamw: hand-computed first step on a scalar") {
  // t=1, g=2, lr=0.1, betas (0.9, 0.999), eps=1e-8, wd=0:
  // mhat = 2, vhat = 4, step = -0.1 * 2/(2 + 1e-8) ~ -0.0999999995.
  ModelConfig c = tiny_config();
  ParameterSet ps = init_params(c);
  Tensor& t = ps.at("enc0.attn.gamma");
  t.values[0] = 1.0;
  ps.zero_grads();
  t.grad[0] = 2.0;
  AdamWConfig acfg;
  acfg.lr = 0.1;
  acfg.weight_decay = 0.0;
  AdamW opt(acfg);
  opt.step(ps);
  CHECK(t.values[0] == Catch::Approx(1.0 - 0.0999999995).margin(1e-12));
}

TEST_CASE("adamw: decoupled decay scales by (1 - lr*wd) exactly") {
  ModelConfig c = tiny_config();
  ParameterSet ps = init_params(c);
  Tensor& t = ps.at("enc0.attn.gamma");
  t.values[0] = 0.5;
  ps.zero_grads();
  AdamWConfig acfg;
  acfg.lr = 0.1;
  acfg.weight_decay = 0.01;
  AdamW opt(acfg);
  opt.step(ps);
  CHECK(t.values[0] == 0.5 * (1.0 - 0.001));  // exact
}

TEST_CASE("adamw leaves frozen tensors untouched") {
  ModelConfig c = tiny_config();
  ParameterSet ps = init_params(c);
  ps.set_stage(Stage::kTune);
  const Vec frozen_before = ps.at("recon.weight").values;
  for (Tensor& t : ps.tensors())
    for (double& g : t.grad) g = 1.0;
  AdamW opt;
  opt.step(ps);
  CHECK(ps.at("recon.weight").values == frozen_before);
  CHECK(ps.at("harmonizer.vectors").values != init_params(c).at("harmonizer.vectors").values);
}

TEST_CASE("grad_check passes on the tiny config") {
  const GradCheckReport r = grad_check(tiny_config(), 1e-4);
  INFO("max_rel_err=" << r.max_rel_err << " worst=" << r.worst_tensor << "["
                      << r.worst_index << "]");
  CHECK(r.pass);
  CHECK(r.checked_scalars > 0);
}

TEST_CASE("grad_check negative control fails") {
  const GradCheckReport r = grad_check(tiny_config(), 1e-4, /*corrupt_sign=*/true);
  CHECK_FALSE(r.pass);
}

TEST_CASE("grad_check rejects a config with no trainable scalars in a stage") {
  ModelConfig c = tiny_config();
  c.householder_count = 0;
  c.horizons = {};  // tune stage would train nothing; skipped entirely
  const GradCheckReport ok = grad_check(c, 1e-4);
  CHECK(ok.pass);

  c.horizons = {2};  // tune runs, but only pred heads + empty harmonizer
  const GradCheckReport still_ok = grad_check(c, 1e-4);
  CHECK(still_ok.pass);
}

namespace {

Corpus toy_corpus(int t_total, int windows_per_domain, std::uint64_t seed) {
  std::vector<SyntheticDomainSpec> specs;
  specs.push_back({"a", {{4, 1.0, 0.0}}, 0.02, 0.0, 512});
  specs.push_back({"b", {{12, 1.0, 0.5}}, 0.02, 0.0, 512});
  specs.push_back({"c", {{24, 0.8, 1.0}}, 0.02, 0.0, 512});
  return build_corpus(specs, t_total, windows_per_domain, seed);
}

}  // namespace

TEST_CASE("train: two pretrain epochs reduce validation loss") {
  ModelConfig c = tiny_config();
  c.input_len = 64;
  c.patch_len = 8;
  c.horizons = {};
  c.householder_count = 4;
  const Corpus corpus = toy_corpus(64, 30, 5);

  StageSchedule schedule;
  schedule.pretrain_epochs = 2;
  schedule.tune_epochs = 0;
  schedule.batch_size = 16;

  const TrainResult r = train(c, corpus, schedule);
  REQUIRE(r.history.size() == 2);
  CHECK(r.history.back().val_loss < r.history.front().train_loss);
  CHECK(r.final.stage == Stage::kPretrain);
}

TEST_CASE("train is deterministic given the seed") {
  ModelConfig c = tiny_config();
  c.input_len = 64;
  c.patch_len = 8;
  c.horizons = {};
  c.householder_count = 4;
  const Corpus corpus = toy_corpus(64, 20, 6);

  StageSchedule schedule;
  schedule.pretrain_epochs = 2;
  schedule.tune_epochs = 0;
  schedule.batch_size = 8;

  const TrainResult a = train(c, corpus, schedule);
  const TrainResult b = train(c, corpus, schedule);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_loss == b.history[i].val_loss);
  }
  for (std::size_t i = 0; i < a.final.params.tensors().size(); ++i)
    CHECK(a.final.params.tensors()[i].values == b.final.params.tensors()[i].values);
}

TEST_CASE("train: pretrain-only run leaves prediction heads at init") {
  ModelConfig c = tiny_config();
  c.input_len = 64;
  c.patch_len = 8;
  c.horizons = {4};
  c.householder_count = 4;
  const Corpus corpus = toy_corpus(64, 20, 7);

  StageSchedule schedule;
  schedule.pretrain_epochs = 1;
  schedule.tune_epochs = 0;
  schedule.batch_size = 8;

  const TrainResult r = train(c, corpus, schedule);
  CHECK(r.final.stage == Stage::kPretrain);
  // Pretraining touches every group except... nothing: all groups trainable.
  // But no forecast loss exists, so pred heads see zero gradient and only
  // weight decay; with AdamW's decoupled decay they shrink multiplicatively.
  const ParameterSet fresh = init_params(c);
  const Vec& after = r.final.params.at("pred4.weight").values;
  const Vec& before = fresh.at("pred4.weight").values;
  REQUIRE(after.size() == before.size());
  const int steps = static_cast<int>(r.history.size() *
                                     ((corpus.train_count() + 7) / 8));
  const double decay = std::pow(1.0 - 1e-3 * 0.01, steps);
  for (std::size_t i = 0; i < after.size(); ++i)
    CHECK(after[i] == Catch::Approx(before[i] * decay).margin(1e-12));
}

TEST_CASE("tuning never modifies frozen tensor groups") {
  ModelConfig c = tiny_config();
  c.input_len = 64;
  c.patch_len = 8;
  c.horizons = {4, 8};
  c.householder_count = 4;
  const Corpus corpus = toy_corpus(64 + 8, 20, 8);

  StageSchedule schedule;
  schedule.pretrain_epochs = 1;
  schedule.tune_epochs = 2;
  schedule.batch_size = 8;

  // Reference: pretrain only.
  StageSchedule pre_only = schedule;
  pre_only.tune_epochs = 0;
  const TrainResult pre = train(c, corpus, pre_only);
  const TrainResult full = train(c, corpus, schedule);

  for (const Tensor& t : full.final.params.tensors()) {
    if (t.group == Group::kHarmonizer || t.group == Group::kPredHeads) continue;
    const Tensor& ref = pre.final.params.at(t.name);
    CHECK(t.values == ref.values);  // bit-identical to pretrain-final values
  }
  CHECK(full.final.stage == Stage::kTune);
  CHECK(full.final.params.at("pred4.weight").values !=
        pre.final.params.at("pred4.weight").values);
}

TEST_CASE("train writes JSON-lines epoch logs") {
  ModelConfig c = tiny_config();
  c.input_len = 64;
  c.patch_len = 8;
  c.horizons = {};
  c.householder_count = 0;
  const Corpus corpus = toy_corpus(64, 10, 9);

  StageSchedule schedule;
  schedule.pretrain_epochs = 2;
  schedule.tune_epochs = 0;
  schedule.batch_size = 4;

  std::ostringstream log;
  train(c, corpus, schedule, &log);
  std::istringstream lines(log.str());
  std::string line;
  int n = 0;
  while (std::getline(lines, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.contains("epoch"));
    CHECK(j.at("stage") == "pretrain");
    CHECK(j.contains("train_loss"));
    CHECK(j.contains("val_loss"));
    CHECK(j.contains("seconds"));
    ++n;
  }
  CHECK(n == 2);
}

TEST_CASE("evaluate: exact metrics on hand-built forecasts") {
  // Identity-free check through a real checkpoint is done in the CLI tests;
  // here exercise the metric arithmetic with a trivially trained model.
  ModelConfig c = tiny_config();
  c.horizons = {2};
  Checkpoint ckpt{c, Stage::kInfer, AttentionKind::kHarmonic, init_params(c)};

  std::vector<Window> items;
  CounterRng rng(3, "eval-items");
  for (int i = 0; i < 2; ++i) {
    Vec v(10);
    for (double& x : v) x = rng.next_gaussian();
    items.push_back(Window{v, "e"});
  }
  const EvalMetrics m = evaluate(ckpt, items, {2});

  // Naive double-loop oracle over the same forecasts.
  double sq = 0.0, ab = 0.0;
  std::size_t n = 0;
  for (const Window& w : items) {
    const Vec past(w.values.begin(), w.values.begin() + 8);
    const ForwardOutput out = forward(c, ckpt.params, past, Stage::kInfer);
    for (int i = 0; i < 2; ++i) {
      const double r = out.forecasts.at(2)[i] - w.values[8 + i];
      sq += r * r;
      ab += std::abs(r);
      ++n;
    }
  }
  CHECK(m.mse.at(2) == sq / static_cast<double>(n));  // exact
  CHECK(m.mae.at(2) == ab / static_cast<double>(n));
  CHECK(m.avg_mse == m.mse.at(2));

  CHECK_THROWS_AS(evaluate(ckpt, items, {5}), ValidationError);
  std::vector<Window> short_items = {Window{Vec(9, 0.0), "s"}};
  CHECK_THROWS_AS(evaluate(ckpt, short_items, {2}), ValidationError);
}

TEST_CASE("evaluate: perfect and shifted forecasts") {
  // Construct a model whose forecasts equal the last input value repeated
  // (persistence) by zeroing, then check against targets that match.
  ModelConfig c = tiny_config();
  c.horizons = {2};
  c.instance_norm = false;
  c.householder_count = 0;
  c.gamma_init = 0.0;
  ParameterSet ps = init_params(c);
  // x_hat path irrelevant; make pred head produce exactly 7.0 always.
  for (Tensor& t : ps.tensors()) {
    if (t.name == "pred2.weight") std::fill(t.values.begin(), t.values.end(), 0.0);
    if (t.name == "pred2.bias") std::fill(t.values.begin(), t.values.end(), 7.0);
  }
  Checkpoint ckpt{c, Stage::kInfer, AttentionKind::kHarmonic, std::move(ps)};

  std::vector<Window> perfect = {Window{Vec{0, 0, 0, 0, 0, 0, 0, 0, 7, 7}, "p"}};
  const EvalMetrics mp = evaluate(ckpt, perfect, {2});
  CHECK(mp.mse.at(2) == 0.0);
  CHECK(mp.mae.at(2) == 0.0);

  std::vector<Window> shifted = {Window{Vec{0, 0, 0, 0, 0, 0, 0, 0, 6, 6}, "s"}};
  const EvalMetrics ms = evaluate(ckpt, shifted, {2});
  CHECK(ms.mse.at(2) == Catch::Approx(1.0).margin(1e-15));
  CHECK(ms.mae.at(2) == Catch::Approx(1.0).margin(1e-15));
}

TEST_CASE("checkpoint round trip is bit exact") {
  ModelConfig c = tiny_config();
  ParameterSet ps = init_params(c);
  CounterRng rng(9, "ckpt-noise");
  for (Tensor& t : ps.tensors())
    for (double& v : t.values) v += 0.001 * rng.next_gaussian();
  ps.set_stage(Stage::kTune);

  const auto path = temp_file("olivia_test_ckpt.bin");
  save_checkpoint(path.string(), {c, Stage::kTune, AttentionKind::kFull, ps});
  const Checkpoint back = load_checkpoint(path.string());

  CHECK(back.stage == Stage::kTune);
  CHECK(back.attention == AttentionKind::kFull);
  CHECK(back.config.input_len == c.input_len);
  REQUIRE(back.params.tensors().size() == ps.tensors().size());
  for (std::size_t i = 0; i < ps.tensors().size(); ++i) {
    CHECK(back.params.tensors()[i].name == ps.tensors()[i].name);
    CHECK(back.params.tensors()[i].values == ps.tensors()[i].values);
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint load rejects corruption") {
  ModelConfig c = tiny_config();
  const auto path = temp_file("olivia_test_ckpt2.bin");
  save_checkpoint(path.string(),
                  {c, Stage::kPretrain, AttentionKind::kHarmonic, init_params(c)});

  SECTION("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("NOPE", 4);
    f.close();
    CHECK_THROWS_WITH(load_checkpoint(path.string()),
                      Catch::Matchers::ContainsSubstring("bad magic"));
  }
  SECTION("truncated payload") {
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 16);
    CHECK_THROWS_AS(load_checkpoint(path.string()), ValidationError);
  }
  SECTION("offset outside payload") {
    // Rewrite the manifest with an absurd offset.
    std::ifstream in(path, std::ios::binary);
    char magic[5];
    in.read(magic, 5);
    std::uint64_t mlen;
    in.read(reinterpret_cast<char*>(&mlen), 8);
    std::string mtext(mlen, '\0');
    in.read(mtext.data(), static_cast<std::streamsize>(mlen));
    std::vector<char> payload(std::istreambuf_iterator<char>(in), {});
    in.close();

    nlohmann::json manifest = nlohmann::json::parse(mtext);
    manifest["tensors"][0]["offset"] = 1ull << 40;
    const std::string changed = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    out.write("OLIV", 4);
    const char ver = 0x01;
    out.write(&ver, 1);
    const std::uint64_t newlen = changed.size();
    out.write(reinterpret_cast<const char*>(&newlen), 8);
    out.write(changed.data(), static_cast<std::streamsize>(changed.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(path.string()), ValidationError);
  }
  std::filesystem::remove(path);
}
