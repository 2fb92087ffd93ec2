#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "olivia/common.hpp"
#include "olivia/data.hpp"
#include "olivia/model.hpp"

#include "json.hpp"

namespace olivia {

struct LossBreakdown {
  double total = 0.0;
  double recon = 0.0;
  std::map<int, double> per_horizon;
};

/// Pretrain loss: mean squared reconstruction error, (1/T)||x - xhat||^2.
/// Tune loss default: every term normalized by its own length, so horizons
/// of different scale contribute comparably. paper_exact keeps the printed
/// form instead: raw sum over horizon terms plus the (1/T)-normalized recon.
inline LossBreakdown loss(const ForwardOutput& outputs, const Vec& x_target,
                          const std::map<int, Vec>& future_targets, Stage stage,
                          bool paper_exact = false) {
  require(outputs.x_hat.size() == x_target.size(), "loss: reconstruction shape mismatch");
  LossBreakdown lb;
  double sq = 0.0;
  for (std::size_t i = 0; i < x_target.size(); ++i) {
    const double r = outputs.x_hat[i] - x_target[i];
    sq += r * r;
  }
  lb.recon = sq / static_cast<double>(x_target.size());
  lb.total = lb.recon;

  if (stage != Stage::kPretrain) {
    for (const auto& [h, forecast] : outputs.forecasts) {
      const auto it = future_targets.find(h);
      require(it != future_targets.end(),
              "loss: missing target for horizon " + std::to_string(h));
      require(it->second.size() == forecast.size(), "loss: horizon shape mismatch");
      double hs = 0.0;
      for (std::size_t i = 0; i < forecast.size(); ++i) {
        const double r = forecast[i] - it->second[i];
        hs += r * r;
      }
      const double term = paper_exact ? hs : hs / static_cast<double>(forecast.size());
      lb.per_horizon[h] = term;
      lb.total += term;
    }
  }
  return lb;
}

struct LossGrads {
  Vec d_x_hat;
  std::map<int, Vec> d_forecasts;
};

inline LossGrads loss_backward(const ForwardOutput& outputs, const Vec& x_target,
                               const std::map<int, Vec>& future_targets, Stage stage,
                               bool paper_exact = false) {
  LossGrads g;
  const double t = static_cast<double>(x_target.size());
  g.d_x_hat.resize(x_target.size());
  for (std::size_t i = 0; i < x_target.size(); ++i)
    g.d_x_hat[i] = 2.0 * (outputs.x_hat[i] - x_target[i]) / t;

  if (stage != Stage::kPretrain) {
    for (const auto& [h, forecast] : outputs.forecasts) {
      const Vec& target = future_targets.at(h);
      Vec d(forecast.size());
      const double scale = paper_exact ? 2.0 : 2.0 / static_cast<double>(forecast.size());
      for (std::size_t i = 0; i < forecast.size(); ++i)
        d[i] = scale * (forecast[i] - target[i]);
      g.d_forecasts[h] = std::move(d);
    }
  }
  return g;
}

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adaptive moment estimation with decoupled weight decay. The decay is
/// applied multiplicatively before the bias-corrected adaptive step, and
/// only trainable tensors are touched.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::int64_t steps() const { return t_; }

  void step(ParameterSet& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Tensor& p : params.tensors()) {
      if (!p.trainable) continue;
      auto& [m, v] = state_[p.name];
      if (m.size() != p.size()) {
        m.assign(p.size(), 0.0);
        v.assign(p.size(), 0.0);
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        p.values[i] *= 1.0 - cfg_.lr * cfg_.weight_decay;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.values[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, std::pair<Vec, Vec>> state_;
};

struct Checkpoint {
  ModelConfig config;
  Stage stage = Stage::kPretrain;
  AttentionKind attention = AttentionKind::kHarmonic;
  ParameterSet params;
};

/// Wire format: "OLIV", version byte 0x01, u64-LE manifest byte length,
/// UTF-8 JSON manifest {config, stage, attention, tensors:[{name, shape,
/// offset}]}, then the payload of little-endian 64-bit floats. Offsets are
/// byte positions into the payload.
inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint writer assumes a little-endian host");
  nlohmann::json manifest;
  manifest["config"] = config_to_json(ckpt.config);
  manifest["stage"] = stage_name(ckpt.stage);
  manifest["attention"] =
      ckpt.attention == AttentionKind::kHarmonic ? "harmonic" : "full";
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const Tensor& t : ckpt.params.tensors()) {
    nlohmann::json entry;
    entry["name"] = t.name;
    entry["shape"] = t.shape;
    entry["offset"] = offset;
    tensors.push_back(entry);
    offset += t.size() * sizeof(double);
  }
  manifest["tensors"] = tensors;
  const std::string mtext = manifest.dump();

  std::ofstream out(path, std::ios::binary);
  require(out.good(), "checkpoint save: cannot open " + path);
  out.write("OLIV", 4);
  const char version = 0x01;
  out.write(&version, 1);
  const std::uint64_t mlen = mtext.size();
  out.write(reinterpret_cast<const char*>(&mlen), 8);
  out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
  for (const Tensor& t : ckpt.params.tensors())
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  require(out.good(), "checkpoint save: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint reader assumes a little-endian host");
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "checkpoint load: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  require(in.gcount() == 4 && std::memcmp(magic, "OLIV", 4) == 0,
          "checkpoint load: bad magic in " + path);
  char version = 0;
  in.read(&version, 1);
  require(version == 0x01, "checkpoint load: unsupported version");
  std::uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), 8);
  require(in.gcount() == 8, "checkpoint load: truncated manifest length");
  std::string mtext(mlen, '\0');
  in.read(mtext.data(), static_cast<std::streamsize>(mlen));
  require(static_cast<std::uint64_t>(in.gcount()) == mlen,
          "checkpoint load: truncated manifest");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const std::exception& e) {
    throw ValidationError(std::string("checkpoint load: manifest parse error: ") +
                          e.what());
  }

  Checkpoint ckpt;
  ckpt.config = config_from_json(manifest.at("config"));
  ckpt.stage = stage_from_name(manifest.at("stage").get<std::string>());
  const std::string attn = manifest.value("attention", "harmonic");
  ckpt.attention = attn == "full" ? AttentionKind::kFull : AttentionKind::kHarmonic;
  ckpt.params = init_params(ckpt.config);

  std::vector<char> payload(std::istreambuf_iterator<char>(in), {});
  const std::uint64_t payload_len = payload.size();

  std::uint64_t expected_offset = 0;
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    require(ckpt.params.has(name), "checkpoint load: unexpected tensor " + name);
    Tensor& t = ckpt.params.at(name);
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    require(shape == t.shape, "checkpoint load: shape mismatch for " + name);
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    require(offset == expected_offset,
            "checkpoint load: overlapping or out-of-order offsets at " + name);
    const std::uint64_t nbytes = t.size() * sizeof(double);
    require(offset + nbytes <= payload_len,
            "checkpoint load: offset range outside payload for " + name);
    std::memcpy(t.values.data(), payload.data() + offset, nbytes);
    expected_offset = offset + nbytes;
  }
  require(expected_offset == payload_len, "checkpoint load: payload size mismatch");
  ckpt.params.set_stage(ckpt.stage);
  return ckpt;
}

/// Rebuild a checkpoint's parameters under a new horizon set: shared
/// tensors keep their trained values, prediction heads for horizons absent
/// from the checkpoint start at their deterministic init.
inline Checkpoint adapt_horizons(const Checkpoint& ckpt, const std::vector<int>& horizons) {
  Checkpoint out;
  out.config = ckpt.config;
  out.config.horizons = horizons;
  out.config.validate();
  out.stage = ckpt.stage;
  out.attention = ckpt.attention;
  out.params = init_params(out.config);
  for (Tensor& t : out.params.tensors())
    if (ckpt.params.has(t.name)) t.values = ckpt.params.at(t.name).values;
  out.params.set_stage(out.stage);
  return out;
}

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  std::size_t checked_scalars = 0;
};

namespace detail {

struct GradCheckProblem {
  Vec input;
  std::map<int, Vec> futures;
};

inline GradCheckProblem grad_check_problem(const ModelConfig& c) {
  GradCheckProblem p;
  CounterRng rng(c.seed, "gradcheck-data");
  p.input.resize(c.input_len);
  for (double& v : p.input) v = rng.next_gaussian();
  for (int h : c.horizons) {
    Vec f(h);
    for (double& v : f) v = rng.next_gaussian();
    p.futures[h] = std::move(f);
  }
  return p;
}

inline double grad_check_loss(const ModelConfig& c, const ParameterSet& ps,
                              const GradCheckProblem& prob, Stage stage) {
  const ForwardOutput out = forward(c, ps, prob.input, stage);
  return loss(out, prob.input, prob.futures, stage).total;
}

}  // namespace detail

/// Central finite differences (h = 1e-6) over every trainable scalar of the
/// pretrain-stage loss and, when horizons exist, the tune-stage loss under
/// its freezing schedule. `corrupt_sign` flips one analytic gradient entry
/// as a negative control; the report must then fail.
inline GradCheckReport grad_check(const ModelConfig& c, double tolerance,
                                  bool corrupt_sign = false) {
  c.validate();
  const detail::GradCheckProblem prob = detail::grad_check_problem(c);
  GradCheckReport report;

  std::vector<Stage> stages = {Stage::kPretrain};
  if (!c.horizons.empty()) stages.push_back(Stage::kTune);

  for (Stage stage : stages) {
    ParameterSet ps = init_params(c);
    ps.set_stage(stage);
    require(ps.trainable_scalar_count() > 0,
            "grad_check: no trainable scalars at stage " + stage_name(stage));

    ps.zero_grads();
    ForwardCache cache;
    const ForwardOutput out = forward(c, ps, prob.input, stage, &cache);
    const LossGrads lg = loss_backward(out, prob.input, prob.futures, stage);
    backward(c, ps, cache, lg.d_x_hat, lg.d_forecasts);

    bool corrupted = !corrupt_sign;
    const double h = 1e-6;
    for (Tensor& t : ps.tensors()) {
      if (!t.trainable) continue;
      for (std::size_t i = 0; i < t.size(); ++i) {
        double analytic = t.grad[i];
        if (!corrupted && analytic != 0.0) {
          analytic = -analytic;  // deliberate sign flip, first nonzero entry
          corrupted = true;
        }
        const double saved = t.values[i];
        t.values[i] = saved + h;
        const double fp = detail::grad_check_loss(c, ps, prob, stage);
        t.values[i] = saved - h;
        const double fm = detail::grad_check_loss(c, ps, prob, stage);
        t.values[i] = saved;
        const double fd = (fp - fm) / (2.0 * h);
        const double rel =
            std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-6});
        if (rel > report.max_rel_err) {
          report.max_rel_err = rel;
          report.worst_tensor = t.name;
          report.worst_index = i;
        }
        ++report.checked_scalars;
      }
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

inline nlohmann::json grad_check_json(const GradCheckReport& r, double tolerance) {
  nlohmann::json j;
  j["max_rel_err"] = r.max_rel_err;
  j["tolerance"] = tolerance;
  j["pass"] = r.pass;
  j["checked_scalars"] = r.checked_scalars;
  j["worst_tensor"] = r.worst_tensor;
  j["worst_index"] = r.worst_index;
  return j;
}

struct StageSchedule {
  int pretrain_epochs = 10;
  int tune_epochs = 2;
  double lr_pretrain = 1e-3;
  double lr_tune = 8e-4;
  int batch_size = 64;
  double weight_decay = 0.01;
  bool loss_paper_exact = false;
};

struct EpochLog {
  int epoch = 0;
  Stage stage = Stage::kPretrain;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  Checkpoint final;
  Checkpoint best;  // lowest validation loss within the last stage run
  std::vector<EpochLog> history;
};

namespace detail {

struct TrainItem {
  const Window* window = nullptr;
};

// Windows must carry T samples for pretraining and T + max(horizons) for
// tuning; the extra tail provides the horizon targets.
inline void check_corpus_lengths(const ModelConfig& c, const Corpus& corpus,
                                 bool tuning) {
  const std::size_t need = tuning
                               ? static_cast<std::size_t>(c.input_len + c.max_horizon())
                               : static_cast<std::size_t>(c.input_len);
  require(corpus.train_count() > 0, "train: empty corpus");
  for (const auto& [id, ws] : corpus.train)
    for (const Window& w : ws)
      require(w.length() >= need, "train: window in domain '" + id +
                                      "' shorter than required length " +
                                      std::to_string(need));
}

inline std::vector<const Window*> flatten(
    const std::map<std::string, std::vector<Window>>& by_domain) {
  std::vector<const Window*> out;
  for (const auto& [id, ws] : by_domain)
    for (const Window& w : ws) out.push_back(&w);
  return out;
}

inline LossBreakdown window_loss_and_grads(const ModelConfig& c, ParameterSet& ps,
                                           const Window& w, Stage stage,
                                           AttentionKind kind, bool paper_exact,
                                           bool with_grads) {
  const Vec past(w.values.begin(), w.values.begin() + c.input_len);
  std::map<int, Vec> futures;
  if (stage != Stage::kPretrain) {
    for (int h : c.horizons)
      futures[h] = Vec(w.values.begin() + c.input_len,
                       w.values.begin() + c.input_len + h);
  }
  if (with_grads) {
    ForwardCache cache;
    const ForwardOutput out = forward(c, ps, past, stage, &cache, kind);
    const LossBreakdown lb = loss(out, past, futures, stage, paper_exact);
    const LossGrads lg = loss_backward(out, past, futures, stage, paper_exact);
    backward(c, ps, cache, lg.d_x_hat, lg.d_forecasts);
    return lb;
  }
  const ForwardOutput out = forward(c, ps, past, stage, nullptr, kind);
  return loss(out, past, futures, stage, paper_exact);
}

}  // namespace detail

/// Two-stage protocol: pretrain epochs with everything trainable, then tune
/// epochs with the Appendix-B freezing schedule. Shuffles are reseeded per
/// (seed, stage, epoch); batch gradients are averaged in index order, so a
/// fixed seed reproduces the loss curves bit for bit. One JSON line per
/// epoch goes to `log` when given: {epoch, stage, train_loss, val_loss,
/// seconds}.
inline TrainResult train(const ModelConfig& c, const Corpus& corpus,
                         const StageSchedule& schedule, std::ostream* log = nullptr,
                         AttentionKind kind = AttentionKind::kHarmonic,
                         const ParameterSet* warm_start = nullptr) {
  c.validate();
  require(schedule.pretrain_epochs >= 0 && schedule.tune_epochs >= 0,
          "train: negative epoch counts");
  require(schedule.batch_size >= 1, "train: batch size must be positive");
  if (schedule.tune_epochs > 0)
    require(!c.horizons.empty(), "train: tuning requires at least one horizon");
  detail::check_corpus_lengths(c, corpus, schedule.tune_epochs > 0);

  ParameterSet params = warm_start ? *warm_start : init_params(c);
  const std::vector<const Window*> train_windows = detail::flatten(corpus.train);
  const std::vector<const Window*> val_windows = detail::flatten(corpus.val);

  TrainResult result;
  std::optional<double> best_val;

  const auto run_stage = [&](Stage stage, int epochs, double lr) {
    if (epochs <= 0) return;
    params.set_stage(stage);
    AdamWConfig acfg;
    acfg.lr = lr;
    acfg.weight_decay = schedule.weight_decay;
    AdamW opt(acfg);
    best_val.reset();  // best-validation tracking restarts per stage

    std::vector<std::size_t> order(train_windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      CounterRng rng(c.seed, "shuffle:" + stage_name(stage) + ":" + std::to_string(epoch));
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.next_below(i)]);

      double train_acc = 0.0;
      std::size_t batch_start = 0;
      while (batch_start < order.size()) {
        const std::size_t batch_end =
            std::min(batch_start + static_cast<std::size_t>(schedule.batch_size),
                     order.size());
        params.zero_grads();
        for (std::size_t i = batch_start; i < batch_end; ++i) {
          const LossBreakdown lb = detail::window_loss_and_grads(
              c, params, *train_windows[order[i]], stage, kind,
              schedule.loss_paper_exact, true);
          train_acc += lb.total;
        }
        const double inv = 1.0 / static_cast<double>(batch_end - batch_start);
        for (Tensor& t : params.tensors()) {
          if (!t.trainable) continue;
          for (double& g : t.grad) g *= inv;
        }
        opt.step(params);
        batch_start = batch_end;
      }
      const double train_loss = train_acc / static_cast<double>(train_windows.size());

      double val_loss = 0.0;
      for (const Window* w : val_windows)
        val_loss += detail::window_loss_and_grads(c, params, *w, stage, kind,
                                                  schedule.loss_paper_exact, false)
                        .total;
      if (!val_windows.empty()) val_loss /= static_cast<double>(val_windows.size());

      const double seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.history.push_back({epoch, stage, train_loss, val_loss, seconds});
      if (log) {
        nlohmann::json line;
        line["epoch"] = epoch;
        line["stage"] = stage_name(stage);
        line["train_loss"] = train_loss;
        line["val_loss"] = val_loss;
        line["seconds"] = seconds;
        (*log) << line.dump() << '\n';
      }
      if (!best_val || val_loss < *best_val) {
        best_val = val_loss;
        result.best = Checkpoint{c, stage, kind, params};
      }
    }
  };

  run_stage(Stage::kPretrain, schedule.pretrain_epochs, schedule.lr_pretrain);
  run_stage(Stage::kTune, schedule.tune_epochs, schedule.lr_tune);

  const Stage final_stage = schedule.tune_epochs > 0 ? Stage::kTune
                            : schedule.pretrain_epochs > 0 ? Stage::kPretrain
                                                           : params.stage();
  params.set_stage(final_stage);
  result.final = Checkpoint{c, final_stage, kind, params};
  if (!best_val) result.best = result.final;
  return result;
}

struct EvalMetrics {
  std::map<int, double> mse;
  std::map<int, double> mae;
  double avg_mse = 0.0;
  double avg_mae = 0.0;
  std::size_t items = 0;
};

/// MSE/MAE over all forecast points per horizon plus the cross-horizon
/// averages. Every item must supply T past samples and max(horizons) future
/// samples.
inline EvalMetrics evaluate(const Checkpoint& ckpt, const std::vector<Window>& items,
                            const std::vector<int>& horizons) {
  const ModelConfig& c = ckpt.config;
  require(!items.empty(), "evaluate: no evaluation items");
  require(!horizons.empty(), "evaluate: no horizons");
  int max_h = 0;
  for (int h : horizons) {
    require(std::find(c.horizons.begin(), c.horizons.end(), h) != c.horizons.end(),
            "evaluate: checkpoint has no head for horizon " + std::to_string(h));
    max_h = std::max(max_h, h);
  }
  for (const Window& w : items)
    require(w.length() >= static_cast<std::size_t>(c.input_len + max_h),
            "evaluate: item shorter than T + max horizon");

  EvalMetrics metrics;
  metrics.items = items.size();
  std::map<int, double> sq, ab;
  std::map<int, std::size_t> count;
  for (const Window& w : items) {
    const Vec past(w.values.begin(), w.values.begin() + c.input_len);
    const ForwardOutput out = forward(c, ckpt.params, past, Stage::kInfer, nullptr,
                                      ckpt.attention);
    for (int h : horizons) {
      const Vec& f = out.forecasts.at(h);
      for (int i = 0; i < h; ++i) {
        const double truth = w.values[c.input_len + i];
        const double r = f[i] - truth;
        sq[h] += r * r;
        ab[h] += std::abs(r);
        ++count[h];
      }
    }
  }
  for (int h : horizons) {
    metrics.mse[h] = sq[h] / static_cast<double>(count[h]);
    metrics.mae[h] = ab[h] / static_cast<double>(count[h]);
    metrics.avg_mse += metrics.mse[h];
    metrics.avg_mae += metrics.mae[h];
  }
  metrics.avg_mse /= static_cast<double>(horizons.size());
  metrics.avg_mae /= static_cast<double>(horizons.size());
  return metrics;
}

inline nlohmann::json metrics_json(const EvalMetrics& m) {
  nlohmann::json j;
  for (const auto& [h, v] : m.mse) j["mse"][std::to_string(h)] = v;
  for (const auto& [h, v] : m.mae) j["mae"][std::to_string(h)] = v;
  j["avg_mse"] = m.avg_mse;
  j["avg_mae"] = m.avg_mae;
  j["items"] = m.items;
  return j;
}

}  // namespace olivia
