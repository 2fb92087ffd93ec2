#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "olivia/attention.hpp"
#include "olivia/common.hpp"
#include "olivia/harmonizer.hpp"
#include "olivia/linalg.hpp"
#include "olivia/rng.hpp"
#include "olivia/spectral.hpp"

#include "json.hpp"

namespace olivia {

enum class Stage { kPretrain, kTune, kInfer };
enum class AttentionKind { kHarmonic, kFull };

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kPretrain: return "pretrain";
    case Stage::kTune: return "tune";
    case Stage::kInfer: return "infer";
  }
  return "?";
}

inline Stage stage_from_name(const std::string& s) {
  if (s == "pretrain") return Stage::kPretrain;
  if (s == "tune") return Stage::kTune;
  if (s == "infer") return Stage::kInfer;
  throw ValidationError("unknown stage name: " + s);
}

struct ModelConfig {
  int input_len = 512;   // T
  int patch_len = 64;
  int embed_dim = 256;   // d
  int heads = 16;        // H
  int head_dim = 16;     // P
  int resonators = 0;    // M; 0 selects the default max(1, ceil(L/4))
  int enc_layers = 4;
  int dec_layers = 2;
  int householder_count = 256;  // K
  std::vector<int> horizons = {96, 192, 336, 720};
  double gamma_init = 0.1;
  bool instance_norm = true;
  bool literal_resonators = false;
  std::uint64_t seed = 0;

  int tokens() const { return input_len / patch_len; }

  int resolved_resonators() const {
    if (resonators > 0) return resonators;
    return std::max(1, (tokens() + 3) / 4);
  }

  int max_horizon() const {
    int m = 0;
    for (int h : horizons) m = std::max(m, h);
    return m;
  }

  void validate() const {
    require(input_len >= 2, "config: T must be at least 2");
    require(patch_len >= 1, "config: patch_len must be positive");
    require(input_len % patch_len == 0, "config: T must be divisible by patch_len");
    require(embed_dim >= 1 && heads >= 1 && head_dim >= 1,
            "config: d, H, P must be positive");
    require(embed_dim == heads * head_dim, "config: d must equal H*P");
    require(enc_layers >= 0 && dec_layers >= 0, "config: negative layer count");
    require(householder_count >= 0, "config: K must be nonnegative");
    require(resonators >= 0, "config: M must be nonnegative");
    require(resolved_resonators() <= tokens(),
            "config: more resonators than tokens (M > L)");
    for (int h : horizons) require(h >= 1, "config: horizons must be positive");
    require(gamma_init == gamma_init, "config: gamma_init is NaN");
  }
};

inline ModelConfig config_from_json(const nlohmann::json& j) {
  static const std::map<std::string, int> known = {
      {"T", 0},          {"patch_len", 0},     {"d", 0},
      {"H", 0},          {"P", 0},             {"M", 0},
      {"enc_layers", 0}, {"dec_layers", 0},    {"K", 0},
      {"horizons", 0},   {"gamma_init", 0},    {"instance_norm", 0},
      {"literal_resonators", 0},               {"seed", 0}};
  for (const auto& [key, _] : j.items())
    require(known.count(key) == 1, "config: unknown key '" + key + "'");

  ModelConfig c;
  if (j.contains("T")) c.input_len = j.at("T").get<int>();
  if (j.contains("patch_len")) c.patch_len = j.at("patch_len").get<int>();
  if (j.contains("d")) c.embed_dim = j.at("d").get<int>();
  if (j.contains("H")) c.heads = j.at("H").get<int>();
  if (j.contains("P")) c.head_dim = j.at("P").get<int>();
  if (j.contains("M")) c.resonators = j.at("M").get<int>();
  if (j.contains("enc_layers")) c.enc_layers = j.at("enc_layers").get<int>();
  if (j.contains("dec_layers")) c.dec_layers = j.at("dec_layers").get<int>();
  if (j.contains("K")) c.householder_count = j.at("K").get<int>();
  if (j.contains("horizons")) c.horizons = j.at("horizons").get<std::vector<int>>();
  if (j.contains("gamma_init")) c.gamma_init = j.at("gamma_init").get<double>();
  if (j.contains("instance_norm")) c.instance_norm = j.at("instance_norm").get<bool>();
  if (j.contains("literal_resonators"))
    c.literal_resonators = j.at("literal_resonators").get<bool>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["T"] = c.input_len;
  j["patch_len"] = c.patch_len;
  j["d"] = c.embed_dim;
  j["H"] = c.heads;
  j["P"] = c.head_dim;
  j["M"] = c.resonators;
  j["enc_layers"] = c.enc_layers;
  j["dec_layers"] = c.dec_layers;
  j["K"] = c.householder_count;
  j["horizons"] = c.horizons;
  j["gamma_init"] = c.gamma_init;
  j["instance_norm"] = c.instance_norm;
  j["literal_resonators"] = c.literal_resonators;
  j["seed"] = c.seed;
  return j;
}

enum class Group {
  kHarmonizer,
  kPatchEmbed,
  kPosEmbed,
  kEncoder,
  kDecoder,
  kReconHead,
  kPredHeads,
  kGammas,
};

struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  Vec values;
  Vec grad;
  Group group = Group::kEncoder;
  bool trainable = true;

  std::size_t size() const { return values.size(); }
};

/// Named, shape-tagged tensors with per-group trainable flags implementing
/// the stage-dependent freezing schedule.
class ParameterSet {
 public:
  Tensor& add(std::string name, std::vector<std::size_t> shape, Group group) {
    require(index_.count(name) == 0, "parameter set: duplicate tensor name " + name);
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    Tensor t;
    t.name = name;
    t.shape = std::move(shape);
    t.values.assign(n, 0.0);
    t.grad.assign(n, 0.0);
    t.group = group;
    index_[t.name] = tensors_.size();
    tensors_.push_back(std::move(t));
    return tensors_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) == 1; }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "parameter set: unknown tensor " + name);
    return tensors_[it->second];
  }
  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "parameter set: unknown tensor " + name);
    return tensors_[it->second];
  }

  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  void zero_grads() {
    for (Tensor& t : tensors_) std::fill(t.grad.begin(), t.grad.end(), 0.0);
  }

  Stage stage() const { return stage_; }

  /// Pretrain: everything trainable. Tune: only the Harmonizer vectors and
  /// the prediction heads. Infer: nothing.
  void set_stage(Stage s) {
    stage_ = s;
    for (Tensor& t : tensors_) {
      switch (s) {
        case Stage::kPretrain: t.trainable = true; break;
        case Stage::kTune:
          t.trainable = t.group == Group::kHarmonizer || t.group == Group::kPredHeads;
          break;
        case Stage::kInfer: t.trainable = false; break;
      }
    }
  }

  std::size_t trainable_scalar_count() const {
    std::size_t n = 0;
    for (const Tensor& t : tensors_)
      if (t.trainable) n += t.size();
    return n;
  }

 private:
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
  Stage stage_ = Stage::kPretrain;
};

namespace detail {

inline void fill_uniform(Vec& v, double bound, CounterRng& rng) {
  for (double& x : v) x = (2.0 * rng.next_unit() - 1.0) * bound;
}

inline void fill_gaussian(Vec& v, double std, CounterRng& rng) {
  for (double& x : v) x = rng.next_gaussian() * std;
}

inline std::string block_prefix(const ModelConfig& c, int block) {
  return block < c.enc_layers ? "enc" + std::to_string(block)
                              : "dec" + std::to_string(block - c.enc_layers);
}

}  // namespace detail

/// Deterministic initialization: linear maps ~ Uniform(+-1/sqrt(fan_in)),
/// positional embeddings and resonator offsets ~ N(0, 0.02^2), layer norms
/// at unit gain, gammas at gamma_init, and the Householder stack at the
/// paired-identity start (which requires an even K).
inline ParameterSet init_params(const ModelConfig& c) {
  c.validate();
  require(c.householder_count % 2 == 0,
          "init: paired-identity Householder start requires an even K");
  const std::size_t t = c.input_len;
  const std::size_t p = c.patch_len;
  const std::size_t d = c.embed_dim;
  const std::size_t l = c.tokens();
  const std::size_t m = c.resolved_resonators();
  const std::size_t hd = c.head_dim;
  const std::size_t heads = c.heads;
  const std::size_t k = c.householder_count;

  ParameterSet ps;
  const auto stream = [&](const std::string& name) {
    return CounterRng(c.seed, "init:" + name);
  };

  {
    Tensor& hh = ps.add("harmonizer.vectors", {k, t}, Group::kHarmonizer);
    CounterRng rng = stream("harmonizer.vectors");
    const HouseholderStack s = HouseholderStack::paired_identity(t, k, rng);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < t; ++j) hh.values[i * t + j] = s.vectors[i][j];
  }
  {
    Tensor& w = ps.add("patch_embed.weight", {p, d}, Group::kPatchEmbed);
    CounterRng rng = stream("patch_embed.weight");
    detail::fill_uniform(w.values, 1.0 / std::sqrt(static_cast<double>(p)), rng);
    ps.add("patch_embed.bias", {d}, Group::kPatchEmbed);
  }
  {
    Tensor& pos = ps.add("pos_embed.weight", {l, d}, Group::kPosEmbed);
    CounterRng rng = stream("pos_embed.weight");
    detail::fill_gaussian(pos.values, 0.02, rng);
  }

  const int blocks = c.enc_layers + c.dec_layers;
  for (int b = 0; b < blocks; ++b) {
    const std::string prefix = detail::block_prefix(c, b);
    const Group g = b < c.enc_layers ? Group::kEncoder : Group::kDecoder;

    Tensor& g1 = ps.add(prefix + ".ln1.gain", {d}, g);
    std::fill(g1.values.begin(), g1.values.end(), 1.0);
    ps.add(prefix + ".ln1.bias", {d}, g);

    {
      Tensor& w = ps.add(prefix + ".attn.proj", {heads, d, hd}, g);
      CounterRng rng = stream(prefix + ".attn.proj");
      detail::fill_uniform(w.values, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    }
    {
      Tensor& e = ps.add(prefix + ".attn.offsets", {heads, m, hd}, g);
      CounterRng rng = stream(prefix + ".attn.offsets");
      detail::fill_gaussian(e.values, 0.02, rng);
    }
    {
      Tensor& gam = ps.add(prefix + ".attn.gamma", {1}, Group::kGammas);
      gam.values[0] = c.gamma_init;
    }

    Tensor& g2 = ps.add(prefix + ".ln2.gain", {d}, g);
    std::fill(g2.values.begin(), g2.values.end(), 1.0);
    ps.add(prefix + ".ln2.bias", {d}, g);

    {
      Tensor& w1 = ps.add(prefix + ".mlp.w1", {d, 4 * d}, g);
      CounterRng rng = stream(prefix + ".mlp.w1");
      detail::fill_uniform(w1.values, 1.0 / std::sqrt(static_cast<double>(d)), rng);
      ps.add(prefix + ".mlp.b1", {4 * d}, g);
      Tensor& w2 = ps.add(prefix + ".mlp.w2", {4 * d, d}, g);
      CounterRng rng2 = stream(prefix + ".mlp.w2");
      detail::fill_uniform(w2.values, 1.0 / std::sqrt(static_cast<double>(4 * d)), rng2);
      ps.add(prefix + ".mlp.b2", {d}, g);
    }
  }

  {
    Tensor& w = ps.add("recon.weight", {l * d, t}, Group::kReconHead);
    CounterRng rng = stream("recon.weight");
    detail::fill_uniform(w.values, 1.0 / std::sqrt(static_cast<double>(l * d)), rng);
    ps.add("recon.bias", {t}, Group::kReconHead);
  }

  for (int h : c.horizons) {
    const std::string name = "pred" + std::to_string(h);
    Tensor& w = ps.add(name + ".weight", {t, static_cast<std::size_t>(h)},
                       Group::kPredHeads);
    CounterRng rng = stream(name + ".weight");
    detail::fill_uniform(w.values, 1.0 / std::sqrt(static_cast<double>(t)), rng);
    ps.add(name + ".bias", {static_cast<std::size_t>(h)}, Group::kPredHeads);
  }

  ps.set_stage(Stage::kPretrain);
  return ps;
}

inline void set_stage(ParameterSet& ps, Stage s) { ps.set_stage(s); }

inline HouseholderStack stack_from_params(const ModelConfig& c, const ParameterSet& ps) {
  const Tensor& t = ps.at("harmonizer.vectors");
  HouseholderStack s;
  s.dim = c.input_len;
  s.vectors.resize(c.householder_count, Vec(s.dim));
  for (int k = 0; k < c.householder_count; ++k)
    for (std::size_t j = 0; j < s.dim; ++j) s.vectors[k][j] = t.values[k * s.dim + j];
  return s;
}

namespace detail {

inline HarmonicAttentionParams attn_params_from(const ModelConfig& c,
                                                const ParameterSet& ps,
                                                const std::string& prefix) {
  HarmonicAttentionParams params;
  params.heads = c.heads;
  params.proj_dim = c.head_dim;
  params.resonators = c.resolved_resonators();
  params.literal_resonators = c.literal_resonators;
  params.gamma = ps.at(prefix + ".attn.gamma").values[0];
  const Tensor& w = ps.at(prefix + ".attn.proj");
  const Tensor& e = ps.at(prefix + ".attn.offsets");
  const std::size_t d = c.embed_dim, hd = c.head_dim, m = params.resonators;
  for (int h = 0; h < c.heads; ++h) {
    Mat wm(d, hd);
    std::copy(w.values.begin() + h * d * hd, w.values.begin() + (h + 1) * d * hd,
              wm.a.begin());
    params.proj.push_back(std::move(wm));
    Mat em(m, hd);
    std::copy(e.values.begin() + h * m * hd, e.values.begin() + (h + 1) * m * hd,
              em.a.begin());
    params.offsets.push_back(std::move(em));
  }
  return params;
}

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Mat normalized;  // xhat rows
  Vec rstd;
};

inline Mat layer_norm(const Mat& x, const Vec& gain, const Vec& bias,
                      LayerNormCache* cache) {
  Mat y(x.rows, x.cols);
  if (cache) {
    cache->normalized = Mat(x.rows, x.cols);
    cache->rstd.assign(x.rows, 0.0);
  }
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) mu += x(i, j);
    mu /= static_cast<double>(x.cols);
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double dxl = x(i, j) - mu;
      var += dxl * dxl;
    }
    var /= static_cast<double>(x.cols);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double xh = (x(i, j) - mu) * rstd;
      if (cache) cache->normalized(i, j) = xh;
      y(i, j) = gain[j] * xh + bias[j];
    }
    if (cache) cache->rstd[i] = rstd;
  }
  return y;
}

inline Mat layer_norm_backward(const LayerNormCache& cache, const Vec& gain,
                               const Mat& dy, Vec* d_gain, Vec* d_bias) {
  const std::size_t rows = cache.normalized.rows, cols = cache.normalized.cols;
  Mat dx(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double mean_dyg = 0.0, mean_dyg_xh = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double dyg = dy(i, j) * gain[j];
      mean_dyg += dyg;
      mean_dyg_xh += dyg * cache.normalized(i, j);
    }
    mean_dyg /= static_cast<double>(cols);
    mean_dyg_xh /= static_cast<double>(cols);
    for (std::size_t j = 0; j < cols; ++j) {
      const double dyg = dy(i, j) * gain[j];
      dx(i, j) = (dyg - mean_dyg - cache.normalized(i, j) * mean_dyg_xh) * cache.rstd[i];
      if (d_gain) (*d_gain)[j] += dy(i, j) * cache.normalized(i, j);
      if (d_bias) (*d_bias)[j] += dy(i, j);
    }
  }
  return dx;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

struct BlockCache {
  Mat input;
  LayerNormCache ln1;
  Mat ln1_out;
  HarmonicAttentionParams attn_params;
  HarmonicAttentionCache harm;
  FullAttentionCache full;
  Mat mid;  // after attention residual
  LayerNormCache ln2;
  Mat ln2_out;
  Mat hidden_pre;  // L x 4d
  Mat hidden_act;
  Mat output;
};

inline Mat block_forward(const ModelConfig& c, const ParameterSet& ps,
                         const std::string& prefix, const Mat& z, AttentionKind kind,
                         BlockCache* cache) {
  const Tensor& ln1g = ps.at(prefix + ".ln1.gain");
  const Tensor& ln1b = ps.at(prefix + ".ln1.bias");
  const Tensor& ln2g = ps.at(prefix + ".ln2.gain");
  const Tensor& ln2b = ps.at(prefix + ".ln2.bias");
  const Tensor& w1 = ps.at(prefix + ".mlp.w1");
  const Tensor& b1 = ps.at(prefix + ".mlp.b1");
  const Tensor& w2 = ps.at(prefix + ".mlp.w2");
  const Tensor& b2 = ps.at(prefix + ".mlp.b2");

  BlockCache local;
  BlockCache& bc = cache ? *cache : local;
  bc.attn_params = attn_params_from(c, ps, prefix);

  if (cache) bc.input = z;
  bc.ln1_out = layer_norm(z, ln1g.values, ln1b.values, cache ? &bc.ln1 : nullptr);

  // The attention ops include their own residual around their input; the
  // trunk residual must bypass the layer norm, so strip the op's residual
  // and re-add it around the raw z.
  Mat attn_out = kind == AttentionKind::kHarmonic
                     ? harmonic_attention(bc.ln1_out, bc.attn_params,
                                          cache ? &bc.harm : nullptr)
                     : full_attention(bc.ln1_out, bc.attn_params,
                                      cache ? &bc.full : nullptr);
  Mat mid = z;
  for (std::size_t i = 0; i < mid.a.size(); ++i)
    mid.a[i] += attn_out.a[i] - bc.ln1_out.a[i];

  bc.ln2_out = layer_norm(mid, ln2g.values, ln2b.values, cache ? &bc.ln2 : nullptr);

  const std::size_t l = z.rows, d = z.cols, hidden = 4 * d;
  Mat pre(l, hidden);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double v = bc.ln2_out(i, j);
      if (v == 0.0) continue;
      const double* wrow = w1.values.data() + j * hidden;
      double* prow = pre.a.data() + i * hidden;
      for (std::size_t k = 0; k < hidden; ++k) prow[k] += v * wrow[k];
    }
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t k = 0; k < hidden; ++k) pre(i, k) += b1.values[k];

  Mat act(l, hidden);
  for (std::size_t i = 0; i < act.a.size(); ++i) act.a[i] = gelu(pre.a[i]);

  Mat out = mid;
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t k = 0; k < hidden; ++k) {
      const double v = act(i, k);
      if (v == 0.0) continue;
      const double* wrow = w2.values.data() + k * d;
      double* orow = out.a.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) orow[j] += v * wrow[j];
    }
    for (std::size_t j = 0; j < d; ++j) out(i, j) += b2.values[j];
  }

  if (cache) {
    bc.mid = std::move(mid);
    bc.hidden_pre = std::move(pre);
    bc.hidden_act = std::move(act);
    bc.output = out;
  }
  return out;
}

inline void accumulate(Tensor& t, const Vec& g) {
  if (!t.trainable) return;
  for (std::size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
}

inline Mat block_backward(const ModelConfig& c, ParameterSet& ps,
                          const std::string& prefix, AttentionKind kind,
                          const BlockCache& bc, const Mat& d_out) {
  Tensor& ln1g = ps.at(prefix + ".ln1.gain");
  Tensor& ln1b = ps.at(prefix + ".ln1.bias");
  Tensor& ln2g = ps.at(prefix + ".ln2.gain");
  Tensor& ln2b = ps.at(prefix + ".ln2.bias");
  Tensor& w1 = ps.at(prefix + ".mlp.w1");
  Tensor& b1 = ps.at(prefix + ".mlp.b1");
  Tensor& w2 = ps.at(prefix + ".mlp.w2");
  Tensor& b2 = ps.at(prefix + ".mlp.b2");
  Tensor& wp = ps.at(prefix + ".attn.proj");
  Tensor& eo = ps.at(prefix + ".attn.offsets");
  Tensor& gam = ps.at(prefix + ".attn.gamma");

  const std::size_t l = bc.input.rows, d = bc.input.cols, hidden = 4 * d;

  // MLP backward.
  Mat d_act(l, hidden);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t k = 0; k < hidden; ++k) {
      double acc = 0.0;
      const double* wrow = w2.values.data() + k * d;
      const double* drow = d_out.a.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) acc += drow[j] * wrow[j];
      d_act(i, k) = acc;
    }
  if (w2.trainable) {
    for (std::size_t k = 0; k < hidden; ++k)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < l; ++i) acc += bc.hidden_act(i, k) * d_out(i, j);
        w2.grad[k * d + j] += acc;
      }
  }
  if (b2.trainable) {
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < l; ++i) acc += d_out(i, j);
      b2.grad[j] += acc;
    }
  }

  Mat d_pre(l, hidden);
  for (std::size_t i = 0; i < d_pre.a.size(); ++i)
    d_pre.a[i] = d_act.a[i] * gelu_grad(bc.hidden_pre.a[i]);

  Mat d_ln2(l, d);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      const double* wrow = w1.values.data() + j * hidden;
      const double* drow = d_pre.a.data() + i * hidden;
      for (std::size_t k = 0; k < hidden; ++k) acc += drow[k] * wrow[k];
      d_ln2(i, j) = acc;
    }
  if (w1.trainable) {
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < hidden; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < l; ++i) acc += bc.ln2_out(i, j) * d_pre(i, k);
        w1.grad[j * hidden + k] += acc;
      }
  }
  if (b1.trainable) {
    for (std::size_t k = 0; k < hidden; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < l; ++i) acc += d_pre(i, k);
      b1.grad[k] += acc;
    }
  }

  Vec d_ln2g(d, 0.0), d_ln2b(d, 0.0);
  Mat d_mid = layer_norm_backward(bc.ln2, ln2g.values, d_ln2, &d_ln2g, &d_ln2b);
  accumulate(ln2g, d_ln2g);
  accumulate(ln2b, d_ln2b);
  for (std::size_t i = 0; i < d_mid.a.size(); ++i) d_mid.a[i] += d_out.a[i];

  // Attention backward: the op's residual was stripped in the forward, so
  // subtract the pass-through component from its token gradient.
  AttentionGrads ag = kind == AttentionKind::kHarmonic
                          ? harmonic_attention_backward(bc.harm, bc.attn_params, d_mid)
                          : full_attention_backward(bc.full, bc.attn_params, d_mid);
  Mat d_ln1 = ag.d_tokens;
  for (std::size_t i = 0; i < d_ln1.a.size(); ++i) d_ln1.a[i] -= d_mid.a[i];

  if (wp.trainable) {
    const std::size_t hd = c.head_dim;
    for (int h = 0; h < c.heads; ++h)
      for (std::size_t i = 0; i < d * hd; ++i)
        wp.grad[h * d * hd + i] += ag.d_proj[h].a[i];
  }
  if (eo.trainable && kind == AttentionKind::kHarmonic) {
    const std::size_t m = c.resolved_resonators(), hd = c.head_dim;
    for (int h = 0; h < c.heads; ++h)
      for (std::size_t i = 0; i < m * hd; ++i)
        eo.grad[h * m * hd + i] += ag.d_offsets[h].a[i];
  }
  if (gam.trainable) gam.grad[0] += ag.d_gamma;

  Vec d_ln1g(d, 0.0), d_ln1b(d, 0.0);
  Mat d_in = layer_norm_backward(bc.ln1, ln1g.values, d_ln1, &d_ln1g, &d_ln1b);
  accumulate(ln1g, d_ln1g);
  accumulate(ln1b, d_ln1b);
  for (std::size_t i = 0; i < d_in.a.size(); ++i) d_in.a[i] += d_mid.a[i];
  return d_in;
}

}  // namespace detail

/// Patch the aligned series into L = T/patch_len segments and embed each:
/// token_l = patch_l W + b + pos_l.
inline Mat patchify_embed(const ModelConfig& c, const ParameterSet& ps,
                          std::span<const double> aligned) {
  require(aligned.size() == static_cast<std::size_t>(c.input_len),
          "patchify: series length does not match config");
  const std::size_t l = c.tokens(), p = c.patch_len, d = c.embed_dim;
  const Tensor& w = ps.at("patch_embed.weight");
  const Tensor& b = ps.at("patch_embed.bias");
  const Tensor& pos = ps.at("pos_embed.weight");

  Mat tokens(l, d);
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t r = 0; r < p; ++r) {
      const double v = aligned[i * p + r];
      if (v == 0.0) continue;
      const double* wrow = w.values.data() + r * d;
      double* trow = tokens.a.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) trow[j] += v * wrow[j];
    }
    for (std::size_t j = 0; j < d; ++j) tokens(i, j) += b.values[j] + pos.values[i * d + j];
  }
  return tokens;
}

struct ForwardOutput {
  Vec x_hat;
  std::map<int, Vec> forecasts;  // keyed by horizon; present iff stage != Pretrain
};

struct ForwardCache {
  Stage stage = Stage::kPretrain;
  AttentionKind kind = AttentionKind::kHarmonic;
  double shift = 0.0;  // instance-norm mean
  double scale = 1.0;  // sigma + eps
  Vec std_input;
  Vec aligned;
  Mat tokens0;
  std::vector<detail::BlockCache> blocks;
  Vec y_aligned;  // recon output before restore
  Vec restored;   // standardized-space reconstruction
};

/// Full pipeline: optional instance standardization, Aligner, patch
/// embedding, encoder and decoder blocks, recon head, Restorer, and (outside
/// pretraining) per-horizon linear heads on the restored sequence. Outputs
/// are mapped back to the original scale when instance_norm is on.
inline ForwardOutput forward(const ModelConfig& c, const ParameterSet& ps, const Vec& x,
                             Stage stage, ForwardCache* cache = nullptr,
                             AttentionKind kind = AttentionKind::kHarmonic) {
  c.validate();
  require(x.size() == static_cast<std::size_t>(c.input_len),
          "forward: input length does not match config T");
  require(all_finite(x), "forward: non-finite input");
  if (stage != Stage::kPretrain)
    require(!c.horizons.empty(), "forward: forecasting stage needs at least one horizon");

  const std::size_t t = c.input_len;
  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  fc = ForwardCache{};
  fc.stage = stage;
  fc.kind = kind;

  if (c.instance_norm) {
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(t);
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(t);
    fc.shift = mu;
    fc.scale = std::sqrt(var) + kStandardizeEps;
    fc.std_input.resize(t);
    for (std::size_t i = 0; i < t; ++i) fc.std_input[i] = (x[i] - mu) / fc.scale;
  } else {
    fc.shift = 0.0;
    fc.scale = 1.0;
    fc.std_input = x;
  }

  const HouseholderStack stack = stack_from_params(c, ps);
  fc.aligned = align(stack, fc.std_input);
  fc.tokens0 = patchify_embed(c, ps, fc.aligned);

  Mat z = fc.tokens0;
  const int blocks = c.enc_layers + c.dec_layers;
  fc.blocks.resize(cache ? blocks : 0);
  for (int b = 0; b < blocks; ++b) {
    z = detail::block_forward(c, ps, detail::block_prefix(c, b), z, kind,
                              cache ? &fc.blocks[b] : nullptr);
  }

  const Tensor& rw = ps.at("recon.weight");
  const Tensor& rb = ps.at("recon.bias");
  const std::size_t flat_len = z.a.size();
  fc.y_aligned.assign(t, 0.0);
  for (std::size_t i = 0; i < flat_len; ++i) {
    const double v = z.a[i];
    if (v == 0.0) continue;
    const double* wrow = rw.values.data() + i * t;
    for (std::size_t j = 0; j < t; ++j) fc.y_aligned[j] += v * wrow[j];
  }
  for (std::size_t j = 0; j < t; ++j) fc.y_aligned[j] += rb.values[j];

  fc.restored = restore(stack, fc.y_aligned);

  ForwardOutput out;
  out.x_hat.resize(t);
  for (std::size_t j = 0; j < t; ++j) out.x_hat[j] = fc.restored[j] * fc.scale + fc.shift;

  if (stage != Stage::kPretrain) {
    for (int h : c.horizons) {
      const Tensor& pw = ps.at("pred" + std::to_string(h) + ".weight");
      const Tensor& pb = ps.at("pred" + std::to_string(h) + ".bias");
      Vec f(h, 0.0);
      for (std::size_t j = 0; j < t; ++j) {
        const double v = fc.restored[j];
        if (v == 0.0) continue;
        const double* wrow = pw.values.data() + j * h;
        for (int k = 0; k < h; ++k) f[k] += v * wrow[k];
      }
      for (int k = 0; k < h; ++k) f[k] = (f[k] + pb.values[k]) * fc.scale + fc.shift;
      out.forecasts[h] = std::move(f);
    }
  }
  require(all_finite(out.x_hat), "forward: non-finite reconstruction");
  return out;
}

/// Accumulates parameter gradients for the cached forward pass. Frozen
/// tensors receive nothing, so their gradient buffers stay exactly zero.
inline void backward(const ModelConfig& c, ParameterSet& ps, const ForwardCache& fc,
                     const Vec& d_x_hat, const std::map<int, Vec>& d_forecasts) {
  const std::size_t t = c.input_len;
  require(d_x_hat.size() == t, "backward: reconstruction gradient length mismatch");

  Vec d_restored(t, 0.0);
  for (std::size_t j = 0; j < t; ++j) d_restored[j] = d_x_hat[j] * fc.scale;

  for (const auto& [h, df] : d_forecasts) {
    require(fc.stage != Stage::kPretrain, "backward: forecast gradients in pretrain");
    Tensor& pw = ps.at("pred" + std::to_string(h) + ".weight");
    Tensor& pb = ps.at("pred" + std::to_string(h) + ".bias");
    require(df.size() == static_cast<std::size_t>(h),
            "backward: forecast gradient length mismatch");
    for (int k = 0; k < h; ++k) {
      const double g = df[k] * fc.scale;
      if (pb.trainable) pb.grad[k] += g;
      for (std::size_t j = 0; j < t; ++j) {
        if (pw.trainable) pw.grad[j * h + k] += g * fc.restored[j];
        d_restored[j] += g * pw.values[j * h + k];
      }
    }
  }

  const HouseholderStack stack = stack_from_params(c, ps);
  Tensor& hh = ps.at("harmonizer.vectors");

  const ReflectionGrads rg = restore_backward(stack, fc.y_aligned, d_restored);
  if (hh.trainable) {
    for (std::size_t k = 0; k < rg.grad_vectors.size(); ++k)
      for (std::size_t j = 0; j < t; ++j)
        hh.grad[k * t + j] += rg.grad_vectors[k][j];
  }
  const Vec& d_y_aligned = rg.grad_input;

  Tensor& rw = ps.at("recon.weight");
  Tensor& rb = ps.at("recon.bias");
  const std::size_t l = c.tokens(), d = c.embed_dim;
  Mat d_tokens(l, d);
  for (std::size_t i = 0; i < l * d; ++i) {
    double acc = 0.0;
    const double* wrow = rw.values.data() + i * t;
    for (std::size_t j = 0; j < t; ++j) acc += wrow[j] * d_y_aligned[j];
    d_tokens.a[i] = acc;
  }
  {
    const Mat& final_tokens =
        fc.blocks.empty() ? fc.tokens0 : fc.blocks.back().output;
    if (rw.trainable) {
      for (std::size_t i = 0; i < l * d; ++i) {
        const double v = final_tokens.a[i];
        if (v == 0.0) continue;
        double* grow = rw.grad.data() + i * t;
        for (std::size_t j = 0; j < t; ++j) grow[j] += v * d_y_aligned[j];
      }
    }
    if (rb.trainable)
      for (std::size_t j = 0; j < t; ++j) rb.grad[j] += d_y_aligned[j];
  }

  for (int b = static_cast<int>(fc.blocks.size()); b-- > 0;) {
    d_tokens = detail::block_backward(c, ps, detail::block_prefix(c, b), fc.kind,
                                      fc.blocks[b], d_tokens);
  }

  // Patchify backward.
  Tensor& pe_w = ps.at("patch_embed.weight");
  Tensor& pe_b = ps.at("patch_embed.bias");
  Tensor& pos = ps.at("pos_embed.weight");
  const std::size_t p = c.patch_len;
  Vec d_aligned(t, 0.0);
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t r = 0; r < p; ++r) {
      double acc = 0.0;
      const double* wrow = pe_w.values.data() + r * d;
      const double* drow = d_tokens.a.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) acc += wrow[j] * drow[j];
      d_aligned[i * p + r] = acc;
      if (pe_w.trainable) {
        const double v = fc.aligned[i * p + r];
        if (v != 0.0) {
          double* grow = pe_w.grad.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) grow[j] += v * drow[j];
        }
      }
    }
    if (pe_b.trainable)
      for (std::size_t j = 0; j < d; ++j) pe_b.grad[j] += d_tokens(i, j);
    if (pos.trainable)
      for (std::size_t j = 0; j < d; ++j) pos.grad[i * d + j] += d_tokens(i, j);
  }

  const ReflectionGrads ag = align_backward(stack, fc.std_input, d_aligned);
  if (hh.trainable) {
    for (std::size_t k = 0; k < ag.grad_vectors.size(); ++k)
      for (std::size_t j = 0; j < t; ++j)
        hh.grad[k * t + j] += ag.grad_vectors[k][j];
  }
}

}  // namespace olivia
