#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mfpam/audio.hpp"
#include "mfpam/autodiff.hpp"
#include "mfpam/config_file.hpp"
#include "mfpam/ops.hpp"
#include "mfpam/pitch_scale.hpp"
#include "mfpam/random.hpp"

namespace mfpam {

inline constexpr std::size_t kLevels = 5;

struct Ablations {
  bool no_pnp = false;
  bool no_snake = false;
  bool no_multi_level = false;
  bool no_bifpn = false;

  friend bool operator==(const Ablations&, const Ablations&) = default;
};

/// Every architectural hyperparameter. Defaults are the full MF-PAM.
struct ModelConfig {
  std::array<std::size_t, kLevels> in_channels{1, 6, 12, 24, 48};
  std::array<std::size_t, kLevels> out_channels{6, 12, 24, 48, 96};
  std::array<std::size_t, kLevels> kernels{4, 4, 8, 8, 12};
  std::size_t block_stride = 4;
  std::array<double, kLevels> p_a{17, 13, 11, 7, 5};
  double np_a = 0.2;
  std::size_t pnp_levels = 2;  // leading blocks with a non-periodic path
  bool lstm_enabled = true;
  std::size_t lstm_hidden = 96;
  bool lstm_bidirectional = true;
  std::size_t bifpn_width = 32;
  std::size_t dsc_kernel = 5;
  double epsilon = 1e-4;
  std::size_t upsample_factor = 4;
  std::size_t chunk_samples = 16384;
  Ablations ablate;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  /// MF-PAM-S: the full model without the LSTM.
  static ModelConfig small() {
    ModelConfig c;
    c.lstm_enabled = false;
    return c;
  }

  void validate() const {
    for (std::size_t i = 0; i < kLevels; ++i) {
      if (in_channels[i] == 0 || out_channels[i] == 0 || kernels[i] == 0)
        throw ConfigError("model: channel and kernel schedules must be positive");
      if (i > 0 && in_channels[i] != out_channels[i - 1])
        throw ConfigError("model: in_channels[" + std::to_string(i) +
                          "] must equal out_channels[" + std::to_string(i - 1) + "]");
      if (!(p_a[i] > 0.0)) throw ConfigError("model: snake a values must be positive");
    }
    if (in_channels[0] != 1) throw ConfigError("model: the first block takes one channel");
    if (!(np_a > 0.0)) throw ConfigError("model: np_a must be positive");
    if (pnp_levels > kLevels) throw ConfigError("model: pnp_levels must be <= 5");
    if (!(epsilon > 0.0)) throw ConfigError("model: epsilon must be positive");
    if (block_stride < 1 || upsample_factor < 1 || dsc_kernel < 1 || bifpn_width < 1)
      throw ConfigError("model: strides, factors and widths must be >= 1");
    if (lstm_enabled && lstm_hidden == 0) throw ConfigError("model: lstm_hidden must be >= 1");
    if (chunk_samples == 0 || chunk_samples % 256)
      throw ConfigError("model: chunk_samples must be a positive multiple of 256");
    if (level_length(kLevels - 1) == 0 || level_length(2) < 2)
      throw ConfigError("model: chunk too short for the stride schedule");
  }

  /// Time length of pyramid level `i` (0-based).
  std::size_t level_length(std::size_t i) const {
    std::size_t len = chunk_samples * upsample_factor;
    for (std::size_t k = 0; k <= i; ++k) len = (len + block_stride - 1) / block_stride;
    return len;
  }

  /// Posteriorgram frames per chunk: half the third level.
  std::size_t frames() const { return level_length(2) / 2; }

  double hop_samples() const { return double(chunk_samples) / double(frames()); }
  double hop_sec() const { return hop_samples() / kSampleRate; }

  std::string to_text() const {
    auto list = [](const auto& a) {
      std::string s;
      char buf[32];
      for (std::size_t i = 0; i < a.size(); ++i) {
        if constexpr (std::is_floating_point_v<std::decay_t<decltype(a[0])>>)
          std::snprintf(buf, sizeof buf, "%.17g", double(a[i]));
        else
          std::snprintf(buf, sizeof buf, "%zu", std::size_t(a[i]));
        s += (i ? "," : "");
        s += buf;
      }
      return s;
    };
    auto num = [](double v) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    std::string t = "[model]\n";
    t += "in_channels = " + list(in_channels) + "\n";
    t += "out_channels = " + list(out_channels) + "\n";
    t += "kernels = " + list(kernels) + "\n";
    t += "block_stride = " + std::to_string(block_stride) + "\n";
    t += "p_a = " + list(p_a) + "\n";
    t += "np_a = " + num(np_a) + "\n";
    t += "pnp_levels = " + std::to_string(pnp_levels) + "\n";
    t += "lstm = " + b(lstm_enabled) + "\n";
    t += "lstm_hidden = " + std::to_string(lstm_hidden) + "\n";
    t += "lstm_bidirectional = " + b(lstm_bidirectional) + "\n";
    t += "bifpn_width = " + std::to_string(bifpn_width) + "\n";
    t += "dsc_kernel = " + std::to_string(dsc_kernel) + "\n";
    t += "epsilon = " + num(epsilon) + "\n";
    t += "upsample_factor = " + std::to_string(upsample_factor) + "\n";
    t += "chunk_samples = " + std::to_string(chunk_samples) + "\n";
    t += "no_pnp = " + b(ablate.no_pnp) + "\n";
    t += "no_snake = " + b(ablate.no_snake) + "\n";
    t += "no_multi_level = " + b(ablate.no_multi_level) + "\n";
    t += "no_bifpn = " + b(ablate.no_bifpn) + "\n";
    return t;
  }

  /// Reads the [model] section, starting from `base` for absent keys.
  static ModelConfig from_section(KeyValueFile& f) { return from_section(f, ModelConfig{}); }

  static ModelConfig from_section(KeyValueFile& f, ModelConfig base) {
    const std::string s = "model";
    auto arr_sz = [&](const char* key, std::array<std::size_t, kLevels> def) {
      auto v = f.get_sizes(s, key, {def.begin(), def.end()});
      if (v.size() != kLevels)
        throw FormatError(std::string("[model] ") + key + ": expected 5 values");
      std::copy(v.begin(), v.end(), def.begin());
      return def;
    };
    ModelConfig c = base;
    c.in_channels = arr_sz("in_channels", c.in_channels);
    c.out_channels = arr_sz("out_channels", c.out_channels);
    c.kernels = arr_sz("kernels", c.kernels);
    c.block_stride = f.get_size(s, "block_stride", c.block_stride);
    {
      auto v = f.get_doubles(s, "p_a", {c.p_a.begin(), c.p_a.end()});
      if (v.size() != kLevels) throw FormatError("[model] p_a: expected 5 values");
      std::copy(v.begin(), v.end(), c.p_a.begin());
    }
    c.np_a = f.get_double(s, "np_a", c.np_a);
    c.pnp_levels = f.get_size(s, "pnp_levels", c.pnp_levels);
    c.lstm_enabled = f.get_bool(s, "lstm", c.lstm_enabled);
    c.lstm_hidden = f.get_size(s, "lstm_hidden", c.lstm_hidden);
    c.lstm_bidirectional = f.get_bool(s, "lstm_bidirectional", c.lstm_bidirectional);
    c.bifpn_width = f.get_size(s, "bifpn_width", c.bifpn_width);
    c.dsc_kernel = f.get_size(s, "dsc_kernel", c.dsc_kernel);
    c.epsilon = f.get_double(s, "epsilon", c.epsilon);
    c.upsample_factor = f.get_size(s, "upsample_factor", c.upsample_factor);
    c.chunk_samples = f.get_size(s, "chunk_samples", c.chunk_samples);
    c.ablate.no_pnp = f.get_bool(s, "no_pnp", c.ablate.no_pnp);
    c.ablate.no_snake = f.get_bool(s, "no_snake", c.ablate.no_snake);
    c.ablate.no_multi_level = f.get_bool(s, "no_multi_level", c.ablate.no_multi_level);
    c.ablate.no_bifpn = f.get_bool(s, "no_bifpn", c.ablate.no_bifpn);
    c.validate();
    return c;
  }

  /// Applies one ablation by name; throws UsageError for unknown names.
  void apply_ablation(const std::string& name) {
    if (name == "no_pnp") ablate.no_pnp = true;
    else if (name == "no_snake") ablate.no_snake = true;
    else if (name == "no_multi_level") ablate.no_multi_level = true;
    else if (name == "no_bifpn") ablate.no_bifpn = true;
    else
      throw UsageError("unknown ablation '" + name +
                       "' (no_pnp|no_snake|no_multi_level|no_bifpn)");
  }
};

/// Hidden width of the single-path replacement for a dual-path block that
/// keeps the parameter count closest to the dual-path original.
inline std::size_t matched_hidden_width(std::size_t cin, std::size_t cout, std::size_t k) {
  const std::size_t path = (cin * k + 1) * cout + (cout * k + 1) * cout;
  const std::size_t target = 2 * path;
  const std::size_t per_unit = cin * k + 1 + k * cout;
  std::size_t best = 1;
  long long best_diff = -1;
  for (std::size_t h = 1; h <= 8 * cout + 8; ++h) {
    const long long count = (long long)(h * per_unit + cout);
    const long long diff = std::llabs(count - (long long)target);
    if (best_diff < 0 || diff < best_diff) {
      best = h;
      best_diff = diff;
    }
  }
  return best;
}

/// `fan_in`: every weight and bias uniform in +-sqrt(1/fan_in).
/// `scaled`: conv and DSC weights keep activation variance (gain 2 before a
/// ReLU), their biases start at zero, and the head bias starts every bin at
/// probability 1/360.
enum class InitScheme { scaled, fan_in };

/// The MF-PAM network: analysis blocks, optional LSTM, pre-sizing, light
/// BiFPN and a sigmoid projection head over 360 pitch bins.
template <typename T>
class MfPam {
 public:
  struct Conv {
    Parameter<T> weight, bias;
    std::size_t stride = 1;
    Padding pad;

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
      return conv1d(tape, x, weight.var, bias.var, stride, 1, pad);
    }
  };

  /// conv1 -> ReLU -> conv2 -> output activation (Snake, or ReLU when ablated)
  struct ConvPath {
    Conv conv1, conv2;
    Activation out_act;

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
      auto h = activation(tape, conv1(tape, x), Activation::relu());
      return activation(tape, conv2(tape, h), out_act);
    }
  };

  struct Block {
    ConvPath periodic;
    std::optional<ConvPath> aperiodic;

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
      auto y = periodic(tape, x);
      if (!aperiodic) return y;
      return add(tape, y, (*aperiodic)(tape, x));
    }
  };

  struct Dsc {
    Parameter<T> dw_weight, dw_bias, pw_weight, pw_bias;

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) const {
      return depthwise_separable_conv1d(tape, x, dw_weight.var, dw_bias.var, pw_weight.var,
                                        pw_bias.var);
    }
  };

  /// DSC(Swish(fast normalized blend of inputs))
  struct FusionNode {
    Parameter<T> weights;
    Dsc dsc;

    Var<T> operator()(Tape<T>& tape, const std::vector<Var<T>>& inputs, T eps) const {
      auto blend = weighted_blend(tape, inputs, weights.var, eps);
      return dsc(tape, activation(tape, blend, Activation::swish()));
    }
  };

  struct LstmLayer {
    LstmWeights<T> fwd;
    std::optional<LstmWeights<T>> bwd;
  };

  /// Five analysis outputs, level 1 first.
  using Pyramid = std::array<Var<T>, kLevels>;

  explicit MfPam(ModelConfig cfg, std::uint64_t seed = 0, InitScheme init = InitScheme::scaled)
      : cfg_(std::move(cfg)), init_(init), rng_(seed), upsampler_(cfg_.upsample_factor) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  std::vector<Parameter<T>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  /// Element counts grouped by the first two components of the name,
  /// e.g. "analysis.block1" or "estimation.bifpn".
  std::map<std::string, std::size_t> parameter_breakdown() const {
    std::map<std::string, std::size_t> out;
    for (const auto& p : params_) {
      const auto a = p.name.find('.');
      const auto b = p.name.find('.', a + 1);
      out[p.name.substr(0, b)] += p.numel();
    }
    return out;
  }

  /// Analysis stage over an already upsampled chunk.
  Pyramid analysis(Tape<T>& tape, const Var<T>& upsampled) const {
    Pyramid p;
    Var<T> x = upsampled;
    for (std::size_t i = 0; i < kLevels; ++i) {
      x = blocks_[i](tape, x);
      p[i] = x;
    }
    if (lstm_) p[kLevels - 1] = lstm_sequence(tape, p[kLevels - 1], lstm_->fwd, lstm_->bwd);
    return p;
  }

  std::vector<std::size_t> used_levels() const {
    if (cfg_.ablate.no_multi_level) return {kLevels - 1};
    return {0, 1, 2, 3, 4};
  }

  /// Time-resample every used level to half the third level, then project
  /// channels to the fusion width.
  std::vector<Var<T>> presize(Tape<T>& tape, const Pyramid& p) const {
    const std::size_t target = cfg_.frames();
    std::vector<Var<T>> out;
    const auto levels = used_levels();
    for (std::size_t j = 0; j < levels.size(); ++j) {
      auto r = resample_time(tape, p[levels[j]], target, ResampleMode::linear);
      out.push_back(presize_[j](tape, r));
    }
    return out;
  }

  /// One top-down sweep (mid nodes for levels 4..2) and one bottom-up sweep
  /// (out nodes for levels 1..5). Input lists are level 1 first.
  std::vector<Var<T>> bifpn(Tape<T>& tape, const std::vector<Var<T>>& in) const {
    if (in.size() != kLevels) throw ConfigError("bifpn: expected five levels");
    const T eps = T(cfg_.epsilon);
    std::array<Var<T>, kLevels> mid;
    for (std::size_t i = kLevels - 2; i >= 1; --i) mid[i] = mid_[i - 1](tape, {in[i], in[i + 1]}, eps);
    std::vector<Var<T>> out(kLevels);
    out[0] = out_[0](tape, {in[0], mid[1]}, eps);
    for (std::size_t i = 1; i + 1 < kLevels; ++i) out[i] = out_[i](tape, {in[i], mid[i], out[i - 1]}, eps);
    out[kLevels - 1] = out_[kLevels - 1](tape, {in[kLevels - 1], out[kLevels - 2]}, eps);
    return out;
  }

  /// [frames x (width * levels)] features to [frames x 360] activations.
  Var<T> project(Tape<T>& tape, const std::vector<Var<T>>& fused) const {
    auto cat = concat_channels(tape, fused);
    auto rows = transpose(tape, cat);
    auto logits = linear(tape, rows, head_weight_.var, head_bias_.var);
    return activation(tape, logits, Activation::sigmoid());
  }

  /// Full network over an upsampled chunk.
  Var<T> forward_upsampled(Tape<T>& tape, std::span<const float> upsampled) const {
    const std::size_t expect = cfg_.chunk_samples * cfg_.upsample_factor;
    if (upsampled.size() != expect)
      throw UsageError("forward: expected " + std::to_string(expect) +
                       " upsampled samples, got " + std::to_string(upsampled.size()));
    Tensor<T> x(Shape{1, expect});
    for (std::size_t i = 0; i < expect; ++i) x[i] = T(upsampled[i]);
    auto pyramid = analysis(tape, constant(std::move(x)));
    auto levels = presize(tape, pyramid);
    if (!cfg_.ablate.no_bifpn && !cfg_.ablate.no_multi_level) levels = bifpn(tape, levels);
    return project(tape, levels);
  }

  /// Full network over one chunk of 16 kHz samples.
  Var<T> forward(Tape<T>& tape, std::span<const float> samples) const {
    if (samples.size() != cfg_.chunk_samples)
      throw UsageError("forward: expected " + std::to_string(cfg_.chunk_samples) +
                       " samples, got " + std::to_string(samples.size()));
    const auto up = upsampler()(samples);
    return forward_upsampled(tape, up);
  }

  /// Inference without recording a tape.
  Tensor<T> predict(std::span<const float> samples) const {
    Tape<T> tape;
    tape.set_recording(false);
    return forward(tape, samples)->value;
  }

  Tensor<T> predict_upsampled(std::span<const float> upsampled) const {
    Tape<T> tape;
    tape.set_recording(false);
    return forward_upsampled(tape, upsampled)->value;
  }

  const SincUpsampler& upsampler() const { return upsampler_; }

  // exposed for tests that pin internal weights
  std::vector<Block>& blocks() { return blocks_; }
  std::vector<Dsc>& presize_layers() { return presize_; }
  std::vector<FusionNode>& mid_nodes() { return mid_; }
  std::vector<FusionNode>& out_nodes() { return out_; }
  Parameter<T>& head_weight() { return head_weight_; }
  Parameter<T>& head_bias() { return head_bias_; }
  std::optional<LstmLayer>& lstm() { return lstm_; }

 private:
  Parameter<T> uniform_param(const std::string& name, Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.storage()) v = T(rng_.uniform(-bound, bound));
    auto p = make_parameter(name, std::move(t));
    params_.push_back(p);
    return p;
  }

  Parameter<T> filled_param(const std::string& name, Shape shape, T value) {
    auto p = make_parameter(name, Tensor<T>(std::move(shape), value));
    params_.push_back(p);
    return p;
  }

  bool scaled() const { return init_ == InitScheme::scaled; }

  Parameter<T> bias_param(const std::string& name, std::size_t n, std::size_t fan_in) {
    if (scaled()) return filled_param(name, Shape{n}, T(0));
    return uniform_param(name, Shape{n}, std::sqrt(1.0 / double(fan_in)));
  }

  double weight_bound(std::size_t fan_in, double gain) const {
    return std::sqrt((scaled() ? 3.0 * gain : 1.0) / double(fan_in));
  }

  Conv make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                 std::size_t stride, double gain) {
    Conv c;
    c.weight = uniform_param(name + ".weight", Shape{cout, cin, k}, weight_bound(cin * k, gain));
    c.bias = bias_param(name + ".bias", cout, cin * k);
    c.stride = stride;
    c.pad = Padding::same(k);
    return c;
  }

  ConvPath make_path(const std::string& name, std::size_t cin, std::size_t hidden,
                     std::size_t cout, std::size_t k, double a) {
    ConvPath p;
    // the block stride sits on the first conv; the second keeps resolution
    p.conv1 = make_conv(name + ".conv1", cin, hidden, k, cfg_.block_stride, 2.0);
    p.conv2 = make_conv(name + ".conv2", hidden, cout, k, 1, 1.0);
    p.out_act = cfg_.ablate.no_snake ? Activation::relu() : Activation::snake(a);
    return p;
  }

  Dsc make_dsc(const std::string& name, std::size_t cin, std::size_t cout) {
    const std::size_t k = cfg_.dsc_kernel;
    Dsc d;
    d.dw_weight = uniform_param(name + ".dw_weight", Shape{cin, k}, weight_bound(k, 1.0));
    d.dw_bias = bias_param(name + ".dw_bias", cin, k);
    d.pw_weight = uniform_param(name + ".pw_weight", Shape{cout, cin}, weight_bound(cin, 1.0));
    d.pw_bias = bias_param(name + ".pw_bias", cout, cin);
    return d;
  }

  FusionNode make_fusion(const std::string& name, std::size_t n_inputs) {
    FusionNode f;
    f.weights = filled_param(name + ".fusion_weights", Shape{n_inputs}, T(1));
    f.dsc = make_dsc(name + ".dsc", cfg_.bifpn_width, cfg_.bifpn_width);
    return f;
  }

  LstmWeights<T> make_lstm_direction(const std::string& name, std::size_t in, std::size_t h) {
    const double bound = std::sqrt(1.0 / double(h));
    LstmWeights<T> w;
    w.w_ih = uniform_param(name + ".w_ih", Shape{4 * h, in}, bound).var;
    w.w_hh = uniform_param(name + ".w_hh", Shape{4 * h, h}, bound).var;
    w.bias = uniform_param(name + ".bias", Shape{4 * h}, bound).var;
    return w;
  }

  void build() {
    for (std::size_t i = 0; i < kLevels; ++i) {
      const std::string name = "analysis.block" + std::to_string(i + 1);
      const std::size_t cin = cfg_.in_channels[i], cout = cfg_.out_channels[i];
      const std::size_t k = cfg_.kernels[i];
      Block b;
      if (i < cfg_.pnp_levels && !cfg_.ablate.no_pnp) {
        b.periodic = make_path(name + ".p", cin, cout, cout, k, cfg_.p_a[i]);
        b.aperiodic = make_path(name + ".np", cin, cout, cout, k, cfg_.np_a);
      } else if (i < cfg_.pnp_levels) {
        b.periodic = make_path(name + ".p", cin, matched_hidden_width(cin, cout, k), cout, k,
                               cfg_.p_a[i]);
      } else {
        b.periodic = make_path(name + ".p", cin, cout, cout, k, cfg_.p_a[i]);
      }
      blocks_.push_back(std::move(b));
    }
    std::size_t top_channels = cfg_.out_channels[kLevels - 1];
    if (cfg_.lstm_enabled) {
      LstmLayer l;
      l.fwd = make_lstm_direction("analysis.lstm.fwd", top_channels, cfg_.lstm_hidden);
      if (cfg_.lstm_bidirectional)
        l.bwd = make_lstm_direction("analysis.lstm.bwd", top_channels, cfg_.lstm_hidden);
      lstm_ = std::move(l);
      top_channels = cfg_.lstm_hidden;
    }
    for (std::size_t lvl : used_levels()) {
      const std::size_t ch = lvl == kLevels - 1 ? top_channels : cfg_.out_channels[lvl];
      presize_.push_back(make_dsc("estimation.presize.p" + std::to_string(lvl + 1), ch,
                                  cfg_.bifpn_width));
    }
    if (!cfg_.ablate.no_bifpn && !cfg_.ablate.no_multi_level) {
      for (std::size_t i = 1; i + 1 < kLevels; ++i)
        mid_.push_back(make_fusion("estimation.bifpn.mid" + std::to_string(i + 1), 2));
      for (std::size_t i = 0; i < kLevels; ++i) {
        const std::size_t n = (i == 0 || i == kLevels - 1) ? 2 : 3;
        out_.push_back(make_fusion("estimation.bifpn.out" + std::to_string(i + 1), n));
      }
    }
    const std::size_t head_in = cfg_.bifpn_width * used_levels().size();
    const double bound = std::sqrt(1.0 / double(head_in));
    head_weight_ = uniform_param("estimation.head.weight", Shape{pitch::kBins, head_in}, bound);
    if (scaled())
      head_bias_ = filled_param("estimation.head.bias", Shape{pitch::kBins},
                                T(-std::log(double(pitch::kBins - 1))));
    else
      head_bias_ = uniform_param("estimation.head.bias", Shape{pitch::kBins}, bound);
  }

  ModelConfig cfg_;
  InitScheme init_;
  Rng rng_;
  SincUpsampler upsampler_;
  std::vector<Parameter<T>> params_;
  std::vector<Block> blocks_;
  std::optional<LstmLayer> lstm_;
  std::vector<Dsc> presize_;
  std::vector<FusionNode> mid_;  // levels 2, 3, 4
  std::vector<FusionNode> out_;  // levels 1..5
  Parameter<T> head_weight_, head_bias_;
};

}  // namespace mfpam
