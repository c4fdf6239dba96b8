#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "roadseg/ops.hpp"

namespace roadseg {

/// Architecture hyperparameters of the encoder-decoder network.
///
/// The encoder is a ResNet of basic blocks: a 7x7/2 stem and max-pool,
/// then four stages whose first block downsamples (except stage one). The
/// decoder mirrors it with five upsampling blocks; the first four are
/// concatenated with the encoder map of matching resolution.
struct ModelConfig {
  std::array<int, 4> stage_depths{3, 4, 6, 3};
  std::array<int, 4> stage_channels{64, 128, 256, 512};
  int stem_channels = 64;
  double dropout_p = 0.3;
  int decoder_reduction = 4;
  int input_channels = 3;
  int output_channels = 1;

  /// Desk-scale network used by the tests and acceptance runs.
  static ModelConfig reduced() {
    ModelConfig c;
    c.stage_depths = {1, 1, 1, 1};
    c.stage_channels = {8, 16, 32, 64};
    c.stem_channels = 32;
    return c;
  }

  /// Channels produced by the last decoder block (full resolution).
  int head_channels() const { return std::max(1, stem_channels / 2); }

  void validate() const {
    for (int d : stage_depths)
      if (d <= 0) throw ConfigError("stage_depths must be positive");
    for (std::size_t i = 0; i < stage_channels.size(); ++i) {
      if (stage_channels[i] <= 0) throw ConfigError("stage_channels must be positive");
      if (i > 0 && stage_channels[i] <= stage_channels[i - 1])
        throw ConfigError("stage_channels must be strictly increasing");
    }
    if (stem_channels <= 0) throw ConfigError("stem_channels must be positive");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0))
      throw ConfigError("dropout_p must be in [0, 1), got " + std::to_string(dropout_p));
    if (decoder_reduction <= 0) throw ConfigError("decoder_reduction must be positive");
    if (input_channels <= 0 || output_channels <= 0) throw ConfigError("input/output channels must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Total downsampling factor of the encoder; input sides must be multiples.
inline constexpr std::int64_t kSideMultiple = 32;

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
class Model {
public:
  Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
    config_.validate();
    Rng init(seed_);
    build(init);
    dropout_rng_.seed(stream_seed(seed_, 1));
  }

  // Copies would alias parameter storage; use clone().
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  Model clone() const { return cast<T>(); }

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }
  void reseed_dropout(std::uint64_t s) { dropout_rng_.seed(s); }

  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }

  const Tensor<T>& find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("model has no tensor named '" + name + "'");
    return it->second.buffer ? buffers_[it->second.slot].tensor : params_[it->second.slot].tensor;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() const {
    for (const auto& p : params_) p.tensor.zero_grad();
  }

  /// Forward pass in the current mode. `encoder_trace`, when given, receives
  /// the shapes of the stem output and the four stage outputs.
  Tensor<T> forward(const Tensor<T>& input, std::vector<Shape>* encoder_trace = nullptr) {
    return run(input, mode_, dropout_rng_, encoder_trace);
  }

  /// Eval-mode forward without graph recording. Does not touch mutable
  /// state, so it may run concurrently on a shared model.
  Tensor<T> infer(const Tensor<T>& input) const {
    NoGradGuard guard;
    Rng unused(0);
    return run(input, Mode::eval, unused, nullptr);
  }

  /// Same network in another precision (values converted, graph dropped).
  template <class U>
  Model<U> cast() const {
    Model<U> out(config_, seed_);
    for (const auto* group : {&params_, &buffers_})
      for (const auto& nt : *group) {
        auto dst = out.find(nt.name).mutable_data();
        std::transform(nt.tensor.data().begin(), nt.tensor.data().end(), dst.begin(),
                       [](T v) { return static_cast<U>(v); });
      }
    out.set_mode(mode_);
    return out;
  }

private:
  struct Conv {
    Tensor<T> weight;
    Tensor<T> bias; // head only
    std::int64_t stride = 1, pad = 0;
  };
  struct Norm {
    Tensor<T> gamma, beta, mean, var;
  };
  struct Block {
    Conv conv1, conv2;
    Norm bn1, bn2;
    std::optional<Conv> down;
    std::optional<Norm> down_bn;
  };
  struct Decoder {
    Conv reduce;
    Norm reduce_bn;
    Tensor<T> up; // (in, out, 2, 2)
    Norm up_bn;
  };

  Tensor<T> add_param(const std::string& name, Shape shape, std::vector<T> values) {
    auto t = Tensor<T>::from_data(std::move(shape), std::move(values), true);
    register_name(name, {false, params_.size()});
    params_.push_back({name, t});
    return t;
  }

  struct Slot {
    bool buffer;
    std::size_t slot;
  };

  void register_name(const std::string& name, Slot slot) {
    if (!index_.emplace(name, slot).second) throw ContractError("duplicate tensor name '" + name + "'");
  }

  Tensor<T> he_normal(Rng& rng, const std::string& name, Shape shape, double fan_in) {
    std::vector<T> w(static_cast<std::size_t>(shape_numel(shape)));
    const double std_dev = std::sqrt(2.0 / fan_in);
    for (auto& v : w) v = static_cast<T>(normal(rng) * std_dev);
    return add_param(name, std::move(shape), std::move(w));
  }

  Conv make_conv(Rng& rng, const std::string& name, int in, int out, int k, int stride, int pad) {
    return Conv{he_normal(rng, name + ".weight", {out, in, k, k}, static_cast<double>(in) * k * k), Tensor<T>{},
                stride, pad};
  }

  Norm make_norm(const std::string& name, int channels) {
    const auto c = static_cast<std::size_t>(channels);
    Norm n;
    n.gamma = add_param(name + ".gamma", {channels}, std::vector<T>(c, T{1}));
    n.beta = add_param(name + ".beta", {channels}, std::vector<T>(c, T{0}));
    n.mean = Tensor<T>::from_data({channels}, std::vector<T>(c, T{0}));
    n.var = Tensor<T>::from_data({channels}, std::vector<T>(c, T{1}));
    register_name(name + ".running_mean", {true, buffers_.size()});
    buffers_.push_back({name + ".running_mean", n.mean});
    register_name(name + ".running_var", {true, buffers_.size()});
    buffers_.push_back({name + ".running_var", n.var});
    return n;
  }

  void build(Rng& rng) {
    const auto& ch = config_.stage_channels;
    stem_ = make_conv(rng, "stem.conv", config_.input_channels, config_.stem_channels, 7, 2, 3);
    stem_bn_ = make_norm("stem.bn", config_.stem_channels);

    int in = config_.stem_channels;
    for (int s = 0; s < 4; ++s) {
      std::vector<Block> stage;
      for (int b = 0; b < config_.stage_depths[static_cast<std::size_t>(s)]; ++b) {
        const std::string p = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
        const int out = ch[static_cast<std::size_t>(s)];
        const int stride = (b == 0 && s > 0) ? 2 : 1;
        Block blk;
        blk.conv1 = make_conv(rng, p + ".conv1", in, out, 3, stride, 1);
        blk.bn1 = make_norm(p + ".bn1", out);
        blk.conv2 = make_conv(rng, p + ".conv2", out, out, 3, 1, 1);
        blk.bn2 = make_norm(p + ".bn2", out);
        if (stride != 1 || in != out) {
          blk.down = make_conv(rng, p + ".downsample.conv", in, out, 1, stride, 0);
          blk.down_bn = make_norm(p + ".downsample.bn", out);
        }
        stage.push_back(std::move(blk));
        in = out;
      }
      stages_[static_cast<std::size_t>(s)] = std::move(stage);
    }

    // decoder i upsamples to the resolution of encoder level i - 1
    const std::array<int, 5> dec_in{ch[3], 2 * ch[2], 2 * ch[1], 2 * ch[0], 2 * config_.stem_channels};
    const std::array<int, 5> dec_out{ch[2], ch[1], ch[0], config_.stem_channels, config_.head_channels()};
    for (std::size_t i = 0; i < 5; ++i) {
      const std::string p = "decoder" + std::to_string(4 - i);
      const int mid = std::max(1, dec_in[i] / config_.decoder_reduction);
      Decoder d;
      d.reduce = make_conv(rng, p + ".reduce", dec_in[i], mid, 1, 1, 0);
      d.reduce_bn = make_norm(p + ".reduce_bn", mid);
      d.up = he_normal(rng, p + ".up.weight", {mid, dec_out[i], 2, 2}, static_cast<double>(mid));
      d.up_bn = make_norm(p + ".up_bn", dec_out[i]);
      decoders_[i] = std::move(d);
    }

    head_ = make_conv(rng, "head.conv", config_.head_channels(), config_.output_channels, 1, 1, 0);
    head_.bias = add_param("head.conv.bias", {config_.output_channels},
                           std::vector<T>(static_cast<std::size_t>(config_.output_channels), T{0}));
  }

  static Tensor<T> norm(const Tensor<T>& x, const Norm& n, Mode mode) {
    return batchnorm2d(x, n.gamma, n.beta, n.mean, n.var, mode);
  }

  static Tensor<T> conv(const Tensor<T>& x, const Conv& c) { return conv2d(x, c.weight, c.bias, c.stride, c.pad); }

  static Tensor<T> block(const Tensor<T>& x, const Block& b, Mode mode) {
    auto y = relu(norm(conv(x, b.conv1), b.bn1, mode));
    y = norm(conv(y, b.conv2), b.bn2, mode);
    auto shortcut = b.down ? norm(conv(x, *b.down), *b.down_bn, mode) : x;
    return relu(add(y, shortcut));
  }

  static Tensor<T> decode(const Tensor<T>& x, const Decoder& d, Mode mode) {
    auto y = relu(norm(conv(x, d.reduce), d.reduce_bn, mode));
    return relu(norm(conv_transpose2d(y, d.up, 2), d.up_bn, mode));
  }

  void check_input(const Tensor<T>& input) const {
    if (input.rank() != 4) throw DimensionError("model input must be NCHW, got " + shape_str(input.shape()));
    if (input.dim(1) != config_.input_channels)
      throw DimensionError("model expects " + std::to_string(config_.input_channels) + " input channels, got " +
                           std::to_string(input.dim(1)));
    const char* names[] = {"height", "width"};
    for (int i = 0; i < 2; ++i) {
      const auto side = input.dim(2 + static_cast<std::size_t>(i));
      if (side % kSideMultiple != 0)
        throw DimensionError(std::string("side not divisible by 32: ") + names[i] + " = " + std::to_string(side));
    }
  }

  Tensor<T> run(const Tensor<T>& input, Mode mode, Rng& rng, std::vector<Shape>* trace) const {
    check_input(input);
    std::array<Tensor<T>, 5> skips; // stem, stage1..stage4
    auto x = relu(norm(conv(input, stem_), stem_bn_, mode));
    skips[0] = x;
    x = maxpool2d(x, 3, 2, 1);
    for (std::size_t s = 0; s < 4; ++s) {
      for (const auto& b : stages_[s]) x = block(x, b, mode);
      skips[s + 1] = x;
    }
    if (trace) {
      trace->clear();
      for (const auto& t : skips) trace->push_back(t.shape());
    }
    for (std::size_t i = 0; i < 5; ++i) {
      x = decode(x, decoders_[i], mode);
      if (i < 4) x = concat_channels(x, skips[3 - i]);
    }
    x = spatial_dropout(x, config_.dropout_p, mode, rng);
    return sigmoid(conv(x, head_));
  }

  ModelConfig config_;
  std::uint64_t seed_;
  Mode mode_ = Mode::train;
  Rng dropout_rng_;

  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::unordered_map<std::string, Slot> index_;

  Conv stem_;
  Norm stem_bn_;
  std::array<std::vector<Block>, 4> stages_;
  std::array<Decoder, 5> decoders_;
  Conv head_;
};

template <class T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  return Model<T>(config, seed);
}

} // namespace roadseg
