#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mde/checkpoint.hpp"
#include "mde/nn_ops.hpp"
#include "mde/random.hpp"
#include "mde/tensor.hpp"

namespace mde {

/// Declarative description of the encoder-decoder: a DenseNet-style encoder
/// (stem + dense blocks separated by compressing transitions) and a U-Net
/// decoder of upsample + skip-concat + convolution stages.
///
/// decoder_features lists the stage widths of the full-resolution decoder
/// (one entry per encoder downsampling stage); output_scale "half" drops the
/// last stage so the output stays at half the input resolution.
struct NetworkConfig {
  int input_channels = 3;
  int stem_features = 64;
  int stem_kernel = 7;
  bool stem_pool = true;  // 3x3 stride-2 max pool after the stem conv
  int growth_rate = 32;
  std::vector<int> block_layout{6, 12, 24, 16};
  double compression = 0.5;
  std::vector<int> decoder_features{256, 128, 64, 32, 16};
  std::string output_scale = "half";  // "half" | "full"
  std::uint64_t seed = 0;

  static NetworkConfig preset(const std::string& name) {
    NetworkConfig cfg;
    if (name == "densenet121") {
      return cfg;  // defaults above
    }
    if (name == "toy") {
      cfg.stem_features = 8;
      cfg.stem_kernel = 3;
      cfg.stem_pool = false;
      cfg.growth_rate = 4;
      cfg.block_layout = {2, 2};
      cfg.compression = 0.5;
      cfg.decoder_features = {16, 8};
      return cfg;
    }
    throw ConfigError("unknown network preset '" + name + "' (expected toy or densenet121)");
  }

  int downsampling_stages() const {
    return (stem_pool ? 2 : 1) + int(block_layout.size()) - 1;
  }
  int total_downsampling() const { return 1 << downsampling_stages(); }
  bool half_scale() const { return output_scale == "half"; }
  int decoder_stages() const { return downsampling_stages() - (half_scale() ? 1 : 0); }
  int output_downsampling() const { return half_scale() ? 2 : 1; }

  void validate() const {
    if (input_channels < 1) throw ConfigError("network: input_channels must be >= 1");
    if (stem_features < 1 || growth_rate < 1)
      throw ConfigError("network: stem_features and growth_rate must be >= 1");
    if (stem_kernel < 1 || stem_kernel % 2 == 0)
      throw ConfigError("network: stem_kernel must be odd");
    if (block_layout.empty()) throw ConfigError("network: block_layout must be non-empty");
    for (int n : block_layout)
      if (n < 1) throw ConfigError("network: every block layer count must be >= 1");
    if (!(compression > 0.0) || compression > 1.0)
      throw ConfigError("network: compression must lie in (0, 1]");
    if (output_scale != "half" && output_scale != "full")
      throw ConfigError("network: output_scale must be 'half' or 'full'");
    if (int(decoder_features.size()) != downsampling_stages())
      throw ConfigError("network: decoder_features must have one entry per downsampling stage (" +
                        std::to_string(downsampling_stages()) + "), got " +
                        std::to_string(decoder_features.size()));
    for (int f : decoder_features)
      if (f < 1) throw ConfigError("network: decoder feature widths must be >= 1");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["input_channels"] = input_channels;
    j["stem_features"] = stem_features;
    j["stem_kernel"] = stem_kernel;
    j["stem_pool"] = stem_pool;
    j["growth_rate"] = growth_rate;
    j["block_layout"] = block_layout;
    j["compression"] = compression;
    j["decoder_features"] = decoder_features;
    j["output_scale"] = output_scale;
    j["seed"] = seed;
    return j;
  }

  static NetworkConfig from_json(const nlohmann::json& j) {
    NetworkConfig cfg;
    cfg.input_channels = j.at("input_channels").get<int>();
    cfg.stem_features = j.at("stem_features").get<int>();
    cfg.stem_kernel = j.at("stem_kernel").get<int>();
    cfg.stem_pool = j.at("stem_pool").get<bool>();
    cfg.growth_rate = j.at("growth_rate").get<int>();
    cfg.block_layout = j.at("block_layout").get<std::vector<int>>();
    cfg.compression = j.at("compression").get<double>();
    cfg.decoder_features = j.at("decoder_features").get<std::vector<int>>();
    cfg.output_scale = j.at("output_scale").get<std::string>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.validate();
    return cfg;
  }
};

namespace detail {

template <typename T>
struct ConvLayer {
  Tensor<T> weight;
  Tensor<T> bias;  // undefined for BN-followed convs
  std::size_t stride = 1;
  std::size_t padding = 0;

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv2d(x, weight, bias, stride, padding);
  }
};

template <typename T>
struct BnLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::shared_ptr<BatchNormState<T>> state = std::make_shared<BatchNormState<T>>();

  Tensor<T> operator()(const Tensor<T>& x, BnMode mode) const {
    return batch_norm(x, gamma, beta, *state, mode);
  }
};

template <typename T>
struct DenseLayer {
  BnLayer<T> bn1;
  ConvLayer<T> conv1;  // 1x1 to 4 * growth
  BnLayer<T> bn2;
  ConvLayer<T> conv2;  // 3x3 to growth
};

template <typename T>
struct Transition {
  BnLayer<T> bn;
  ConvLayer<T> conv;  // 1x1 with compression
};

template <typename T>
struct DecoderStage {
  ConvLayer<T> conv1;
  ConvLayer<T> conv2;
};

}  // namespace detail

/// The instantiated parameterized graph. Parameter tensors carry stable
/// hierarchical names; the forward pass emits a single-channel strictly
/// positive map at the configured output scale.
template <typename T>
class Network {
 public:
  using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

  static Network build(const NetworkConfig& config) {
    config.validate();
    Network net;
    net.cfg_ = config;
    Rng rng = make_rng(config.seed);

    const int growth = config.growth_rate;
    int ch = config.stem_features;
    net.stem_conv_ = net.make_conv(rng, config.input_channels, ch, config.stem_kernel, 2,
                                   std::size_t(config.stem_kernel / 2), false);
    net.stem_bn_ = net.make_bn(rng, ch);

    std::vector<int> skip_ch;          // channels of the skip feeding each downsampling stage
    skip_ch.push_back(config.input_channels);  // input to the stem conv
    if (config.stem_pool) skip_ch.push_back(ch);

    for (std::size_t b = 0; b < config.block_layout.size(); ++b) {
      std::vector<detail::DenseLayer<T>> block;
      for (int l = 0; l < config.block_layout[b]; ++l) {
        detail::DenseLayer<T> layer;
        layer.bn1 = net.make_bn(rng, ch);
        layer.conv1 = net.make_conv(rng, ch, 4 * growth, 1, 1, 0, false);
        layer.bn2 = net.make_bn(rng, 4 * growth);
        layer.conv2 = net.make_conv(rng, 4 * growth, growth, 3, 1, 1, false);
        block.push_back(std::move(layer));
        ch += growth;
      }
      net.blocks_.push_back(std::move(block));
      if (b + 1 < config.block_layout.size()) {
        detail::Transition<T> tr;
        tr.bn = net.make_bn(rng, ch);
        int out = std::max(1, int(double(ch) * config.compression));
        tr.conv = net.make_conv(rng, ch, out, 1, 1, 0, false);
        net.transitions_.push_back(std::move(tr));
        ch = out;
        skip_ch.push_back(ch);
      }
    }
    net.final_bn_ = net.make_bn(rng, ch);

    const int stages = config.decoder_stages();
    int cur = ch;
    for (int s = 0; s < stages; ++s) {
      const int skip = skip_ch[std::size_t(config.downsampling_stages() - 1 - s)];
      const int out = config.decoder_features[std::size_t(s)];
      detail::DecoderStage<T> st;
      st.conv1 = net.make_conv(rng, cur + skip, out, 3, 1, 1, true);
      st.conv2 = net.make_conv(rng, out, out, 3, 1, 1, true);
      net.decoder_.push_back(std::move(st));
      cur = out;
    }
    net.head_ = net.make_conv(rng, cur, 1, 3, 1, 1, true);
    return net;
  }

  const NetworkConfig& config() const { return cfg_; }

  /// Forward pass. Input spatial extents must be divisible by the network's
  /// total downsampling factor.
  Tensor<T> forward(const Tensor<T>& image, BnMode mode) {
    detail::require_rank4(image, "network forward");
    if (image.dim(1) != std::size_t(cfg_.input_channels))
      throw ShapeError("network forward: expected " + std::to_string(cfg_.input_channels) +
                       " input channels, got " + std::to_string(image.dim(1)));
    const std::size_t div = std::size_t(cfg_.total_downsampling());
    if (image.dim(2) % div != 0 || image.dim(3) % div != 0)
      throw ShapeError("network forward: input extents " + std::to_string(image.dim(2)) + "x" +
                       std::to_string(image.dim(3)) + " must be divisible by " +
                       std::to_string(div));

    std::vector<Tensor<T>> skips;
    skips.push_back(image);
    Tensor<T> x = relu(stem_bn_(stem_conv_(image), mode));
    if (cfg_.stem_pool) {
      skips.push_back(x);
      x = max_pool2d(x, 3, 2, 1);
    }
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (const auto& layer : blocks_[b]) {
        Tensor<T> h = layer.conv1(relu(layer.bn1(x, mode)));
        h = layer.conv2(relu(layer.bn2(h, mode)));
        x = concat_channels(x, h);
      }
      if (b < transitions_.size()) {
        x = transitions_[b].conv(relu(transitions_[b].bn(x, mode)));
        skips.push_back(x);
        x = avg_pool2d(x, 2, 2);
      }
    }
    x = relu(final_bn_(x, mode));

    for (std::size_t s = 0; s < decoder_.size(); ++s) {
      x = bilinear_upsample2x(x);
      const Tensor<T>& skip = skips[std::size_t(cfg_.downsampling_stages()) - 1 - s];
      if (skip.dim(2) != x.dim(2) || skip.dim(3) != x.dim(3))
        throw ShapeError("network forward: decoder stage " + std::to_string(s) +
                         " skip extents " + shape_str(skip.shape()) +
                         " do not match upsampled extents " + shape_str(x.shape()));
      x = concat_channels(x, skip);
      x = relu(decoder_[s].conv1(x));
      x = relu(decoder_[s].conv2(x));
    }
    return softplus(head_(x));
  }

  /// Ordered (name, tensor) pairs of every trainable parameter. Names are
  /// unique and stable across runs for a fixed config.
  ParamList parameters() const {
    ParamList p;
    auto conv = [&](const std::string& base, const detail::ConvLayer<T>& c) {
      p.emplace_back(base + ".weight", c.weight);
      if (c.bias.defined()) p.emplace_back(base + ".bias", c.bias);
    };
    auto bn = [&](const std::string& base, const detail::BnLayer<T>& b) {
      p.emplace_back(base + ".gamma", b.gamma);
      p.emplace_back(base + ".beta", b.beta);
    };
    conv("encoder.stem.conv", stem_conv_);
    bn("encoder.stem.bn", stem_bn_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (std::size_t l = 0; l < blocks_[b].size(); ++l) {
        const std::string base = "encoder.block" + std::to_string(b) + ".layer" + std::to_string(l);
        bn(base + ".bn1", blocks_[b][l].bn1);
        conv(base + ".conv1", blocks_[b][l].conv1);
        bn(base + ".bn2", blocks_[b][l].bn2);
        conv(base + ".conv2", blocks_[b][l].conv2);
      }
      if (b < transitions_.size()) {
        const std::string base = "encoder.trans" + std::to_string(b);
        bn(base + ".bn", transitions_[b].bn);
        conv(base + ".conv", transitions_[b].conv);
      }
    }
    bn("encoder.final_bn", final_bn_);
    for (std::size_t s = 0; s < decoder_.size(); ++s) {
      const std::string base = "decoder.stage" + std::to_string(s);
      conv(base + ".conv1", decoder_[s].conv1);
      conv(base + ".conv2", decoder_[s].conv2);
    }
    conv("head.conv", head_);
    return p;
  }

  /// Trainable parameters restricted to the encoder (stem, blocks,
  /// transitions, final BN).
  ParamList encoder_parameters() const {
    ParamList all = parameters(), enc;
    for (auto& kv : all)
      if (kv.first.rfind("encoder.", 0) == 0) enc.push_back(kv);
    return enc;
  }

  /// Ordered (name, state) pairs of the batch-norm running statistics.
  std::vector<std::pair<std::string, std::shared_ptr<BatchNormState<T>>>> bn_states() const {
    std::vector<std::pair<std::string, std::shared_ptr<BatchNormState<T>>>> s;
    s.emplace_back("encoder.stem.bn", stem_bn_.state);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (std::size_t l = 0; l < blocks_[b].size(); ++l) {
        const std::string base = "encoder.block" + std::to_string(b) + ".layer" + std::to_string(l);
        s.emplace_back(base + ".bn1", blocks_[b][l].bn1.state);
        s.emplace_back(base + ".bn2", blocks_[b][l].bn2.state);
      }
      if (b < transitions_.size())
        s.emplace_back("encoder.trans" + std::to_string(b) + ".bn", transitions_[b].bn.state);
    }
    s.emplace_back("encoder.final_bn", final_bn_.state);
    return s;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.size();
    return n;
  }

  std::size_t encoder_param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : encoder_parameters()) n += t.size();
    return n;
  }

  /// Archive of the full network state: parameters plus batch-norm running
  /// statistics (and their initialized flags).
  TensorArchive to_archive() const {
    TensorArchive a;
    a.config_json = cfg_.to_json().dump();
    for (const auto& [name, t] : parameters()) {
      std::vector<std::uint64_t> ext(t.shape().begin(), t.shape().end());
      a.add<T>(name, ext, t.values());
    }
    std::vector<T> init_flags;
    for (const auto& [name, st] : bn_states()) {
      const auto c = std::uint64_t(st->running_mean.size());
      a.add<T>(name + ".running_mean", {c}, std::span<const T>(st->running_mean));
      a.add<T>(name + ".running_var", {c}, std::span<const T>(st->running_var));
      init_flags.push_back(st->initialized ? T(1) : T(0));
    }
    a.add<T>("meta.bn_initialized", {std::uint64_t(init_flags.size())},
             std::span<const T>(init_flags));
    return a;
  }

  void save(const std::string& path) const { to_archive().save(path); }

  /// Rebuild a network from an archive. Every network tensor must be present
  /// by name; unknown names are an error unless they belong to an optimizer
  /// state section ("adam." prefix).
  static Network from_archive(const TensorArchive& a) {
    NetworkConfig cfg = NetworkConfig::from_json(nlohmann::json::parse(a.config_json));
    Network net = build(cfg);
    std::size_t consumed = 0;
    for (auto& [name, t] : net.parameters()) {
      const auto* e = a.find(name);
      if (!e) throw IoError("checkpoint: missing parameter tensor '" + name + "'");
      a.copy_out<T>(*e, Tensor<T>(t).values());
      ++consumed;
    }
    auto states = net.bn_states();
    const auto* flags = a.find("meta.bn_initialized");
    if (!flags) throw IoError("checkpoint: missing tensor 'meta.bn_initialized'");
    std::vector<T> init(flags->count());
    a.copy_out<T>(*flags, std::span<T>(init));
    if (init.size() != states.size())
      throw IoError("checkpoint: batch-norm layer count mismatch");
    ++consumed;
    for (std::size_t i = 0; i < states.size(); ++i) {
      auto& [name, st] = states[i];
      const auto* m = a.find(name + ".running_mean");
      const auto* v = a.find(name + ".running_var");
      if (!m) throw IoError("checkpoint: missing tensor '" + name + ".running_mean'");
      if (!v) throw IoError("checkpoint: missing tensor '" + name + ".running_var'");
      st->running_mean.resize(m->count());
      st->running_var.resize(v->count());
      a.copy_out<T>(*m, std::span<T>(st->running_mean));
      a.copy_out<T>(*v, std::span<T>(st->running_var));
      st->initialized = init[i] != T(0);
      consumed += 2;
    }
    for (const auto& e : a.entries)
      if (e.name.rfind("adam.", 0) == 0) ++consumed;
    if (consumed != a.entries.size())
      for (const auto& e : a.entries)
        if (e.name.rfind("adam.", 0) != 0 && !is_network_tensor(net, e.name))
          throw IoError("checkpoint: unexpected tensor '" + e.name + "'");
    return net;
  }

  static Network load(const std::string& path) {
    return from_archive(TensorArchive::load(path));
  }

 private:
  static bool is_network_tensor(const Network& net, const std::string& name) {
    if (name == "meta.bn_initialized") return true;
    for (const auto& [n, t] : net.parameters())
      if (n == name) return true;
    for (const auto& [n, st] : net.bn_states())
      if (name == n + ".running_mean" || name == n + ".running_var") return true;
    return false;
  }

  detail::ConvLayer<T> make_conv(Rng& rng, int in_ch, int out_ch, int k, std::size_t stride,
                                 std::size_t padding, bool bias) {
    detail::ConvLayer<T> c;
    c.weight = Tensor<T>::leaf(
        {std::size_t(out_ch), std::size_t(in_ch), std::size_t(k), std::size_t(k)}, true);
    const T stddev = std::sqrt(T(2) / T(in_ch * k * k));  // He fan-in
    fill_normal<T>(rng, c.weight.values(), T(0), stddev);
    if (bias) c.bias = Tensor<T>::leaf({std::size_t(out_ch)}, true);
    c.stride = stride;
    c.padding = padding;
    return c;
  }

  detail::BnLayer<T> make_bn(Rng&, int channels) {
    detail::BnLayer<T> b;
    b.gamma = Tensor<T>::leaf({std::size_t(channels)}, true);
    std::fill(b.gamma.values().begin(), b.gamma.values().end(), T(1));
    b.beta = Tensor<T>::leaf({std::size_t(channels)}, true);
    b.state->reset(std::size_t(channels));
    return b;
  }

  NetworkConfig cfg_;
  detail::ConvLayer<T> stem_conv_;
  detail::BnLayer<T> stem_bn_;
  std::vector<std::vector<detail::DenseLayer<T>>> blocks_;
  std::vector<detail::Transition<T>> transitions_;
  detail::BnLayer<T> final_bn_;
  std::vector<detail::DecoderStage<T>> decoder_;
  detail::ConvLayer<T> head_;
};

}  // namespace mde
