#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "mde/losses.hpp"
#include "mde/network.hpp"
#include "mde/random.hpp"

using namespace mde;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

struct Counts {
  std::size_t total = 0;
  std::size_t encoder = 0;
};

/// Independent brute-force parameter enumeration from the config arithmetic:
/// walks the architecture definition and adds up tensor extents directly.
Counts analytic_param_count(const NetworkConfig& c) {
  std::size_t enc = 0, dec = 0;
  const int g = c.growth_rate;
  int ch = c.stem_features;
  enc += std::size_t(ch) * std::size_t(c.input_channels) * std::size_t(c.stem_kernel) *
         std::size_t(c.stem_kernel);  // stem conv, no bias
  enc += 2 * std::size_t(ch);         // stem bn gamma + beta
  std::vector<int> skip{c.input_channels};
  if (c.stem_pool) skip.push_back(ch);
  for (std::size_t b = 0; b < c.block_layout.size(); ++b) {
    for (int l = 0; l < c.block_layout[b]; ++l) {
      // dense layer at width C: 2C (bn1) + 4gC (1x1) + 8g (bn2) + 36g^2 (3x3)
      enc += 2 * std::size_t(ch);
      enc += std::size_t(4 * g) * std::size_t(ch);
      enc += std::size_t(8 * g);
      enc += std::size_t(36 * g) * std::size_t(g);
      ch += g;
    }
    if (b + 1 < c.block_layout.size()) {
      enc += 2 * std::size_t(ch);
      const int out = std::max(1, int(double(ch) * c.compression));
      enc += std::size_t(out) * std::size_t(ch);
      ch = out;
      skip.push_back(ch);
    }
  }
  enc += 2 * std::size_t(ch);  // final bn
  int cur = ch;
  for (int s = 0; s < c.decoder_stages(); ++s) {
    const int sk = skip[std::size_t(c.downsampling_stages() - 1 - s)];
    const int out = c.decoder_features[std::size_t(s)];
    dec += std::size_t(out) * std::size_t(cur + sk) * 9 + std::size_t(out);
    dec += std::size_t(out) * std::size_t(out) * 9 + std::size_t(out);
    cur = out;
  }
  dec += std::size_t(cur) * 9 + 1;  // head conv + bias
  return {enc + dec, enc};
}

std::string temp_file(const char* tag) {
  return (fs::temp_directory_path() / (std::string("mde_net_test_") + tag + ".mdec")).string();
}

template <typename T>
void mark_bn_initialized(Network<T>& net) {
  for (auto& [name, st] : net.bn_states()) st->initialized = true;
}

}  // namespace

TEST_CASE("toy forward: 1x3x32x32 maps to a strictly positive 1x1x16x16") {
  auto net = Network<float>::build(NetworkConfig::preset("toy"));
  auto image = Tensor<float>::leaf({1, 3, 32, 32});
  Rng rng = make_rng(2);
  fill_uniform<float>(rng, image.values(), 0.f, 1.f);
  auto out = net.forward(image, BnMode::train);
  CHECK(out.shape() == Shape{1, 1, 16, 16});
  for (float v : out.values()) CHECK(v > 0.f);  // softplus head
}

TEST_CASE("forward input validation") {
  auto net = Network<float>::build(NetworkConfig::preset("toy"));
  auto wrong_ch = Tensor<float>({1, 2, 32, 32}, 0.5f);
  CHECK_THROWS_AS(net.forward(wrong_ch, BnMode::train), ShapeError);
  auto indivisible = Tensor<float>({1, 3, 30, 30}, 0.5f);
  CHECK_THROWS_AS(net.forward(indivisible, BnMode::train), ShapeError);
  auto not4d = Tensor<float>({3, 32, 32}, 0.5f);
  CHECK_THROWS_AS(net.forward(not4d, BnMode::train), ShapeError);
}

TEST_CASE("parameter counts: toy preset") {
  auto cfg = NetworkConfig::preset("toy");
  auto net = Network<float>::build(cfg);
  const auto oracle = analytic_param_count(cfg);
  CHECK(net.param_count() == oracle.total);
  CHECK(net.encoder_param_count() == oracle.encoder);
  CHECK(net.param_count() == 9513);
  CHECK(net.encoder_param_count() == 3576);
}

TEST_CASE("parameter counts: densenet121 preset") {
  auto cfg = NetworkConfig::preset("densenet121");
  auto net = Network<float>::build(cfg);
  const auto oracle = analytic_param_count(cfg);
  CHECK(net.param_count() == oracle.total);
  CHECK(net.encoder_param_count() == oracle.encoder);
  CHECK(net.param_count() == 12051553);
  CHECK(net.encoder_param_count() == 6953856);
  CHECK(net.encoder_param_count() >= 6'500'000);
  CHECK(net.encoder_param_count() <= 8'500'000);
}

TEST_CASE("dense layer tensor extents follow the width formula") {
  auto cfg = NetworkConfig::preset("toy");  // stem 8, growth 4
  auto net = Network<float>::build(cfg);
  std::size_t layer0 = 0;
  for (const auto& [name, t] : net.parameters())
    if (name.rfind("encoder.block0.layer0.", 0) == 0) layer0 += t.size();
  // 2C + 4gC + 8g + 36g^2 at C = 8, g = 4
  CHECK(layer0 == std::size_t(2 * 8 + 4 * 4 * 8 + 8 * 4 + 36 * 4 * 4));
}

TEST_CASE("parameter names are unique and stable across builds") {
  auto a = Network<float>::build(NetworkConfig::preset("toy"));
  auto b = Network<float>::build(NetworkConfig::preset("toy"));
  std::set<std::string> names;
  const auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(names.insert(pa[i].first).second);
  }
}

TEST_CASE("initialization is deterministic in the seed") {
  auto cfg = NetworkConfig::preset("toy");
  cfg.seed = 5;
  auto a = Network<float>::build(cfg);
  auto b = Network<float>::build(cfg);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    auto va = pa[i].second.values(), vb = pb[i].second.values();
    CHECK(std::equal(va.begin(), va.end(), vb.begin()));
  }
  cfg.seed = 6;
  auto c = Network<float>::build(cfg);
  bool any_diff = false;
  const auto pc = c.parameters();
  for (std::size_t i = 0; i < pa.size() && !any_diff; ++i) {
    auto va = pa[i].second.values(), vc = pc[i].second.values();
    any_diff = !std::equal(va.begin(), va.end(), vc.begin());
  }
  CHECK(any_diff);
}

TEST_CASE("same-seed networks produce identical forward outputs") {
  auto cfg = NetworkConfig::preset("toy");
  cfg.seed = 9;
  auto a = Network<float>::build(cfg);
  auto b = Network<float>::build(cfg);
  auto image = Tensor<float>::leaf({1, 3, 32, 32});
  Rng rng = make_rng(1);
  fill_uniform<float>(rng, image.values(), 0.f, 1.f);
  auto ta = a.forward(image, BnMode::train);
  auto tb = b.forward(image, BnMode::train);
  auto ya = ta.values();
  auto yb = tb.values();
  CHECK(std::equal(ya.begin(), ya.end(), yb.begin()));
}

TEST_CASE("eval mode treats a batch of two identical images identically") {
  auto net = Network<float>::build(NetworkConfig::preset("toy"));
  mark_bn_initialized(net);  // (0, 1) starting statistics
  auto batch = Tensor<float>::leaf({2, 3, 32, 32});
  Rng rng = make_rng(8);
  fill_uniform<float>(rng, batch.values(), 0.f, 1.f);
  const std::size_t plane = 3 * 32 * 32;
  for (std::size_t i = 0; i < plane; ++i) batch.values()[plane + i] = batch.values()[i];
  NoGrad ng;
  auto out = net.forward(batch, BnMode::eval);
  const std::size_t oplane = 16 * 16;
  for (std::size_t i = 0; i < oplane; ++i)
    CHECK(out.values()[i] == out.values()[oplane + i]);
}

TEST_CASE("gradient flows into every parameter tensor") {
  auto cfg = NetworkConfig::preset("toy");
  cfg.seed = 3;
  auto net = Network<double>::build(cfg);
  auto image = Tensor<double>::leaf({2, 3, 32, 32});
  auto target = Tensor<double>::leaf({2, 1, 16, 16});
  Rng rng = make_rng(12);
  fill_uniform<double>(rng, image.values(), 0.0, 1.0);
  fill_uniform<double>(rng, target.values(), 1.0, 10.0);
  LossConfig loss_cfg;
  auto loss = composite_loss(target, net.forward(image, BnMode::train), loss_cfg);
  backward(loss.total);
  for (const auto& [name, p] : net.parameters()) {
    INFO(name);
    REQUIRE(p.has_grad());
    bool any = false;
    for (double g : p.grad()) any = any || g != 0.0;
    CHECK(any);
  }
}

TEST_CASE("save/load round-trips parameters, statistics and forward outputs") {
  auto cfg = NetworkConfig::preset("toy");
  cfg.seed = 4;
  auto net = Network<float>::build(cfg);
  auto image = Tensor<float>::leaf({1, 3, 32, 32});
  Rng rng = make_rng(14);
  fill_uniform<float>(rng, image.values(), 0.f, 1.f);
  (void)net.forward(image, BnMode::train);  // initialize running stats

  const std::string path = temp_file("roundtrip");
  net.save(path);
  auto loaded = Network<float>::load(path);

  const auto pa = net.parameters(), pb = loaded.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    auto va = pa[i].second.values(), vb = pb[i].second.values();
    CHECK(std::equal(va.begin(), va.end(), vb.begin()));
  }
  const auto sa = net.bn_states(), sb = loaded.bn_states();
  for (std::size_t i = 0; i < sa.size(); ++i) {
    CHECK(sa[i].second->running_mean == sb[i].second->running_mean);
    CHECK(sa[i].second->running_var == sb[i].second->running_var);
    CHECK(sa[i].second->initialized == sb[i].second->initialized);
  }
  NoGrad ng;
  auto ta = net.forward(image, BnMode::eval);
  auto tb = loaded.forward(image, BnMode::eval);
  auto ya = ta.values();
  auto yb = tb.values();
  CHECK(std::equal(ya.begin(), ya.end(), yb.begin()));

  // re-serialization is byte-identical
  const std::string path2 = temp_file("roundtrip2");
  loaded.save(path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);
  fs::remove(path);
  fs::remove(path2);
}

TEST_CASE("truncated checkpoints are rejected") {
  auto net = Network<float>::build(NetworkConfig::preset("toy"));
  const std::string path = temp_file("trunc");
  net.save(path);
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  in.close();
  const std::string cut = temp_file("trunc_cut");
  std::ofstream out(cut, std::ios::binary);
  out.write(bytes.data(), std::streamsize(bytes.size() - 10));
  out.close();
  CHECK_THROWS_AS(Network<float>::load(cut), IoError);
  fs::remove(path);
  fs::remove(cut);
}

TEST_CASE("unknown and missing archive tensors are rejected; adam.* is tolerated") {
  auto net = Network<float>::build(NetworkConfig::preset("toy"));
  auto archive = net.to_archive();

  auto extra = archive;
  const std::vector<float> junk{1.f};
  extra.add<float>("bogus.tensor", {1}, std::span<const float>(junk));
  CHECK_THROWS_AS(Network<float>::from_archive(extra), IoError);

  auto adam = archive;
  adam.add<float>("adam.m.encoder.stem.conv.weight", {1}, std::span<const float>(junk));
  CHECK_NOTHROW(Network<float>::from_archive(adam));

  auto missing = archive;
  missing.entries.erase(missing.entries.begin());  // drop the first parameter
  CHECK_THROWS_AS(Network<float>::from_archive(missing), IoError);
}

TEST_CASE("non-checkpoint files are rejected") {
  const std::string path = temp_file("not_a_ckpt");
  std::ofstream(path, std::ios::binary) << "definitely not a checkpoint";
  CHECK_THROWS_AS(Network<float>::load(path), IoError);
  fs::remove(path);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(NetworkConfig::preset("resnet50"), ConfigError);
  auto cfg = NetworkConfig::preset("toy");
  cfg.decoder_features = {16};  // needs one entry per downsampling stage (2)
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = NetworkConfig::preset("toy");
  cfg.compression = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = NetworkConfig::preset("toy");
  cfg.output_scale = "quarter";
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = NetworkConfig::preset("toy");
  cfg.stem_kernel = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = NetworkConfig::preset("toy");
  cfg.block_layout = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("output scale: full-resolution variant") {
  auto cfg = NetworkConfig::preset("toy");
  cfg.output_scale = "full";
  cfg.decoder_features = {16, 8};
  auto net = Network<float>::build(cfg);
  auto image = Tensor<float>({1, 3, 16, 16}, 0.5f);
  auto out = net.forward(image, BnMode::train);
  CHECK(out.shape() == Shape{1, 1, 16, 16});
}

TEST_CASE("config JSON round trip") {
  auto cfg = NetworkConfig::preset("densenet121");
  cfg.seed = 123;
  auto back = NetworkConfig::from_json(cfg.to_json());
  CHECK(back.stem_features == cfg.stem_features);
  CHECK(back.block_layout == cfg.block_layout);
  CHECK(back.decoder_features == cfg.decoder_features);
  CHECK(back.seed == 123);
  CHECK(back.output_scale == cfg.output_scale);
}
