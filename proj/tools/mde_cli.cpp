// mde: desk-scale monocular depth estimation toolkit.
//
// Subcommands: train, eval, predict, gradcheck, synth-data, info.
// Exit codes: 0 success, 1 usage/config error, 2 data error,
//             3 verification failure.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mde/colormap.hpp"
#include "mde/data.hpp"
#include "mde/gradcheck.hpp"
#include "mde/metrics.hpp"
#include "mde/network.hpp"
#include "mde/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Invocation {
  std::string config_path;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string preset = "toy";
  bool preset_set = false;

  // per-subcommand inputs
  std::string manifest;
  std::string checkpoint;
  std::string image;
  std::string resume;
  std::string corrupt_op;
  std::size_t count = 8;
  std::size_t height = 32, width = 32;
};

/// Everything a run needs, resolved from preset + config file + flags.
struct Resolved {
  mde::NetworkConfig net = mde::NetworkConfig::preset("toy");
  mde::TrainConfig train;
  mde::LossConfig loss;
  mde::DataOptions data;
  std::string manifest;

  json to_flat_json() const {
    json j;
    const json nj = net.to_json();
    for (auto it = nj.begin(); it != nj.end(); ++it) j["network." + it.key()] = it.value();
    j["train.epochs"] = train.epochs;
    j["train.batch_size"] = train.batch_size;
    j["train.learning_rate"] = train.learning_rate;
    j["train.beta1"] = train.beta1;
    j["train.beta2"] = train.beta2;
    j["train.eps"] = train.eps_adam;
    j["train.seed"] = train.seed;
    j["train.checkpoint_every"] = train.checkpoint_every;
    j["train.max_steps"] = train.max_steps;
    j["train.augment"] = train.augment;
    j["train.workers"] = train.workers;
    j["train.precision"] = train.precision;
    j["loss.lambda"] = loss.lambda;
    j["loss.ssim_window"] = loss.ssim_window;
    j["loss.dynamic_range"] = loss.dynamic_range;
    j["loss.ssim_c1"] = loss.ssim_c1;
    j["loss.ssim_c2"] = loss.ssim_c2;
    j["loss.max_depth"] = loss.max_depth;
    j["loss.min_depth"] = loss.min_depth;
    j["data.manifest"] = manifest;
    j["data.depth_scale"] = data.depth_scale;
    j["data.encoding"] =
        data.encoding == mde::DepthEncoding::scaled ? "scaled" : "normalized8";
    j["data.max_depth"] = data.max_depth;
    return j;
  }
};

template <typename T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw mde::ConfigError("config: bad value type for key '" + key + "'");
  }
}

void apply_config_key(Resolved& r, const std::string& key, const json& v) {
  if (key == "network.preset") return;  // handled in the first pass
  if (key == "network.input_channels") r.net.input_channels = get_as<int>(v, key);
  else if (key == "network.stem_features") r.net.stem_features = get_as<int>(v, key);
  else if (key == "network.stem_kernel") r.net.stem_kernel = get_as<int>(v, key);
  else if (key == "network.stem_pool") r.net.stem_pool = get_as<bool>(v, key);
  else if (key == "network.growth_rate") r.net.growth_rate = get_as<int>(v, key);
  else if (key == "network.block_layout") r.net.block_layout = get_as<std::vector<int>>(v, key);
  else if (key == "network.compression") r.net.compression = get_as<double>(v, key);
  else if (key == "network.decoder_features")
    r.net.decoder_features = get_as<std::vector<int>>(v, key);
  else if (key == "network.output_scale") r.net.output_scale = get_as<std::string>(v, key);
  else if (key == "network.seed") r.net.seed = get_as<std::uint64_t>(v, key);
  else if (key == "train.epochs") r.train.epochs = get_as<int>(v, key);
  else if (key == "train.batch_size") r.train.batch_size = get_as<std::size_t>(v, key);
  else if (key == "train.learning_rate") r.train.learning_rate = get_as<double>(v, key);
  else if (key == "train.beta1") r.train.beta1 = get_as<double>(v, key);
  else if (key == "train.beta2") r.train.beta2 = get_as<double>(v, key);
  else if (key == "train.eps") r.train.eps_adam = get_as<double>(v, key);
  else if (key == "train.seed") r.train.seed = get_as<std::uint64_t>(v, key);
  else if (key == "train.checkpoint_every") r.train.checkpoint_every = get_as<std::size_t>(v, key);
  else if (key == "train.max_steps") r.train.max_steps = get_as<std::uint64_t>(v, key);
  else if (key == "train.augment") r.train.augment = get_as<bool>(v, key);
  else if (key == "train.workers") r.train.workers = get_as<std::size_t>(v, key);
  else if (key == "train.precision") r.train.precision = get_as<int>(v, key);
  else if (key == "loss.lambda") r.loss.lambda = get_as<double>(v, key);
  else if (key == "loss.ssim_window") r.loss.ssim_window = get_as<int>(v, key);
  else if (key == "loss.dynamic_range") {
    const double range = get_as<double>(v, key);
    r.loss.dynamic_range = range;
    r.loss.ssim_c1 = (0.01 * range) * (0.01 * range);
    r.loss.ssim_c2 = (0.03 * range) * (0.03 * range);
  } else if (key == "loss.ssim_c1") r.loss.ssim_c1 = get_as<double>(v, key);
  else if (key == "loss.ssim_c2") r.loss.ssim_c2 = get_as<double>(v, key);
  else if (key == "loss.max_depth") r.loss.max_depth = get_as<double>(v, key);
  else if (key == "loss.min_depth") r.loss.min_depth = get_as<double>(v, key);
  else if (key == "data.manifest") r.manifest = get_as<std::string>(v, key);
  else if (key == "data.depth_scale") r.data.depth_scale = get_as<double>(v, key);
  else if (key == "data.encoding") {
    const auto s = get_as<std::string>(v, key);
    if (s == "scaled") r.data.encoding = mde::DepthEncoding::scaled;
    else if (s == "normalized8") r.data.encoding = mde::DepthEncoding::normalized8;
    else throw mde::ConfigError("config: data.encoding must be 'scaled' or 'normalized8'");
  } else if (key == "data.max_depth") r.data.max_depth = get_as<double>(v, key);
  else throw mde::ConfigError("config: unknown key '" + key + "'");
}

Resolved resolve(const Invocation& inv) {
  Resolved r;
  json file;
  if (!inv.config_path.empty()) {
    std::ifstream f(inv.config_path);
    if (!f) throw mde::ConfigError("cannot open config file '" + inv.config_path + "'");
    try {
      file = json::parse(f);
    } catch (const json::exception& e) {
      throw mde::ConfigError("config: invalid JSON in '" + inv.config_path + "': " + e.what());
    }
    if (!file.is_object()) throw mde::ConfigError("config: top level must be a JSON object");
  }

  // preset first (from file unless overridden by flag), then file keys,
  // then the remaining flag overrides
  std::string preset = inv.preset;
  if (!inv.preset_set && file.contains("network.preset"))
    preset = get_as<std::string>(file["network.preset"], "network.preset");
  r.net = mde::NetworkConfig::preset(preset);
  for (auto it = file.begin(); it != file.end(); ++it) apply_config_key(r, it.key(), it.value());
  if (inv.seed_set) {
    r.train.seed = inv.seed;
    r.net.seed = inv.seed;
  }
  if (!inv.manifest.empty()) r.manifest = inv.manifest;
  r.net.validate();
  r.train.validate();
  r.loss.validate();
  r.data.max_depth = r.loss.max_depth;
  return r;
}

void write_resolved_config(const Resolved& r, const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream f(fs::path(out_dir) / "resolved_config.json", std::ios::binary);
  if (!f) throw mde::IoError("cannot write resolved_config.json under '" + out_dir + "'");
  f << r.to_flat_json().dump(2) << "\n";
}

/// A never-trained network has batch-norm running stats at their (0, 1)
/// starting point; allow inference with them rather than failing.
template <typename T>
void ensure_eval_ready(mde::Network<T>& net) {
  for (auto& [name, st] : net.bn_states())
    if (!st->initialized) st->initialized = true;
}

template <typename T>
mde::Tensor<T> sample_to_tensor(const mde::Sample& s) {
  auto t = mde::Tensor<T>::leaf({1, 3, s.height, s.width});
  auto v = t.values();
  for (std::size_t i = 0; i < s.rgb.size(); ++i) v[i] = T(s.rgb[i]);
  return t;
}

template <typename T>
mde::DepthMap tensor_to_depth(const mde::Tensor<T>& pred) {
  const auto& sh = pred.shape();
  mde::DepthMap d(sh[2], sh[3]);
  auto v = pred.values();
  for (std::size_t i = 0; i < d.size(); ++i) d.depth[i] = float(v[i]);
  return d;
}

int checkpoint_dtype(const std::string& path) {
  const auto a = mde::TensorArchive::load(path);
  if (a.entries.empty()) throw mde::IoError("checkpoint '" + path + "' holds no tensors");
  return a.entries[0].dtype == 0 ? 32 : 64;
}

// ---------------------------------------------------------------- train ----

template <typename T>
int run_train(const Invocation& inv, const Resolved& r) {
  if (r.manifest.empty())
    throw mde::ConfigError("train: no manifest (use --manifest or config key data.manifest)");
  mde::ManifestDataset dataset(mde::load_manifest(r.manifest, r.data));

  mde::TrainState<T> state = inv.resume.empty()
                                 ? mde::TrainState<T>::fresh(r.net)
                                 : mde::load_train_state<T>(inv.resume);
  write_resolved_config(r, inv.out_dir);

  const auto t0 = std::chrono::steady_clock::now();
  mde::TrainResult result = mde::train(state, dataset, r.train, r.loss, inv.out_dir);
  const double wall_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  // timing goes to stdout; the CSV artifact keeps the wall_ms column zeroed
  // so same-seed re-runs are byte-identical
  auto log = result.log;
  for (auto& rec : log) rec.wall_ms = 0;
  mde::write_log_csv(log, (fs::path(inv.out_dir) / "train_log.csv").string());

  std::printf("trained %zu steps in %.1f s\n", log.size(), wall_s);
  if (!log.empty())
    std::printf("loss: first %.6f last %.6f\n", log.front().total, log.back().total);
  std::printf("final checkpoint: %s\n", result.final_checkpoint.c_str());
  return 0;
}

// ----------------------------------------------------------------- eval ----

template <typename T>
int run_eval(const Invocation& inv, const Resolved& r, bool identity) {
  if (r.manifest.empty())
    throw mde::ConfigError("eval: no manifest (use --manifest or config key data.manifest)");
  mde::Manifest manifest = mde::load_manifest(r.manifest, r.data);
  if (manifest.size() == 0) throw mde::DataError("eval: empty manifest '" + r.manifest + "'");

  mde::Network<T> net = identity ? mde::Network<T>::build(r.net) : [&] {
    auto n = mde::Network<T>::load(inv.checkpoint);
    return n;
  }();
  ensure_eval_ready(net);

  std::vector<mde::DepthMap> preds, gts;
  mde::NoGrad ng;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    mde::Sample s = mde::load_sample(manifest, i);
    gts.push_back(s.depth);
    if (identity) {
      preds.push_back(mde::depth_transform(s.depth, r.loss.max_depth, r.loss.min_depth));
    } else {
      preds.push_back(tensor_to_depth(net.forward(sample_to_tensor<T>(s), mde::BnMode::eval)));
    }
  }

  mde::EvalPolicy policy;
  policy.max_depth = r.loss.max_depth;
  policy.min_depth = r.loss.min_depth;
  mde::MetricsReport report = mde::evaluate(preds, gts, policy);

  write_resolved_config(r, inv.out_dir);
  std::ofstream f(fs::path(inv.out_dir) / "metrics.json", std::ios::binary);
  if (!f) throw mde::IoError("cannot write metrics.json under '" + inv.out_dir + "'");
  f << report.to_json().dump(2) << "\n";
  std::fputs(report.to_table().c_str(), stdout);
  std::printf("(%zu images, %zu pooled pixels)\n", report.n_images, report.n_pixels);
  return 0;
}

// -------------------------------------------------------------- predict ----

template <typename T>
int run_predict(const Invocation& inv, const Resolved& r) {
  mde::Network<T> net = mde::Network<T>::load(inv.checkpoint);
  ensure_eval_ready(net);

  const auto img = mde::read_pnm(inv.image);
  if (img.is16 || img.u8.channels != 3)
    throw mde::DataError("predict: '" + inv.image + "' is not an 8-bit color image");
  mde::Sample s;
  s.height = img.u8.height;
  s.width = img.u8.width;
  s.rgb.resize(3 * s.height * s.width);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < s.height * s.width; ++i)
      s.rgb[c * s.height * s.width + i] = float(img.u8.pixels[i * 3 + c]) / 255.0f;

  mde::NoGrad ng;
  mde::DepthMap transformed =
      tensor_to_depth(net.forward(sample_to_tensor<T>(s), mde::BnMode::eval));
  while (transformed.height < s.height && transformed.width < s.width)
    transformed = mde::upsample2x(transformed);
  mde::DepthMap meters = mde::depth_untransform(transformed, r.loss.max_depth, r.loss.min_depth);

  write_resolved_config(r, inv.out_dir);
  const std::string stem = fs::path(inv.image).stem().string();
  const std::string raw_path = (fs::path(inv.out_dir) / (stem + "_depth.pgm")).string();
  const std::string color_path = (fs::path(inv.out_dir) / (stem + "_depth_color.ppm")).string();

  mde::RasterU16 raw;
  raw.height = meters.height;
  raw.width = meters.width;
  raw.pixels.resize(meters.size());
  for (std::size_t i = 0; i < meters.size(); ++i)
    raw.pixels[i] = std::uint16_t(
        std::clamp(std::lround(double(meters.depth[i]) * 1000.0), 0L, 65535L));
  mde::write_pgm16(raw_path, raw);
  mde::write_ppm(color_path, mde::colorize_depth(meters));

  float lo = meters.depth[0], hi = meters.depth[0];
  for (float d : meters.depth) {
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  std::printf("depth range: min %.3f m, max %.3f m (%zux%zu)\n", double(lo), double(hi),
              meters.height, meters.width);
  std::printf("raw (16-bit mm): %s\n", raw_path.c_str());
  std::printf("preview:         %s\n", color_path.c_str());
  return 0;
}

// ------------------------------------------------------------- gradcheck ---

int run_gradcheck_cmd(const Invocation& inv) {
  mde::GradCheckOptions opts;
  if (inv.seed_set) opts.seed = inv.seed;
  opts.corrupt_op = inv.corrupt_op;
  const auto report = mde::run_gradcheck(opts);
  bool all_pass = true;
  std::printf("%-28s %-14s %-10s %s\n", "op", "max_rel_err", "instances", "status");
  for (const auto& e : report) {
    std::printf("%-28s %-14.3e %-10d %s\n", e.op.c_str(), e.max_rel_err, e.instances,
                e.pass ? "PASS" : "FAIL");
    all_pass = all_pass && e.pass;
  }
  if (!all_pass) {
    std::fputs("gradcheck: FAILED ops:", stderr);
    for (const auto& e : report)
      if (!e.pass) std::fprintf(stderr, " %s", e.op.c_str());
    std::fputc('\n', stderr);
    return 3;
  }
  std::printf("gradcheck: all %zu ops within tolerance %.1e\n", report.size(), opts.tolerance);
  return 0;
}

// ------------------------------------------------------------ synth-data ---

int run_synth_data(const Invocation& inv, const Resolved& r) {
  if (inv.count == 0) throw mde::ConfigError("synth-data: --count must be >= 1");
  write_resolved_config(r, inv.out_dir);
  std::ofstream manifest(fs::path(inv.out_dir) / "manifest.csv", std::ios::binary);
  if (!manifest) throw mde::IoError("cannot write manifest.csv under '" + inv.out_dir + "'");
  for (std::size_t i = 0; i < inv.count; ++i) {
    const mde::Sample s =
        mde::synth_scene(mde::mix_seed(r.train.seed, 0xda7aULL, i), inv.height, inv.width);
    char rgb_name[64], dep_name[64];
    std::snprintf(rgb_name, sizeof rgb_name, "scene_%04zu.ppm", i);
    std::snprintf(dep_name, sizeof dep_name, "scene_%04zu_depth.pgm", i);
    mde::write_sample_pnm(s, (fs::path(inv.out_dir) / rgb_name).string(),
                          (fs::path(inv.out_dir) / dep_name).string());
    manifest << rgb_name << "," << dep_name << "\n";
  }
  std::printf("wrote %zu synthetic %zux%zu samples + manifest.csv to %s\n", inv.count, inv.height,
              inv.width, inv.out_dir.c_str());
  return 0;
}

// ----------------------------------------------------------------- info ----

template <typename T>
int run_info_net(mde::Network<T>& net) {
  std::printf("%-36s %-20s %12s\n", "tensor", "shape", "params");
  std::size_t total = 0;
  for (const auto& [name, t] : net.parameters()) {
    std::printf("%-36s %-20s %12zu\n", name.c_str(), mde::shape_str(t.shape()).c_str(), t.size());
    total += t.size();
  }
  const auto report = mde::size_report(net);
  std::printf("\ntotal parameters:   %zu\n", total);
  std::printf("encoder parameters: %zu\n", report.encoder_param_count);
  std::printf("checkpoint size:    %zu bytes (%.1f MB)\n", report.checkpoint_bytes,
              report.megabytes);
  std::printf("reference point: a DenseNet-121 encoder is commonly quoted at ~8 million "
              "parameters\n");
  return 0;
}

int run_info(const Invocation& inv, const Resolved& r) {
  if (!inv.checkpoint.empty()) {
    if (checkpoint_dtype(inv.checkpoint) == 64) {
      auto net = mde::Network<double>::load(inv.checkpoint);
      return run_info_net(net);
    }
    auto net = mde::Network<float>::load(inv.checkpoint);
    return run_info_net(net);
  }
  auto net = mde::Network<float>::build(r.net);
  return run_info_net(net);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale monocular depth estimation toolkit"};
  app.require_subcommand(1);

  Invocation inv;
  bool identity = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", inv.config_path, "flat dotted-key JSON config file");
    sub->add_option("--out", inv.out_dir, "output directory");
    sub->add_option("--seed", inv.seed, "seed override (network init + data order)")
        ->each([&](const std::string&) { inv.seed_set = true; });
    sub->add_option("--preset", inv.preset, "network preset: toy | densenet121")
        ->each([&](const std::string&) { inv.preset_set = true; });
  };

  auto* train = app.add_subcommand("train", "train a network on a manifest");
  add_common(train);
  train->add_option("--manifest", inv.manifest, "training manifest CSV");
  train->add_option("--resume", inv.resume, "resume from a training checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  add_common(eval);
  eval->add_option("--manifest", inv.manifest, "evaluation manifest CSV");
  eval->add_option("--checkpoint", inv.checkpoint, "network checkpoint");
  eval->add_flag("--identity", identity, "score ground truth against itself (sanity path)");

  auto* predict = app.add_subcommand("predict", "predict depth for one image");
  add_common(predict);
  predict->add_option("--checkpoint", inv.checkpoint, "network checkpoint")->required();
  predict->add_option("--image", inv.image, "input PPM image")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient self-check");
  add_common(gradcheck);
  gradcheck->add_option("--corrupt", inv.corrupt_op,
                        "deliberately corrupt this op's gradient (test harness hook)");

  auto* synth = app.add_subcommand("synth-data", "generate synthetic scenes + manifest");
  add_common(synth);
  synth->add_option("--count", inv.count, "number of samples");
  synth->add_option("--height", inv.height, "sample height (>= 16)");
  synth->add_option("--width", inv.width, "sample width (>= 16)");

  auto* info = app.add_subcommand("info", "layer table and size report");
  add_common(info);
  info->add_option("--checkpoint", inv.checkpoint, "inspect a checkpoint instead of a preset");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (gradcheck->parsed()) return run_gradcheck_cmd(inv);

    Resolved r = resolve(inv);
    if (train->parsed()) {
      if (!inv.resume.empty() && checkpoint_dtype(inv.resume) == 64) r.train.precision = 64;
      return r.train.precision == 64 ? run_train<double>(inv, r) : run_train<float>(inv, r);
    }
    if (eval->parsed()) {
      if (!identity && inv.checkpoint.empty())
        throw mde::ConfigError("eval: --checkpoint is required (or pass --identity)");
      const int prec = identity ? 32 : checkpoint_dtype(inv.checkpoint);
      return prec == 64 ? run_eval<double>(inv, r, identity) : run_eval<float>(inv, r, identity);
    }
    if (predict->parsed()) {
      return checkpoint_dtype(inv.checkpoint) == 64 ? run_predict<double>(inv, r)
                                                    : run_predict<float>(inv, r);
    }
    if (synth->parsed()) return run_synth_data(inv, r);
    if (info->parsed()) return run_info(inv, r);
    std::fputs("error: no subcommand\n", stderr);
    return 1;
  } catch (const mde::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const mde::TrainAbort& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const mde::DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const mde::ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const mde::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const mde::StateError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
