#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "mde/depth_map.hpp"
#include "mde/errors.hpp"
#include "mde/image_io.hpp"
#include "mde/random.hpp"
#include "mde/tensor.hpp"

namespace mde {

/// One RGB/depth pair: rgb values in [0,1], depth in meters with validity
/// mask, extents matching.
struct Sample {
  std::size_t height = 0, width = 0;
  std::vector<float> rgb;  // [3,H,W] planar
  DepthMap depth;
  std::string id;

  float& rgb_at(std::size_t c, std::size_t r, std::size_t col) {
    return rgb[(c * height + r) * width + col];
  }
  float rgb_at(std::size_t c, std::size_t r, std::size_t col) const {
    return rgb[(c * height + r) * width + col];
  }
};

/// How raw depth rasters map to meters.
enum class DepthEncoding {
  scaled,       // meters = raw * depth_scale (16-bit millimeter rasters by default)
  normalized8,  // meters = raw / 255 * max_depth (the reduced-dataset 8-bit convention)
};

struct DataOptions {
  double depth_scale = 0.001;
  DepthEncoding encoding = DepthEncoding::scaled;
  double max_depth = 10.0;
  std::string split = "train";
};

/// Ordered (rgb_path, depth_path) records resolved relative to the manifest
/// file. All referenced files must exist at load time.
struct Manifest {
  struct Record {
    std::string rgb_path;
    std::string depth_path;
    std::string id;
  };
  std::vector<Record> records;
  std::filesystem::path base_dir;
  DataOptions options;

  std::size_t size() const { return records.size(); }
};

/// CSV manifest: UTF-8, two columns `rgb_path,depth_path`, no header, paths
/// relative to the manifest file.
inline Manifest load_manifest(const std::string& path, DataOptions options = {}) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest '" + path + "'");
  Manifest m;
  m.base_dir = std::filesystem::path(path).parent_path();
  m.options = options;
  std::set<std::string> ids;
  std::string line;
  std::size_t row = 0;
  while (std::getline(f, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || comma == 0 || comma + 1 >= line.size())
      throw DataError("manifest '" + path + "': malformed row " + std::to_string(row));
    Manifest::Record rec;
    rec.rgb_path = line.substr(0, comma);
    rec.depth_path = line.substr(comma + 1);
    rec.id = rec.rgb_path;
    if (!ids.insert(rec.id).second)
      throw DataError("manifest '" + path + "': duplicate id '" + rec.id + "' at row " +
                      std::to_string(row));
    for (const auto& p : {rec.rgb_path, rec.depth_path})
      if (!std::filesystem::exists(m.base_dir / p))
        throw DataError("manifest '" + path + "': row " + std::to_string(row) +
                        " references missing file '" + p + "'");
    m.records.push_back(std::move(rec));
  }
  return m;
}

/// Decode one manifest record: 8-bit RGB divided by 255 into [0,1]; depth
/// per the manifest's encoding; raw depth 0 becomes an invalid pixel.
inline Sample load_sample(const Manifest& manifest, std::size_t index) {
  if (index >= manifest.size()) throw DataError("load_sample: index out of range");
  const auto& rec = manifest.records[index];
  const auto rgb = read_pnm((manifest.base_dir / rec.rgb_path).string());
  if (rgb.is16 || rgb.u8.channels != 3)
    throw DataError("sample '" + rec.id + "': RGB raster must be 8-bit 3-channel");
  const auto dep = read_pnm((manifest.base_dir / rec.depth_path).string());
  if (dep.channels() != 1)
    throw DataError("sample '" + rec.id + "': depth raster must be single-channel");
  if (dep.height() != rgb.u8.height || dep.width() != rgb.u8.width)
    throw DataError("sample '" + rec.id + "': RGB extents " + std::to_string(rgb.u8.height) + "x" +
                    std::to_string(rgb.u8.width) + " do not match depth extents " +
                    std::to_string(dep.height()) + "x" + std::to_string(dep.width()));

  Sample s;
  s.id = rec.id;
  s.height = rgb.u8.height;
  s.width = rgb.u8.width;
  s.rgb.resize(3 * s.height * s.width);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < s.height * s.width; ++i)
      s.rgb[c * s.height * s.width + i] = float(rgb.u8.pixels[i * 3 + c]) / 255.0f;

  s.depth = DepthMap(s.height, s.width);
  const auto& opt = manifest.options;
  for (std::size_t i = 0; i < s.depth.size(); ++i) {
    const std::uint32_t raw = dep.is16 ? dep.raw16.pixels[i] : dep.u8.pixels[i];
    if (raw == 0) {
      s.depth.depth[i] = 0.f;
      s.depth.valid[i] = 0;
    } else if (opt.encoding == DepthEncoding::normalized8) {
      s.depth.depth[i] = float(double(raw) / 255.0 * opt.max_depth);
    } else {
      s.depth.depth[i] = float(double(raw) * opt.depth_scale);
    }
  }
  return s;
}

/// Horizontal flip with probability 0.5; one decision covers both rgb and
/// depth so they can never disagree.
inline Sample augment_flip(const Sample& sample, Rng& rng) {
  std::uniform_real_distribution<double> dist{0.0, 1.0};
  if (dist(rng) >= 0.5) return sample;
  Sample out = sample;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t r = 0; r < sample.height; ++r)
      for (std::size_t col = 0; col < sample.width; ++col)
        out.rgb_at(c, r, col) = sample.rgb_at(c, r, sample.width - 1 - col);
  for (std::size_t r = 0; r < sample.height; ++r)
    for (std::size_t col = 0; col < sample.width; ++col) {
      out.depth.at(r, col) = sample.depth.at(r, sample.width - 1 - col);
      out.depth.valid[r * sample.width + col] =
          sample.depth.valid[r * sample.width + sample.width - 1 - col];
    }
  return out;
}

/// Abstract sample source so the trainer can run off manifests or in-memory
/// synthetic sets alike.
class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual std::size_t size() const = 0;
  virtual Sample get(std::size_t index) const = 0;
};

class ManifestDataset : public Dataset {
 public:
  explicit ManifestDataset(Manifest manifest) : manifest_(std::move(manifest)) {}
  std::size_t size() const override { return manifest_.size(); }
  Sample get(std::size_t index) const override { return load_sample(manifest_, index); }
  const Manifest& manifest() const { return manifest_; }

 private:
  Manifest manifest_;
};

class VectorDataset : public Dataset {
 public:
  explicit VectorDataset(std::vector<Sample> samples) : samples_(std::move(samples)) {}
  std::size_t size() const override { return samples_.size(); }
  Sample get(std::size_t index) const override { return samples_.at(index); }

 private:
  std::vector<Sample> samples_;
};

/// Deterministic per-epoch sample order keyed by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x50fful, epoch));
  shuffle<std::size_t>(rng, order);
  return order;
}

struct BatchOptions {
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  bool augment = true;
  int target_downsampling = 2;  // 2 for half-resolution outputs, 1 for full
  double max_depth = 10.0;
  double min_depth = 1.0;
  std::size_t workers = 1;
};

/// One training batch: rgb [N,3,H,W], transformed-depth targets and validity
/// mask at the network's output resolution [N,1,H/f,W/f].
template <typename T>
struct Batch {
  Tensor<T> rgb;
  Tensor<T> target;
  Tensor<T> mask;
  std::vector<std::size_t> indices;
};

namespace detail {

/// Area-downsample a depth map by an integer factor, averaging valid source
/// pixels per block; a block with no valid contributor stays invalid.
inline DepthMap area_downsample(const DepthMap& in, std::size_t f) {
  if (f <= 1) return in;
  if (in.height % f != 0 || in.width % f != 0)
    throw ShapeError("area_downsample: extents not divisible by " + std::to_string(f));
  DepthMap out(in.height / f, in.width / f);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c) {
      double sum = 0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < f; ++i)
        for (std::size_t j = 0; j < f; ++j)
          if (in.valid[(r * f + i) * in.width + c * f + j]) {
            sum += in.at(r * f + i, c * f + j);
            ++n;
          }
      if (n == 0) {
        out.valid[r * out.width + c] = 0;
        out.at(r, c) = 0.f;
      } else {
        out.at(r, c) = float(sum / double(n));
      }
    }
  return out;
}

}  // namespace detail

/// Materialize one batch. Samples may be decoded by several workers; each
/// writes only its own slot, so the result is independent of worker count.
template <typename T>
Batch<T> make_batch(const Dataset& dataset, const std::vector<std::size_t>& indices,
                    const BatchOptions& opts) {
  if (indices.empty()) throw DataError("make_batch: empty index list");
  std::vector<Sample> samples(indices.size());
  auto decode = [&](std::size_t slot) {
    Sample s = dataset.get(indices[slot]);
    if (opts.augment) {
      Rng rng(mix_seed(opts.seed, opts.epoch, indices[slot]));
      s = augment_flip(s, rng);
    }
    samples[slot] = std::move(s);
  };
  const std::size_t workers = std::max<std::size_t>(1, opts.workers);
  if (workers == 1 || indices.size() == 1) {
    for (std::size_t i = 0; i < indices.size(); ++i) decode(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, indices.size()); ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < indices.size(); i += workers) decode(i);
      });
    for (auto& t : pool) t.join();
  }

  const std::size_t N = samples.size(), H = samples[0].height, W = samples[0].width;
  const std::size_t f = std::size_t(opts.target_downsampling);
  for (const auto& s : samples)
    if (s.height != H || s.width != W)
      throw DataError("make_batch: mixed sample extents in one batch");

  Batch<T> b;
  b.indices = indices;
  b.rgb = Tensor<T>::leaf({N, 3, H, W});
  b.target = Tensor<T>::leaf({N, 1, H / f, W / f});
  b.mask = Tensor<T>::leaf({N, 1, H / f, W / f});
  auto rv = b.rgb.values();
  auto tv = b.target.values();
  auto mv = b.mask.values();
  const std::size_t plane = H * W, tplane = (H / f) * (W / f);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < 3 * plane; ++i) rv[n * 3 * plane + i] = T(samples[n].rgb[i]);
    DepthMap target = depth_transform(detail::area_downsample(samples[n].depth, f),
                                      opts.max_depth, opts.min_depth);
    for (std::size_t i = 0; i < tplane; ++i) {
      tv[n * tplane + i] = T(target.depth[i]);
      mv[n * tplane + i] = target.valid[i] ? T(1) : T(0);
    }
  }
  return b;
}

/// Index lists for one epoch: deterministic shuffle keyed by (seed, epoch),
/// final short batch kept. Every sample appears exactly once.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t seed, std::size_t epoch) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (n == 0) throw DataError("empty dataset");
  auto order = epoch_order(n, seed, epoch);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size) {
    batches.emplace_back(order.begin() + std::ptrdiff_t(i),
                         order.begin() + std::ptrdiff_t(std::min(i + batch_size, n)));
  }
  return batches;
}

/// Full epoch of materialized batches.
template <typename T>
std::vector<Batch<T>> make_batches(const Dataset& dataset, const BatchOptions& opts) {
  std::vector<Batch<T>> out;
  for (const auto& idx : epoch_batches(dataset.size(), opts.batch_size, opts.seed, opts.epoch))
    out.push_back(make_batch<T>(dataset, idx, opts));
  return out;
}

/// Procedural desk-scale scene: a planar depth ramp plus 1-4 rectangles at
/// distinct depths in [1, 10] m, with depth-correlated shading and seeded
/// texture as RGB. All pixels valid; analytic ground truth.
inline Sample synth_scene(std::uint64_t seed, std::size_t H, std::size_t W) {
  if (H < 16 || W < 16) throw ConfigError("synth_scene: extents must be >= 16");
  Rng rng(mix_seed(seed, 0x5ce9eULL));
  std::uniform_real_distribution<double> unit{0.0, 1.0};

  Sample s;
  s.id = "synth-" + std::to_string(seed);
  s.height = H;
  s.width = W;
  s.depth = DepthMap(H, W);

  const double base = 2.0 + 6.0 * unit(rng);
  const double slope = (unit(rng) - 0.5) * 6.0;
  const double angle = unit(rng) * 6.283185307179586;
  const double dx = std::cos(angle), dy = std::sin(angle);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double t = (double(c) / double(W - 1) - 0.5) * dx +
                       (double(r) / double(H - 1) - 0.5) * dy;
      s.depth.at(r, c) = float(std::clamp(base + slope * t, 1.0, 10.0));
    }

  const int n_rects = 1 + int(unit(rng) * 4.0);
  for (int k = 0; k < std::min(n_rects, 4); ++k) {
    const double depth = 1.0 + 9.0 * unit(rng);
    const std::size_t rh = std::size_t(H / 8 + unit(rng) * double(H) / 3.0);
    const std::size_t rw = std::size_t(W / 8 + unit(rng) * double(W) / 3.0);
    const std::size_t r0 = std::size_t(unit(rng) * double(H - rh));
    const std::size_t c0 = std::size_t(unit(rng) * double(W - rw));
    for (std::size_t r = r0; r < r0 + rh; ++r)
      for (std::size_t c = c0; c < c0 + rw; ++c) s.depth.at(r, c) = float(depth);
  }

  double tint[3];
  for (auto& t : tint) t = 0.7 + 0.3 * unit(rng);
  s.rgb.resize(3 * H * W);
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const double shade = 0.15 + 0.8 * (10.0 - s.depth.at(r, c)) / 9.0;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double noise = (unit(rng) - 0.5) * 0.08;
        s.rgb_at(ch, r, c) = float(std::clamp(shade * tint[ch] + noise, 0.0, 1.0));
      }
    }
  return s;
}

/// Write a sample as PNM rasters (8-bit PPM rgb, 16-bit millimeter PGM
/// depth; invalid pixels become raw 0).
inline void write_sample_pnm(const Sample& s, const std::string& rgb_path,
                             const std::string& depth_path) {
  RasterU8 rgb;
  rgb.channels = 3;
  rgb.height = s.height;
  rgb.width = s.width;
  rgb.pixels.resize(3 * s.height * s.width);
  for (std::size_t i = 0; i < s.height * s.width; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      rgb.pixels[i * 3 + c] =
          std::uint8_t(std::clamp(std::lround(double(s.rgb[c * s.height * s.width + i]) * 255.0),
                                  0L, 255L));
  write_ppm(rgb_path, rgb);

  RasterU16 dep;
  dep.height = s.height;
  dep.width = s.width;
  dep.pixels.resize(s.height * s.width);
  for (std::size_t i = 0; i < dep.pixels.size(); ++i)
    dep.pixels[i] = s.depth.valid[i]
                        ? std::uint16_t(std::clamp(std::lround(double(s.depth.depth[i]) * 1000.0),
                                                   1L, 65535L))
                        : std::uint16_t(0);
  write_pgm16(depth_path, dep);
}

}  // namespace mde
