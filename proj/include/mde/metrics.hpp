#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "mde/depth_map.hpp"
#include "mde/errors.hpp"

namespace mde {

/// Evaluation metrics pooled over all valid pixels of a set.
/// sq_rel is the ratio of total squared error to the total squared deviation
/// of the ground truth about its own mean; a constant ground truth makes it
/// degenerate (reported as such, never as infinity).
struct MetricsReport {
  double rmse = 0;
  double sq_rel = 0;
  double mae = 0;
  bool sq_rel_degenerate = false;
  std::size_t n_pixels = 0;
  std::size_t n_images = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["rmse"] = rmse;
    j["sq_rel"] = sq_rel_degenerate ? nlohmann::json() : nlohmann::json(sq_rel);
    j["mae"] = mae;
    j["n_pixels"] = n_pixels;
    j["n_images"] = n_images;
    return j;
  }

  /// Plain-text table with the columns RMSE, Sq Rel, MAE.
  std::string to_table() const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-10s %-10s %-10s\n", "RMSE", "Sq Rel", "MAE");
    std::string s = buf;
    if (sq_rel_degenerate)
      std::snprintf(buf, sizeof buf, "%-10.4f %-10s %-10.4f\n", rmse, "degenerate", mae);
    else
      std::snprintf(buf, sizeof buf, "%-10.4f %-10.4f %-10.4f\n", rmse, sq_rel, mae);
    return s + buf;
  }
};

namespace detail {

struct MetricsAccumulator {
  double sum_sq = 0;     // sum (y - yhat)^2
  double sum_abs = 0;    // sum |y - yhat|
  double sum_y = 0;
  double sum_yy = 0;
  std::size_t n = 0;

  void add(double y, double yhat) {
    const double d = y - yhat;
    sum_sq += d * d;
    sum_abs += std::abs(d);
    sum_y += y;
    sum_yy += y * y;
    ++n;
  }

  void add_pair(const DepthMap& y, const DepthMap& yhat) {
    if (y.height != yhat.height || y.width != yhat.width)
      throw ShapeError("metrics: depth map extents differ");
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y.valid[i] && yhat.valid[i]) add(double(y.depth[i]), double(yhat.depth[i]));
  }

  // sum (y - ybar)^2 via sum_yy - n * ybar^2 would cancel badly; callers that
  // need sq_rel use the two-pass variant below instead.
};

inline double gt_deviation_sq(const std::vector<const DepthMap*>& ys,
                              const std::vector<const DepthMap*>& yhats, double ybar) {
  double dev = 0;
  for (std::size_t k = 0; k < ys.size(); ++k)
    for (std::size_t i = 0; i < ys[k]->size(); ++i)
      if (ys[k]->valid[i] && yhats[k]->valid[i]) {
        const double d = double(ys[k]->depth[i]) - ybar;
        dev += d * d;
      }
  return dev;
}

}  // namespace detail

inline double rmse(const std::vector<DepthMap>& y, const std::vector<DepthMap>& yhat) {
  if (y.size() != yhat.size()) throw ShapeError("rmse: set length mismatch");
  detail::MetricsAccumulator acc;
  for (std::size_t k = 0; k < y.size(); ++k) acc.add_pair(y[k], yhat[k]);
  if (acc.n == 0) throw DataError("rmse: zero valid pixels");
  return std::sqrt(acc.sum_sq / double(acc.n));
}

inline double mae(const std::vector<DepthMap>& y, const std::vector<DepthMap>& yhat) {
  if (y.size() != yhat.size()) throw ShapeError("mae: set length mismatch");
  detail::MetricsAccumulator acc;
  for (std::size_t k = 0; k < y.size(); ++k) acc.add_pair(y[k], yhat[k]);
  if (acc.n == 0) throw DataError("mae: zero valid pixels");
  return acc.sum_abs / double(acc.n);
}

/// This paper's SqRel: sum (y - yhat)^2 / sum (y - ybar)^2 with ybar the mean
/// of the pooled ground truth.
inline double sq_rel(const std::vector<DepthMap>& y, const std::vector<DepthMap>& yhat) {
  if (y.size() != yhat.size()) throw ShapeError("sq_rel: set length mismatch");
  detail::MetricsAccumulator acc;
  std::vector<const DepthMap*> yp, hp;
  for (std::size_t k = 0; k < y.size(); ++k) {
    acc.add_pair(y[k], yhat[k]);
    yp.push_back(&y[k]);
    hp.push_back(&yhat[k]);
  }
  if (acc.n == 0) throw DataError("sq_rel: zero valid pixels");
  const double ybar = acc.sum_y / double(acc.n);
  const double dev = detail::gt_deviation_sq(yp, hp, ybar);
  if (dev <= 0) throw DataError("sq_rel: constant ground truth (degenerate denominator)");
  return acc.sum_sq / dev;
}

/// The depth-estimation literature's conventional relative squared error,
/// mean((y - yhat)^2 / y); provided alongside the paper's variant for
/// comparison.
inline double sq_rel_conventional(const std::vector<DepthMap>& y,
                                  const std::vector<DepthMap>& yhat) {
  if (y.size() != yhat.size()) throw ShapeError("sq_rel_conventional: set length mismatch");
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    if (y[k].size() != yhat[k].size()) throw ShapeError("sq_rel_conventional: extents differ");
    for (std::size_t i = 0; i < y[k].size(); ++i)
      if (y[k].valid[i] && yhat[k].valid[i] && y[k].depth[i] > 0) {
        const double d = double(y[k].depth[i]) - double(yhat[k].depth[i]);
        sum += d * d / double(y[k].depth[i]);
        ++n;
      }
  }
  if (n == 0) throw DataError("sq_rel_conventional: zero valid pixels");
  return sum / double(n);
}

// convenience overloads for flat vectors (all pixels valid, one row)
inline DepthMap depth_row(const std::vector<double>& v) {
  DepthMap m(1, v.size());
  for (std::size_t i = 0; i < v.size(); ++i) m.depth[i] = float(v[i]);
  return m;
}

inline double rmse(const std::vector<double>& y, const std::vector<double>& yhat) {
  return rmse(std::vector<DepthMap>{depth_row(y)}, std::vector<DepthMap>{depth_row(yhat)});
}
inline double mae(const std::vector<double>& y, const std::vector<double>& yhat) {
  return mae(std::vector<DepthMap>{depth_row(y)}, std::vector<DepthMap>{depth_row(yhat)});
}
inline double sq_rel(const std::vector<double>& y, const std::vector<double>& yhat) {
  return sq_rel(std::vector<DepthMap>{depth_row(y)}, std::vector<DepthMap>{depth_row(yhat)});
}

/// 2x bilinear upsampling of a depth map (half-pixel convention), used to
/// bring half-resolution predictions to ground-truth resolution. A target
/// pixel is valid when its nearest source pixel is valid.
DepthMap upsample2x(const DepthMap& in);

/// How `evaluate` aligns predictions with ground truth.
struct EvalPolicy {
  bool upsample_to_gt = true;     // repeated 2x bilinear upsampling
  bool invert_transform = true;   // predictions arrive in transformed units
  double max_depth = 10.0;
  double min_depth = 1.0;
};

/// Pooled-pixel metrics over an evaluation set. Predictions are upsampled to
/// ground-truth resolution and converted back to meters per the policy. A
/// degenerate (constant) pooled ground truth flags sq_rel instead of failing
/// the whole report.
MetricsReport evaluate(const std::vector<DepthMap>& predictions,
                       const std::vector<DepthMap>& ground_truths, const EvalPolicy& policy);

// ---------------------------------------------------------------------------

inline DepthMap upsample2x(const DepthMap& in) {
  DepthMap out(in.height * 2, in.width * 2);
  auto src = [&](std::size_t d, std::size_t extent) {
    double s = (double(d) + 0.5) / 2.0 - 0.5;
    return std::clamp(s, 0.0, double(extent - 1));
  };
  for (std::size_t r = 0; r < out.height; ++r) {
    const double sr = src(r, in.height);
    const std::size_t r0 = std::size_t(sr), r1 = std::min(r0 + 1, in.height - 1);
    const double fr = sr - double(r0);
    for (std::size_t c = 0; c < out.width; ++c) {
      const double sc = src(c, in.width);
      const std::size_t c0 = std::size_t(sc), c1 = std::min(c0 + 1, in.width - 1);
      const double fc = sc - double(c0);
      out.at(r, c) = float((1 - fr) * ((1 - fc) * in.at(r0, c0) + fc * in.at(r0, c1)) +
                           fr * ((1 - fc) * in.at(r1, c0) + fc * in.at(r1, c1)));
      const std::size_t nr = fr < 0.5 ? r0 : r1, nc = fc < 0.5 ? c0 : c1;
      out.valid[r * out.width + c] = in.valid[nr * in.width + nc];
    }
  }
  return out;
}

inline MetricsReport evaluate(const std::vector<DepthMap>& predictions,
                              const std::vector<DepthMap>& ground_truths,
                              const EvalPolicy& policy) {
  if (predictions.size() != ground_truths.size())
    throw DataError("evaluate: prediction/ground-truth count mismatch (" +
                    std::to_string(predictions.size()) + " vs " +
                    std::to_string(ground_truths.size()) + ")");
  if (predictions.empty()) throw DataError("evaluate: empty evaluation set");

  std::vector<DepthMap> preds;
  preds.reserve(predictions.size());
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    DepthMap p = predictions[k];
    const DepthMap& gt = ground_truths[k];
    if (policy.upsample_to_gt) {
      while (p.height < gt.height && p.width < gt.width) p = upsample2x(p);
    }
    if (p.height != gt.height || p.width != gt.width)
      throw ShapeError("evaluate: prediction extents " + std::to_string(p.height) + "x" +
                       std::to_string(p.width) + " cannot be aligned to ground truth " +
                       std::to_string(gt.height) + "x" + std::to_string(gt.width));
    if (policy.invert_transform) p = depth_untransform(p, policy.max_depth, policy.min_depth);
    preds.push_back(std::move(p));
  }

  detail::MetricsAccumulator acc;
  std::vector<const DepthMap*> yp, hp;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    acc.add_pair(ground_truths[k], preds[k]);
    yp.push_back(&ground_truths[k]);
    hp.push_back(&preds[k]);
  }
  if (acc.n == 0) throw DataError("evaluate: zero valid pixels");

  MetricsReport r;
  r.n_pixels = acc.n;
  r.n_images = preds.size();
  r.rmse = std::sqrt(acc.sum_sq / double(acc.n));
  r.mae = acc.sum_abs / double(acc.n);
  const double ybar = acc.sum_y / double(acc.n);
  const double dev = detail::gt_deviation_sq(yp, hp, ybar);
  if (dev <= 0) {
    r.sq_rel_degenerate = true;
  } else {
    r.sq_rel = acc.sum_sq / dev;
  }
  return r;
}

}  // namespace mde
