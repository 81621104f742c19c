#pragma once

// Training losses, evaluation metrics and scale/shift alignment for depth maps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "vadepth/error.hpp"
#include "vadepth/grid.hpp"

namespace vadepth {

struct LossConfig {
  double alpha = 0.85;   ///< variance coefficient of the depth loss
  double lambda = 0.1;   ///< weight of the variational loss
  int pooling_factor = 1;
  std::uint64_t seed = 0;
};

inline void validate(const LossConfig& cfg) {
  if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) throw InvalidArgument("alpha must lie in [0, 1]");
  if (!(cfg.lambda >= 0.0)) throw InvalidArgument("lambda must be >= 0");
  if (cfg.pooling_factor < 1) throw InvalidArgument("pooling factor must be >= 1");
}

inline void check_same_grid(const DepthMap& a, const DepthMap& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw InvalidArgument("prediction and ground truth differ in resolution");
}

struct LossValue {
  double value = 0.0;
  Field grad;  ///< dL/dpred, zero at invalid pixels
};

/// Scale-invariant log loss over pixels valid in gt:
/// (1/N) sum e^2 - (alpha/N^2) (sum e)^2 with e = log pred - log gt.
inline LossValue depth_loss_with_grad(const DepthMap& pred, const DepthMap& gt, double alpha) {
  check_same_grid(pred, gt);
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("alpha must lie in [0, 1]");
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  for (int i = 0; i < gt.height(); ++i)
    for (int j = 0; j < gt.width(); ++j) {
      if (!gt.is_valid(i, j)) continue;
      if (!(pred(i, j) > 0.0)) throw NumericalError("depth loss: non-positive prediction at a valid pixel");
      if (!(gt(i, j) > 0.0)) throw InvalidArgument("depth loss: non-positive ground truth at a valid pixel");
      const double e = std::log(pred(i, j)) - std::log(gt(i, j));
      sum += e;
      sum_sq += e * e;
      ++n;
    }
  if (n == 0) throw InvalidArgument("depth loss: no valid pixels");
  const double nn = static_cast<double>(n);
  LossValue out;
  out.value = sum_sq / nn - alpha * sum * sum / (nn * nn);
  out.grad = Field(gt.height(), gt.width(), 0.0);
  for (int i = 0; i < gt.height(); ++i)
    for (int j = 0; j < gt.width(); ++j) {
      if (!gt.is_valid(i, j)) continue;
      const double e = std::log(pred(i, j)) - std::log(gt(i, j));
      out.grad(i, j) = (2.0 * e / nn - 2.0 * alpha * sum / (nn * nn)) / pred(i, j);
    }
  return out;
}

inline double depth_loss(const DepthMap& pred, const DepthMap& gt, double alpha = 0.85) {
  return depth_loss_with_grad(pred, gt, alpha).value;
}

struct VariationalLossValue {
  double value = 0.0;
  std::vector<Field> d_q_hat;  ///< per channel
  std::vector<double> d_fuse;  ///< S weights followed by the bias
  std::size_t positions = 0;   ///< N'
};

/// Fuse the S channels with 1x1 weights (S weights + bias), take forward
/// differences of the fused map on both axes and return the mean absolute
/// deviation from the ground-truth differences over positions whose two
/// endpoint cells are valid.
inline VariationalLossValue variational_loss_with_grad(const std::vector<Field>& q_hat, const DepthMap& q_gt,
                                                       const Mask& cell_valid, std::span<const double> fuse) {
  if (q_hat.empty()) throw InvalidArgument("variational loss: empty channel stack");
  if (fuse.size() != q_hat.size() + 1) throw InvalidArgument("variational loss: fuse needs S weights plus a bias");
  const int h = q_gt.height(), w = q_gt.width();
  if (cell_valid.rows() != h || cell_valid.cols() != w) throw InvalidArgument("variational loss: mask shape mismatch");
  for (const auto& q : q_hat)
    if (q.rows() != h || q.cols() != w) throw InvalidArgument("variational loss: channel shape mismatch");

  const std::size_t s = q_hat.size();
  Field fused(h, w, fuse[s]);
  for (std::size_t k = 0; k < s; ++k)
    for (std::size_t p = 0; p < fused.size(); ++p) fused.flat()[p] += fuse[k] * q_hat[k].flat()[p];

  auto ok = [&](int i, int j) { return cell_valid(i, j) != 0 && q_gt.is_valid(i, j); };
  // Sign of each deviation, accumulated onto the fused map.
  Field d_fused(h, w, 0.0);
  double total = 0.0;
  std::size_t count = 0;
  auto term = [&](int ia, int ja, int ib, int jb) {
    if (!ok(ia, ja) || !ok(ib, jb)) return;
    const double dev = (fused(ib, jb) - fused(ia, ja)) - (q_gt(ib, jb) - q_gt(ia, ja));
    total += std::abs(dev);
    ++count;
    const double sg = dev > 0.0 ? 1.0 : (dev < 0.0 ? -1.0 : 0.0);
    d_fused(ib, jb) += sg;
    d_fused(ia, ja) -= sg;
  };
  for (int i = 0; i < h; ++i)
    for (int j = 0; j + 1 < w; ++j) term(i, j, i, j + 1);
  for (int i = 0; i + 1 < h; ++i)
    for (int j = 0; j < w; ++j) term(i, j, i + 1, j);
  if (count == 0) throw InvalidArgument("variational loss: no valid neighbouring positions");

  VariationalLossValue out;
  out.positions = count;
  const double inv = 1.0 / static_cast<double>(count);
  out.value = total * inv;
  for (double& v : d_fused.flat()) v *= inv;
  out.d_q_hat.assign(s, Field(h, w, 0.0));
  out.d_fuse.assign(s + 1, 0.0);
  for (std::size_t k = 0; k < s; ++k)
    for (std::size_t p = 0; p < fused.size(); ++p) {
      out.d_q_hat[k].flat()[p] = fuse[k] * d_fused.flat()[p];
      out.d_fuse[k] += d_fused.flat()[p] * q_hat[k].flat()[p];
    }
  // Constant bias shifts both endpoints equally.
  out.d_fuse[s] = 0.0;
  return out;
}

inline double variational_loss(const std::vector<Field>& q_hat, const DepthMap& q_gt, const Mask& cell_valid,
                               std::span<const double> fuse) {
  return variational_loss_with_grad(q_hat, q_gt, cell_valid, fuse).value;
}

inline double total_loss(double depth, double variational, double lambda = 0.1) {
  return depth + lambda * variational;
}

struct MetricsReport {
  double silog = 0.0;
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rms = 0.0;
  double rms_log = 0.0;
  double d1 = 0.0, d2 = 0.0, d3 = 0.0;
  std::size_t n_valid = 0;
};

/// Standard monocular depth metrics over pixels valid in gt. SILog is reported
/// as 100 * sqrt of the scale-invariant log variance; RMS and RMS-log take the
/// square root of the mean.
inline MetricsReport evaluate(const DepthMap& pred, const DepthMap& gt) {
  check_same_grid(pred, gt);
  double se = 0.0, se2 = 0.0, abs_rel = 0.0, sq_rel = 0.0, sq = 0.0;
  std::size_t n = 0, c1 = 0, c2 = 0, c3 = 0;
  const double t1 = 1.25, t2 = 1.25 * 1.25, t3 = 1.25 * 1.25 * 1.25;
  for (int i = 0; i < gt.height(); ++i)
    for (int j = 0; j < gt.width(); ++j) {
      if (!gt.is_valid(i, j)) continue;
      const double p = pred(i, j), g = gt(i, j);
      if (!(p > 0.0)) throw NumericalError("evaluate: non-positive prediction at a valid pixel");
      if (!(g > 0.0)) throw InvalidArgument("evaluate: non-positive ground truth at a valid pixel");
      const double e = std::log(p) - std::log(g);
      const double d = p - g;
      se += e;
      se2 += e * e;
      abs_rel += std::abs(d) / g;
      sq_rel += d * d / g;
      sq += d * d;
      // max(p/g, g/p) < t  <=>  p < t*g and g < t*p, without rounding a quotient.
      c1 += p < t1 * g && g < t1 * p;
      c2 += p < t2 * g && g < t2 * p;
      c3 += p < t3 * g && g < t3 * p;
      ++n;
    }
  if (n == 0) throw InvalidArgument("evaluate: no valid pixels");
  const double nn = static_cast<double>(n);
  MetricsReport m;
  m.n_valid = n;
  m.silog = 100.0 * std::sqrt(std::max(0.0, se2 / nn - (se / nn) * (se / nn)));
  m.abs_rel = abs_rel / nn;
  m.sq_rel = sq_rel / nn;
  m.rms = std::sqrt(sq / nn);
  m.rms_log = std::sqrt(se2 / nn);
  m.d1 = static_cast<double>(c1) / nn;
  m.d2 = static_cast<double>(c2) / nn;
  m.d3 = static_cast<double>(c3) / nn;
  return m;
}

struct Alignment {
  double scale = 1.0;
  double shift = 0.0;
  DepthMap aligned;
};

/// Least-squares (s, t) minimising sum (s * pred + t - gt)^2 over valid pixels.
inline Alignment align_scale_shift(const DepthMap& pred, const DepthMap& gt) {
  check_same_grid(pred, gt);
  double sp = 0.0, sg = 0.0, spp = 0.0, spg = 0.0;
  std::size_t n = 0;
  for (int i = 0; i < gt.height(); ++i)
    for (int j = 0; j < gt.width(); ++j) {
      if (!gt.is_valid(i, j)) continue;
      const double p = pred(i, j), g = gt(i, j);
      sp += p;
      sg += g;
      spp += p * p;
      spg += p * g;
      ++n;
    }
  if (n < 2) throw NumericalError("alignment needs at least two valid pixels");
  const double nn = static_cast<double>(n);
  // Centred form of the 2x2 normal system.
  const double mp = sp / nn, mg = sg / nn;
  const double var = spp / nn - mp * mp;
  const double cov = spg / nn - mp * mg;
  if (!(var > 1e-14 * std::max(1.0, mp * mp)))
    throw NumericalError("alignment is rank deficient: prediction is constant over valid pixels");
  Alignment a;
  a.scale = cov / var;
  a.shift = mg - a.scale * mp;
  a.aligned = pred;
  for (double& v : a.aligned.values.flat()) v = a.scale * v + a.shift;
  return a;
}

/// Metric depth = scale * (z + shift).
inline DepthMap metric_layer_apply(const DepthMap& z, double scale, double shift) {
  DepthMap out = z;
  for (double& v : out.values.flat()) v = scale * (v + shift);
  return out;
}

struct MetricLayerGradients {
  Field d_z;
  double d_scale = 0.0;
  double d_shift = 0.0;
};

inline MetricLayerGradients metric_layer_backward(const DepthMap& z, double scale, double shift, const Field& d_out) {
  if (d_out.rows() != z.height() || d_out.cols() != z.width())
    throw InvalidArgument("metric layer backward: gradient shape mismatch");
  MetricLayerGradients g{Field(z.height(), z.width()), 0.0, 0.0};
  for (std::size_t p = 0; p < d_out.size(); ++p) {
    if (!z.valid.flat()[p]) continue;
    const double d = d_out.flat()[p];
    g.d_z.flat()[p] = scale * d;
    g.d_scale += d * (z.values.flat()[p] + shift);
    g.d_shift += scale * d;
  }
  return g;
}

}  // namespace vadepth
