#pragma once

// Dense fields on an H x W pixel grid, synthetic piecewise-planar scenes and
// the random-pooling downsampler used by the variational loss.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vadepth/error.hpp"

namespace vadepth {

/// Row-major H x W array. Either extent may be zero (e.g. the y-gradients of a
/// single-row grid).
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int rows, int cols, T fill = T{}) : rows_(rows), cols_(cols) {
    if (rows < 0 || cols < 0) throw InvalidArgument("grid extents must be non-negative");
    data_.assign(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), fill);
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(int i, int j) { return data_[index(i, j)]; }
  const T& operator()(int i, int j) const { return data_[index(i, j)]; }

  std::size_t index(int i, int j) const noexcept {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(cols_) + static_cast<std::size_t>(j);
  }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  bool same_shape(const Grid& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Grid& a, const Grid& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

using Field = Grid<double>;
using Mask = Grid<std::uint8_t>;

/// Depth values plus a validity mask. Metric maps must be positive where valid.
struct DepthMap {
  Field values;
  Mask valid;

  DepthMap() = default;
  DepthMap(int height, int width, double fill = 0.0)
      : values(height, width, fill), valid(height, width, 1) {}

  static DepthMap all_valid(Field values) {
    DepthMap d;
    d.valid = Mask(values.rows(), values.cols(), 1);
    d.values = std::move(values);
    return d;
  }

  int height() const noexcept { return values.rows(); }
  int width() const noexcept { return values.cols(); }
  double& operator()(int i, int j) { return values(i, j); }
  double operator()(int i, int j) const { return values(i, j); }
  bool is_valid(int i, int j) const { return valid(i, j) != 0; }

  std::size_t n_valid() const {
    return static_cast<std::size_t>(std::count_if(valid.storage().begin(), valid.storage().end(),
                                                  [](std::uint8_t v) { return v != 0; }));
  }
  bool fully_valid() const { return n_valid() == valid.size(); }
};

/// Forward differences in compact form: gx is H x (W-1), gy is (H-1) x W.
struct GradientField {
  int height = 0;
  int width = 0;
  Field gx;
  Field gy;

  GradientField() = default;
  GradientField(int h, int w, double fill = 0.0)
      : height(h), width(w), gx(h, std::max(w - 1, 0), fill), gy(std::max(h - 1, 0), w, fill) {
    if (h < 1 || w < 1) throw InvalidArgument("gradient field needs a grid of at least 1x1");
  }

  /// Number of difference constraints, H(W-1) + (H-1)W.
  std::size_t constraint_count() const noexcept { return gx.size() + gy.size(); }
};

/// Confidence weights in [0, 1], shaped like GradientField.
struct ConfidenceField {
  int height = 0;
  int width = 0;
  Field wx;
  Field wy;

  ConfidenceField() = default;
  ConfidenceField(int h, int w, double fill = 1.0)
      : height(h), width(w), wx(h, std::max(w - 1, 0), fill), wy(std::max(h - 1, 0), w, fill) {
    if (h < 1 || w < 1) throw InvalidArgument("confidence field needs a grid of at least 1x1");
  }
};

struct ChannelInput {
  GradientField grad;
  ConfidenceField conf;
};

/// S (gradient, confidence) channel pairs on one grid.
using ChannelStack = std::vector<ChannelInput>;

inline void check_pair(const GradientField& g, const ConfidenceField& c) {
  if (g.height != c.height || g.width != c.width || !g.gx.same_shape(c.wx) || !g.gy.same_shape(c.wy))
    throw InvalidArgument("gradient and confidence fields have different shapes");
  if (g.gx.rows() != g.height || g.gx.cols() != std::max(g.width - 1, 0) ||
      g.gy.rows() != std::max(g.height - 1, 0) || g.gy.cols() != g.width)
    throw InvalidArgument("gradient field does not have compact H x (W-1), (H-1) x W shapes");
  for (double v : g.gx.flat())
    if (!std::isfinite(v)) throw InvalidArgument("gradient field contains non-finite values");
  for (double v : g.gy.flat())
    if (!std::isfinite(v)) throw InvalidArgument("gradient field contains non-finite values");
  for (double v : c.wx.flat())
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("confidence outside [0, 1]");
  for (double v : c.wy.flat())
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("confidence outside [0, 1]");
}

inline void check_stack(const ChannelStack& stack) {
  if (stack.empty()) throw InvalidArgument("channel stack is empty");
  const int h = stack.front().grad.height;
  const int w = stack.front().grad.width;
  for (const auto& ch : stack) {
    check_pair(ch.grad, ch.conf);
    if (ch.grad.height != h || ch.grad.width != w)
      throw InvalidArgument("channel stack mixes grid sizes");
  }
}

/// gx[i,j] = z[i,j+1] - z[i,j]; gy[i,j] = z[i+1,j] - z[i,j].
inline GradientField exact_gradients(const DepthMap& depth) {
  if (!depth.fully_valid()) throw InvalidArgument("exact_gradients requires a fully valid depth map");
  const int h = depth.height();
  const int w = depth.width();
  GradientField g(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j + 1 < w; ++j) g.gx(i, j) = depth(i, j + 1) - depth(i, j);
  for (int i = 0; i + 1 < h; ++i)
    for (int j = 0; j < w; ++j) g.gy(i, j) = depth(i + 1, j) - depth(i, j);
  return g;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SceneSpec {
  std::uint64_t seed = 0;
  int height = 16;
  int width = 16;
  int planes = 3;
  double depth_min = 1.0;
  double depth_max = 5.0;
  double noise = 0.0;             ///< std-dev of additive gradient noise
  double outlier_fraction = 0.0;  ///< share of gradient entries replaced by outliers
  double outlier_magnitude = 100.0;
  double image_noise = 0.01;
  double slope_gain = 4.0;  ///< depth-per-pixel to surface-slope factor for shading
};

/// One planar region: an axis-aligned rectangle with z = offset + ax*(j - cx) + ay*(i - cy).
struct PlaneRegion {
  int top = 0, left = 0, rows = 0, cols = 0;
  double offset = 0.0, ax = 0.0, ay = 0.0, cx = 0.0, cy = 0.0;

  double eval(int i, int j) const { return offset + ax * (j - cx) + ay * (i - cy); }
};

struct Scene {
  Field image;
  DepthMap depth;
  Grid<int> labels;  ///< region index per pixel
  std::vector<PlaneRegion> regions;
};

inline void validate(const SceneSpec& spec) {
  if (spec.height < 1 || spec.width < 1) throw InvalidArgument("scene dimensions must be positive");
  if (!(spec.depth_min > 0.0)) throw InvalidArgument("scene min depth must be > 0");
  if (!(spec.depth_max >= spec.depth_min)) throw InvalidArgument("scene depth range is inverted");
  if (spec.planes < 1) throw InvalidArgument("plane count must be >= 1");
  if (!(spec.outlier_fraction >= 0.0 && spec.outlier_fraction < 1.0))
    throw InvalidArgument("outlier fraction must lie in [0, 1)");
  if (!(spec.noise >= 0.0) || !(spec.image_noise >= 0.0)) throw InvalidArgument("noise must be >= 0");
}

/// Lambertian shading of the analytic plane slope under a fixed oblique light.
inline double shade_slope(double gx, double gy, double gain) {
  const double nx = -gain * gx, ny = -gain * gy, nz = 1.0;
  const double inv = 1.0 / std::sqrt(nx * nx + ny * ny + nz * nz);
  const double lx = 0.45, ly = 0.3, lz = 0.84;  // roughly unit length
  const double lambert = std::max(0.0, (nx * lx + ny * ly + nz * lz) * inv);
  return 0.1 + 0.85 * lambert;
}

/// Splits `planes` into a (row bands) x (column bands) grid with rows <= cols.
inline std::pair<int, int> fold_grid(int planes) {
  int r = 1;
  for (int d = 1; d * d <= planes; ++d)
    if (planes % d == 0) r = d;
  return {r, planes / r};
}

/// Continuous piecewise-planar depth: a base plane bent along full-length fold
/// lines, giving a grid of `planes` rectangular regions with distinct slopes.
/// The image is a shading of the local slope plus seeded noise. Identical specs
/// give bit-identical scenes.
inline Scene synth_scene(const SceneSpec& spec) {
  validate(spec);
  const auto [bands_y, bands_x] = fold_grid(spec.planes);
  if (bands_y > spec.height || bands_x > spec.width)
    throw InvalidArgument("grid too small for the requested number of planes");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Fold positions: distinct cut columns/rows, sorted.
  auto cuts = [&](int bands, int extent) {
    std::vector<int> all(static_cast<std::size_t>(extent - 1));
    std::iota(all.begin(), all.end(), 1);
    std::shuffle(all.begin(), all.end(), rng);
    std::vector<int> c(all.begin(), all.begin() + (bands - 1));
    std::sort(c.begin(), c.end());
    c.insert(c.begin(), 0);
    c.push_back(extent);
    return c;
  };
  const std::vector<int> col_cuts = cuts(bands_x, spec.width);
  const std::vector<int> row_cuts = cuts(bands_y, spec.height);

  // Slopes per band in depth units per pixel before fitting to the range;
  // every fold changes the slope by at least half the base scale.
  const double span = spec.depth_max - spec.depth_min;
  const double base = span / std::max(spec.height, spec.width);
  // An axis without folds stays level.
  auto band_slopes = [&](int bands) {
    std::vector<double> s(static_cast<std::size_t>(bands));
    s[0] = bands > 1 ? (2.0 * unit(rng) - 1.0) * base : 0.0;
    for (std::size_t k = 1; k < s.size(); ++k) {
      const double mag = base * (0.5 + 1.5 * unit(rng));
      s[k] = s[k - 1] + (unit(rng) < 0.5 ? -mag : mag);
    }
    return s;
  };
  const std::vector<double> sx = band_slopes(bands_x);
  const std::vector<double> sy = band_slopes(bands_y);

  // Profile along each axis: continuous, piecewise linear between fold lines
  // (fold lines sit half a pixel before the cut index).
  auto profile = [](const std::vector<int>& c, const std::vector<double>& slope, int extent) {
    std::vector<double> p(static_cast<std::size_t>(extent));
    std::vector<double> at_cut(slope.size(), 0.0);  // profile value at the start line of band k
    for (std::size_t k = 1; k < slope.size(); ++k) {
      const double from = k == 1 ? 0.0 : c[k - 1] - 0.5;
      at_cut[k] = at_cut[k - 1] + slope[k - 1] * ((c[k] - 0.5) - from);
    }
    for (std::size_t k = 0; k < slope.size(); ++k) {
      const double origin = k == 0 ? 0.0 : c[k] - 0.5;
      for (int t = c[k]; t < c[k + 1]; ++t) p[static_cast<std::size_t>(t)] = at_cut[k] + slope[k] * (t - origin);
    }
    return p;
  };
  const std::vector<double> px = profile(col_cuts, sx, spec.width);
  const std::vector<double> py = profile(row_cuts, sy, spec.height);

  // Fit into the depth range: shrink about the centre when needed, then place
  // the centre uniformly where the surface fits.
  double lo_raw = 1e300, hi_raw = -1e300;
  for (double a : py)
    for (double b : px) {
      lo_raw = std::min(lo_raw, a + b);
      hi_raw = std::max(hi_raw, a + b);
    }
  const double extent = hi_raw - lo_raw;
  const double shrink = extent > span ? (extent > 0.0 ? span / extent : 0.0) : 1.0;
  const double fitted = extent * shrink;
  const double start = spec.depth_min + 0.5 * (span - fitted);

  Scene scene;
  scene.depth = DepthMap(spec.height, spec.width);
  scene.labels = Grid<int>(spec.height, spec.width, 0);
  scene.image = Field(spec.height, spec.width);
  for (int by = 0; by < bands_y; ++by)
    for (int bx = 0; bx < bands_x; ++bx) {
      PlaneRegion r;
      r.top = row_cuts[static_cast<std::size_t>(by)];
      r.rows = row_cuts[static_cast<std::size_t>(by) + 1] - r.top;
      r.left = col_cuts[static_cast<std::size_t>(bx)];
      r.cols = col_cuts[static_cast<std::size_t>(bx) + 1] - r.left;
      r.cy = r.top;
      r.cx = r.left;
      r.ax = sx[static_cast<std::size_t>(bx)] * shrink;
      r.ay = sy[static_cast<std::size_t>(by)] * shrink;
      r.offset = start + (px[static_cast<std::size_t>(r.left)] + py[static_cast<std::size_t>(r.top)] - lo_raw) * shrink;
      const int label = static_cast<int>(scene.regions.size());
      for (int i = r.top; i < r.top + r.rows; ++i)
        for (int j = r.left; j < r.left + r.cols; ++j) {
          scene.depth(i, j) = std::clamp(r.eval(i, j), spec.depth_min, spec.depth_max);
          scene.labels(i, j) = label;
        }
      scene.regions.push_back(r);
    }
  std::normal_distribution<double> pixel_noise(0.0, 1.0);
  for (int i = 0; i < spec.height; ++i)
    for (int j = 0; j < spec.width; ++j) {
      const auto& r = scene.regions[static_cast<std::size_t>(scene.labels(i, j))];
      const double n = spec.image_noise > 0.0 ? spec.image_noise * pixel_noise(rng) : 0.0;
      scene.image(i, j) = std::clamp(shade_slope(r.ax, r.ay, spec.slope_gain) + n, 0.0, 1.0);
    }
  return scene;
}

/// Gradient observations of a depth map: exact differences plus Gaussian noise
/// of the SceneSpec noise std-dev, then a `outlier_fraction` share of entries shifted by
/// +/- outlier_magnitude. `outliers` flags corrupted entries.
struct ObservedGradients {
  GradientField grad;
  Mask outliers_x;
  Mask outliers_y;
};

inline ObservedGradients observe_gradients(const DepthMap& depth, const SceneSpec& spec,
                                           std::uint64_t seed) {
  validate(spec);
  ObservedGradients obs{exact_gradients(depth), {}, {}};
  obs.outliers_x = Mask(obs.grad.gx.rows(), obs.grad.gx.cols(), 0);
  obs.outliers_y = Mask(obs.grad.gy.rows(), obs.grad.gy.cols(), 0);
  std::mt19937_64 rng(seed);
  if (spec.noise > 0.0) {
    std::normal_distribution<double> nd(0.0, spec.noise);
    for (double& v : obs.grad.gx.flat()) v += nd(rng);
    for (double& v : obs.grad.gy.flat()) v += nd(rng);
  }
  const std::size_t nx = obs.grad.gx.size();
  const std::size_t m = obs.grad.constraint_count();
  const auto count = static_cast<std::size_t>(std::llround(spec.outlier_fraction * static_cast<double>(m)));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::bernoulli_distribution sign(0.5);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t r = order[k];
    const double delta = sign(rng) ? spec.outlier_magnitude : -spec.outlier_magnitude;
    if (r < nx) {
      obs.grad.gx.flat()[r] += delta;
      obs.outliers_x.flat()[r] = 1;
    } else {
      obs.grad.gy.flat()[r - nx] += delta;
      obs.outliers_y.flat()[r - nx] = 1;
    }
  }
  return obs;
}

// ---------------------------------------------------------------------------
// Random pooling

/// Where one pooled cell drew its ground-truth sample, and the bilinear stencil
/// of that location in the low-resolution frame.
struct PoolSample {
  int src_row = -1, src_col = -1;  ///< chosen pixel in the full-resolution map
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  double w00 = 0.0, w01 = 0.0, w10 = 0.0, w11 = 0.0;

  double sample(const Field& f) const {
    return w00 * f(r0, c0) + w01 * f(r0, c1) + w10 * f(r1, c0) + w11 * f(r1, c1);
  }
};

struct PoolResult {
  DepthMap q_gt;             ///< H' x W', invalid where the block had no valid pixel
  std::vector<Field> q_hat;  ///< S maps, H' x W'
  Mask cell_valid;
  Grid<PoolSample> samples;  ///< frozen indices for differentiation
};

/// Bilinear stencil at full-resolution pixel (y, x) mapped into a grid
/// `factor` times coarser; pixel centres sit at integer coordinates.
inline PoolSample bilinear_stencil(int y, int x, int factor, int low_h, int low_w) {
  PoolSample s;
  s.src_row = y;
  s.src_col = x;
  const double u = std::clamp((y + 0.5) / factor - 0.5, 0.0, static_cast<double>(low_h - 1));
  const double v = std::clamp((x + 0.5) / factor - 0.5, 0.0, static_cast<double>(low_w - 1));
  s.r0 = static_cast<int>(std::floor(u));
  s.c0 = static_cast<int>(std::floor(v));
  s.r1 = std::min(s.r0 + 1, low_h - 1);
  s.c1 = std::min(s.c0 + 1, low_w - 1);
  const double fu = u - s.r0, fv = v - s.c0;
  s.w00 = (1.0 - fu) * (1.0 - fv);
  s.w01 = (1.0 - fu) * fv;
  s.w10 = fu * (1.0 - fv);
  s.w11 = fu * fv;
  return s;
}

/// Pick one valid ground-truth pixel uniformly per factor x factor block and
/// pair it with a bilinear sample of every prediction channel.
inline PoolResult random_pool_pair(const DepthMap& gt, const std::vector<Field>& pred_stack, int factor,
                                   std::uint64_t seed) {
  if (factor < 1) throw InvalidArgument("pooling factor must be >= 1");
  if (pred_stack.empty()) throw InvalidArgument("prediction stack is empty");
  const int low_h = pred_stack.front().rows();
  const int low_w = pred_stack.front().cols();
  for (const auto& p : pred_stack)
    if (p.rows() != low_h || p.cols() != low_w) throw InvalidArgument("prediction channels differ in shape");
  if (low_h < 1 || low_w < 1 || gt.height() != factor * low_h || gt.width() != factor * low_w)
    throw InvalidArgument("ground truth resolution must equal factor x prediction resolution");

  PoolResult out;
  out.q_gt = DepthMap(low_h, low_w);
  out.cell_valid = Mask(low_h, low_w, 0);
  out.q_hat.assign(pred_stack.size(), Field(low_h, low_w));
  out.samples = Grid<PoolSample>(low_h, low_w);

  std::mt19937_64 rng(seed);
  std::vector<std::pair<int, int>> candidates;
  candidates.reserve(static_cast<std::size_t>(factor) * factor);
  for (int r = 0; r < low_h; ++r)
    for (int c = 0; c < low_w; ++c) {
      candidates.clear();
      for (int y = r * factor; y < (r + 1) * factor; ++y)
        for (int x = c * factor; x < (c + 1) * factor; ++x)
          if (gt.is_valid(y, x)) candidates.emplace_back(y, x);
      if (candidates.empty()) {
        out.q_gt.valid(r, c) = 0;
        continue;
      }
      std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
      const auto [y, x] = candidates[pick(rng)];
      const PoolSample s = bilinear_stencil(y, x, factor, low_h, low_w);
      out.samples(r, c) = s;
      out.cell_valid(r, c) = 1;
      out.q_gt(r, c) = gt(y, x);
      for (std::size_t k = 0; k < pred_stack.size(); ++k) out.q_hat[k](r, c) = s.sample(pred_stack[k]);
    }
  return out;
}

/// Route dL/dQ_hat back onto the low-resolution prediction channels through
/// the frozen bilinear stencils.
inline std::vector<Field> pool_backward(const PoolResult& pooled, const std::vector<Field>& dq_hat) {
  std::vector<Field> grads;
  for (const auto& d : dq_hat) {
    Field g(d.rows(), d.cols(), 0.0);
    for (int r = 0; r < d.rows(); ++r)
      for (int c = 0; c < d.cols(); ++c) {
        if (!pooled.cell_valid(r, c)) continue;
        const auto& s = pooled.samples(r, c);
        const double v = d(r, c);
        g(s.r0, s.c0) += s.w00 * v;
        g(s.r0, s.c1) += s.w01 * v;
        g(s.r1, s.c0) += s.w10 * v;
        g(s.r1, s.c1) += s.w11 * v;
      }
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace vadepth
