#pragma once

// A small, hand-differentiated depth network built around the variational
// layer: conv features -> (gamma, sigma) heads -> per-channel solve -> 1x1
// fusion -> metric layer. A grouped 3x3 convolution can stand in for the solve
// to ablate it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vadepth/diffgrad.hpp"
#include "vadepth/error.hpp"
#include "vadepth/grid.hpp"
#include "vadepth/losses_metrics.hpp"
#include "vadepth/varlayer.hpp"

namespace vadepth {

// ---------------------------------------------------------------------------
// 3x3 'same' convolutions over channel stacks, zero padding.
// Weights are laid out [out][in][3][3].

using Channels = std::vector<Field>;

inline Channels conv3x3_forward(const Channels& in, std::span<const double> w, std::span<const double> b) {
  const std::size_t cin = in.size();
  const std::size_t cout = b.size();
  if (w.size() != cout * cin * 9) throw InvalidArgument("conv3x3: weight count mismatch");
  const int h = in.front().rows(), wd = in.front().cols();
  Channels out(cout, Field(h, wd));
  for (std::size_t o = 0; o < cout; ++o) {
    Field& dst = out[o];
    for (double& v : dst.flat()) v = b[o];
    for (std::size_t c = 0; c < cin; ++c) {
      const Field& src = in[c];
      const double* k = &w[(o * cin + c) * 9];
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const double kv = k[(di + 1) * 3 + (dj + 1)];
          const int i0 = std::max(0, -di), i1 = std::min(h, h - di);
          const int j0 = std::max(0, -dj), j1 = std::min(wd, wd - dj);
          for (int i = i0; i < i1; ++i)
            for (int j = j0; j < j1; ++j) dst(i, j) += kv * src(i + di, j + dj);
        }
    }
  }
  return out;
}

/// Accumulates dL/dw and dL/db; returns dL/dinput when `want_input` is set.
inline Channels conv3x3_backward(const Channels& in, std::span<const double> w, const Channels& dout,
                                 std::span<double> dw, std::span<double> db, bool want_input = true) {
  const std::size_t cin = in.size();
  const std::size_t cout = dout.size();
  const int h = in.front().rows(), wd = in.front().cols();
  Channels din;
  if (want_input) din.assign(cin, Field(h, wd, 0.0));
  for (std::size_t o = 0; o < cout; ++o) {
    const Field& g = dout[o];
    double bsum = 0.0;
    for (double v : g.flat()) bsum += v;
    db[o] += bsum;
    for (std::size_t c = 0; c < cin; ++c) {
      const Field& src = in[c];
      const std::size_t base = (o * cin + c) * 9;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const std::size_t kidx = base + static_cast<std::size_t>((di + 1) * 3 + (dj + 1));
          const double kv = w[kidx];
          const int i0 = std::max(0, -di), i1 = std::min(h, h - di);
          const int j0 = std::max(0, -dj), j1 = std::min(wd, wd - dj);
          double acc = 0.0;
          for (int i = i0; i < i1; ++i)
            for (int j = j0; j < j1; ++j) {
              acc += g(i, j) * src(i + di, j + dj);
              if (want_input) din[c](i + di, j + dj) += kv * g(i, j);
            }
          dw[kidx] += acc;
        }
    }
  }
  return din;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Model

enum class LayerMode { v_layer, conv_replacement };

inline const char* to_string(LayerMode m) { return m == LayerMode::v_layer ? "v-layer" : "conv-replacement"; }

inline LayerMode parse_layer_mode(const std::string& s) {
  if (s == "v-layer") return LayerMode::v_layer;
  if (s == "conv-replacement") return LayerMode::conv_replacement;
  throw InvalidArgument("unknown layer mode '" + s + "' (expected v-layer or conv-replacement)");
}

struct ToyShape {
  int features = 8;  ///< F
  int channels = 4;  ///< S
  LayerMode mode = LayerMode::v_layer;
};

struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

inline std::vector<ParamBlock> param_layout(const ToyShape& s) {
  if (s.features < 1 || s.channels < 1) throw InvalidArgument("toy model needs F >= 1 and S >= 1");
  const auto f = static_cast<std::size_t>(s.features);
  const auto c = static_cast<std::size_t>(s.channels);
  std::vector<ParamBlock> blocks;
  std::size_t off = 0;
  auto add = [&](const char* name, std::size_t n) {
    blocks.push_back({name, off, n});
    off += n;
  };
  add("conv1.w", f * 9);
  add("conv1.b", f);
  add("gamma.w", 2 * c * f * 9);
  add("gamma.b", 2 * c);
  add("sigma.w", 2 * c * f * 9);
  add("sigma.b", 2 * c);
  add("fuse.w", c);
  add("fuse.b", 1);
  add("metric.w", 2 * f);
  add("metric.b", 2);
  if (s.mode == LayerMode::conv_replacement) {
    add("replace.w", c * 2 * 9);
    add("replace.b", c);
  }
  return blocks;
}

struct ToyModel {
  ToyShape shape;
  SolveConfig solve_cfg{MeanGauge{0.0}};
  std::vector<ParamBlock> blocks;
  std::vector<double> params;

  ToyModel() = default;
  explicit ToyModel(ToyShape s) : shape(s), blocks(param_layout(s)) {
    params.assign(blocks.back().offset + blocks.back().size, 0.0);
  }

  const ParamBlock& block(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return b;
    throw InvalidArgument("unknown parameter block " + name);
  }
  std::span<double> view(const std::string& name) {
    const auto& b = block(name);
    return std::span<double>(params).subspan(b.offset, b.size);
  }
  std::span<const double> view(const std::string& name) const {
    const auto& b = block(name);
    return std::span<const double>(params).subspan(b.offset, b.size);
  }
};

/// Seeded initialisation. The metric head starts at scale 1 and shift
/// `initial_shift` so that early predictions are positive.
inline ToyModel init_model(const ToyShape& shape, std::uint64_t seed, double initial_shift = 3.0) {
  ToyModel m(shape);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const double f = shape.features;
  for (double& v : m.view("conv1.w")) v = nd(rng) * std::sqrt(2.0 / 9.0);
  for (double& v : m.view("conv1.b")) v = 0.1 * nd(rng);
  for (double& v : m.view("gamma.w")) v = nd(rng) * 0.1 / std::sqrt(9.0 * f);
  for (double& v : m.view("sigma.w")) v = nd(rng) * 0.1 / std::sqrt(9.0 * f);
  for (double& v : m.view("sigma.b")) v = 2.0;
  for (double& v : m.view("fuse.w")) v = 1.0 / shape.channels;
  for (double& v : m.view("metric.w")) v = 0.01 * nd(rng);
  auto mb = m.view("metric.b");
  mb[0] = 1.0;
  mb[1] = initial_shift;
  if (shape.mode == LayerMode::conv_replacement)
    for (double& v : m.view("replace.w")) v = nd(rng) * std::sqrt(1.0 / 18.0);
  return m;
}

/// Forward intermediates retained for the backward pass.
struct ToyForward {
  Field image;
  Channels feat_pre, feat;
  Channels gamma, sigma;  ///< 2S head outputs; sigma after the sigmoid
  Channels replace_in;    ///< conv-replacement input (sigma * gamma, compact support)
  std::vector<std::shared_ptr<const SolveTape>> tapes;
  Channels z;  ///< S unscaled channels
  Field fused;
  std::vector<double> pooled;
  std::vector<std::pair<int, int>> argmax;
  double scale = 1.0, shift = 0.0;
  DepthMap pred;
};

inline std::span<const double> group_slice(std::span<const double> w, std::size_t group, std::size_t per) {
  return w.subspan(group * per, per);
}

inline ToyForward forward(const ToyModel& model, const Field& image) {
  const int h = image.rows(), w = image.cols();
  if (h < 1 || w < 1 || h * w < 2) throw InvalidArgument("toy forward needs an image of at least 2 pixels");
  const auto s = static_cast<std::size_t>(model.shape.channels);
  const auto f = static_cast<std::size_t>(model.shape.features);
  ToyForward fw;
  fw.image = image;
  fw.feat_pre = conv3x3_forward({image}, model.view("conv1.w"), model.view("conv1.b"));
  fw.feat = fw.feat_pre;
  for (auto& c : fw.feat)
    for (double& v : c.flat()) v = std::max(v, 0.0);
  fw.gamma = conv3x3_forward(fw.feat, model.view("gamma.w"), model.view("gamma.b"));
  fw.sigma = conv3x3_forward(fw.feat, model.view("sigma.w"), model.view("sigma.b"));
  for (auto& c : fw.sigma)
    for (double& v : c.flat()) v = sigmoid(v);

  fw.z.resize(s);
  if (model.shape.mode == LayerMode::v_layer) {
    fw.tapes.resize(s);
    for (std::size_t k = 0; k < s; ++k) {
      GradientField g(h, w);
      ConfidenceField c(h, w);
      for (int i = 0; i < h; ++i)
        for (int j = 0; j + 1 < w; ++j) {
          g.gx(i, j) = fw.gamma[2 * k](i, j);
          c.wx(i, j) = fw.sigma[2 * k](i, j);
        }
      for (int i = 0; i + 1 < h; ++i)
        for (int j = 0; j < w; ++j) {
          g.gy(i, j) = fw.gamma[2 * k + 1](i, j);
          c.wy(i, j) = fw.sigma[2 * k + 1](i, j);
        }
      auto solved = solve_with_tape(g, c, model.solve_cfg);
      fw.z[k] = std::move(solved.z.values);
      fw.tapes[k] = std::move(solved.tape);
    }
  } else {
    fw.replace_in.assign(2 * s, Field(h, w, 0.0));
    for (std::size_t k = 0; k < s; ++k) {
      for (int i = 0; i < h; ++i)
        for (int j = 0; j + 1 < w; ++j) fw.replace_in[2 * k](i, j) = fw.gamma[2 * k](i, j) * fw.sigma[2 * k](i, j);
      for (int i = 0; i + 1 < h; ++i)
        for (int j = 0; j < w; ++j)
          fw.replace_in[2 * k + 1](i, j) = fw.gamma[2 * k + 1](i, j) * fw.sigma[2 * k + 1](i, j);
      const auto wk = group_slice(model.view("replace.w"), k, 18);
      const auto bk = group_slice(model.view("replace.b"), k, 1);
      fw.z[k] = conv3x3_forward({fw.replace_in[2 * k], fw.replace_in[2 * k + 1]}, wk, bk).front();
    }
  }

  const auto fuse_w = model.view("fuse.w");
  fw.fused = Field(h, w, model.view("fuse.b")[0]);
  for (std::size_t k = 0; k < s; ++k)
    for (std::size_t p = 0; p < fw.fused.size(); ++p) fw.fused.flat()[p] += fuse_w[k] * fw.z[k].flat()[p];

  fw.pooled.assign(f, 0.0);
  fw.argmax.assign(f, {0, 0});
  for (std::size_t c = 0; c < f; ++c) {
    const auto& fc = fw.feat[c];
    double best = fc(0, 0);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        if (fc(i, j) > best) {
          best = fc(i, j);
          fw.argmax[c] = {i, j};
        }
    fw.pooled[c] = best;
  }
  const auto mw = model.view("metric.w");
  const auto mb = model.view("metric.b");
  fw.scale = mb[0];
  fw.shift = mb[1];
  for (std::size_t c = 0; c < f; ++c) {
    fw.scale += mw[c] * fw.pooled[c];
    fw.shift += mw[f + c] * fw.pooled[c];
  }
  fw.pred = metric_layer_apply(DepthMap::all_valid(fw.fused), fw.scale, fw.shift);
  return fw;
}

struct ToyLoss {
  double total = 0.0;
  double depth = 0.0;
  double variational = 0.0;
  std::vector<double> grad;  ///< dL/dparams in the model's flat layout
};

/// Total loss and its exact gradient for one (image, gt) pair. `pool_seed`
/// fixes the random-pooling draw for this step.
inline ToyLoss loss_and_gradient(const ToyModel& model, const ToyForward& fw, const DepthMap& gt,
                                 const LossConfig& cfg, std::uint64_t pool_seed) {
  validate(cfg);
  const int h = fw.image.rows(), w = fw.image.cols();
  if (gt.height() != h || gt.width() != w) throw InvalidArgument("ground truth must match the image resolution");
  const auto s = static_cast<std::size_t>(model.shape.channels);
  const auto f = static_cast<std::size_t>(model.shape.features);

  ToyLoss out;
  out.grad.assign(model.params.size(), 0.0);
  auto gview = [&](const std::string& name) {
    const auto& b = model.block(name);
    return std::span<double>(out.grad).subspan(b.offset, b.size);
  };

  auto dl = depth_loss_with_grad(fw.pred, gt, cfg.alpha);
  out.depth = dl.value;

  // Variational term on the unscaled channels.
  Channels dz(s, Field(h, w, 0.0));
  std::vector<double> dfuse(s + 1, 0.0);
  if (cfg.lambda > 0.0) {
    if (cfg.pooling_factor != 1)
      throw InvalidArgument("toy pipeline runs the solve at image resolution; pooling factor must be 1");
    const PoolResult pooled = random_pool_pair(gt, fw.z, cfg.pooling_factor, pool_seed);
    std::vector<double> fuse(model.view("fuse.w").begin(), model.view("fuse.w").end());
    fuse.push_back(model.view("fuse.b")[0]);
    auto vl = variational_loss_with_grad(pooled.q_hat, pooled.q_gt, pooled.cell_valid, fuse);
    out.variational = vl.value;
    for (auto& d : vl.d_q_hat)
      for (double& v : d.flat()) v *= cfg.lambda;
    dz = pool_backward(pooled, vl.d_q_hat);
    for (std::size_t k = 0; k <= s; ++k) dfuse[k] = cfg.lambda * vl.d_fuse[k];
  }
  out.total = total_loss(out.depth, out.variational, cfg.lambda);

  // Metric layer: pred = scale * (fused + shift).
  Field dfused(h, w);
  double dscale = 0.0, dshift = 0.0;
  for (std::size_t p = 0; p < dfused.size(); ++p) {
    const double g = dl.grad.flat()[p];
    dscale += g * (fw.fused.flat()[p] + fw.shift);
    dshift += g * fw.scale;
    dfused.flat()[p] = g * fw.scale;
  }

  // Fusion.
  const auto fuse_w = model.view("fuse.w");
  auto g_fuse_w = gview("fuse.w");
  for (std::size_t k = 0; k < s; ++k) {
    double acc = dfuse[k];
    for (std::size_t p = 0; p < dfused.size(); ++p) {
      acc += dfused.flat()[p] * fw.z[k].flat()[p];
      dz[k].flat()[p] += fuse_w[k] * dfused.flat()[p];
    }
    g_fuse_w[k] = acc;
  }
  {
    double acc = dfuse[s];
    for (double v : dfused.flat()) acc += v;
    gview("fuse.b")[0] = acc;
  }

  // Metric head.
  Channels dfeat(f, Field(h, w, 0.0));
  const auto mw = model.view("metric.w");
  auto g_mw = gview("metric.w");
  auto g_mb = gview("metric.b");
  g_mb[0] = dscale;
  g_mb[1] = dshift;
  for (std::size_t c = 0; c < f; ++c) {
    g_mw[c] = dscale * fw.pooled[c];
    g_mw[f + c] = dshift * fw.pooled[c];
    const auto [i, j] = fw.argmax[c];
    dfeat[c](i, j) += mw[c] * dscale + mw[f + c] * dshift;
  }

  // Variational layer or its convolutional stand-in.
  Channels dgamma(2 * s, Field(h, w, 0.0));
  Channels dsigma(2 * s, Field(h, w, 0.0));
  if (model.shape.mode == LayerMode::v_layer) {
    for (std::size_t k = 0; k < s; ++k) {
      const auto g = solve_backward(*fw.tapes[k], dz[k]);
      for (int i = 0; i < h; ++i)
        for (int j = 0; j + 1 < w; ++j) {
          dgamma[2 * k](i, j) = g.d_gamma.gx(i, j);
          dsigma[2 * k](i, j) = g.d_sigma.wx(i, j);
        }
      for (int i = 0; i + 1 < h; ++i)
        for (int j = 0; j < w; ++j) {
          dgamma[2 * k + 1](i, j) = g.d_gamma.gy(i, j);
          dsigma[2 * k + 1](i, j) = g.d_sigma.wy(i, j);
        }
    }
  } else {
    auto g_rw = gview("replace.w");
    auto g_rb = gview("replace.b");
    for (std::size_t k = 0; k < s; ++k) {
      const Channels in{fw.replace_in[2 * k], fw.replace_in[2 * k + 1]};
      const auto din = conv3x3_backward(in, group_slice(model.view("replace.w"), k, 18), {dz[k]},
                                        g_rw.subspan(k * 18, 18), g_rb.subspan(k, 1));
      for (int i = 0; i < h; ++i)
        for (int j = 0; j + 1 < w; ++j) {
          dgamma[2 * k](i, j) = din[0](i, j) * fw.sigma[2 * k](i, j);
          dsigma[2 * k](i, j) = din[0](i, j) * fw.gamma[2 * k](i, j);
        }
      for (int i = 0; i + 1 < h; ++i)
        for (int j = 0; j < w; ++j) {
          dgamma[2 * k + 1](i, j) = din[1](i, j) * fw.sigma[2 * k + 1](i, j);
          dsigma[2 * k + 1](i, j) = din[1](i, j) * fw.gamma[2 * k + 1](i, j);
        }
    }
  }
  // Sigmoid.
  for (std::size_t c = 0; c < 2 * s; ++c)
    for (std::size_t p = 0; p < dsigma[c].size(); ++p) {
      const double sv = fw.sigma[c].flat()[p];
      dsigma[c].flat()[p] *= sv * (1.0 - sv);
    }

  // Heads.
  const auto dfeat_g = conv3x3_backward(fw.feat, model.view("gamma.w"), dgamma, gview("gamma.w"), gview("gamma.b"));
  const auto dfeat_s = conv3x3_backward(fw.feat, model.view("sigma.w"), dsigma, gview("sigma.w"), gview("sigma.b"));
  for (std::size_t c = 0; c < f; ++c)
    for (std::size_t p = 0; p < dfeat[c].size(); ++p) {
      const double g = dfeat[c].flat()[p] + dfeat_g[c].flat()[p] + dfeat_s[c].flat()[p];
      dfeat[c].flat()[p] = fw.feat_pre[c].flat()[p] > 0.0 ? g : 0.0;
    }
  conv3x3_backward({fw.image}, model.view("conv1.w"), dfeat, gview("conv1.w"), gview("conv1.b"), false);
  return out;
}

inline double loss_only(const ToyModel& model, const Field& image, const DepthMap& gt, const LossConfig& cfg,
                        std::uint64_t pool_seed) {
  const auto fw = forward(model, image);
  const double depth = depth_loss(fw.pred, gt, cfg.alpha);
  double var = 0.0;
  if (cfg.lambda > 0.0) {
    const PoolResult pooled = random_pool_pair(gt, fw.z, cfg.pooling_factor, pool_seed);
    std::vector<double> fuse(model.view("fuse.w").begin(), model.view("fuse.w").end());
    fuse.push_back(model.view("fuse.b")[0]);
    var = variational_loss(pooled.q_hat, pooled.q_gt, pooled.cell_valid, fuse);
  }
  return total_loss(depth, var, cfg.lambda);
}

// ---------------------------------------------------------------------------
// Training

/// Scenes sit in [2, 6] rather than the generator's [1, 5] default so an early
/// negative shift cannot push predictions through zero during training.
struct DatasetSpec {
  SceneSpec scene{.depth_min = 2.0, .depth_max = 6.0};  ///< seed ignored; per-scene seeds derive from the run seed
  int train_scenes = 64;
  int heldout_scenes = 32;
};

struct TrainConfig {
  ToyShape shape;
  LossConfig loss;
  DatasetSpec data;
  int epochs = 100;
  int batch_size = 4;
  double lr_max = 3e-3;
  double lr_min = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool hflip = false;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& cfg) {
  validate(cfg.loss);
  validate(cfg.data.scene);
  if (cfg.epochs < 0) throw InvalidArgument("epochs must be >= 0");
  if (cfg.batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  if (!(cfg.lr_max >= cfg.lr_min && cfg.lr_min >= 0.0)) throw InvalidArgument("need lr_max >= lr_min >= 0");
  if (cfg.data.train_scenes < 32 || cfg.data.heldout_scenes < 8)
    throw InvalidArgument("dataset needs at least 32 training and 8 held-out scenes");
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Dataset {
  std::vector<Scene> train;
  std::vector<Scene> heldout;
};

inline Dataset make_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  Dataset d;
  SceneSpec s = spec.scene;
  for (int i = 0; i < spec.train_scenes; ++i) {
    s.seed = splitmix64(seed * 2 + 0) ^ splitmix64(static_cast<std::uint64_t>(i));
    d.train.push_back(synth_scene(s));
  }
  for (int i = 0; i < spec.heldout_scenes; ++i) {
    s.seed = splitmix64(seed * 2 + 1) ^ splitmix64(static_cast<std::uint64_t>(i) + 0x5bd1e995ULL);
    d.heldout.push_back(synth_scene(s));
  }
  return d;
}

/// Cosine annealing from lr_max at step 0 to lr_min at the last step.
inline double cosine_lr(double lr_max, double lr_min, std::size_t step, std::size_t total_steps) {
  if (total_steps <= 1) return lr_max;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

/// Mean of per-scene metrics; n_valid is the total pixel count.
inline MetricsReport evaluate_model(const ToyModel& model, const std::vector<Scene>& scenes) {
  MetricsReport acc;
  for (const auto& sc : scenes) {
    const auto fw = forward(model, sc.image);
    const auto m = evaluate(fw.pred, sc.depth);
    acc.silog += m.silog;
    acc.abs_rel += m.abs_rel;
    acc.sq_rel += m.sq_rel;
    acc.rms += m.rms;
    acc.rms_log += m.rms_log;
    acc.d1 += m.d1;
    acc.d2 += m.d2;
    acc.d3 += m.d3;
    acc.n_valid += m.n_valid;
  }
  const double n = static_cast<double>(scenes.size());
  acc.silog /= n;
  acc.abs_rel /= n;
  acc.sq_rel /= n;
  acc.rms /= n;
  acc.rms_log /= n;
  acc.d1 /= n;
  acc.d2 /= n;
  acc.d3 /= n;
  return acc;
}

struct TrainResult {
  ToyModel model;
  std::vector<double> loss_curve;  ///< mean training loss per epoch
  MetricsReport heldout;
  double seconds = 0.0;
};

inline Field flip_horizontal(const Field& f) {
  Field out(f.rows(), f.cols());
  for (int i = 0; i < f.rows(); ++i)
    for (int j = 0; j < f.cols(); ++j) out(i, j) = f(i, f.cols() - 1 - j);
  return out;
}

/// Adam without weight decay, cosine-annealed learning rate, fixed sample
/// order per seed. Aborts on a non-finite loss.
inline TrainResult train(const TrainConfig& cfg) {
  validate(cfg);
  const auto start = std::chrono::steady_clock::now();
  const Dataset data = make_dataset(cfg.data, cfg.seed);
  const double mid = 0.5 * (cfg.data.scene.depth_min + cfg.data.scene.depth_max);
  TrainResult res;
  res.model = init_model(cfg.shape, splitmix64(cfg.seed ^ 0xa0761d6478bd642fULL), mid);
  ToyModel& model = res.model;

  const std::size_t n = data.train.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(cfg.epochs);
  std::vector<double> m(model.params.size(), 0.0), v(model.params.size(), 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0xe7037ed1a0b428dbULL));
  std::bernoulli_distribution coin(0.5);
  std::size_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < n; b0 += batch) {
      const std::size_t b1 = std::min(n, b0 + batch);
      std::vector<double> grad(model.params.size(), 0.0);
      for (std::size_t k = b0; k < b1; ++k) {
        const Scene& sc = data.train[order[k]];
        const bool flip = cfg.hflip && coin(rng);
        Field image = flip ? flip_horizontal(sc.image) : sc.image;
        DepthMap gt = sc.depth;
        if (flip) gt.values = flip_horizontal(gt.values);
        const auto fw = forward(model, image);
        const auto l = loss_and_gradient(model, fw, gt, cfg.loss, splitmix64(cfg.loss.seed + step * 131 + k));
        if (!std::isfinite(l.total))
          throw NumericalError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
        epoch_loss += l.total;
        for (std::size_t p = 0; p < grad.size(); ++p) grad[p] += l.grad[p];
      }
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      const double lr = cosine_lr(cfg.lr_max, cfg.lr_min, step, total_steps);
      ++step;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (std::size_t p = 0; p < grad.size(); ++p) {
        const double g = grad[p] * inv;
        m[p] = cfg.beta1 * m[p] + (1.0 - cfg.beta1) * g;
        v[p] = cfg.beta2 * v[p] + (1.0 - cfg.beta2) * g * g;
        model.params[p] -= lr * (m[p] / c1) / (std::sqrt(v[p] / c2) + cfg.adam_eps);
      }
    }
    res.loss_curve.push_back(epoch_loss / static_cast<double>(n));
  }
  res.heldout = evaluate_model(model, data.heldout);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace vadepth
