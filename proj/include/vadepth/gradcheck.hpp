#pragma once

// Finite-difference verification of every hand-written gradient in the
// library. Each registered op builds a seeded random instance, evaluates a
// scalar objective and its analytic gradient, and compares against central
// differences.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "vadepth/diffgrad.hpp"
#include "vadepth/grid.hpp"
#include "vadepth/losses_metrics.hpp"
#include "vadepth/toypipe.hpp"
#include "vadepth/varlayer.hpp"

namespace vadepth {

struct GradcheckFailure {
  std::size_t index = 0;
  std::string name;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::string op;
  std::uint64_t seed = 0;
  double h = 1e-6;
  double tolerance = 1e-5;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::vector<GradcheckFailure> failing;
  bool passed() const { return failing.empty(); }
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps components that are zero
/// up to round-off from dominating the report.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// A differentiable instance: a point, an objective over it and the analytic
/// gradient at the point.
struct GradcheckProblem {
  std::vector<double> x;
  std::vector<std::string> names;  ///< optional per-coordinate labels
  std::function<double(const std::vector<double>&)> objective;
  std::vector<double> analytic;
};

inline GradcheckReport run_gradcheck(const std::string& op, const GradcheckProblem& prob, std::uint64_t seed,
                                     double h, double tolerance) {
  GradcheckReport rep;
  rep.op = op;
  rep.seed = seed;
  rep.h = h;
  rep.tolerance = tolerance;
  std::vector<double> x = prob.x;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double x0 = x[k];
    x[k] = x0 + h;
    const double fp = prob.objective(x);
    x[k] = x0 - h;
    const double fm = prob.objective(x);
    x[k] = x0;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = relative_error(prob.analytic[k], numeric);
    rep.max_rel_error = std::max(rep.max_rel_error, err);
    ++rep.checked;
    if (!(err <= tolerance))
      rep.failing.push_back({k, k < prob.names.size() ? prob.names[k] : std::to_string(k), prob.analytic[k], numeric, err});
  }
  return rep;
}

namespace gradcheck_ops {

inline std::vector<double> normal_vector(std::mt19937_64& rng, std::size_t n, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

inline std::vector<double> uniform_vector(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> ud(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = ud(rng);
  return v;
}

/// x = [gamma (M), sigma (M)], objective gbar^T z.
inline GradcheckProblem solve_problem(std::uint64_t seed, int height, int width, const SolveConfig& cfg) {
  std::mt19937_64 rng(seed);
  const GradientField shape(height, width);
  const std::size_t m = shape.constraint_count();
  const auto n = static_cast<std::size_t>(height * width);
  auto gamma = normal_vector(rng, m);
  auto sigma = uniform_vector(rng, m, 0.2, 1.0);
  auto gbar = normal_vector(rng, n);

  GradcheckProblem p;
  p.x = gamma;
  p.x.insert(p.x.end(), sigma.begin(), sigma.end());
  for (std::size_t r = 0; r < m; ++r) p.names.push_back("gamma[" + std::to_string(r) + "]");
  for (std::size_t r = 0; r < m; ++r) p.names.push_back("sigma[" + std::to_string(r) + "]");
  p.objective = [=](const std::vector<double>& x) {
    const auto g = unflatten_gradients(height, width, std::span<const double>(x).first(m));
    const auto c = unflatten_confidence(height, width, std::span<const double>(x).subspan(m, m));
    const auto z = solve(g, c, cfg).z;
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) acc += gbar[k] * z.values.flat()[k];
    return acc;
  };
  const auto taped = solve_with_tape(unflatten_gradients(height, width, gamma),
                                     unflatten_confidence(height, width, sigma), cfg);
  const auto grads = solve_backward(*taped.tape, gbar);
  p.analytic = flatten(grads.d_gamma);
  const auto ds = flatten(grads.d_sigma);
  p.analytic.insert(p.analytic.end(), ds.begin(), ds.end());
  return p;
}

inline GradcheckProblem depth_loss_problem(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int h = 4, w = 4;
  DepthMap gt(h, w);
  std::uniform_real_distribution<double> ud(1.0, 5.0);
  for (double& v : gt.values.flat()) v = ud(rng);
  gt.valid(1, 2) = 0;
  gt.valid(3, 0) = 0;
  auto pred0 = uniform_vector(rng, 16, 1.0, 5.0);
  GradcheckProblem p;
  p.x = pred0;
  auto make = [=](const std::vector<double>& x) {
    DepthMap pred(h, w);
    std::copy(x.begin(), x.end(), pred.values.flat().begin());
    return pred;
  };
  p.objective = [=](const std::vector<double>& x) { return depth_loss(make(x), gt, 0.85); };
  const auto g = depth_loss_with_grad(make(pred0), gt, 0.85).grad;
  p.analytic.assign(g.flat().begin(), g.flat().end());
  return p;
}

/// Pooling indices are fixed by the seed and the ground-truth validity, so
/// re-evaluating under perturbed predictions reuses the same draws.
/// x = [pred_stack (S*H'*W'), fuse (S+1)].
inline GradcheckProblem variational_loss_problem(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int factor = 2, lh = 4, lw = 4, s = 3;
  DepthMap gt(lh * factor, lw * factor);
  std::uniform_real_distribution<double> ud(1.0, 5.0);
  std::bernoulli_distribution hole(0.2);
  for (double& v : gt.values.flat()) v = ud(rng);
  for (auto& v : gt.valid.flat()) v = hole(rng) ? 0 : 1;
  const std::size_t cell = static_cast<std::size_t>(lh * lw);
  auto preds = normal_vector(rng, s * cell);
  auto fuse = normal_vector(rng, s + 1);
  const std::uint64_t pool_seed = seed ^ 0x9e3779b97f4a7c15ULL;

  auto split = [=](const std::vector<double>& x) {
    std::vector<Field> stack(s, Field(lh, lw));
    for (int k = 0; k < s; ++k)
      std::copy(x.begin() + k * static_cast<std::ptrdiff_t>(cell), x.begin() + (k + 1) * static_cast<std::ptrdiff_t>(cell),
                stack[static_cast<std::size_t>(k)].flat().begin());
    return stack;
  };
  GradcheckProblem p;
  p.x = preds;
  p.x.insert(p.x.end(), fuse.begin(), fuse.end());
  p.objective = [=](const std::vector<double>& x) {
    const auto pooled = random_pool_pair(gt, split(x), factor, pool_seed);
    return variational_loss(pooled.q_hat, pooled.q_gt, pooled.cell_valid,
                            std::span<const double>(x).subspan(s * cell));
  };
  const auto pooled = random_pool_pair(gt, split(p.x), factor, pool_seed);
  const auto vl = variational_loss_with_grad(pooled.q_hat, pooled.q_gt, pooled.cell_valid, fuse);
  const auto dstack = pool_backward(pooled, vl.d_q_hat);
  for (const auto& d : dstack) p.analytic.insert(p.analytic.end(), d.flat().begin(), d.flat().end());
  p.analytic.insert(p.analytic.end(), vl.d_fuse.begin(), vl.d_fuse.end());
  return p;
}

/// x = [input (2 x 5 x 5), weights (3 x 2 x 9), bias (3)], objective <r, conv(x)>.
inline GradcheckProblem conv_problem(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int h = 5, w = 5, cin = 2, cout = 3;
  const std::size_t ni = static_cast<std::size_t>(cin * h * w), nw = static_cast<std::size_t>(cout * cin * 9);
  auto x0 = normal_vector(rng, ni + nw + cout);
  auto r = normal_vector(rng, static_cast<std::size_t>(cout * h * w));
  auto unpack = [=](const std::vector<double>& x) {
    Channels in(cin, Field(h, w));
    for (int c = 0; c < cin; ++c)
      std::copy(x.begin() + c * h * w, x.begin() + (c + 1) * h * w, in[static_cast<std::size_t>(c)].flat().begin());
    return in;
  };
  GradcheckProblem p;
  p.x = x0;
  p.objective = [=](const std::vector<double>& x) {
    const auto out = conv3x3_forward(unpack(x), std::span<const double>(x).subspan(ni, nw),
                                     std::span<const double>(x).subspan(ni + nw, cout));
    double acc = 0.0;
    for (int o = 0; o < cout; ++o)
      for (int q = 0; q < h * w; ++q) acc += r[static_cast<std::size_t>(o * h * w + q)] * out[static_cast<std::size_t>(o)].flat()[static_cast<std::size_t>(q)];
    return acc;
  };
  Channels dout(cout, Field(h, w));
  for (int o = 0; o < cout; ++o)
    std::copy(r.begin() + o * h * w, r.begin() + (o + 1) * h * w, dout[static_cast<std::size_t>(o)].flat().begin());
  std::vector<double> dw(nw, 0.0), db(cout, 0.0);
  const auto din = conv3x3_backward(unpack(x0), std::span<const double>(x0).subspan(ni, nw), dout, dw, db);
  for (const auto& d : din) p.analytic.insert(p.analytic.end(), d.flat().begin(), d.flat().end());
  p.analytic.insert(p.analytic.end(), dw.begin(), dw.end());
  p.analytic.insert(p.analytic.end(), db.begin(), db.end());
  return p;
}

/// x = [z (4 x 4), scale, shift], objective <r, scale * (z + shift)>.
inline GradcheckProblem metric_layer_problem(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int h = 4, w = 4;
  auto x0 = normal_vector(rng, 18);
  auto r = normal_vector(rng, 16);
  auto unpack = [=](const std::vector<double>& x) {
    DepthMap z(h, w);
    std::copy(x.begin(), x.begin() + 16, z.values.flat().begin());
    return z;
  };
  GradcheckProblem p;
  p.x = x0;
  p.objective = [=](const std::vector<double>& x) {
    const auto out = metric_layer_apply(unpack(x), x[16], x[17]);
    double acc = 0.0;
    for (std::size_t k = 0; k < 16; ++k) acc += r[k] * out.values.flat()[k];
    return acc;
  };
  Field d(h, w);
  std::copy(r.begin(), r.end(), d.flat().begin());
  const auto g = metric_layer_backward(unpack(x0), x0[16], x0[17], d);
  p.analytic.assign(g.d_z.flat().begin(), g.d_z.flat().end());
  p.analytic.push_back(g.d_scale);
  p.analytic.push_back(g.d_shift);
  return p;
}

/// Every parameter of a freshly initialised toy model on a seeded 8x8 scene.
inline GradcheckProblem toy_model_problem(std::uint64_t seed, LayerMode mode, const ToyShape& base = {}) {
  ToyShape shape = base;
  shape.mode = mode;
  SceneSpec spec;
  spec.seed = seed;
  spec.height = spec.width = 8;
  spec.planes = 3;
  spec.depth_min = 2.0;
  spec.depth_max = 6.0;
  const Scene scene = synth_scene(spec);
  ToyModel model = init_model(shape, seed, 4.0);
  // Move away from the initial symmetric point so every path carries gradient.
  std::mt19937_64 rng(seed ^ 0x2545f4914f6cdd1dULL);
  std::normal_distribution<double> nd(0.0, 0.05);
  for (double& v : model.params) v += nd(rng);
  LossConfig cfg;
  const std::uint64_t pool_seed = seed + 17;

  GradcheckProblem p;
  p.x = model.params;
  for (const auto& b : model.blocks)
    for (std::size_t k = 0; k < b.size; ++k) p.names.push_back(b.name + "[" + std::to_string(k) + "]");
  p.objective = [=](const std::vector<double>& x) {
    ToyModel m = model;
    m.params = x;
    return loss_only(m, scene.image, scene.depth, cfg, pool_seed);
  };
  const auto fw = forward(model, scene.image);
  p.analytic = loss_and_gradient(model, fw, scene.depth, cfg, pool_seed).grad;
  return p;
}

}  // namespace gradcheck_ops

/// Default tolerance per op.
inline double default_tolerance(const std::string& op) {
  if (op == "depth_loss") return 1e-6;
  if (op == "toy_model" || op == "toy_model_conv") return 1e-4;
  return 1e-5;
}

inline const std::vector<std::string>& gradcheck_op_names() {
  static const std::vector<std::string> names{"solve",      "solve_mean",     "solve_tikhonov",
                                              "depth_loss", "variational_loss", "conv3x3",
                                              "metric_layer", "toy_model",     "toy_model_conv"};
  return names;
}

inline GradcheckProblem make_gradcheck_problem(const std::string& op, std::uint64_t seed) {
  using namespace gradcheck_ops;
  if (op == "solve") return solve_problem(seed, 3, 3, SolveConfig{});
  if (op == "solve_mean") return solve_problem(seed, 3, 4, SolveConfig{MeanGauge{0.5}});
  if (op == "solve_tikhonov") return solve_problem(seed, 4, 3, SolveConfig{TikhonovGauge{0.1}});
  if (op == "depth_loss") return depth_loss_problem(seed);
  if (op == "variational_loss") return variational_loss_problem(seed);
  if (op == "conv3x3") return conv_problem(seed);
  if (op == "metric_layer") return metric_layer_problem(seed);
  if (op == "toy_model") return toy_model_problem(seed, LayerMode::v_layer);
  if (op == "toy_model_conv") return toy_model_problem(seed, LayerMode::conv_replacement);
  throw InvalidArgument("unknown gradcheck op '" + op + "'");
}

/// tolerance <= 0 selects the op's default.
inline GradcheckReport gradcheck(const std::string& op, std::uint64_t seed, double h = 1e-6, double tolerance = 0.0) {
  if (!(h > 0.0)) throw InvalidArgument("finite-difference step must be > 0");
  const auto prob = make_gradcheck_problem(op, seed);
  return run_gradcheck(op, prob, seed, h, tolerance > 0.0 ? tolerance : default_tolerance(op));
}

}  // namespace vadepth
