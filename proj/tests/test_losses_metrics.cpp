#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "vadepth/grid.hpp"
#include "vadepth/losses_metrics.hpp"

using namespace vadepth;

namespace {

DepthMap random_depth(std::uint64_t seed, int h, int w, double lo = 0.5, double hi = 8.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ud(lo, hi);
  DepthMap d(h, w);
  for (double& v : d.values.flat()) v = ud(rng);
  return d;
}

DepthMap scaled(const DepthMap& d, double c) {
  DepthMap out = d;
  for (double& v : out.values.flat()) v *= c;
  return out;
}

DepthMap from_rows(const std::vector<std::vector<double>>& rows) {
  DepthMap d(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
  for (int i = 0; i < d.height(); ++i)
    for (int j = 0; j < d.width(); ++j) d(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return d;
}

double rms(const DepthMap& pred, const DepthMap& gt) { return evaluate(pred, gt).rms; }

}  // namespace

TEST(DepthLoss, ZeroAtGroundTruth) {
  const auto gt = random_depth(1, 6, 6);
  EXPECT_EQ(depth_loss(gt, gt, 0.85), 0.0);
}

TEST(DepthLoss, ScaleInvariantAtAlphaOne) {
  const auto gt = random_depth(2, 5, 7);
  for (double c : {0.5, 2.0, std::numbers::e, 13.0}) EXPECT_NEAR(depth_loss(scaled(gt, c), gt, 1.0), 0.0, 1e-14);
}

TEST(DepthLoss, EulerScaleAtDefaultAlpha) {
  const auto gt = random_depth(3, 4, 4);
  EXPECT_NEAR(depth_loss(scaled(gt, std::numbers::e), gt, 0.85), 0.15, 1e-12);
}

TEST(DepthLoss, MinimisedAtMeanLogRatio) {
  const auto gt = random_depth(4, 6, 5);
  const auto pred = random_depth(5, 6, 5);
  double mean_e = 0.0;
  for (std::size_t k = 0; k < gt.values.size(); ++k)
    mean_e += std::log(pred.values.flat()[k]) - std::log(gt.values.flat()[k]);
  mean_e /= static_cast<double>(gt.values.size());
  const double c_star = std::exp(-mean_e);
  const double best = depth_loss(scaled(pred, c_star), gt, 0.85);
  for (int k = -50; k <= 50; ++k) {
    if (k == 0) continue;
    const double c = c_star * std::exp(0.01 * k);
    EXPECT_GT(depth_loss(scaled(pred, c), gt, 0.85), best);
  }
}

TEST(DepthLoss, IgnoresInvalidPixelsAndRejectsBadInput) {
  auto gt = random_depth(6, 3, 3);
  auto pred = gt;
  pred(1, 1) = -4.0;
  gt.valid(1, 1) = 0;
  EXPECT_EQ(depth_loss(pred, gt), 0.0);
  gt.valid(1, 1) = 1;
  EXPECT_THROW(depth_loss(pred, gt), NumericalError);
  DepthMap none = gt;
  for (auto& v : none.valid.flat()) v = 0;
  EXPECT_THROW(depth_loss(gt, none), InvalidArgument);
  EXPECT_THROW(depth_loss(DepthMap(2, 3, 1.0), DepthMap(3, 2, 1.0)), InvalidArgument);
}

TEST(DepthLoss, AgreesWithSilog) {
  const auto gt = random_depth(7, 8, 8);
  const auto pred = random_depth(8, 8, 8);
  const double s = evaluate(pred, gt).silog / 100.0;
  EXPECT_NEAR(s * s, depth_loss(pred, gt, 1.0), 1e-12);
}

TEST(VariationalLoss, IdentityFuseOnGroundTruthIsZero) {
  const auto q = random_depth(9, 5, 5);
  const std::vector<double> fuse{1.0, 0.0};
  EXPECT_EQ(variational_loss({q.values}, q, Mask(5, 5, 1), fuse), 0.0);
}

TEST(VariationalLoss, ConstantMapsAreZero) {
  const DepthMap q(4, 6, 3.0);
  const std::vector<Field> stack{Field(4, 6, 1.5), Field(4, 6, -2.0)};
  const std::vector<double> fuse{0.3, 0.8, 5.0};
  EXPECT_EQ(variational_loss(stack, q, Mask(4, 6, 1), fuse), 0.0);
}

TEST(VariationalLoss, HandInstance) {
  // Fused map [[0,1,3],[1,1,1],[2,0,4]] against a flat ground truth:
  // |x-differences| sum to 9, |y-differences| to 8, over 12 positions.
  const auto fused = from_rows({{0, 1, 3}, {1, 1, 1}, {2, 0, 4}});
  const DepthMap gt(3, 3, 2.0);
  const std::vector<double> identity{1.0, 0.0};
  EXPECT_NEAR(variational_loss({fused.values}, gt, Mask(3, 3, 1), identity), 17.0 / 12.0, 1e-12);

  // Same fused map built from two channels and a bias.
  Field a(3, 3), b(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      a(i, j) = 0.5 * fused(i, j) + j;
      b(i, j) = (fused(i, j) - 2.0 * a(i, j) - 0.75) / -1.0;
    }
  // 2a - b + 0.75 = fused
  const std::vector<double> fuse{2.0, -1.0, 0.75};
  EXPECT_NEAR(variational_loss({a, b}, gt, Mask(3, 3, 1), fuse), 17.0 / 12.0, 1e-12);
}

// Brute force over all ordered cell pairs that are right or down neighbours.
TEST(VariationalLoss, MatchesBruteForceWithMasks) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> nd;
  std::bernoulli_distribution hole(0.25);
  const int h = 5, w = 6;
  std::vector<Field> stack(3, Field(h, w));
  for (auto& f : stack)
    for (double& v : f.flat()) v = nd(rng);
  const std::vector<double> fuse{0.4, -1.2, 0.9, 0.1};
  auto gt = random_depth(11, h, w);
  Mask cells(h, w, 1);
  for (auto& v : gt.valid.flat()) v = hole(rng) ? 0 : 1;
  for (auto& v : cells.flat()) v = hole(rng) ? 0 : 1;

  double total = 0.0;
  int count = 0;
  for (int a = 0; a < h * w; ++a)
    for (int b = 0; b < h * w; ++b) {
      const int ia = a / w, ja = a % w, ib = b / w, jb = b % w;
      const bool right = ib == ia && jb == ja + 1;
      const bool down = jb == ja && ib == ia + 1;
      if (!right && !down) continue;
      if (!gt.valid(ia, ja) || !gt.valid(ib, jb) || !cells(ia, ja) || !cells(ib, jb)) continue;
      double fa = fuse[3], fb = fuse[3];
      for (int k = 0; k < 3; ++k) {
        fa += fuse[static_cast<std::size_t>(k)] * stack[static_cast<std::size_t>(k)](ia, ja);
        fb += fuse[static_cast<std::size_t>(k)] * stack[static_cast<std::size_t>(k)](ib, jb);
      }
      total += std::abs((fb - fa) - (gt(ib, jb) - gt(ia, ja)));
      ++count;
    }
  const auto v = variational_loss_with_grad(stack, gt, cells, fuse);
  EXPECT_EQ(v.positions, static_cast<std::size_t>(count));
  EXPECT_NEAR(v.value, total / count, 1e-12);
}

TEST(VariationalLoss, NoPositionsIsAnError) {
  DepthMap gt(3, 3, 1.0);
  Mask cells(3, 3, 0);
  cells(1, 1) = 1;
  EXPECT_THROW(variational_loss({Field(3, 3)}, gt, cells, std::vector<double>{1.0, 0.0}), InvalidArgument);
  EXPECT_THROW(variational_loss({Field(3, 3)}, gt, Mask(3, 3, 1), std::vector<double>{1.0}), InvalidArgument);
}

TEST(TotalLoss, Combination) {
  EXPECT_EQ(total_loss(0.2, 0.5, 0.0), 0.2);
  EXPECT_DOUBLE_EQ(total_loss(0.2, 0.5, 0.1), 0.25);
  EXPECT_DOUBLE_EQ(total_loss(0.2, 0.5), 0.25);
  EXPECT_EQ(LossConfig{}.lambda, 0.1);
  EXPECT_EQ(LossConfig{}.alpha, 0.85);
}

TEST(Evaluate, PerfectPrediction) {
  const auto gt = random_depth(12, 7, 7);
  const auto m = evaluate(gt, gt);
  EXPECT_EQ(m.silog, 0.0);
  EXPECT_EQ(m.abs_rel, 0.0);
  EXPECT_EQ(m.sq_rel, 0.0);
  EXPECT_EQ(m.rms, 0.0);
  EXPECT_EQ(m.rms_log, 0.0);
  EXPECT_EQ(m.d1, 1.0);
  EXPECT_EQ(m.d2, 1.0);
  EXPECT_EQ(m.d3, 1.0);
  EXPECT_EQ(m.n_valid, 49u);
}

TEST(Evaluate, EulerScale) {
  const auto gt = random_depth(13, 6, 6);
  const auto m = evaluate(scaled(gt, std::numbers::e), gt);
  EXPECT_LE(m.silog, 1e-9);
  EXPECT_NEAR(m.rms_log, 1.0, 1e-12);
  EXPECT_NEAR(m.abs_rel, std::numbers::e - 1.0, 1e-12);
}

TEST(Evaluate, StrictThresholdAtOnePointTwoFive) {
  const auto gt = random_depth(14, 9, 9);
  const auto m = evaluate(scaled(gt, 1.25), gt);
  EXPECT_EQ(m.d1, 0.0);
  EXPECT_EQ(m.d2, 1.0);
  EXPECT_EQ(m.d3, 1.0);
}

TEST(Evaluate, HandValues) {
  const auto gt = from_rows({{1.0, 2.0}, {4.0, 8.0}});
  const auto pred = from_rows({{2.0, 2.0}, {3.0, 8.0}});
  const auto m = evaluate(pred, gt);
  EXPECT_NEAR(m.abs_rel, (1.0 + 0.0 + 0.25 + 0.0) / 4, 1e-15);
  EXPECT_NEAR(m.sq_rel, (1.0 + 0.0 + 0.25 + 0.0) / 4, 1e-15);
  EXPECT_NEAR(m.rms, std::sqrt(2.0 / 4), 1e-15);
  const double e0 = std::log(2.0), e2 = std::log(0.75);
  EXPECT_NEAR(m.rms_log, std::sqrt((e0 * e0 + e2 * e2) / 4), 1e-15);
  const double mean = (e0 + e2) / 4;
  EXPECT_NEAR(m.silog, 100 * std::sqrt((e0 * e0 + e2 * e2) / 4 - mean * mean), 1e-12);
  EXPECT_EQ(m.d1, 0.5);
  EXPECT_EQ(m.d2, 0.75);
  EXPECT_EQ(m.d3, 0.75);
}

TEST(Evaluate, SilogIsScaleInvariant) {
  const auto gt = random_depth(15, 8, 8);
  const auto pred = random_depth(16, 8, 8);
  const double base = evaluate(pred, gt).silog;
  for (double c : {0.5, 2.0, 10.0}) EXPECT_NEAR(evaluate(scaled(pred, c), gt).silog, base, 1e-9);
}

TEST(Evaluate, DeltasAreMonotone) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto m = evaluate(random_depth(seed, 6, 6), random_depth(seed + 100, 6, 6));
    EXPECT_LE(m.d1, m.d2);
    EXPECT_LE(m.d2, m.d3);
  }
}

TEST(Evaluate, OnlyValidPixelsCount) {
  auto gt = random_depth(17, 4, 4);
  auto pred = gt;
  pred(0, 0) = 100.0;
  gt.valid(0, 0) = 0;
  const auto m = evaluate(pred, gt);
  EXPECT_EQ(m.n_valid, 15u);
  EXPECT_EQ(m.rms, 0.0);
  DepthMap none = gt;
  for (auto& v : none.valid.flat()) v = 0;
  EXPECT_THROW(evaluate(gt, none), InvalidArgument);
}

TEST(Align, ExactAffine) {
  const auto gt = random_depth(18, 5, 5);
  DepthMap pred = gt;
  for (double& v : pred.values.flat()) v = 2.0 * v + 3.0;
  const auto a = align_scale_shift(pred, gt);
  EXPECT_NEAR(a.scale, 0.5, 1e-12);
  EXPECT_NEAR(a.shift, -1.5, 1e-12);
  for (std::size_t k = 0; k < gt.values.size(); ++k) EXPECT_NEAR(a.aligned.values.flat()[k], gt.values.flat()[k], 1e-12);
}

TEST(Align, IdentityOnGroundTruth) {
  const auto gt = random_depth(19, 5, 5);
  const auto a = align_scale_shift(gt, gt);
  EXPECT_NEAR(a.scale, 1.0, 1e-12);
  EXPECT_NEAR(a.shift, 0.0, 1e-12);
}

// Coarse-to-fine grid search over (s, t) for the least-squares minimiser.
TEST(Align, MatchesGridSearch) {
  const auto gt = random_depth(20, 5, 5);
  auto pred = random_depth(21, 5, 5);
  for (std::size_t k = 0; k < pred.values.size(); ++k) pred.values.flat()[k] = 0.7 * gt.values.flat()[k] + pred.values.flat()[k] * 0.3;
  auto sse = [&](double s, double t) {
    double acc = 0.0;
    for (std::size_t k = 0; k < gt.values.size(); ++k) {
      const double r = s * pred.values.flat()[k] + t - gt.values.flat()[k];
      acc += r * r;
    }
    return acc;
  };
  double cs = 0.0, ct = 0.0, span = 10.0;
  for (int level = 0; level < 40; ++level) {
    double bs = cs, bt = ct, best = sse(cs, ct);
    for (int a = -10; a <= 10; ++a)
      for (int b = -10; b <= 10; ++b) {
        const double s = cs + span * a / 10.0, t = ct + span * b / 10.0;
        const double v = sse(s, t);
        if (v < best) {
          best = v;
          bs = s;
          bt = t;
        }
      }
    cs = bs;
    ct = bt;
    span *= 0.5;
  }
  const auto a = align_scale_shift(pred, gt);
  EXPECT_NEAR(a.scale, cs, 1e-6);
  EXPECT_NEAR(a.shift, ct, 1e-6);
}

TEST(Align, NeverIncreasesRms) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto gt = random_depth(seed, 6, 6);
    const auto pred = random_depth(seed + 50, 6, 6);
    EXPECT_LE(rms(align_scale_shift(pred, gt).aligned, gt), rms(pred, gt) + 1e-12);
  }
}

TEST(Align, ConstantPredictionIsRankDeficient) {
  const auto gt = random_depth(22, 4, 4);
  EXPECT_THROW(align_scale_shift(DepthMap(4, 4, 2.0), gt), NumericalError);
  DepthMap one(1, 1, 2.0);
  EXPECT_THROW(align_scale_shift(one, one), NumericalError);
}

TEST(MetricLayer, IdentityAndConstant) {
  const auto z = random_depth(23, 3, 4, -2.0, 2.0);
  EXPECT_EQ(metric_layer_apply(z, 1.0, 0.0).values, z.values);
  const auto c = metric_layer_apply(DepthMap(3, 3, 0.0), 2.0, 1.5);
  for (double v : c.values.flat()) EXPECT_EQ(v, 3.0);
}

TEST(MetricLayer, PreservesValidity) {
  auto z = random_depth(24, 3, 3);
  z.valid(2, 1) = 0;
  EXPECT_EQ(metric_layer_apply(z, 3.0, -1.0).valid, z.valid);
}

TEST(MetricLayer, InvertsKnownAffine) {
  const auto gt = random_depth(25, 5, 5);
  const double s0 = 1.7, t0 = 0.4;
  DepthMap z = gt;
  for (double& v : z.values.flat()) v = v / s0 - t0;
  const auto out = metric_layer_apply(z, s0, t0);
  for (std::size_t k = 0; k < gt.values.size(); ++k) EXPECT_NEAR(out.values.flat()[k], gt.values.flat()[k], 1e-12);
  const auto a = align_scale_shift(z, gt);
  EXPECT_NEAR(a.scale, s0, 1e-10);
  const auto back = metric_layer_apply(z, a.scale, a.shift / a.scale);
  for (std::size_t k = 0; k < gt.values.size(); ++k) EXPECT_NEAR(back.values.flat()[k], gt.values.flat()[k], 1e-10);
}

TEST(MetricLayer, BackwardShape) {
  const auto z = random_depth(26, 2, 2);
  EXPECT_THROW(metric_layer_backward(z, 1.0, 0.0, Field(3, 2)), InvalidArgument);
  const auto g = metric_layer_backward(z, 2.0, 0.5, Field(2, 2, 1.0));
  EXPECT_DOUBLE_EQ(g.d_shift, 8.0);
  double sum = 0.0;
  for (double v : z.values.flat()) sum += v + 0.5;
  EXPECT_NEAR(g.d_scale, sum, 1e-12);
}
