#pragma once

// Variational layer: the first-order difference operator, assembly of the
// confidence-weighted normal equations and their solution with explicit gauge
// handling.

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "vadepth/error.hpp"
#include "vadepth/grid.hpp"

namespace vadepth {

using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

enum class Axis : std::uint8_t { x, y };

/// One difference row: (Pz)_r = z[pixel_b] - z[pixel_a].
struct DifferenceRow {
  int pixel_a = 0;
  int pixel_b = 0;
  Axis axis = Axis::x;
};

/// Sparse P for an H x W grid. x-rows come first in row-major order, then y-rows.
struct DifferenceOperator {
  int height = 0;
  int width = 0;
  std::vector<DifferenceRow> rows;

  int pixels() const noexcept { return height * width; }
  std::size_t constraints() const noexcept { return rows.size(); }

  SparseMatrix to_sparse() const {
    std::vector<Eigen::Triplet<double>> t;
    t.reserve(2 * rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      t.emplace_back(static_cast<int>(r), rows[r].pixel_a, -1.0);
      t.emplace_back(static_cast<int>(r), rows[r].pixel_b, 1.0);
    }
    SparseMatrix p(static_cast<Eigen::Index>(rows.size()), pixels());
    p.setFromTriplets(t.begin(), t.end());
    return p;
  }
};

inline DifferenceOperator build_operator(int height, int width) {
  if (height < 1 || width < 1) throw InvalidArgument("operator grid must be at least 1x1");
  if (height * width < 2) throw InvalidArgument("a 1x1 grid has no difference constraints");
  DifferenceOperator op{height, width, {}};
  op.rows.reserve(static_cast<std::size_t>(height) * (width - 1) + static_cast<std::size_t>(height - 1) * width);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j + 1 < width; ++j) op.rows.push_back({i * width + j, i * width + j + 1, Axis::x});
  for (int i = 0; i + 1 < height; ++i)
    for (int j = 0; j < width; ++j) op.rows.push_back({i * width + j, (i + 1) * width + j, Axis::y});
  return op;
}

inline std::vector<double> apply_operator(const DifferenceOperator& op, std::span<const double> z) {
  if (z.size() != static_cast<std::size_t>(op.pixels()))
    throw InvalidArgument("apply_operator: input length does not match H*W");
  std::vector<double> out(op.rows.size());
  for (std::size_t r = 0; r < op.rows.size(); ++r)
    out[r] = z[static_cast<std::size_t>(op.rows[r].pixel_b)] - z[static_cast<std::size_t>(op.rows[r].pixel_a)];
  return out;
}

inline std::vector<double> apply_operator_transpose(const DifferenceOperator& op, std::span<const double> r) {
  if (r.size() != op.rows.size()) throw InvalidArgument("apply_operator_transpose: input length does not match M");
  std::vector<double> out(static_cast<std::size_t>(op.pixels()), 0.0);
  for (std::size_t k = 0; k < op.rows.size(); ++k) {
    out[static_cast<std::size_t>(op.rows[k].pixel_a)] -= r[k];
    out[static_cast<std::size_t>(op.rows[k].pixel_b)] += r[k];
  }
  return out;
}

/// Stacks gx (row-major) then gy (row-major), the operator's row order.
inline std::vector<double> flatten(const GradientField& g) {
  std::vector<double> v(g.gx.storage());
  v.insert(v.end(), g.gy.storage().begin(), g.gy.storage().end());
  return v;
}

inline std::vector<double> flatten(const ConfidenceField& c) {
  std::vector<double> v(c.wx.storage());
  v.insert(v.end(), c.wy.storage().begin(), c.wy.storage().end());
  return v;
}

inline GradientField unflatten_gradients(int height, int width, std::span<const double> v) {
  GradientField g(height, width);
  if (v.size() != g.constraint_count()) throw InvalidArgument("flat gradient length does not match grid");
  std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(g.gx.size()), g.gx.flat().begin());
  std::copy(v.begin() + static_cast<std::ptrdiff_t>(g.gx.size()), v.end(), g.gy.flat().begin());
  return g;
}

inline ConfidenceField unflatten_confidence(int height, int width, std::span<const double> v) {
  ConfidenceField c(height, width, 0.0);
  if (v.size() != c.wx.size() + c.wy.size()) throw InvalidArgument("flat confidence length does not match grid");
  std::copy(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(c.wx.size()), c.wx.flat().begin());
  std::copy(v.begin() + static_cast<std::ptrdiff_t>(c.wx.size()), v.end(), c.wy.flat().begin());
  return c;
}

// ---------------------------------------------------------------------------
// Gauge and solver configuration

/// Pins z[row, col] to `value` through an extra row of weight `weight`.
struct AnchorGauge {
  int row = 0;
  int col = 0;
  double value = 0.0;
  double weight = 1.0;
};

/// Solution shifted so that mean(z) == value.
struct MeanGauge {
  double value = 0.0;
};

/// Adds mu * I to the normal matrix.
struct TikhonovGauge {
  double mu = 1e-6;
};

using GaugeMode = std::variant<AnchorGauge, MeanGauge, TikhonovGauge>;

enum class Backend { direct, iterative };

struct SolveConfig {
  GaugeMode gauge = AnchorGauge{};
  Backend backend = Backend::direct;
  double cg_tolerance = 1e-10;
  int cg_max_iters = 0;  ///< 0 selects 10 * H * W
  double weight_floor = 1e-8;
};

inline void validate(const SolveConfig& cfg) {
  if (!(cfg.cg_tolerance > 0.0)) throw InvalidArgument("cg tolerance must be > 0");
  if (cfg.cg_max_iters < 0) throw InvalidArgument("cg max iterations must be >= 0");
  if (!(cfg.weight_floor >= 0.0 && cfg.weight_floor < 1.0)) throw InvalidArgument("weight floor must lie in [0, 1)");
  if (const auto* a = std::get_if<AnchorGauge>(&cfg.gauge); a && !(a->weight > 0.0))
    throw InvalidArgument("anchor weight must be > 0");
  if (const auto* t = std::get_if<TikhonovGauge>(&cfg.gauge); t && !(t->mu > 0.0))
    throw InvalidArgument("tikhonov mu must be > 0");
}

struct SolveDiagnostics {
  int iterations = 0;
  double final_residual = 0.0;  ///< ||A z - b|| / ||b|| of the normal system
  bool factorization_reused = false;
};

/// Applied per-row weights max(conf, floor)^2 and whether the floor was active.
struct AppliedWeights {
  std::vector<double> weight;
  std::vector<std::uint8_t> floored;
};

inline AppliedWeights applied_weights(std::span<const double> conf, double floor) {
  AppliedWeights w;
  w.weight.resize(conf.size());
  w.floored.resize(conf.size());
  for (std::size_t r = 0; r < conf.size(); ++r) {
    const bool active = !(conf[r] > floor);
    const double s = active ? floor : conf[r];
    w.weight[r] = s * s;
    w.floored[r] = active ? 1 : 0;
  }
  return w;
}

namespace detail {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int a) {
    while (parent[static_cast<std::size_t>(a)] != a) {
      parent[static_cast<std::size_t>(a)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
      a = parent[static_cast<std::size_t>(a)];
    }
    return a;
  }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    parent[static_cast<std::size_t>(b)] = a;
    return true;
  }
};

/// Number of connected components of the pixel graph over rows with w > 0.
inline int components(const DifferenceOperator& op, std::span<const double> w) {
  UnionFind uf(op.pixels());
  int count = op.pixels();
  for (std::size_t r = 0; r < op.rows.size(); ++r)
    if (w[r] > 0.0 && uf.unite(op.rows[r].pixel_a, op.rows[r].pixel_b)) --count;
  return count;
}

}  // namespace detail

/// Normal system A z = b with A = P^T W P + gauge terms, b = P^T W gamma + gauge terms.
struct NormalSystem {
  SparseMatrix a;
  Vector b;
};

inline NormalSystem assemble(const DifferenceOperator& op, std::span<const double> gamma, std::span<const double> w,
                             const GaugeMode& gauge) {
  const int n = op.pixels();
  std::vector<Eigen::Triplet<double>> t;
  t.reserve(4 * op.rows.size() + static_cast<std::size_t>(n));
  Vector b = Vector::Zero(n);
  for (std::size_t r = 0; r < op.rows.size(); ++r) {
    const int pa = op.rows[r].pixel_a, pb = op.rows[r].pixel_b;
    t.emplace_back(pa, pa, w[r]);
    t.emplace_back(pb, pb, w[r]);
    t.emplace_back(pa, pb, -w[r]);
    t.emplace_back(pb, pa, -w[r]);
    b[pa] -= w[r] * gamma[r];
    b[pb] += w[r] * gamma[r];
  }
  std::visit(
      [&](const auto& g) {
        using G = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<G, AnchorGauge>) {
          const int k = g.row * op.width + g.col;
          const double wa = g.weight * g.weight;
          t.emplace_back(k, k, wa);
          b[k] += wa * g.value;
        } else if constexpr (std::is_same_v<G, MeanGauge>) {
          // Pin pixel 0 to zero, then recentre after the solve.
          t.emplace_back(0, 0, 1.0);
        } else {
          for (int k = 0; k < n; ++k) t.emplace_back(k, k, g.mu);
        }
      },
      gauge);
  SparseMatrix a(n, n);
  a.setFromTriplets(t.begin(), t.end());
  return {std::move(a), std::move(b)};
}

/// Immutable factorization (direct) or system matrix (CG) of A. Shared by the
/// forward solve and every adjoint solve against the same system.
class SystemSolver {
 public:
  SystemSolver(SparseMatrix a, Backend backend, double cg_tolerance, int cg_max_iters)
      : a_(std::move(a)), backend_(backend), tol_(cg_tolerance), max_iters_(cg_max_iters) {
    if (backend_ == Backend::direct) {
      ldlt_ = std::make_unique<Eigen::SimplicialLDLT<SparseMatrix>>();
      ldlt_->compute(a_);
      if (ldlt_->info() != Eigen::Success) throw NumericalError("sparse LDLT factorization failed: singular system");
      const Vector d = ldlt_->vectorD();
      if (d.size() > 0 && !(d.minCoeff() > 0.0)) throw NumericalError("normal matrix is not positive definite");
    }
  }

  struct Result {
    Vector x;
    SolveDiagnostics diag;
  };

  Result solve(const Vector& rhs) const {
    Result res;
    if (backend_ == Backend::direct) {
      res.x = ldlt_->solve(rhs);
      res.diag.iterations = 0;
    } else {
      Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper> cg;
      cg.setTolerance(tol_);
      cg.setMaxIterations(max_iters_);
      cg.compute(a_);
      res.x = cg.solve(rhs);
      res.diag.iterations = static_cast<int>(cg.iterations());
      if (cg.info() != Eigen::Success || !(cg.error() <= tol_)) {
        throw NumericalError("conjugate gradient did not converge within " + std::to_string(max_iters_) +
                             " iterations (relative residual " + std::to_string(cg.error()) + ")");
      }
    }
    if (!res.x.allFinite()) throw NumericalError("solve produced non-finite values");
    const double bn = rhs.norm();
    const double rn = (a_ * res.x - rhs).norm();
    res.diag.final_residual = bn > 0.0 ? rn / bn : rn;
    return res;
  }

  const SparseMatrix& matrix() const noexcept { return a_; }
  Backend backend() const noexcept { return backend_; }

 private:
  SparseMatrix a_;
  Backend backend_;
  double tol_;
  int max_iters_;
  std::unique_ptr<Eigen::SimplicialLDLT<SparseMatrix>> ldlt_;
};

/// Everything the adjoint pass needs from a forward solve.
struct SolveTape {
  std::shared_ptr<const DifferenceOperator> op;
  std::shared_ptr<const SystemSolver> system;
  GaugeMode gauge;
  std::vector<double> residual;  ///< gamma - P z*
  AppliedWeights weights;
  std::vector<double> conf;  ///< raw confidences, length M
  Vector z;
};

struct SolveResult {
  DepthMap z;
  SolveDiagnostics diagnostics;
};

struct TapedSolve {
  DepthMap z;
  SolveDiagnostics diagnostics;
  std::shared_ptr<const SolveTape> tape;
};

/// Minimise ||Sigma (P z - gamma)||^2 under the configured gauge, keeping the
/// factorization and residuals for the backward pass.
inline TapedSolve solve_with_tape(const GradientField& grad, const ConfidenceField& conf, const SolveConfig& cfg) {
  validate(cfg);
  check_pair(grad, conf);
  auto op = std::make_shared<const DifferenceOperator>(build_operator(grad.height, grad.width));
  const int n = op->pixels();
  if (const auto* a = std::get_if<AnchorGauge>(&cfg.gauge);
      a && (a->row < 0 || a->row >= grad.height || a->col < 0 || a->col >= grad.width))
    throw InvalidArgument("anchor pixel lies outside the grid");

  auto tape = std::make_shared<SolveTape>();
  tape->op = op;
  tape->gauge = cfg.gauge;
  const std::vector<double> gamma = flatten(grad);
  tape->conf = flatten(conf);
  tape->weights = applied_weights(tape->conf, cfg.weight_floor);

  if (!std::holds_alternative<TikhonovGauge>(cfg.gauge) && detail::components(*op, tape->weights.weight) != 1)
    throw NumericalError("singular system: the weighted constraint graph is disconnected");

  NormalSystem sys = assemble(*op, gamma, tape->weights.weight, cfg.gauge);
  const int max_iters = cfg.cg_max_iters > 0 ? cfg.cg_max_iters : 10 * n;
  auto solver = std::make_shared<const SystemSolver>(std::move(sys.a), cfg.backend, cfg.cg_tolerance, max_iters);
  auto res = solver->solve(sys.b);
  if (const auto* m = std::get_if<MeanGauge>(&cfg.gauge)) {
    res.x.array() += m->value - res.x.mean();
  }
  tape->system = solver;
  tape->z = res.x;
  const auto pz = apply_operator(*op, std::span<const double>(res.x.data(), static_cast<std::size_t>(n)));
  tape->residual.resize(pz.size());
  for (std::size_t r = 0; r < pz.size(); ++r) tape->residual[r] = gamma[r] - pz[r];

  TapedSolve out;
  out.z = DepthMap(grad.height, grad.width);
  std::copy(res.x.data(), res.x.data() + n, out.z.values.flat().begin());
  out.diagnostics = res.diag;
  out.tape = std::move(tape);
  return out;
}

inline SolveResult solve(const GradientField& grad, const ConfidenceField& conf, const SolveConfig& cfg = {}) {
  auto t = solve_with_tape(grad, conf, cfg);
  return {std::move(t.z), t.diagnostics};
}

struct StackResult {
  std::vector<DepthMap> channels;
  std::vector<SolveDiagnostics> diagnostics;
};

/// Independent solves per channel; output order follows input order.
/// `threads` = 0 picks the hardware concurrency.
inline StackResult solve_stack(const ChannelStack& stack, const SolveConfig& cfg = {}, unsigned threads = 0) {
  check_stack(stack);
  const std::size_t s = stack.size();
  StackResult out;
  out.channels.resize(s);
  out.diagnostics.resize(s);
  std::vector<std::string> errors(s);
  std::vector<ErrorKind> kinds(s, ErrorKind::numerical);
  auto run = [&](std::size_t k) {
    try {
      auto r = solve(stack[k].grad, stack[k].conf, cfg);
      out.channels[k] = std::move(r.z);
      out.diagnostics[k] = r.diagnostics;
    } catch (const Error& e) {
      errors[k] = e.what();
      kinds[k] = e.kind();
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  const auto workers = static_cast<std::size_t>(std::min<std::size_t>(threads, s));
  if (workers <= 1) {
    for (std::size_t k = 0; k < s; ++k) run(k);
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t k = t; k < s; k += workers) run(k);
      });
  }
  for (std::size_t k = 0; k < s; ++k)
    if (!errors[k].empty()) throw Error(kinds[k], "channel " + std::to_string(k) + ": " + errors[k]);
  return out;
}

}  // namespace vadepth
