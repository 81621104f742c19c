#pragma once

// Reverse-mode differentiation through the variational solve.
//
// With A z = P^T W gamma + g and W = diag(w), w = max(sigma, floor)^2, the
// stationarity condition gives, for an upstream gradient gbar = dL/dz and the
// adjoint lambda = A^{-1} gbar:
//   dL/dgamma_r = w_r (P lambda)_r
//   dL/dw_r     = (P lambda)_r (gamma - P z)_r
//   dL/dsigma_r = 2 sigma_r dL/dw_r   (zero where the floor is active)
// A is symmetric, so the forward factorization serves the adjoint solve.

#include <span>
#include <variant>
#include <vector>

#include "vadepth/grid.hpp"
#include "vadepth/varlayer.hpp"

namespace vadepth {

struct SolveGradients {
  GradientField d_gamma;
  ConfidenceField d_sigma;
  SolveDiagnostics diagnostics;
};

inline SolveGradients solve_backward(const SolveTape& tape, std::span<const double> gbar) {
  const auto& op = *tape.op;
  const auto n = static_cast<std::size_t>(op.pixels());
  if (gbar.size() != n) throw InvalidArgument("solve_backward: upstream gradient length does not match H*W");

  Vector rhs = Eigen::Map<const Vector>(gbar.data(), static_cast<Eigen::Index>(n));
  if (std::holds_alternative<MeanGauge>(tape.gauge)) {
    // z = C z_anchor + value with C the centring projector (symmetric).
    rhs.array() -= rhs.mean();
  }
  auto adj = tape.system->solve(rhs);
  adj.diag.factorization_reused = tape.system->backend() == Backend::direct;

  const auto p_lambda = apply_operator(op, std::span<const double>(adj.x.data(), n));
  const std::size_t m = op.rows.size();
  std::vector<double> dg(m), ds(m);
  for (std::size_t r = 0; r < m; ++r) {
    dg[r] = tape.weights.weight[r] * p_lambda[r];
    const double dw = p_lambda[r] * tape.residual[r];
    ds[r] = tape.weights.floored[r] ? 0.0 : 2.0 * tape.conf[r] * dw;
  }
  SolveGradients out;
  out.d_gamma = unflatten_gradients(op.height, op.width, dg);
  out.d_sigma = unflatten_confidence(op.height, op.width, ds);
  out.diagnostics = adj.diag;
  return out;
}

inline SolveGradients solve_backward(const SolveTape& tape, const Field& gbar) {
  return solve_backward(tape, gbar.flat());
}

}  // namespace vadepth
