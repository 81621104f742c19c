#pragma once

// Reference implementations used only by the tests. They are written directly
// from the definitions with dense arithmetic and share no code with the
// library's sparse paths.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix zeros(std::size_t r, std::size_t c) { return Matrix(r, std::vector<double>(c, 0.0)); }

/// Dense forward-difference matrix: x-rows (right neighbour) in row-major
/// order, then y-rows (down neighbour) in row-major order.
inline Matrix difference_matrix(int h, int w) {
  Matrix p;
  const auto n = static_cast<std::size_t>(h * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j + 1 < w; ++j) {
      std::vector<double> row(n, 0.0);
      row[static_cast<std::size_t>(i * w + j)] = -1.0;
      row[static_cast<std::size_t>(i * w + j + 1)] = 1.0;
      p.push_back(row);
    }
  for (int i = 0; i + 1 < h; ++i)
    for (int j = 0; j < w; ++j) {
      std::vector<double> row(n, 0.0);
      row[static_cast<std::size_t>(i * w + j)] = -1.0;
      row[static_cast<std::size_t>((i + 1) * w + j)] = 1.0;
      p.push_back(row);
    }
  return p;
}

inline std::vector<double> matvec(const Matrix& a, const std::vector<double>& x) {
  std::vector<double> y(a.size(), 0.0);
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t c = 0; c < x.size(); ++c) y[r] += a[r][c] * x[c];
  return y;
}

/// Gaussian elimination with partial pivoting on a copy of (a, b).
inline std::vector<double> gauss_solve(Matrix a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t r = k + 1; r < n; ++r)
      if (std::abs(a[r][k]) > std::abs(a[piv][k])) piv = r;
    if (std::abs(a[piv][k]) < 1e-300) throw std::runtime_error("oracle: singular matrix");
    std::swap(a[k], a[piv]);
    std::swap(b[k], b[piv]);
    for (std::size_t r = k + 1; r < n; ++r) {
      const double f = a[r][k] / a[k][k];
      if (f == 0.0) continue;
      for (std::size_t c = k; c < n; ++c) a[r][c] -= f * a[k][c];
      b[r] -= f * b[k];
    }
  }
  std::vector<double> x(n, 0.0);
  for (std::size_t k = n; k-- > 0;) {
    double s = b[k];
    for (std::size_t c = k + 1; c < n; ++c) s -= a[k][c] * x[c];
    x[k] = s / a[k][k];
  }
  return x;
}

enum class Gauge { anchor, mean, tikhonov };

struct GaugeSpec {
  Gauge kind = Gauge::anchor;
  int anchor_index = 0;
  double value = 0.0;   ///< anchor or mean value
  double weight = 1.0;  ///< anchor weight
  double mu = 0.0;      ///< tikhonov
};

/// (P^T S^2 P + gauge) z = P^T S^2 gamma with S = diag(max(conf, floor)).
/// The mean gauge is imposed exactly through a bordered (KKT) system.
inline std::vector<double> weighted_solve(int h, int w, const std::vector<double>& gamma,
                                          const std::vector<double>& conf, const GaugeSpec& g,
                                          double floor = 1e-8) {
  const Matrix p = difference_matrix(h, w);
  const std::size_t n = static_cast<std::size_t>(h * w), m = p.size();
  Matrix a = zeros(n, n);
  std::vector<double> b(n, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    const double s = std::max(conf[r], floor);
    const double wr = s * s;
    for (std::size_t i = 0; i < n; ++i) {
      if (p[r][i] == 0.0) continue;
      b[i] += p[r][i] * wr * gamma[r];
      for (std::size_t j = 0; j < n; ++j) a[i][j] += p[r][i] * wr * p[r][j];
    }
  }
  if (g.kind == Gauge::anchor) {
    const auto k = static_cast<std::size_t>(g.anchor_index);
    a[k][k] += g.weight * g.weight;
    b[k] += g.weight * g.weight * g.value;
    return gauss_solve(a, b);
  }
  if (g.kind == Gauge::tikhonov) {
    for (std::size_t k = 0; k < n; ++k) a[k][k] += g.mu;
    return gauss_solve(a, b);
  }
  Matrix kkt = zeros(n + 1, n + 1);
  std::vector<double> rhs(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) kkt[i][j] = a[i][j];
    kkt[i][n] = kkt[n][i] = 1.0;
    rhs[i] = b[i];
  }
  rhs[n] = g.value * static_cast<double>(n);
  auto x = gauss_solve(kkt, rhs);
  x.pop_back();
  return x;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double e = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) e = std::max(e, std::abs(a[k] - b[k]));
  return e;
}

inline double max_abs(const std::vector<double>& a) {
  double e = 0.0;
  for (double v : a) e = std::max(e, std::abs(v));
  return e;
}

}  // namespace oracle
