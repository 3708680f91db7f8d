#pragma once

// One-sided Jacobi (Hestenes) SVD for small dense matrices.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "diaggeo/matrix.hpp"

namespace diaggeo {

/// W = U diag(sigma) V^T with r = min(rows, cols) triples, sigma descending.
/// Left vectors belonging to zero singular values are zero.
struct SvdResult {
  Matrix U;  ///< rows x r
  std::vector<double> sigma;
  Matrix V;  ///< cols x r
  int sweeps = 0;
};

class SvdNotConverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
// Orthogonalizes the columns of a (m x n, m >= n) in place; accumulates rotations in v.
inline int hestenes(Matrix& a, Matrix& v, int max_sweeps, double tol) {
  const std::size_t m = a.rows(), n = a.cols();
  // Column-major working copy keeps the rotations cache friendly.
  std::vector<std::vector<double>> col(n, std::vector<double>(m)), vc(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) col[j][i] = a(i, j);
    vc[j][j] = 1.0;
  }
  // Columns below this squared norm are numerically zero; rotating them only churns rounding noise.
  double frob2 = 0.0;
  for (const auto& c : col)
    for (double x : c) frob2 += x * x;
  const double eps_m = std::numeric_limits<double>::epsilon() * static_cast<double>(m);
  const double negligible = eps_m * eps_m * frob2;
  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        auto& cp = col[p];
        auto& cq = col[q];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (alpha <= negligible || beta <= negligible) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = cp[i], y = cq[i];
          cp[i] = c * x - s * y;
          cq[i] = s * x + c * y;
        }
        auto& vp = vc[p];
        auto& vq = vc[q];
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    if (!rotated) break;
  }
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) a(i, j) = col[j][i];
    for (std::size_t i = 0; i < n; ++i) v(i, j) = vc[j][i];
  }
  return sweep;
}
}  // namespace detail

inline SvdResult jacobi_svd(const Matrix& W, int max_sweeps = 80, double tol = 1e-15) {
  const bool wide = W.cols() > W.rows();
  Matrix a = wide ? transpose(W) : W;
  const std::size_t m = a.rows(), n = a.cols();
  Matrix v(n, n);
  const int sweeps = detail::hestenes(a, v, max_sweeps, tol);
  if (sweeps >= max_sweeps)
    throw SvdNotConverged("jacobi_svd: no convergence after " + std::to_string(max_sweeps) + " sweeps");

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += a(i, j) * a(i, j);
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  Matrix U(m, n), V(n, n);
  std::vector<double> sigma(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t j = order[r];
    sigma[r] = norms[j];
    for (std::size_t i = 0; i < m; ++i) U(i, r) = norms[j] > 0.0 ? a(i, j) / norms[j] : 0.0;
    for (std::size_t i = 0; i < n; ++i) V(i, r) = v(i, j);
  }
  if (wide) return {std::move(V), std::move(sigma), std::move(U), sweeps};
  return {std::move(U), std::move(sigma), std::move(V), sweeps};
}

/// Sum over all triples of sigma_i u_i v_i^T.
inline Matrix reconstruct(const SvdResult& s) {
  Matrix out(s.U.rows(), s.V.rows());
  for (std::size_t r = 0; r < s.sigma.size(); ++r)
    for (std::size_t i = 0; i < out.rows(); ++i) {
      const double ui = s.sigma[r] * s.U(i, r);
      if (ui == 0.0) continue;
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += ui * s.V(j, r);
    }
  return out;
}

}  // namespace diaggeo
