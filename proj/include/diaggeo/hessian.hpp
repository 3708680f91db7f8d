#pragma once

// Exact Hessian diagonals of any-depth linear networks, the full two-layer
// Hessian, and a central-difference oracle.
//
// Parameters are flattened layer by layer (W_1 first), each layer row-major:
// W_k[a, b] sits at offset(k) + a * cols(W_k) + b.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diaggeo/model.hpp"

namespace diaggeo {

struct HessianDiagonal {
  std::vector<double> values;  ///< |H_ii| for the layer, row-major over (a, b)
  std::size_t layer = 0;       ///< 1-based
  std::optional<std::uint64_t> step;
};

/// Diagonal of the loss_bar Hessian restricted to W_k (weight decay excluded).
/// Entry (a, b) is ||S_k[:, a]||^2 * ||P_{k-1}[b, :]||^2.
inline HessianDiagonal hessian_diag_layer(const Weights& w, std::size_t k, const ForwardCache& fc) {
  if (k < 1 || k > w.depth())
    throw std::out_of_range("hessian_diag_layer: layer " + std::to_string(k) + " outside 1.." +
                            std::to_string(w.depth()));
  const Matrix& wk = w.layer(k);
  std::vector<double> left(wk.rows(), 1.0), right(wk.cols(), 1.0);
  if (k < w.depth()) {
    const Matrix& S = fc.suffix(k);
    std::fill(left.begin(), left.end(), 0.0);
    for (std::size_t r = 0; r < S.rows(); ++r)
      for (std::size_t a = 0; a < S.cols(); ++a) left[a] += S(r, a) * S(r, a);
  }
  if (k > 1) {
    const Matrix& P = fc.prefix(k - 1);
    for (std::size_t b = 0; b < P.rows(); ++b) {
      const auto row = P.row(b);
      right[b] = dot(row, row);
    }
  }
  HessianDiagonal out;
  out.layer = k;
  out.values.resize(wk.size());
  for (std::size_t a = 0; a < wk.rows(); ++a)
    for (std::size_t b = 0; b < wk.cols(); ++b) out.values[a * wk.cols() + b] = left[a] * right[b];
  return out;
}

inline HessianDiagonal hessian_diag_layer(const Weights& w, std::size_t k) {
  return hessian_diag_layer(w, k, ForwardCache(w));
}

/// Full Hessian of the two-layer, scalar-output loss.
/// H11: d1*d0 square (W_1 block), H22: d1 square (w_2 block), H21: d1*d0 x d1 cross block.
struct HessianBlocks {
  Matrix H11;
  Matrix H22;
  Matrix H21;
};

inline constexpr std::size_t kMaxFullHessianDim = 32;

inline void require_two_layer(const Weights& w, const ProblemInstance& p, const char* who) {
  check_chain(w, p.A);
  if (w.depth() != 2 || p.A.rows() != 1)
    throw std::invalid_argument(std::string(who) + ": needs a two-layer network with scalar output");
}

inline HessianBlocks hessian_full_two_layer(const Weights& w, const ProblemInstance& p) {
  require_two_layer(w, p, "hessian_full_two_layer");
  const Matrix& W1 = w[0];
  const Matrix& W2 = w[1];
  const std::size_t d1 = W1.rows(), d0 = W1.cols();
  if (d1 > kMaxFullHessianDim || d0 > kMaxFullHessianDim)
    throw std::invalid_argument("hessian_full_two_layer: dimension above " + std::to_string(kMaxFullHessianDim));
  const Matrix E = error_matrix(w, p);
  HessianBlocks h;
  h.H11 = kron(matmul_tn(W2, W2), Matrix::identity(d0));
  h.H22 = matmul_nt(W1, W1);
  h.H21 = Matrix(d1 * d0, d1);
  for (std::size_t a = 0; a < d1; ++a)
    for (std::size_t b = 0; b < d0; ++b)
      for (std::size_t c = 0; c < d1; ++c)
        h.H21(a * d0 + b, c) = W2(0, a) * W1(c, b) + (a == c ? E(0, b) : 0.0);
  return h;
}

/// [[H11, H21], [H21^T, H22]] in the global parameter order.
inline Matrix assemble(const HessianBlocks& h) {
  const std::size_t n1 = h.H11.rows(), n2 = h.H22.rows();
  Matrix H(n1 + n2, n1 + n2);
  for (std::size_t i = 0; i < n1; ++i) {
    for (std::size_t j = 0; j < n1; ++j) H(i, j) = h.H11(i, j);
    for (std::size_t c = 0; c < n2; ++c) {
      H(i, n1 + c) = h.H21(i, c);
      H(n1 + c, i) = h.H21(i, c);
    }
  }
  for (std::size_t a = 0; a < n2; ++a)
    for (std::size_t b = 0; b < n2; ++b) H(n1 + a, n1 + b) = h.H22(a, b);
  return H;
}

/// Start of layer k (1-based) in the flattened parameter vector.
inline std::size_t layer_offset(const Weights& w, std::size_t k) {
  std::size_t off = 0;
  for (std::size_t i = 1; i < k; ++i) off += w.layer(i).size();
  return off;
}

struct IndexPair {
  std::size_t i = 0;
  std::size_t j = 0;
};

namespace detail {
inline double& flat_ref(Weights& w, std::size_t idx) {
  for (auto& m : w.layers()) {
    if (idx < m.size()) return m[idx];
    idx -= m.size();
  }
  throw std::out_of_range("parameter index out of range");
}
}  // namespace detail

/// Central second differences evaluated in long double. Perturbed weights are
/// stored as doubles, so the stencil uses the offsets actually realized
/// ((x + h) - x, measured in long double) instead of the nominal h; this keeps
/// rounding of x + h from leaking gradient terms into the estimate.
/// Off-diagonal: (f(++) - f(+-) - f(-+) + f(--)) / ((p_i + q_i)(p_j + q_j)).
/// Diagonal: 2 (q f(x+p) - (p+q) f(x) + p f(x-q)) / (p q (p+q)), steps of 2h.
template <class Loss>
std::vector<double> hessian_fd_oracle(Loss&& loss, const Weights& w, std::span<const IndexPair> pairs,
                                      double h = 1e-4) {
  if (!(h > 0.0) || !std::isfinite(h)) throw std::invalid_argument("hessian_fd_oracle: h must be > 0");
  Weights x = w;
  auto f_at = [&] {
    const long double f = static_cast<long double>(loss(std::as_const(x)));
    if (!std::isfinite(f)) throw std::domain_error("hessian_fd_oracle: non-finite loss value");
    return f;
  };
  // Realized forward (p) and backward (q) offsets for a nominal step.
  auto offsets = [](double x0, double step) {
    const double up = x0 + step, down = x0 - step;
    return std::pair{static_cast<long double>(up) - x0, static_cast<long double>(x0) - down};
  };
  std::vector<double> out;
  out.reserve(pairs.size());
  for (const auto& pr : pairs) {
    double& xi = detail::flat_ref(x, pr.i);
    const double xi0 = xi;
    if (pr.i == pr.j) {
      const auto [p, q] = offsets(xi0, 2.0 * h);
      const long double f0 = f_at();
      xi = xi0 + 2.0 * h;
      const long double fp = f_at();
      xi = xi0 - 2.0 * h;
      const long double fm = f_at();
      xi = xi0;
      out.push_back(static_cast<double>(2.0L * (q * fp - (p + q) * f0 + p * fm) / (p * q * (p + q))));
      continue;
    }
    double& xj = detail::flat_ref(x, pr.j);
    const double xj0 = xj;
    const auto [pi, qi] = offsets(xi0, h);
    const auto [pj, qj] = offsets(xj0, h);
    auto corner = [&](double si, double sj) {
      xi = xi0 + si * h;
      xj = xj0 + sj * h;
      const long double f = f_at();
      xi = xi0;
      xj = xj0;
      return f;
    };
    const long double s = corner(1, 1) - corner(1, -1) - corner(-1, 1) + corner(-1, -1);
    out.push_back(static_cast<double>(s / ((pi + qi) * (pj + qj))));
  }
  return out;
}

/// Finite-difference diagonal of layer k of loss_bar, evaluated in long double.
/// loss_bar is exactly quadratic along any single weight, so the step only
/// trades off rounding; a fairly large default keeps that small.
inline std::vector<double> fd_diag_layer(const Weights& w, const ProblemInstance& p, std::size_t k, double h = 1e-2) {
  const std::size_t off = layer_offset(w, k), n = w.layer(k).size();
  std::vector<IndexPair> pairs(n);
  for (std::size_t i = 0; i < n; ++i) pairs[i] = {off + i, off + i};
  return hessian_fd_oracle([&](const Weights& x) { return loss_bar<long double>(x, p); }, w, pairs, h);
}

/// Relative error with a floor: |fd - ex| / max(|ex|, floor_frac * max|ex|).
inline double max_rel_error(std::span<const double> exact, std::span<const double> fd, double floor_frac = 1e-4) {
  if (exact.size() != fd.size()) throw std::invalid_argument("max_rel_error: length mismatch");
  double scale = 0.0;
  for (double e : exact) scale = std::max(scale, std::abs(e));
  const double tau = floor_frac * scale;
  double worst = 0.0;
  for (std::size_t i = 0; i < exact.size(); ++i) {
    const double den = std::max(std::abs(exact[i]), tau);
    const double err = std::abs(fd[i] - exact[i]);
    if (den == 0.0) {
      if (err != 0.0) worst = std::max(worst, err);
      continue;
    }
    worst = std::max(worst, err / den);
  }
  return worst;
}

}  // namespace diaggeo
