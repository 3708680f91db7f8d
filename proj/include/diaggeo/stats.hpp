#pragma once

// Trajectory statistics: max/median ratios of Hessian diagonals, diagonal
// dominance of the full Hessian, gradient alignment profiles, spectral
// diagnostics and rank-1 fits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diaggeo/matrix.hpp"
#include "diaggeo/model.hpp"
#include "diaggeo/rng.hpp"
#include "diaggeo/svd.hpp"

namespace diaggeo {

class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Median; even lengths average the two middle order statistics.
inline double median(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("median: empty input");
  std::vector<double> v(x.begin(), x.end());
  const std::size_t n = v.size(), mid = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

struct Subsample {
  std::size_t count = 200;
  std::uint64_t seed = 0;
};

struct RmedOptions {
  double stabilizer_factor = 0.0;  ///< eps_s: adds eps_s * max to the denominator
  std::size_t top_k = 1;           ///< numerator is the k-th largest entry
  std::optional<Subsample> subsample;
};

namespace detail {
inline double ratio_from_sorted(std::span<const double> asc, std::size_t n, std::size_t reps,
                                const RmedOptions& o) {
  // Order statistics of a multiset holding each of `asc` `reps` times.
  auto at = [&](std::size_t pos) { return asc[pos / reps]; };
  const std::size_t total = n * reps;
  if (o.top_k < 1 || o.top_k > total)
    throw std::invalid_argument("r_med: top_k " + std::to_string(o.top_k) + " outside 1.." + std::to_string(total));
  const double kth = at(total - o.top_k);
  const double mx = at(total - 1);
  const double med = total % 2 ? at(total / 2) : 0.5 * (at(total / 2 - 1) + at(total / 2));
  const double den = med + o.stabilizer_factor * mx;
  if (!(den > 0.0)) throw DegenerateInput("r_med: zero denominator (median of |diag| is 0)");
  return kth / den;
}
}  // namespace detail

/// kth-largest |x| / (median |x| + eps_s * max |x|).
inline double r_med(std::span<const double> diag, const RmedOptions& opts = {}) {
  if (diag.empty()) throw std::invalid_argument("r_med: empty input");
  if (opts.stabilizer_factor < 0.0) throw std::invalid_argument("r_med: negative stabilizer");
  std::vector<double> a(diag.size());
  std::transform(diag.begin(), diag.end(), a.begin(), [](double x) { return std::abs(x); });
  if (opts.subsample && opts.subsample->count < a.size()) {
    RngStream rng(opts.subsample->seed, StreamTag::subsample);
    std::shuffle(a.begin(), a.end(), rng.engine());
    a.resize(opts.subsample->count);
  }
  std::sort(a.begin(), a.end());
  return detail::ratio_from_sorted(a, a.size(), 1, opts);
}

/// Two-layer, scalar-output R_med of one layer from the weights alone: the
/// layer-1 diagonal is w_2a^2 repeated across columns, the layer-2 diagonal is
/// ||W_1[b, :]||^2. Subsampling is ignored.
inline double r_med_closed_form_layer(const Weights& w, std::size_t layer, const RmedOptions& opts = {}) {
  if (w.depth() != 2 || w[1].rows() != 1 || w[1].cols() != w[0].rows())
    throw std::invalid_argument("r_med_closed_form: needs a two-layer network with scalar output");
  if (layer != 1 && layer != 2) throw std::out_of_range("r_med_closed_form: layer must be 1 or 2");
  const Matrix& W1 = w[0];
  const Matrix& W2 = w[1];
  std::vector<double> v;
  if (layer == 1) {
    v.resize(W2.cols());
    for (std::size_t a = 0; a < v.size(); ++a) v[a] = W2(0, a) * W2(0, a);
  } else {
    v.resize(W1.rows());
    for (std::size_t b = 0; b < v.size(); ++b) v[b] = dot(W1.row(b), W1.row(b));
  }
  std::sort(v.begin(), v.end());
  RmedOptions o = opts;
  o.subsample.reset();
  return detail::ratio_from_sorted(v, v.size(), layer == 1 ? W1.cols() : 1, o);
}

inline std::pair<double, double> r_med_closed_form(const Weights& w, const RmedOptions& opts = {}) {
  return {r_med_closed_form_layer(w, 1, opts), r_med_closed_form_layer(w, 2, opts)};
}

struct RDiagResult {
  std::vector<std::optional<double>> per_row;  ///< empty for rows with a zero diagonal
  std::vector<std::size_t> flagged;            ///< rows excluded for a zero diagonal
  double mean = 0.0;
};

/// Row-wise sqrt(sum_{j != i} H_ij^2) / |H_ii| and its mean over unflagged rows.
inline RDiagResult r_diag(const Matrix& H) {
  if (H.rows() != H.cols()) throw std::invalid_argument("r_diag: matrix must be square");
  RDiagResult out;
  out.per_row.resize(H.rows());
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < H.rows(); ++i) {
    const double hii = std::abs(H(i, i));
    if (hii == 0.0) {
      out.flagged.push_back(i);
      continue;
    }
    double off = 0.0;
    for (std::size_t j = 0; j < H.cols(); ++j)
      if (j != i) off += H(i, j) * H(i, j);
    const double r = std::sqrt(off) / hii;
    out.per_row[i] = r;
    sum += r;
    ++used;
  }
  if (used == 0) throw DegenerateInput("r_diag: every diagonal entry is zero");
  out.mean = sum / static_cast<double>(used);
  return out;
}

/// Ranks starting at 1; ties share their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Spearman rank correlation; 0 when either input is constant.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  if (a.empty()) return 0.0;
  const auto ra = average_ranks(a), rb = average_ranks(b);
  return pearson(ra, rb);
}

/// Population std / mean; 0 for an all-zero input.
inline double coefficient_of_variation(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("coefficient_of_variation: empty input");
  const double n = static_cast<double>(x.size());
  const double mu = std::accumulate(x.begin(), x.end(), 0.0) / n;
  if (mu == 0.0) return 0.0;
  double s = 0.0;
  for (double v : x) s += (v - mu) * (v - mu);
  return std::sqrt(s / n) / std::abs(mu);
}

struct AlignmentProfile {
  std::vector<std::size_t> order;  ///< indices sorting |H_ii| ascending
  std::vector<double> h, g, g_adapt;
  double rho_g = 0.0;
  double rho_adapt = 0.0;
  double cv_g = 0.0;
  double cv_adapt = 0.0;
};

inline AlignmentProfile alignment_profile(std::span<const double> diag, std::span<const double> g,
                                          std::span<const double> g_adapt) {
  if (diag.size() != g.size() || diag.size() != g_adapt.size())
    throw std::invalid_argument("alignment_profile: length mismatch");
  if (diag.empty()) throw std::invalid_argument("alignment_profile: empty input");
  AlignmentProfile p;
  const std::size_t n = diag.size();
  p.order.resize(n);
  std::iota(p.order.begin(), p.order.end(), 0);
  std::stable_sort(p.order.begin(), p.order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(diag[a]) < std::abs(diag[b]); });
  p.h.resize(n);
  p.g.resize(n);
  p.g_adapt.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    p.h[i] = std::abs(diag[p.order[i]]);
    p.g[i] = std::abs(g[p.order[i]]);
    p.g_adapt[i] = std::abs(g_adapt[p.order[i]]);
  }
  p.rho_g = spearman(p.h, p.g);
  p.rho_adapt = spearman(p.h, p.g_adapt);
  p.cv_g = coefficient_of_variation(p.g);
  p.cv_adapt = coefficient_of_variation(p.g_adapt);
  return p;
}

/// max / median of a nonnegative vector; +inf when only the median vanishes.
inline double max_over_median(std::span<const double> x) {
  const double mx = *std::max_element(x.begin(), x.end());
  const double md = median(x);
  if (md == 0.0) {
    if (mx == 0.0) throw DegenerateInput("max_over_median: all-zero input");
    return std::numeric_limits<double>::infinity();
  }
  return mx / md;
}

struct SpectrumDiag {
  std::vector<double> sigma;  ///< descending
  std::size_t k = 0;          ///< energy-rule rank
  std::vector<double> u_tilde, v_tilde;
  double ru = 0.0, rv = 0.0;
  double stable_rank = 0.0;
};

inline SpectrumDiag svd_diagnostics(const Matrix& W, double energy_threshold = 0.9) {
  if (!(energy_threshold > 0.0 && energy_threshold <= 1.0))
    throw std::invalid_argument("svd_diagnostics: energy threshold must lie in (0, 1]");
  const SvdResult s = jacobi_svd(W);
  double total = 0.0;
  for (double x : s.sigma) total += x * x;
  if (total == 0.0) throw DegenerateInput("svd_diagnostics: zero matrix");
  SpectrumDiag out;
  out.sigma = s.sigma;
  out.stable_rank = total / (s.sigma[0] * s.sigma[0]);
  double acc = 0.0;
  out.k = s.sigma.size();
  for (std::size_t i = 0; i < s.sigma.size(); ++i) {
    acc += s.sigma[i] * s.sigma[i];
    // Relative slack absorbs rounding in the running sum when the threshold is 1.
    if (acc >= energy_threshold * total * (1.0 - 1e-12)) {
      out.k = i + 1;
      break;
    }
  }
  out.u_tilde.assign(W.rows(), 0.0);
  out.v_tilde.assign(W.cols(), 0.0);
  for (std::size_t r = 0; r < out.k; ++r) {
    const double s2 = s.sigma[r] * s.sigma[r];
    for (std::size_t i = 0; i < W.rows(); ++i) out.u_tilde[i] += s2 * s.U(i, r) * s.U(i, r);
    for (std::size_t j = 0; j < W.cols(); ++j) out.v_tilde[j] += s2 * s.V(j, r) * s.V(j, r);
  }
  out.ru = max_over_median(out.u_tilde);
  out.rv = max_over_median(out.v_tilde);
  return out;
}

struct Rank1Fit {
  std::vector<double> u;  ///< unit leading left singular vector of W_1
  std::vector<double> v;  ///< W_1^T u
  double c = 0.0;         ///< W_2 u
  double delta1 = 0.0;    ///< max |R_1[i,j]| / |u_i v_j|
  double delta2 = 0.0;    ///< max |R_2[i]| / |c u_i|
  std::size_t excluded1 = 0;
  std::size_t excluded2 = 0;
};

inline constexpr double kRank1Floor = 1e-300;

/// W_1 ~ u v^T, W_2 ~ c u^T with the sign of u chosen so that c >= 0.
inline Rank1Fit rank1_fit(const Matrix& W1, const Matrix& W2) {
  if (W2.rows() != 1 || W2.cols() != W1.rows()) throw std::invalid_argument("rank1_fit: needs W2 of shape 1 x rows(W1)");
  const SvdResult s = jacobi_svd(W1);
  if (s.sigma.empty() || s.sigma[0] == 0.0) throw DegenerateInput("rank1_fit: zero leading singular value");
  Rank1Fit f;
  f.u.resize(W1.rows());
  for (std::size_t i = 0; i < W1.rows(); ++i) f.u[i] = s.U(i, 0);
  if (dot(W2.row(0), f.u) < 0.0)
    for (auto& x : f.u) x = -x;
  f.c = dot(W2.row(0), f.u);
  f.v.assign(W1.cols(), 0.0);
  for (std::size_t i = 0; i < W1.rows(); ++i)
    for (std::size_t j = 0; j < W1.cols(); ++j) f.v[j] += W1(i, j) * f.u[i];
  for (std::size_t i = 0; i < W1.rows(); ++i)
    for (std::size_t j = 0; j < W1.cols(); ++j) {
      const double uv = f.u[i] * f.v[j];
      if (std::abs(uv) < kRank1Floor) {
        ++f.excluded1;
        continue;
      }
      f.delta1 = std::max(f.delta1, std::abs(W1(i, j) - uv) / std::abs(uv));
    }
  for (std::size_t i = 0; i < W1.rows(); ++i) {
    const double cu = f.c * f.u[i];
    if (std::abs(cu) < kRank1Floor) {
      ++f.excluded2;
      continue;
    }
    f.delta2 = std::max(f.delta2, std::abs(W2(0, i) - cu) / std::abs(cu));
  }
  return f;
}

}  // namespace diaggeo
