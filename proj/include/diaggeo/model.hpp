#pragma once

// Whitened-data deep linear network: configuration, problem instance,
// Gaussian initialization, losses, exact and noisy gradients.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diaggeo/matrix.hpp"
#include "diaggeo/rng.hpp"

namespace diaggeo {

/// Ordered per-layer matrices W_1..W_L. The tag keeps weights, gradients and
/// optimizer buffers from being mixed up at compile time.
template <class Tag>
class LayerStack {
 public:
  LayerStack() = default;
  explicit LayerStack(std::vector<Matrix> layers) : layers_(std::move(layers)) {}

  /// Zero-filled stack with the same shapes as `other`.
  template <class OtherTag>
  static LayerStack zeros_like(const LayerStack<OtherTag>& other) {
    std::vector<Matrix> z;
    z.reserve(other.depth());
    for (const auto& m : other.layers()) z.emplace_back(m.rows(), m.cols());
    return LayerStack(std::move(z));
  }

  std::size_t depth() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }

  /// 0-based access.
  Matrix& operator[](std::size_t i) { return layers_.at(i); }
  const Matrix& operator[](std::size_t i) const { return layers_.at(i); }

  /// 1-based access (W_1 is the input layer).
  Matrix& layer(std::size_t k) { return layers_.at(checked(k)); }
  const Matrix& layer(std::size_t k) const { return layers_.at(checked(k)); }

  const std::vector<Matrix>& layers() const noexcept { return layers_; }
  std::vector<Matrix>& layers() noexcept { return layers_; }

  std::size_t parameter_count() const noexcept {
    std::size_t n = 0;
    for (const auto& m : layers_) n += m.size();
    return n;
  }

  template <class OtherTag>
  bool same_shapes(const LayerStack<OtherTag>& o) const noexcept {
    if (depth() != o.depth()) return false;
    for (std::size_t i = 0; i < depth(); ++i)
      if (!layers_[i].same_shape(o[i])) return false;
    return true;
  }

  friend bool operator==(const LayerStack&, const LayerStack&) = default;

 private:
  std::size_t checked(std::size_t k) const {
    if (k < 1 || k > layers_.size())
      throw std::out_of_range("layer index " + std::to_string(k) + " outside 1.." + std::to_string(layers_.size()));
    return k - 1;
  }

  std::vector<Matrix> layers_;
};

struct WeightsTag {};
struct GradientTag {};
using Weights = LayerStack<WeightsTag>;
using GradientSet = LayerStack<GradientTag>;

struct NetworkConfig {
  int depth = 2;                  ///< number of weight layers
  std::vector<std::size_t> dims;  ///< d_0 .. d_depth
  double alpha = 1.0;             ///< init exponent; +inf gives all-zero weights
  bool theory_mode = false;

  /// d_0 = ... = d_{depth-1} = d, output dimension 1.
  static NetworkConfig standard(std::size_t d, int depth = 2, double alpha = 1.0) {
    NetworkConfig c;
    c.depth = depth;
    c.alpha = alpha;
    c.dims.assign(static_cast<std::size_t>(depth), d);
    c.dims.push_back(1);
    return c;
  }

  void validate() const {
    if (depth < 2) throw std::invalid_argument("NetworkConfig: depth must be >= 2");
    if (dims.size() != static_cast<std::size_t>(depth) + 1)
      throw std::invalid_argument("NetworkConfig: dims must list depth+1 sizes");
    for (auto n : dims)
      if (n == 0) throw std::invalid_argument("NetworkConfig: zero dimension");
    if (!(alpha > 0.0)) throw std::invalid_argument("NetworkConfig: alpha must be positive");
  }
};

struct ProblemInstance {
  Matrix A;  ///< target, d_y x d_x
  double sigma = 0.0;
  double l2_coeff = 0.0;
  bool symmetrize_noise = false;
  double a_lo = 0.5;
  double a_hi = 1.5;
  std::uint64_t seed_data = 0;
  std::uint64_t seed_noise = 0;

  std::size_t d() const noexcept { return A.cols(); }
};

inline ProblemInstance generate_problem(std::size_t d, std::pair<double, double> a_band, double sigma,
                                        std::uint64_t seed) {
  const auto [lo, hi] = a_band;
  if (d == 0) throw std::invalid_argument("generate_problem: d must be >= 1");
  if (!(lo > 0.0) || lo > hi || !std::isfinite(hi)) throw std::invalid_argument("generate_problem: invalid A band");
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("generate_problem: sigma must be >= 0");
  RngStream rng(seed, StreamTag::data);
  std::vector<double> a(d);
  for (auto& x : a) x = rng.uniform(lo, hi);
  ProblemInstance p;
  p.A = Matrix::row_vector(std::move(a));
  p.sigma = sigma;
  p.a_lo = lo;
  p.a_hi = hi;
  p.seed_data = seed;
  return p;
}

/// Std of layer k (1-based): d^{-alpha} for the output layer, d^{-2 alpha} otherwise.
inline double init_std(const NetworkConfig& cfg, std::size_t d, int k) {
  const double e = (k == cfg.depth) ? cfg.alpha : 2.0 * cfg.alpha;
  if (std::isinf(e)) return 0.0;
  return std::pow(static_cast<double>(d), -e);
}

inline Weights init_weights(const NetworkConfig& cfg, std::size_t d, std::uint64_t seed) {
  cfg.validate();
  RngStream rng(seed, StreamTag::init);
  std::vector<Matrix> layers;
  layers.reserve(static_cast<std::size_t>(cfg.depth));
  for (int k = 1; k <= cfg.depth; ++k) {
    Matrix w(cfg.dims[static_cast<std::size_t>(k)], cfg.dims[static_cast<std::size_t>(k - 1)]);
    const double s = init_std(cfg, d, k);
    if (s > 0.0)
      for (auto& x : w.values()) x = rng.normal(0.0, s);
    layers.push_back(std::move(w));
  }
  return Weights(std::move(layers));
}

inline void check_chain(const Weights& w, const Matrix& A) {
  if (w.empty()) throw std::invalid_argument("empty weights");
  for (std::size_t i = 1; i < w.depth(); ++i)
    if (w[i].cols() != w[i - 1].rows())
      throw std::invalid_argument("layer " + std::to_string(i + 1) + " shape " + w[i].shape_string() +
                                  " does not chain with " + w[i - 1].shape_string());
  if (w[w.depth() - 1].rows() != A.rows() || w[0].cols() != A.cols())
    throw std::invalid_argument("network maps " + std::to_string(w[0].cols()) + "->" +
                                std::to_string(w[w.depth() - 1].rows()) + " but A is " + A.shape_string());
}

/// End-to-end product W_L ... W_1, accumulated in `Acc`.
template <class Acc = double>
std::vector<Acc> product_acc(const Weights& w) {
  // Row-major rows_out x cols_in, built from the output side.
  const Matrix& top = w[w.depth() - 1];
  std::size_t rows = top.rows(), inner = top.cols();
  std::vector<Acc> cur(top.values().begin(), top.values().end());
  for (std::size_t i = w.depth() - 1; i-- > 0;) {
    const Matrix& m = w[i];
    std::vector<Acc> next(rows * m.cols(), Acc{0});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < inner; ++k) {
        const Acc c = cur[r * inner + k];
        if (c == Acc{0}) continue;
        auto mk = m.row(k);
        for (std::size_t j = 0; j < m.cols(); ++j) next[r * m.cols() + j] += c * static_cast<Acc>(mk[j]);
      }
    cur = std::move(next);
    inner = m.cols();
  }
  return cur;
}

inline Matrix end_to_end(const Weights& w) {
  return Matrix(w[w.depth() - 1].rows(), w[0].cols(), product_acc<double>(w));
}

/// 1/2 ||W_L...W_1 - A||_F^2 (+ 1/2 l2 sum ||W_i||^2).
template <class Acc = double>
Acc loss_bar(const Weights& w, const ProblemInstance& p) {
  check_chain(w, p.A);
  const auto prod = product_acc<Acc>(w);
  Acc s{0};
  for (std::size_t i = 0; i < prod.size(); ++i) {
    const Acc e = prod[i] - static_cast<Acc>(p.A[i]);
    s += e * e;
  }
  Acc out = s / 2;
  if (p.l2_coeff != 0.0) {
    Acc r{0};
    for (const auto& m : w.layers())
      for (double x : m.values()) r += static_cast<Acc>(x) * static_cast<Acc>(x);
    out += static_cast<Acc>(p.l2_coeff) * r / 2;
  }
  return out;
}

/// Error E = W_L...W_1 - A.
inline Matrix error_matrix(const Weights& w, const ProblemInstance& p) {
  check_chain(w, p.A);
  return end_to_end(w) - p.A;
}

/// Explicit whitened dataset: X is d_x x m with X X^T / m = I, Y = A X + Z with Z X^T = 0.
struct Dataset {
  Matrix X;
  Matrix Y;
};

inline Dataset make_whitened_dataset(const Matrix& A, std::size_t m, std::uint64_t seed) {
  const std::size_t dx = A.cols(), dy = A.rows();
  if (m < dx + dy) throw std::invalid_argument("make_whitened_dataset: need m >= d_x + d_y");
  RngStream rng(seed, StreamTag::dataset);
  // Orthonormal rows via twice-applied modified Gram-Schmidt.
  const std::size_t n = dx + dy;
  Matrix Q(n, m);
  for (auto& x : Q.values()) x = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    auto qi = Q.row(i);
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t j = 0; j < i; ++j) {
        auto qj = Q.row(j);
        const double c = dot(qi, qj);
        for (std::size_t k = 0; k < m; ++k) qi[k] -= c * qj[k];
      }
    const double nrm = std::sqrt(dot(qi, qi));
    for (auto& x : qi) x /= nrm;
  }
  Matrix X(dx, m), Z(dy, m);
  const double s = std::sqrt(static_cast<double>(m));
  for (std::size_t i = 0; i < dx; ++i)
    for (std::size_t k = 0; k < m; ++k) X(i, k) = s * Q(i, k);
  for (std::size_t i = 0; i < dy; ++i)
    for (std::size_t k = 0; k < m; ++k) Z(i, k) = Q(dx + i, k) * s * 0.5;
  Matrix Y = matmul(A, X) + Z;
  return {std::move(X), std::move(Y)};
}

/// (1/2m) ||W_L...W_1 X - Y||_F^2. With `strict`, rejects X unless X X^T / m = I to 1e-8.
inline double loss_full(const Weights& w, const Matrix& X, const Matrix& Y, bool strict = true) {
  if (w.empty() || w[0].cols() != X.rows() || w[w.depth() - 1].rows() != Y.rows() || X.cols() != Y.cols())
    throw std::invalid_argument("loss_full: shape mismatch");
  const double m = static_cast<double>(X.cols());
  if (strict) {
    Matrix c = matmul_nt(X, X);
    c *= 1.0 / m;
    if (max_abs_diff(c, Matrix::identity(X.rows())) > 1e-8) throw std::invalid_argument("loss_full: X is not whitened");
  }
  Matrix r = matmul(end_to_end(w), X) - Y;
  return frobenius_sq(r) / (2.0 * m);
}

/// Prefix products P_k = W_k...W_1 and suffix products S_k = W_L...W_{k+1}.
/// P_0 and S_L are identities and are never materialized; P_1 and S_{L-1}
/// alias the weights, so the cache must not outlive them.
class ForwardCache {
 public:
  explicit ForwardCache(const Weights& w) : w_(&w), depth_(w.depth()) {
    // prefix_[k-2] = P_k for k >= 2; suffix_[k-1] = S_k for k <= L-2.
    for (std::size_t k = 1; k < depth_; ++k) prefix_.push_back(matmul(w[k], k == 1 ? w[0] : prefix_.back()));
    suffix_.resize(depth_ >= 2 ? depth_ - 2 : 0);
    for (std::size_t k = depth_ - 1; k-- > 1;) suffix_[k - 1] = matmul(suffix(k + 1), w[k]);
  }

  explicit ForwardCache(const Weights&&) = delete;

  std::size_t depth() const noexcept { return depth_; }
  /// P_k for 1 <= k <= L.
  const Matrix& prefix(std::size_t k) const { return k == 1 ? (*w_)[0] : prefix_.at(k - 2); }
  /// S_k for 1 <= k < L.
  const Matrix& suffix(std::size_t k) const { return k + 1 == depth_ ? (*w_)[depth_ - 1] : suffix_.at(k - 1); }
  const Matrix& product() const { return prefix(depth_); }

 private:
  const Weights* w_;
  std::size_t depth_;
  std::vector<Matrix> prefix_;
  std::vector<Matrix> suffix_;
};

namespace detail {
/// S_k^T R P_{k-1}^T with the identity ends skipped.
inline Matrix sandwich(const ForwardCache& fc, const Matrix& R, std::size_t k) {
  const std::size_t L = fc.depth();
  Matrix left = (k == L) ? R : matmul_tn(fc.suffix(k), R);
  return (k == 1) ? left : matmul_nt(left, fc.prefix(k - 1));
}
}  // namespace detail

/// Gradient of loss_bar with respect to W_k (1-based).
inline Matrix gradient(const Weights& w, const ProblemInstance& p, std::size_t k) {
  check_chain(w, p.A);
  if (k < 1 || k > w.depth())
    throw std::out_of_range("gradient: layer " + std::to_string(k) + " outside 1.." + std::to_string(w.depth()));
  ForwardCache fc(w);
  Matrix g = detail::sandwich(fc, fc.product() - p.A, k);
  if (p.l2_coeff != 0.0) g.axpy(p.l2_coeff, w.layer(k));
  return g;
}

inline GradientSet all_gradients(const Weights& w, const ProblemInstance& p, const ForwardCache& fc) {
  const Matrix R = fc.product() - p.A;
  std::vector<Matrix> gs;
  gs.reserve(w.depth());
  for (std::size_t k = 1; k <= w.depth(); ++k) {
    gs.push_back(detail::sandwich(fc, R, k));
    if (p.l2_coeff != 0.0) gs.back().axpy(p.l2_coeff, w.layer(k));
  }
  return GradientSet(std::move(gs));
}

inline GradientSet all_gradients(const Weights& w, const ProblemInstance& p) {
  check_chain(w, p.A);
  return all_gradients(w, p, ForwardCache(w));
}

/// Noisy gradient: A -> A + N_A, whitened covariance I -> I + N_Lambda, iid N(0, sigma^2) entries.
/// sigma = 0 returns the exact gradient without touching the stream.
inline GradientSet batch_gradient(const Weights& w, const ProblemInstance& p, RngStream& rng) {
  check_chain(w, p.A);
  ForwardCache fc(w);
  if (p.sigma == 0.0) return all_gradients(w, p, fc);
  const std::size_t dx = p.A.cols();
  Matrix At = p.A;
  for (auto& x : At.values()) x += rng.normal(0.0, p.sigma);
  Matrix Lam = Matrix::identity(dx);
  if (p.symmetrize_noise) {
    for (std::size_t i = 0; i < dx; ++i) {
      Lam(i, i) += rng.normal(0.0, p.sigma);
      for (std::size_t j = i + 1; j < dx; ++j) {
        const double z = rng.normal(0.0, p.sigma);
        Lam(i, j) += z;
        Lam(j, i) += z;
      }
    }
  } else {
    for (auto& x : Lam.values()) x += rng.normal(0.0, p.sigma);
  }
  const Matrix R = matmul(fc.product(), Lam) - At;
  std::vector<Matrix> gs;
  gs.reserve(w.depth());
  for (std::size_t k = 1; k <= w.depth(); ++k) {
    gs.push_back(detail::sandwich(fc, R, k));
    if (p.l2_coeff != 0.0) gs.back().axpy(p.l2_coeff, w.layer(k));
  }
  return GradientSet(std::move(gs));
}

}  // namespace diaggeo
