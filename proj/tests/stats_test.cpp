#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "diaggeo/hessian.hpp"
#include "diaggeo/stats.hpp"

using namespace diaggeo;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  RngStream rng(seed, StreamTag::init);
  Matrix m(r, c);
  for (auto& x : m.values()) x = rng.normal(0.0, scale);
  return m;
}

// Naive max/median by full sort, independent of the order-statistic helper.
double naive_ratio(std::vector<double> v) {
  for (auto& x : v) x = std::abs(x);
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  const double med = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  return v.back() / med;
}

}  // namespace

TEST(Median, OddAndEven) {
  const std::vector<double> odd{3, 1, 2}, even{4, 1, 3, 2};
  EXPECT_EQ(median(odd), 2.0);
  EXPECT_EQ(median(even), 2.5);
  EXPECT_THROW(median(std::vector<double>{}), std::invalid_argument);
}

TEST(RMed, UniformDiagonalIsOne) {
  const std::vector<double> v(17, 3.3);
  EXPECT_DOUBLE_EQ(r_med(v), 1.0);
}

TEST(RMed, TopKOrderStatistics) {
  const std::vector<double> v{1, 2, 3, 4, 5};
  RmedOptions o;
  o.top_k = 1;
  EXPECT_NEAR(r_med(v, o), 5.0 / 3.0, 1e-15);
  o.top_k = 2;
  EXPECT_NEAR(r_med(v, o), 4.0 / 3.0, 1e-15);
  o.top_k = 6;
  EXPECT_THROW(r_med(v, o), std::invalid_argument);
}

TEST(RMed, StabilizerHandlesZeroMedian) {
  const std::vector<double> v{0, 0, 0, 1};
  RmedOptions o;
  o.stabilizer_factor = 0.001;
  EXPECT_NEAR(r_med(v, o), 1000.0, 1e-9);
  EXPECT_THROW(r_med(v), DegenerateInput);
}

TEST(RMed, UsesAbsoluteValues) {
  const std::vector<double> v{-4, 1, -2};
  EXPECT_DOUBLE_EQ(r_med(v), 2.0);
}

TEST(RMed, AtLeastOneWithoutStabilizer) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto m = random_matrix(1, 3 + seed % 20, seed);
    EXPECT_GE(r_med(m.values()), 1.0);
  }
}

TEST(RMed, SubsampleIsDeterministicAndBounded) {
  const auto m = random_matrix(1, 1000, 3);
  RmedOptions o;
  o.subsample = Subsample{200, 9};
  const double a = r_med(m.values(), o), b = r_med(m.values(), o);
  EXPECT_EQ(a, b);
  EXPECT_GE(a, 1.0);
  EXPECT_LE(a, r_med(m.values()) * 10.0);
}

TEST(RMedClosedForm, SignVectorGivesOne) {
  const Weights w({random_matrix(4, 4, 1), Matrix{{1, -1, 1, -1}}});
  EXPECT_DOUBLE_EQ(r_med_closed_form(w).first, 1.0);
}

TEST(RMedClosedForm, HandValue) {
  const Weights w({random_matrix(3, 3, 2), Matrix{{1, 2, 3}}});
  EXPECT_DOUBLE_EQ(r_med_closed_form(w).first, 2.25);
}

TEST(RMedClosedForm, MatchesHessianRouteBitForBit) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t d = 2 + seed % 9;
    const Weights w({random_matrix(d, d, seed), random_matrix(1, d, seed + 100)});
    RmedOptions o;
    o.top_k = 1 + seed % 2;
    o.stabilizer_factor = seed % 3 ? 0.0 : 1e-3;
    const auto [c1, c2] = r_med_closed_form(w, o);
    EXPECT_EQ(c1, r_med(hessian_diag_layer(w, 1).values, o));
    EXPECT_EQ(c2, r_med(hessian_diag_layer(w, 2).values, o));
  }
}

TEST(RMedClosedForm, AgreesWithNaiveSort) {
  const Weights w({random_matrix(6, 6, 4), random_matrix(1, 6, 5)});
  std::vector<double> w2sq;
  for (double x : w[1].values()) w2sq.push_back(x * x);
  EXPECT_NEAR(r_med_closed_form(w).first, naive_ratio(w2sq), 1e-13);
  EXPECT_THROW(r_med_closed_form(Weights({random_matrix(3, 3, 1), random_matrix(3, 3, 2), random_matrix(1, 3, 3)})),
               std::invalid_argument);
}

TEST(RDiag, DiagonalMatrixIsZero) {
  const Matrix H{{2, 0, 0}, {0, 5, 0}, {0, 0, 1}};
  const auto r = r_diag(H);
  EXPECT_EQ(r.mean, 0.0);
  for (const auto& x : r.per_row) EXPECT_EQ(*x, 0.0);
}

TEST(RDiag, TwoByTwoByHand) {
  const auto r = r_diag(Matrix{{2, 1}, {1, 4}});
  EXPECT_DOUBLE_EQ(*r.per_row[0], 0.5);
  EXPECT_DOUBLE_EQ(*r.per_row[1], 0.25);
  EXPECT_DOUBLE_EQ(r.mean, 0.375);
}

TEST(RDiag, ZeroDiagonalRowsFlagged) {
  const auto r = r_diag(Matrix{{0, 1}, {1, 2}});
  EXPECT_FALSE(r.per_row[0]);
  ASSERT_EQ(r.flagged.size(), 1u);
  EXPECT_DOUBLE_EQ(r.mean, 0.5);
  EXPECT_THROW(r_diag(Matrix(2, 2)), DegenerateInput);
}

TEST(Spearman, PerfectMonotoneAlignment) {
  const std::vector<double> h{0.1, 5, 2, 3.3, 0.7};
  std::vector<double> g(h.size());
  std::transform(h.begin(), h.end(), g.begin(), [](double x) { return std::exp(x); });
  const std::vector<double> flat(h.size(), 2.0);
  const auto p = alignment_profile(h, g, flat);
  EXPECT_DOUBLE_EQ(p.rho_g, 1.0);
  EXPECT_EQ(p.cv_adapt, 0.0);
  EXPECT_EQ(p.rho_adapt, 0.0);
  EXPECT_TRUE(std::is_sorted(p.h.begin(), p.h.end()));
}

TEST(Spearman, ReversedAndTiedRanks) {
  const std::vector<double> a{1, 2, 3, 4}, b{8, 6, 4, 2};
  EXPECT_DOUBLE_EQ(spearman(a, b), -1.0);
  const auto r = average_ranks(std::vector<double>{5, 1, 5, 2});
  EXPECT_EQ(r, (std::vector<double>{3.5, 1, 3.5, 2}));
}

TEST(Spearman, AgreesWithClosedFormWhenNoTies) {
  // rho = 1 - 6 sum d^2 / (n (n^2 - 1)) for distinct values.
  RngStream rng(12, StreamTag::oracle);
  std::vector<double> a(30), b(30);
  for (std::size_t i = 0; i < 30; ++i) {
    a[i] = rng.normal();
    b[i] = a[i] + rng.normal(0.0, 1.0);
  }
  auto rank = [](const std::vector<double>& x) {
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
      r[i] = 1.0 + static_cast<double>(std::count_if(x.begin(), x.end(), [&](double y) { return y < x[i]; }));
    return r;
  };
  const auto ra = rank(a), rb = rank(b);
  double d2 = 0.0;
  for (std::size_t i = 0; i < 30; ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  EXPECT_NEAR(spearman(a, b), 1.0 - 6.0 * d2 / (30.0 * (900.0 - 1.0)), 1e-12);
}

TEST(CoefficientOfVariation, KnownValues) {
  EXPECT_DOUBLE_EQ(coefficient_of_variation(std::vector<double>{1, 3}), 0.5);
  EXPECT_EQ(coefficient_of_variation(std::vector<double>{0, 0}), 0.0);
}

TEST(Svd, ReconstructsRandomMatrices) {
  for (auto [r, c] : {std::pair<std::size_t, std::size_t>{5, 5}, {7, 3}, {3, 7}, {1, 6}}) {
    const auto W = random_matrix(r, c, r * 10 + c);
    const auto s = jacobi_svd(W);
    EXPECT_LE(max_abs_diff(reconstruct(s), W), 1e-12);
    EXPECT_TRUE(std::is_sorted(s.sigma.rbegin(), s.sigma.rend()));
    const Matrix utu = matmul_tn(s.U, s.U);
    EXPECT_LE(max_abs_diff(utu, Matrix::identity(utu.rows())), 1e-12);
  }
}

TEST(Svd, DiagonalHandExample) {
  const Matrix W{{3, 0, 0}, {0, 2, 0}, {0, 0, 1}};
  const auto s = svd_diagnostics(W, 0.9);
  EXPECT_NEAR(s.sigma[0], 3.0, 1e-14);
  EXPECT_NEAR(s.sigma[1], 2.0, 1e-14);
  EXPECT_NEAR(s.sigma[2], 1.0, 1e-14);
  EXPECT_EQ(s.k, 2u);
  EXPECT_NEAR(s.u_tilde[0], 9.0, 1e-12);
  EXPECT_NEAR(s.u_tilde[1], 4.0, 1e-12);
  EXPECT_NEAR(s.u_tilde[2], 0.0, 1e-12);
  EXPECT_NEAR(s.ru, 2.25, 1e-12);
}

TEST(Svd, RankOneAllOnesGivesUniformProfile) {
  const std::vector<double> u{1, 1, 1, 1}, v{0.3, -2, 1};
  const auto s = svd_diagnostics(outer(u, v), 0.9);
  EXPECT_EQ(s.k, 1u);
  EXPECT_NEAR(s.ru, 1.0, 1e-12);
  EXPECT_NEAR(s.stable_rank, 1.0, 1e-12);
  const std::vector<double> u2{1, 2, 3};
  EXPECT_NEAR(svd_diagnostics(outer(u2, v)).ru, 9.0 / 4.0, 1e-12);
}

TEST(Svd, OrthogonalMatrixIsIsotropic) {
  // Q from the SVD of a random matrix is orthogonal; use the full spectrum.
  const auto Q = jacobi_svd(random_matrix(6, 6, 77)).U;
  const auto s = svd_diagnostics(Q, 1.0);
  EXPECT_EQ(s.k, 6u);
  EXPECT_NEAR(s.stable_rank, 6.0, 1e-10);
  EXPECT_NEAR(s.ru, 1.0, 1e-10);
  EXPECT_NEAR(s.rv, 1.0, 1e-10);
  EXPECT_THROW(svd_diagnostics(Q, 0.0), std::invalid_argument);
  EXPECT_THROW(svd_diagnostics(Matrix(3, 3)), DegenerateInput);
}

TEST(Rank1Fit, ExactPairHasZeroDeltas) {
  const std::vector<double> u{0.6, -0.8, 0.5}, v{1.0, 2.0, -0.5};
  const Matrix W1 = outer(u, v);
  Matrix W2(1, 3);
  for (std::size_t i = 0; i < 3; ++i) W2[i] = 1.7 * u[i];
  const auto f = rank1_fit(W1, W2);
  EXPECT_LE(f.delta1, 1e-12);
  EXPECT_LE(f.delta2, 1e-12);
  EXPECT_GE(f.c, 0.0);
}

TEST(Rank1Fit, SmallPerturbationGivesSmallNonzeroDeltas) {
  const std::vector<double> u{0.6, -0.8, 0.5, 0.9}, v{1.0, 2.0, -0.5, 1.5};
  Matrix W1 = outer(u, v);
  Matrix W2(1, 4);
  for (std::size_t i = 0; i < 4; ++i) W2[i] = 1.7 * u[i];
  RngStream rng(5, StreamTag::oracle);
  for (auto& x : W1.values()) x *= 1.0 + 1e-3 * rng.uniform(-1.0, 1.0);
  for (auto& x : W2.values()) x *= 1.0 + 1e-3 * rng.uniform(-1.0, 1.0);
  const auto f = rank1_fit(W1, W2);
  EXPECT_GT(f.delta1, 0.0);
  EXPECT_GT(f.delta2, 0.0);
  EXPECT_LE(f.delta1, 1e-2);
  EXPECT_LE(f.delta2, 1e-2);
}

TEST(Rank1Fit, RejectsMismatchedShapes) {
  EXPECT_THROW(rank1_fit(random_matrix(3, 3, 1), random_matrix(1, 4, 2)), std::invalid_argument);
  EXPECT_THROW(rank1_fit(Matrix(3, 3), random_matrix(1, 3, 2)), DegenerateInput);
}
