#include <gtest/gtest.h>

#include <cmath>

#include "diaggeo/harness.hpp"
#include "diaggeo/theory.hpp"

using namespace diaggeo;

namespace {

StepSummary summary(StepIndex t, double max_w, std::vector<double> E, std::vector<double> g = {}) {
  StepSummary s;
  s.step = t;
  s.max_abs_weight = max_w;
  s.E = std::move(E);
  s.g_out = std::move(g);
  return s;
}

}  // namespace

TEST(PhaseParams, DerivedThresholds) {
  const PhaseParams p{2.0, 1e-3, 1e-3, 64};
  EXPECT_NEAR(p.t1_threshold(), 1.0 / 64.0, 1e-15);
  EXPECT_NEAR(p.eps0(), std::pow(64.0, 0.5) + 1e-3 * std::log(std::sqrt(64.0 / 1e-3)), 1e-12);
  EXPECT_GT(p.eps0(), 0.0);
  EXPECT_THROW((PhaseParams{2.0, 1e-3, 1.5, 64}.validate()), std::invalid_argument);
}

TEST(SgdDetector, FrozenAtZeroHasNoTimes) {
  std::vector<StepSummary> tr;
  for (StepIndex t = 0; t < 100; ++t) tr.push_back(summary(t, 0.0, {-5.0, -6.0}));
  // eps0 ~ 2.83 here, so the error threshold is about -1.68.
  const auto times = detect_sgd_phases(tr, PhaseParams{1.0, 1e-3, 1e-3, 4});
  EXPECT_FALSE(times.T1);
  EXPECT_FALSE(times.T2);
  EXPECT_FALSE(times.T3);
}

TEST(SgdDetector, ConstructedCrossingAtSeventeen) {
  const PhaseParams p{1.0, 1e-3, 1e-3, 16};  // threshold 16^{-1/2} = 0.25
  std::vector<StepSummary> tr;
  for (StepIndex t = 0; t < 40; ++t) tr.push_back(summary(t, t >= 17 ? 0.3 : 0.2, {-1.0}));
  EXPECT_EQ(detect_sgd_phases(tr, p).T1, 17u);
}

TEST(SgdDetector, ThirdPhaseOnSquaredErrorNorm) {
  const PhaseParams p{1.0, 1e-2, 1e-2, 4};
  std::vector<StepSummary> tr{summary(0, 0.0, {-1.0, -1.0}), summary(1, 0.0, {-0.2, 0.0}),
                              summary(2, 0.0, {-0.05, 0.05})};
  const auto t = detect_sgd_phases(tr, p);
  EXPECT_EQ(t.T3, 2u);
}

TEST(SgdDetector, LooserThresholdNeverDetectsLater) {
  RngStream rng(3, StreamTag::oracle);
  std::vector<StepSummary> tr;
  double w = 0.0, e = -5.0;
  for (StepIndex t = 0; t < 300; ++t) {
    w += std::abs(rng.normal(0.0, 0.01));
    e += std::abs(rng.normal(0.0, 0.03));
    tr.push_back(summary(t, w, {e, e - 0.5}));
  }
  for (double alpha : {0.5, 1.0, 2.0}) {
    const auto tight = detect_sgd_phases(tr, PhaseParams{alpha, 1e-3, 1e-3, 64});
    const auto loose = detect_sgd_phases(tr, PhaseParams{alpha + 0.5, 1e-3, 0.5, 64});
    if (tight.T1) {
      EXPECT_LE(*loose.T1, *tight.T1);
    }
    if (tight.T3) {
      EXPECT_LE(*loose.T3, *tight.T3);
    }
  }
}

TEST(AdamDetector, ErrorAlwaysBelowMinusOneHasNoT1) {
  std::vector<StepSummary> tr;
  for (StepIndex t = 0; t < 50; ++t) tr.push_back(summary(t, 0.1, {-1.0, -3.0, -1.5}, {5.0, 5.0, 5.0}));
  const auto times = detect_adam_phases(tr, 1e-4, 3);  // threshold -sqrt(3e-4) ~ -0.017
  EXPECT_FALSE(times.T1);
  EXPECT_FALSE(times.Tf);
}

TEST(AdamDetector, LastFlipOfCoordinateThreeGivesTf) {
  const double eta = 1e-4;
  const std::size_t d = 4;
  const double thr = -std::sqrt(eta * d);
  std::vector<StepSummary> tr;
  for (StepIndex t = 0; t <= 60; ++t) {
    std::vector<double> E(d, -1.0);
    if (t >= 5) E[0] = 0.0;        // T1 = 5
    if (t >= 12) E[1] = thr / 2;   // flips at 12
    if (t >= 20) E[2] = thr;       // flips at 20 (boundary counts)
    if (t >= 40) E[3] = 0.1;       // coordinate 3 is last, at 40
    tr.push_back(summary(t, 0.1, E, std::vector<double>(d, 10.0)));
  }
  const auto times = detect_adam_phases(tr, eta, d);
  EXPECT_EQ(times.T1, 5u);
  EXPECT_EQ(times.Tf_per_coordinate[3], 40u);
  EXPECT_EQ(times.Tf, 40u);
  EXPECT_FALSE(times.Tg);
  EXPECT_EQ(times.Ttilde, 40u);
  EXPECT_LE(*times.T1, *times.Ttilde);
}

TEST(AdamDetector, GradientTimeEndsWindowEarly) {
  const double eta = 1e-4;
  std::vector<StepSummary> tr;
  for (StepIndex t = 0; t <= 30; ++t)
    tr.push_back(summary(t, 0.1, {t >= 3 ? 0.0 : -1.0, -1.0}, {t >= 9 ? 0.001 : 1.0, 1.0}));
  const auto times = detect_adam_phases(tr, eta, 2);
  EXPECT_EQ(times.T1, 3u);
  EXPECT_EQ(times.Tg, 9u);
  EXPECT_EQ(times.Ttilde, 9u);
}

TEST(AdamDetector, StepZeroDoesNotCount) {
  std::vector<StepSummary> tr{summary(0, 0.0, {0.0}), summary(1, 0.0, {-1.0}), summary(2, 0.0, {0.0})};
  EXPECT_EQ(detect_adam_phases(tr, 1e-4, 1).T1, 2u);
}

TEST(FirstPhase, InterpolatesFirstTwoIteratesExactly) {
  const std::vector<double> w0{0.01, -0.02, 0.003}, w1{0.012, -0.019, 0.0041};
  const Matrix A{{1.0, 0.7, 1.2}};
  const auto at0 = first_phase_closed_form(w0, w1, A, 1e-3, 0.9, 0.0);
  const auto at1 = first_phase_closed_form(w0, w1, A, 1e-3, 0.9, 1.0);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(at0[i], w0[i], 1e-15);
    EXPECT_NEAR(at1[i], w1[i], 1e-15);
  }
  const auto m = first_phase_model(w0, w1, frobenius(A), 1e-3, 0.9);
  EXPECT_LT(m.lambda1, 1.0);
  EXPECT_GT(m.lambda2, 1.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(m.C1[i] + m.C2[i], w0[i], 1e-15);
}

TEST(FirstPhase, SatisfiesSecondOrderRecurrence) {
  // x_{t+2} = (l1 + l2) x_{t+1} - l1 l2 x_t for any C1 l1^t + C2 l2^t.
  const std::vector<double> w0{0.5}, w1{0.7};
  const auto m = first_phase_model(w0, w1, 2.0, 0.01, 0.5);
  for (int t = 0; t < 10; ++t) {
    const double a = m.evaluate(t)[0], b = m.evaluate(t + 1)[0], c = m.evaluate(t + 2)[0];
    EXPECT_NEAR(c, (m.lambda1 + m.lambda2) * b - m.lambda1 * m.lambda2 * a, 1e-12);
  }
}

TEST(FirstPhase, RejectsViolatedPrecondition) {
  const std::vector<double> w{0.1};
  EXPECT_THROW(first_phase_model(w, w, 10.0, 0.5, 0.9), std::domain_error);
  EXPECT_THROW(first_phase_model(w, std::vector<double>{1, 2}, 1.0, 0.01, 0.9), std::invalid_argument);
}

TEST(GaussianOracle, DimensionOneIsExactlyOne) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) EXPECT_EQ(gaussian_ratio_oracle(1, 100, seed).mean, 1.0);
  EXPECT_THROW(gaussian_ratio_oracle(8, 99, 0), std::invalid_argument);
}

TEST(GaussianOracle, TwoDimensionsMatchesClosedForm) {
  // For d = 2 the ratio is max/mean of two chi-square(1) draws = 2 max/(x+y);
  // E = 2 E[max(a, b)/(a + b)] with a/(a+b) ~ Beta(1/2, 1/2), so E[max] = 1/2 + 1/pi.
  const auto o = gaussian_ratio_oracle(2, 200000, 4);
  EXPECT_NEAR(o.mean, 2.0 * (0.5 + 1.0 / std::numbers::pi), 4.0 * o.sem);
}

TEST(GaussianOracle, GrowsWithDimension) {
  const auto a = gaussian_ratio_oracle(16, 2000, 1), b = gaussian_ratio_oracle(256, 2000, 1);
  EXPECT_GT(b.mean - a.mean, 5.0 * std::hypot(a.sem, b.sem));
  EXPECT_NEAR(gaussian_ratio_envelope(1024), 23.7, 0.1);
}

TEST(Quantile, LinearInterpolation) {
  const std::vector<double> x{4, 1, 3, 2};
  EXPECT_EQ(quantile(x, 0.0), 1.0);
  EXPECT_EQ(quantile(x, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(quantile(x, 0.5), 2.5);
}

TEST(SampleEvenly, KeepsEndpoints) {
  std::vector<double> x(1000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
  const auto s = sample_evenly(x, 64);
  ASSERT_EQ(s.size(), 64u);
  EXPECT_EQ(s.front(), 0.0);
  EXPECT_EQ(s.back(), 999.0);
  EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
  EXPECT_EQ(sample_evenly(std::vector<double>{1, 2}, 64).size(), 2u);
}

TEST(LossWindow, FindsBoundsAndEmpty) {
  const std::vector<double> loss{10, 9.5, 8.9, 5, 1, 0.5, 0.4};
  const auto w = loss_window(loss, 0.9, 1.0);
  ASSERT_TRUE(w);
  EXPECT_EQ(w->first, 2u);
  EXPECT_EQ(w->second, 4u);
  EXPECT_FALSE(loss_window(std::vector<double>{10, 9.5}, 0.9, 1.0));
}

TEST(LsSlope, KnownLineAndDegenerate) {
  const std::vector<double> x{1, 2, 3}, y{3, 5, 7};
  EXPECT_DOUBLE_EQ(*ls_slope(x, y), 2.0);
  EXPECT_FALSE(ls_slope(std::vector<double>{1, 1}, std::vector<double>{1, 2}));
}

TEST(GapReport, IdenticalTrajectoriesHaveZeroGapAndUndefinedSlope) {
  WindowSeries s{{2.0, 3.0, 4.0}, {2.5, 3.5, 4.5}};
  const std::vector<RunPair> pairs{{64, s, s}};
  const auto rep = gap_report(pairs);
  ASSERT_EQ(rep.rows.size(), 1u);
  EXPECT_EQ(rep.rows[0].gap[0], 0.0);
  EXPECT_EQ(rep.rows[0].gap[1], 0.0);
  EXPECT_FALSE(rep.slope[0]);
  EXPECT_FALSE(rep.pass);
  EXPECT_NE(std::find(rep.flags.begin(), rep.flags.end(), "slope undefined for layer 1"), rep.flags.end());
}

TEST(GapReport, SyntheticSweepPasses) {
  std::vector<RunPair> pairs;
  std::map<std::size_t, double> oracle;
  for (std::size_t d : {64u, 256u, 1024u}) {
    const double level = 2.0 * std::log(static_cast<double>(d));
    oracle[d] = level * 1.1;
    for (int rep = 0; rep < 3; ++rep)
      pairs.push_back({d, {{level, level + rep}, {level, level + rep}}, {{1.01, 1.02}, {1.05, 1.0}}});
  }
  const auto rep = gap_report(pairs, {}, oracle);
  EXPECT_TRUE(rep.pass) << (rep.flags.empty() ? "" : rep.flags.front());
  EXPECT_GT(*rep.slope[0], 0.0);
  EXPECT_DOUBLE_EQ(rep.rows[0].adam_fraction, 1.0);
}

TEST(GapReport, FlagsEmptyWindowsAndBandMisses) {
  std::vector<RunPair> pairs{{64, {{5.0}, {5.0}}, {{}, {}}}, {256, {{6.0}, {6.0}}, {{2.0}, {1.0}}}};
  const auto rep = gap_report(pairs);
  EXPECT_FALSE(rep.pass);
  EXPECT_FALSE(rep.adam_band_ok);
  EXPECT_NE(std::find(rep.flags.begin(), rep.flags.end(), "empty window at d=64"), rep.flags.end());
}

TEST(EqualLoss, IdenticalTrajectoriesMatchThemselves) {
  std::vector<LossPoint> tr;
  for (StepIndex t = 0; t < 50; ++t) tr.push_back({t, 100.0 * std::exp(-0.1 * t), 1.0 + t, 2.0 + t});
  const std::vector<double> levels{50.0, 10.0, 1.0, 500.0, 1e-9};
  const auto m = equal_loss_pairs(tr, tr, levels);
  ASSERT_EQ(m.matches.size(), 3u);
  for (const auto& x : m.matches) {
    EXPECT_EQ(x.t_a, x.t_b);
    EXPECT_EQ(x.rmed_a[0], x.rmed_b[0]);
    EXPECT_EQ(x.rmed_a[1], x.rmed_b[1]);
    EXPECT_LE(x.t_a_interp, static_cast<double>(x.t_a));
  }
  EXPECT_EQ(m.notes.size(), 2u);
}

TEST(EqualLoss, FirstDownwardCrossingAndInterpolation) {
  const std::vector<LossPoint> a{{0, 10, 1, 1}, {10, 6, 2, 2}, {20, 2, 3, 3}, {30, 7, 4, 4}, {40, 1, 5, 5}};
  const std::vector<LossPoint> b{{0, 10, 1, 1}, {5, 4, 9, 9}};
  const std::vector<double> levels{4.0};
  const auto m = equal_loss_pairs(a, b, levels);
  ASSERT_EQ(m.matches.size(), 1u);
  EXPECT_EQ(m.matches[0].t_a, 20u);
  EXPECT_DOUBLE_EQ(m.matches[0].t_a_interp, 15.0);
  EXPECT_EQ(m.matches[0].t_b, 5u);
  EXPECT_EQ(m.matches[0].rmed_b[0], 9.0);
}

TEST(SgdPhases, OrderingHoldsInFullBatchRun) {
  // Large alpha keeps the first phase long enough to separate T1 from T2.
  ExperimentConfig c;
  c.problem.d = 64;
  c.network.alpha = 8.0;
  c.schedule = Schedule::single(preset_spec(Preset::theory, OptimizerKind::SGDM, 1e-3));
  c.steps = 20000;
  c.stop_loss_per_dim = 1e-6;
  c.stats.hessian_route = false;
  c.stats.phase_epsilon = 1e-3;
  c.record_every = 1000;
  const auto res = run_experiment(c, false);
  const auto& t = res.sgd_phases;
  ASSERT_TRUE(t.T1 && t.T2 && t.T3);
  EXPECT_LT(*t.T1, *t.T2);
  EXPECT_LE(*t.T2, *t.T3);
}
