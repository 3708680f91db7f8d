#pragma once

// Acceptance criteria as executable checks. Each check returns the measured
// quantity next to its pinned threshold; suites group them for `verify`.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "diaggeo/harness.hpp"

namespace diaggeo::acceptance {

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  double measured = 0.0;
  double threshold = 0.0;
  std::string detail;
  double seconds = 0.0;
};

using DiagFn = std::function<HessianDiagonal(const Weights&, std::size_t)>;

inline HessianDiagonal default_diag(const Weights& w, std::size_t k) { return hessian_diag_layer(w, k); }

namespace detail {

using Clock = std::chrono::steady_clock;

inline CriterionResult start(int id, std::string name) {
  CriterionResult r;
  r.id = id;
  r.name = std::move(name);
  return r;
}

inline double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

inline std::string fmt(double x) {
  std::ostringstream os;
  os.precision(4);
  os << x;
  return os.str();
}

inline Weights random_net(const std::vector<std::size_t>& dims, std::uint64_t seed, double scale) {
  RngStream rng(seed, StreamTag::init);
  std::vector<Matrix> layers;
  for (std::size_t k = 1; k < dims.size(); ++k) {
    Matrix m(dims[k], dims[k - 1]);
    for (auto& x : m.values()) x = rng.normal(0.0, scale);
    layers.push_back(std::move(m));
  }
  return Weights(std::move(layers));
}

/// Full-batch theory-preset run of one optimizer, stopping at loss <= 1e-3 d.
inline ExperimentConfig theory_config(std::size_t d, OptimizerKind kind, double eta, std::uint64_t seed,
                                      std::uint64_t max_steps = 200000) {
  ExperimentConfig c;
  c.preset = Preset::theory;
  c.problem.d = d;
  c.network.alpha = 2.0;
  c.network.theory_mode = true;
  c.schedule = Schedule::single(preset_spec(Preset::theory, kind, eta));
  c.steps = max_steps;
  c.stop_loss_per_dim = 1e-3;
  c.stats.hessian_route = false;
  c.stats.record_phases = false;
  c.seeds = {seed, seed, seed};
  return c;
}

inline constexpr double kSgdmEta = 1e-3;
inline constexpr double kAdamTheoryEta = 1e-4;

/// Closed-form R_med of both layers over the loss window [0.9 L0, 1e-3 d].
inline WindowSeries window_series(const ExperimentConfig& cfg) {
  Simulation sim(cfg);
  const double lo = 1e-3 * static_cast<double>(cfg.problem.d);
  std::vector<double> loss, r1, r2;
  for (std::uint64_t t = 0; t <= cfg.steps; ++t) {
    const double l = loss_bar(sim.weights(), sim.problem());
    if (!std::isfinite(l)) break;
    loss.push_back(l);
    double a = std::numeric_limits<double>::quiet_NaN(), b = a;
    if (l <= 0.9 * loss.front()) {
      a = r_med_closed_form_layer(sim.weights(), 1);
      b = r_med_closed_form_layer(sim.weights(), 2);
    }
    r1.push_back(a);
    r2.push_back(b);
    if (l <= lo || t == cfg.steps) break;
    sim.step();
  }
  WindowSeries s;
  const auto win = loss_window(loss, 0.9, lo);
  if (!win || !(loss.back() <= lo)) return s;
  s.rmed1.assign(r1.begin() + static_cast<std::ptrdiff_t>(win->first), r1.begin() + static_cast<std::ptrdiff_t>(win->second) + 1);
  s.rmed2.assign(r2.begin() + static_cast<std::ptrdiff_t>(win->first), r2.begin() + static_cast<std::ptrdiff_t>(win->second) + 1);
  return s;
}

struct PairRuns {
  RunResult sgdm, adam;
};

/// SGDM and Adam from the same initialization at d = 256, every step recorded.
inline const PairRuns& theory_pair_d256() {
  static const PairRuns runs = [] {
    PairRuns p;
    p.sgdm = run_experiment(theory_config(256, OptimizerKind::SGDM, kSgdmEta, 1), false);
    p.adam = run_experiment(theory_config(256, OptimizerKind::Adam, kAdamTheoryEta, 1), false);
    return p;
  }();
  return runs;
}

}  // namespace detail

// 1 -------------------------------------------------------------------------
inline CriterionResult fd_diagonal(const DiagFn& diag = default_diag) {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(1, "fd-oracle-diagonal");
  r.threshold = 1e-6;
  double worst = 0.0;
  for (std::uint64_t n = 0; n < 20; ++n) {
    const std::size_t depth = 2 + n % 3, d = 3 + n % 6;
    std::vector<std::size_t> dims(depth, d);
    dims.push_back(1);
    const auto w = detail::random_net(dims, 1000 + n, 0.6);
    const auto p = generate_problem(d, {0.5, 1.5}, 0.0, 2000 + n);
    for (std::size_t k = 1; k <= depth; ++k)
      worst = std::max(worst, max_rel_error(diag(w, k).values, fd_diag_layer(w, p, k)));
  }
  r.seconds = detail::since(t0);
  r.measured = worst;
  r.pass = worst <= r.threshold && r.seconds < 10.0;
  r.detail = "20 nets, depth 2-4, d 3-8; max rel err " + detail::fmt(worst) + ", " + detail::fmt(r.seconds) + " s";
  return r;
}

// 2 -------------------------------------------------------------------------
inline CriterionResult fd_full_two_layer() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(2, "fd-oracle-full-hessian");
  r.threshold = 1e-6;
  const std::size_t d = 4;
  const auto w = detail::random_net({d, d, 1}, 77, 0.6);
  const auto p = generate_problem(d, {0.5, 1.5}, 0.0, 78);
  const Matrix H = assemble(hessian_full_two_layer(w, p));
  const std::size_t n = H.rows();
  std::vector<IndexPair> pairs;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) pairs.push_back({i, j});
  const auto fd = hessian_fd_oracle([&](const Weights& x) { return loss_bar<long double>(x, p); }, w, pairs);
  const double err = max_rel_error(H.values(), fd);
  const double asym = max_abs_diff(H, transpose(H));
  r.seconds = detail::since(t0);
  r.measured = err;
  r.pass = err <= r.threshold && asym <= 1e-12 && r.seconds < 10.0;
  r.detail = std::to_string(n * n) + " entries; max rel err " + detail::fmt(err) + ", asymmetry " + detail::fmt(asym);
  return r;
}

// 3 -------------------------------------------------------------------------
inline CriterionResult loss_equivalence() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(3, "loss-equivalence");
  r.threshold = 1e-10;
  const std::size_t d = 8;
  const auto p = generate_problem(d, {0.5, 1.5}, 0.0, 5);
  const auto data = make_whitened_dataset(p.A, 64, 6);
  std::vector<double> diffs;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto w = detail::random_net({d, d, 1}, 300 + s, 0.5);
    diffs.push_back(loss_full(w, data.X, data.Y) - loss_bar(w, p));
  }
  const auto [mn, mx] = std::minmax_element(diffs.begin(), diffs.end());
  r.measured = *mx - *mn;
  r.pass = r.measured <= r.threshold;
  r.seconds = detail::since(t0);
  r.detail = "spread of loss_full - loss_bar over 10 nets: " + detail::fmt(r.measured) + " (constant " +
             detail::fmt(diffs.front()) + ")";
  return r;
}

// 4 -------------------------------------------------------------------------
inline CriterionResult rmed_routes() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(4, "rmed-closed-vs-hessian");
  r.threshold = 1e-10;
  double worst = 0.0;
  std::size_t compared = 0, missing = 0;
  for (auto kind : {OptimizerKind::SGDM, OptimizerKind::Adam}) {
    auto cfg = detail::theory_config(64, kind, kind == OptimizerKind::SGDM ? detail::kSgdmEta : detail::kAdamTheoryEta, 2);
    cfg.stats.hessian_route = true;
    const auto res = run_experiment(cfg, false);
    for (const auto& rec : res.records) {
      for (auto [h, c] : {std::pair{rec.rmed_l1_hess, rec.rmed_l1_closed}, std::pair{rec.rmed_l2_hess, rec.rmed_l2_closed}}) {
        if (h.has_value() != c.has_value()) ++missing;
        if (h && c) {
          worst = std::max(worst, std::abs(*h - *c));
          ++compared;
        }
      }
    }
  }
  r.measured = worst;
  r.pass = worst <= r.threshold && missing == 0 && compared > 0;
  r.seconds = detail::since(t0);
  r.detail = std::to_string(compared) + " layer-steps compared over an SGDM and an Adam run, max |diff| " +
             detail::fmt(worst) + (missing ? ", " + std::to_string(missing) + " one-sided" : "");
  return r;
}

// 6 (used by 5) ---------------------------------------------------------------
inline constexpr std::size_t kOracleTrials = 10000;

inline OracleEstimate oracle_at(std::size_t d) { return gaussian_ratio_oracle(d, kOracleTrials, 17); }

inline CriterionResult gaussian_oracle() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(6, "gaussian-ratio-oracle");
  r.threshold = 5.0;
  bool one_ok = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) one_ok &= gaussian_ratio_oracle(1, 100, seed).mean == 1.0;
  const auto o64 = oracle_at(64), o1024 = oracle_at(1024);
  const double sep = (o1024.mean - o64.mean) / std::hypot(o64.sem, o1024.sem);
  const double env = gaussian_ratio_envelope(1024);
  const double rel = std::abs(o1024.mean / env - 1.0);
  r.measured = sep;
  r.pass = one_ok && sep >= r.threshold && rel <= 0.25;
  r.seconds = detail::since(t0);
  r.detail = "oracle(64)=" + detail::fmt(o64.mean) + " oracle(1024)=" + detail::fmt(o1024.mean) + " separation " +
             detail::fmt(sep) + " sem; envelope " + detail::fmt(env) + " (rel dev " + detail::fmt(rel) + ")" +
             (one_ok ? "" : "; oracle(1) != 1");
  return r;
}

// 5 -------------------------------------------------------------------------
inline constexpr std::size_t kGapReplicates = 16;
inline constexpr double kGapBudgetSeconds = 180.0;

inline GapReport gap_sweep(const std::vector<std::size_t>& dims, std::size_t replicates) {
  std::vector<RunPair> pairs;
  std::map<std::size_t, double> oracle;
  for (std::size_t d : dims) {
    oracle[d] = oracle_at(d).mean;
    for (std::uint64_t s = 1; s <= replicates; ++s) {
      RunPair p;
      p.d = d;
      p.sgdm = detail::window_series(detail::theory_config(d, OptimizerKind::SGDM, detail::kSgdmEta, s));
      p.adam = detail::window_series(detail::theory_config(d, OptimizerKind::Adam, detail::kAdamTheoryEta, s));
      pairs.push_back(std::move(p));
    }
  }
  return gap_report(pairs, {}, oracle);
}

inline CriterionResult rmed_gap() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(5, "rmed-gap");
  const GapTolerances tol;
  const auto rep = gap_sweep({64, 256, 1024}, kGapReplicates);
  r.seconds = detail::since(t0);
  r.threshold = tol.adam_fraction;
  std::ostringstream os;
  for (const auto& row : rep.rows)
    os << "d=" << row.d << ": sgdm " << detail::fmt(row.sgdm_median[0]) << "/" << detail::fmt(row.sgdm_median[1])
       << " adam " << detail::fmt(row.adam_median[0]) << "/" << detail::fmt(row.adam_median[1]) << " in-band "
       << detail::fmt(row.adam_fraction) << " oracle " << detail::fmt(row.oracle.value_or(0.0)) << "; ";
  os << "slopes " << detail::fmt(rep.slope[0].value_or(0.0)) << "/" << detail::fmt(rep.slope[1].value_or(0.0));
  os << "; checks band=" << rep.adam_band_ok << " floor=" << rep.sgdm_floor_ok << " increasing=" << rep.sgdm_increasing
     << " slope=" << rep.slope_positive << " oracle=" << rep.oracle_in_band;
  for (const auto& f : rep.flags) os << "; " << f;
  os << "; " << detail::fmt(r.seconds) << " s (budget " << kGapBudgetSeconds << " s)";
  r.measured = rep.rows.empty() ? 0.0 : rep.rows.front().adam_fraction;
  for (const auto& row : rep.rows) r.measured = std::min(r.measured, row.adam_fraction);
  r.pass = rep.pass && r.seconds < kGapBudgetSeconds;
  r.detail = os.str();
  return r;
}

// 7 -------------------------------------------------------------------------
inline CriterionResult first_phase() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(7, "first-phase-closed-form");
  r.threshold = 1e-3;
  const std::size_t d = 32;
  auto spec = preset_spec(Preset::theory, OptimizerKind::SGDM, 3e-3);
  spec.beta = 0.0;
  auto cfg = detail::theory_config(d, OptimizerKind::SGDM, 3e-3, 3);
  cfg.schedule = Schedule::single(spec);
  Simulation sim(cfg);
  SgdPhaseDetector det(PhaseParams{cfg.network.alpha, spec.eta, 1e-3, d});
  std::vector<std::vector<double>> w2;
  bool reached = false;
  StepIndex T1 = 0;
  for (std::uint64_t t = 0; t < 5000; ++t) {
    const ForwardCache fc(sim.weights());
    det.feed(make_summary(t, sim.weights(), sim.problem(), fc));
    if (t <= 50) w2.emplace_back(sim.weights()[1].values().begin(), sim.weights()[1].values().end());
    if (const auto& hit = det.times().T1; hit && !reached) {
      reached = true;
      T1 = *hit;
    }
    if (reached && t >= 50) break;
    sim.step();
  }
  if (!reached || T1 <= 50) {
    r.detail = reached ? "T1 = " + std::to_string(T1) + " does not exceed 50" : "T1 not reached";
    r.measured = std::numeric_limits<double>::infinity();
    r.seconds = detail::since(t0);
    return r;
  }
  const auto model = first_phase_model(w2[0], w2[1], frobenius(sim.problem().A), spec.eta, spec.beta);
  double worst = 0.0;
  for (std::size_t t = 0; t < w2.size(); ++t) {
    const auto cf = model.evaluate(static_cast<double>(t));
    for (std::size_t i = 0; i < d; ++i) worst = std::max(worst, std::abs(cf[i] - w2[t][i]) / std::abs(w2[t][i]));
  }
  r.measured = worst;
  r.pass = worst <= r.threshold;
  r.seconds = detail::since(t0);
  r.detail = "SGD (beta=0), eta=3e-3, T1=" + std::to_string(T1) + "; max rel err over t<=50: " + detail::fmt(worst);
  return r;
}

// 8 -------------------------------------------------------------------------
inline CriterionResult sign_descent() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(8, "adam-sign-descent");
  r.threshold = 0.1;
  const std::size_t d = 64;
  const double eta = detail::kAdamTheoryEta;
  Simulation sim(detail::theory_config(d, OptimizerKind::Adam, eta, 1));
  AdamPhaseDetector det(eta, d);
  std::vector<std::pair<double, double>> range;  // per update: min and max |delta| / eta
  for (std::uint64_t t = 0; t < 100000; ++t) {
    const ForwardCache fc(sim.weights());
    det.feed(make_summary(t, sim.weights(), sim.problem(), fc));
    if (det.times().T1) break;
    const Weights before = sim.weights();
    sim.step();
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (std::size_t l = 0; l < before.depth(); ++l)
      for (std::size_t i = 0; i < before[l].size(); ++i) {
        const double m = std::abs(sim.weights()[l][i] - before[l][i]) / eta;
        lo = std::min(lo, m);
        hi = std::max(hi, m);
      }
    range.emplace_back(lo, hi);
  }
  const auto T1 = det.times().T1;
  if (!T1) {
    r.detail = "Adam T1 not reached";
    r.measured = std::numeric_limits<double>::infinity();
    r.seconds = detail::since(t0);
    return r;
  }
  const std::size_t probe = (*T1 + 3) / 4;
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (std::size_t t = probe; t < *T1; ++t) {
    lo = std::min(lo, range[t].first);
    hi = std::max(hi, range[t].second);
  }
  r.measured = std::max(1.0 - lo, hi - 1.0);
  r.pass = lo >= 0.9 && hi <= 1.1;
  r.seconds = detail::since(t0);
  r.detail = "d=64, T1=" + std::to_string(*T1) + ", updates " + std::to_string(probe) + ".." + std::to_string(*T1 - 1) +
             ": |delta|/eta in [" + detail::fmt(lo) + ", " + detail::fmt(hi) + "]";
  return r;
}

// 9 -------------------------------------------------------------------------
inline CriterionResult matched_loss() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(9, "matched-loss-ordering");
  r.threshold = 1.0;
  const auto& runs = detail::theory_pair_d256();
  const double d = 256;
  const std::vector<double> levels{d / 2, d / 10, d / 100};
  // a = SGDM, b = Adam: ratio > 1 means SGDM's R_med is larger.
  const auto cmp = compare_trajectories(runs.sgdm.records, runs.adam.records, levels);
  double worst = std::numeric_limits<double>::infinity();
  std::ostringstream os;
  for (const auto& row : cmp.rows) {
    worst = std::min({worst, row.ratio[0], row.ratio[1]});
    os << "L=" << row.level << ": sgdm " << detail::fmt(row.rmed_a[0]) << "/" << detail::fmt(row.rmed_a[1]) << " adam "
       << detail::fmt(row.rmed_b[0]) << "/" << detail::fmt(row.rmed_b[1]) << "; ";
  }
  for (const auto& n : cmp.notes) os << n << "; ";
  r.measured = cmp.rows.empty() ? 0.0 : worst;
  r.pass = cmp.rows.size() == levels.size() && worst > r.threshold;
  r.seconds = detail::since(t0);
  os << "min SGDM/Adam ratio " << detail::fmt(r.measured);
  r.detail = os.str();
  return r;
}

// 10 ------------------------------------------------------------------------
inline CriterionResult low_rank() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(10, "low-rank-diagnostics");
  r.threshold = 0.2;
  const auto& runs = detail::theory_pair_d256();
  const double d = 256;
  std::ostringstream os;
  bool ok = true;
  double ru[2] = {0, 0}, worst_delta = 0.0;
  int i = 0;
  for (const RunResult* run : {&runs.sgdm, &runs.adam}) {
    const char* name = i == 0 ? "sgdm" : "adam";
    if (!(run->final_loss <= 1e-3 * d)) {
      ok = false;
      os << name << " did not converge; ";
    }
    const Weights& w = run->final_weights;
    const auto sd = svd_diagnostics(w[0], 0.9);
    const auto fit = rank1_fit(w[0], w[1]);
    ru[i] = sd.ru;
    worst_delta = std::max({worst_delta, fit.delta1, fit.delta2});
    ok &= sd.stable_rank <= 1.2 && fit.delta1 <= 0.2 && fit.delta2 <= 0.2;
    os << name << ": stable rank " << detail::fmt(sd.stable_rank) << ", deltas " << detail::fmt(fit.delta1) << "/"
       << detail::fmt(fit.delta2) << ", R_u " << detail::fmt(sd.ru);
    if (i == 1) {
      double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
      for (double u : fit.u) {
        lo = std::min(lo, std::abs(u) * std::sqrt(d));
        hi = std::max(hi, std::abs(u) * std::sqrt(d));
      }
      ok &= lo >= 0.8 && hi <= 1.2;
      os << ", |u_i| sqrt(d) in [" << detail::fmt(lo) << ", " << detail::fmt(hi) << "]";
    }
    os << "; ";
    ++i;
  }
  ok &= ru[1] < ru[0];
  r.measured = worst_delta;
  r.pass = ok;
  r.seconds = detail::since(t0);
  r.detail = os.str();
  return r;
}

// 11 ------------------------------------------------------------------------
inline CriterionResult rdiag_trend() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(11, "rdiag-trend");
  r.threshold = 100.0;
  double worst = std::numeric_limits<double>::infinity();
  std::ostringstream os;
  for (auto kind : {OptimizerKind::SGDM, OptimizerKind::Adam}) {
    auto cfg = detail::theory_config(16, kind, kind == OptimizerKind::SGDM ? detail::kSgdmEta : detail::kAdamTheoryEta, 4);
    cfg.stats.record_hessian_full = true;
    cfg.record_every = 100;
    const auto res = run_experiment(cfg, false);
    const auto& first = res.records.front();
    const auto& last = res.records.back();
    double ratio = 0.0;
    if (first.r_diag_mean && last.r_diag_mean && *last.r_diag_mean > 0.0) ratio = *first.r_diag_mean / *last.r_diag_mean;
    worst = std::min(worst, ratio);
    os << to_string(kind) << ": R_diag " << detail::fmt(first.r_diag_mean.value_or(0.0)) << " -> "
       << detail::fmt(last.r_diag_mean.value_or(0.0)) << " (step " << last.step << ", ratio " << detail::fmt(ratio) << "); ";
  }
  r.measured = worst;
  r.pass = worst >= r.threshold;
  r.seconds = detail::since(t0);
  r.detail = os.str();
  return r;
}

// 12 ------------------------------------------------------------------------
inline CriterionResult alignment_ordering() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(12, "alignment-ordering");
  r.threshold = 0.8;
  ExperimentConfig cfg;
  cfg.preset = Preset::experiment;
  cfg.problem.d = 256;
  cfg.network.alpha = 1.0;
  cfg.schedule = Schedule::single(preset_spec(Preset::experiment, OptimizerKind::Adam, 1e-4));
  cfg.steps = 200000;
  cfg.stop_loss_per_dim = 1e-3;
  cfg.record_every = 5;
  cfg.stats.hessian_route = false;
  cfg.stats.record_phases = false;
  cfg.stats.record_alignment = true;
  cfg.stats.rmed.stabilizer_factor = 0.001;
  cfg.seeds = {1, 1, 1};
  const auto res = run_experiment(cfg, false);
  std::map<std::uint64_t, double> loss_at;
  for (const auto& rec : res.records) loss_at[rec.step] = rec.loss_bar;
  const double l0 = res.records.front().loss_bar;
  std::size_t n = 0, good = 0;
  for (const auto& row : res.alignment) {
    if (row.layer != 1) continue;
    const auto it = loss_at.find(row.step);
    if (it == loss_at.end() || !(it->second <= 0.9 * l0)) continue;
    ++n;
    if (row.rho_adapt < row.rho_g && row.cv_adapt < row.cv_g) ++good;
  }
  r.measured = n ? static_cast<double>(good) / static_cast<double>(n) : 0.0;
  r.pass = n > 0 && res.status == RunStatus::stopped && r.measured >= r.threshold;
  r.seconds = detail::since(t0);
  r.detail = "d=256 Adam, layer 1, " + std::to_string(good) + "/" + std::to_string(n) +
             " sampled mid-training steps ordered; run " + std::string(to_string(res.status)) + " at step " +
             std::to_string(res.final_step);
  return r;
}

// 13 ------------------------------------------------------------------------
inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline CriterionResult determinism() {
  const auto t0 = detail::Clock::now();
  auto r = detail::start(13, "determinism");
  r.threshold = 0.0;
  ExperimentConfig cfg;
  cfg.preset = Preset::experiment;
  cfg.problem.d = 12;
  cfg.problem.sigma = 0.05;
  cfg.schedule = Schedule({{0, preset_spec(Preset::experiment, OptimizerKind::SGDM)},
                           {150, preset_spec(Preset::experiment, OptimizerKind::Adam)}});
  cfg.steps = 400;
  cfg.record_every = 7;
  cfg.stats.record_hessian_full = true;
  cfg.stats.record_svd = true;
  cfg.stats.record_alignment = true;
  cfg.stats.rmed.stabilizer_factor = 0.001;
  cfg.seeds = {3, 4, 5};
  const auto base = std::filesystem::temp_directory_path() / "diaggeo_determinism";
  std::filesystem::remove_all(base);
  std::size_t diffs = 0;
  std::string names;
  for (const char* run : {"a", "b"}) {
    cfg.output.path = (base / run).string();
    run_experiment(cfg, true);
  }
  for (const char* f : {"records.csv", "phases.json", "alignment.csv"}) {
    const auto a = slurp(base / "a" / f), b = slurp(base / "b" / f);
    if (a.empty() || a != b) {
      ++diffs;
      names += std::string(" ") + f;
    }
  }
  std::filesystem::remove_all(base);
  r.measured = static_cast<double>(diffs);
  r.pass = diffs == 0;
  r.seconds = detail::since(t0);
  r.detail = diffs ? "differing or empty:" + names : "records.csv, phases.json, alignment.csv byte-identical across reruns";
  return r;
}

// ---------------------------------------------------------------------------
// Suites

struct Suite {
  std::string name;
  std::vector<std::function<CriterionResult()>> checks;
};

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"fd-oracle", "loss",      "rmed-routes", "rmed-gap",  "oracle",
                                              "first-phase", "sign-descent", "matched-loss", "low-rank", "rdiag",
                                              "alignment", "determinism", "all"};
  return names;
}

inline std::vector<std::function<CriterionResult()>> suite_checks(const std::string& name) {
  using F = std::function<CriterionResult()>;
  const std::map<std::string, std::vector<F>> table{
      {"fd-oracle", {[] { return fd_diagonal(); }, fd_full_two_layer}},
      {"loss", {loss_equivalence}},
      {"rmed-routes", {rmed_routes}},
      {"rmed-gap", {rmed_gap}},
      {"oracle", {gaussian_oracle}},
      {"first-phase", {first_phase}},
      {"sign-descent", {sign_descent}},
      {"matched-loss", {matched_loss}},
      {"low-rank", {low_rank}},
      {"rdiag", {rdiag_trend}},
      {"alignment", {alignment_ordering}},
      {"determinism", {determinism}},
  };
  if (name == "all") {
    return {[] { return fd_diagonal(); }, fd_full_two_layer, loss_equivalence, rmed_routes, rmed_gap,
            gaussian_oracle, first_phase, sign_descent, matched_loss, low_rank, rdiag_trend,
            alignment_ordering, determinism};
  }
  const auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown verify suite '" + name + "'");
  return it->second;
}

/// One line per criterion: "[PASS] C<id> <name>: measured=<x> threshold=<y> | <detail>".
inline std::string format_line(const CriterionResult& c) {
  return std::string(c.pass ? "[PASS]" : "[FAIL]") + " C" + std::to_string(c.id) + " " + c.name +
         ": measured=" + detail::fmt(c.measured) + " threshold=" + detail::fmt(c.threshold) + " | " + c.detail;
}

inline json report_json(const std::string& suite, const std::vector<CriterionResult>& results) {
  json crit = json::array();
  bool all = true;
  for (const auto& c : results) {
    all &= c.pass;
    crit.push_back({{"id", c.id},
                    {"name", c.name},
                    {"pass", c.pass},
                    {"measured", std::isfinite(c.measured) ? json(c.measured) : json(format_double(c.measured))},
                    {"threshold", c.threshold},
                    {"seconds", c.seconds},
                    {"detail", c.detail}});
  }
  return json{{"suite", suite}, {"pass", all}, {"criteria", crit}};
}

/// Runs a suite; `on_result` sees each result as soon as it is available.
inline std::vector<CriterionResult> run_suite(const std::string& name,
                                              const std::function<void(const CriterionResult&)>& on_result = {}) {
  std::vector<CriterionResult> out;
  for (const auto& check : suite_checks(name)) {
    out.push_back(check());
    if (on_result) on_result(out.back());
  }
  return out;
}

}  // namespace diaggeo::acceptance
