#pragma once

// Phase-time detectors, the first-phase momentum closed form, the Gaussian
// max/median oracle, the SGDM-vs-Adam gap report and matched-loss pairing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diaggeo/matrix.hpp"
#include "diaggeo/rng.hpp"
#include "diaggeo/stats.hpp"

namespace diaggeo {

using StepIndex = std::uint64_t;

struct PhaseParams {
  double alpha = 1.0;
  double eta = 1e-3;
  double epsilon = 1e-3;
  std::size_t d = 1;

  void validate() const {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw std::invalid_argument("PhaseParams: epsilon must lie in (0, 1)");
    if (!(alpha > 0.0)) throw std::invalid_argument("PhaseParams: alpha must be positive");
    if (d == 0) throw std::invalid_argument("PhaseParams: d must be >= 1");
  }
  /// eps0 = d^{-(alpha/4 - 1)} + eps * log sqrt(d / eps)
  double eps0() const {
    const double dd = static_cast<double>(d);
    return std::pow(dd, 1.0 - alpha / 4.0) + epsilon * 0.5 * std::log(dd / epsilon);
  }
  /// Weight-magnitude threshold d^{-alpha/2} that ends the first SGD phase.
  double t1_threshold() const { return std::pow(static_cast<double>(d), -alpha / 2.0); }
};

/// Per-step inputs consumed by the detectors.
struct StepSummary {
  StepIndex step = 0;
  double max_abs_weight = 0.0;  ///< over every entry of every layer
  std::vector<double> E;        ///< W_L...W_1 - A (noiseless)
  std::vector<double> g_out;    ///< exact gradient of the output layer
};

struct SgdPhaseTimes {
  std::optional<StepIndex> T1, T2, T3;
};

struct AdamPhaseTimes {
  std::optional<StepIndex> T1, Tg;
  std::vector<std::optional<StepIndex>> Tf_per_coordinate;
  std::optional<StepIndex> Tf, Ttilde;
};

/// Streaming first-hit detector for the SGD phase times.
class SgdPhaseDetector {
 public:
  explicit SgdPhaseDetector(const PhaseParams& p) : w_thr_(p.t1_threshold()), e_thr_(-std::sqrt(p.eps0())), eps_(p.epsilon) {
    p.validate();
  }

  void feed(const StepSummary& s) {
    if (!t_.T1 && s.max_abs_weight >= w_thr_) t_.T1 = s.step;
    if (!t_.T2 && !s.E.empty() && *std::max_element(s.E.begin(), s.E.end()) >= e_thr_) t_.T2 = s.step;
    if (!t_.T3) {
      double n2 = 0.0;
      for (double e : s.E) n2 += e * e;
      if (n2 <= eps_) t_.T3 = s.step;
    }
  }

  const SgdPhaseTimes& times() const noexcept { return t_; }

 private:
  double w_thr_, e_thr_, eps_;
  SgdPhaseTimes t_;
};

/// Streaming detector for the Adam phase times (threshold -sqrt(eta d) on E,
/// d sqrt(eta) on the output-layer gradient).
class AdamPhaseDetector {
 public:
  AdamPhaseDetector(double eta, std::size_t d)
      : e_thr_(-std::sqrt(eta * static_cast<double>(d))), g_thr_(static_cast<double>(d) * std::sqrt(eta)) {
    if (!(eta > 0.0)) throw std::invalid_argument("AdamPhaseDetector: eta must be > 0");
  }

  void feed(const StepSummary& s) {
    if (t_.Tf_per_coordinate.size() < s.E.size()) t_.Tf_per_coordinate.resize(s.E.size());
    if (!t_.T1) {
      if (s.step > 0 && !s.E.empty() && *std::max_element(s.E.begin(), s.E.end()) >= e_thr_) t_.T1 = s.step;
      return;
    }
    if (s.step <= *t_.T1) return;
    if (!t_.Tg)
      for (double g : s.g_out)
        if (std::abs(g) <= g_thr_) {
          t_.Tg = s.step;
          break;
        }
    for (std::size_t i = 0; i < s.E.size(); ++i)
      if (!t_.Tf_per_coordinate[i] && s.E[i] >= e_thr_) t_.Tf_per_coordinate[i] = s.step;
    finalize();
  }

  const AdamPhaseTimes& times() const noexcept { return t_; }

 private:
  void finalize() {
    const auto& f = t_.Tf_per_coordinate;
    if (!f.empty() && std::all_of(f.begin(), f.end(), [](const auto& x) { return x.has_value(); })) {
      StepIndex mx = 0;
      for (const auto& x : f) mx = std::max(mx, *x);
      t_.Tf = mx;
    }
    std::optional<StepIndex> tt;
    for (const auto& c : {t_.Tg, t_.Tf})
      if (c) tt = tt ? std::min(*tt, *c) : *c;
    t_.Ttilde = tt;
  }

  double e_thr_, g_thr_;
  AdamPhaseTimes t_;
};

inline SgdPhaseTimes detect_sgd_phases(std::span<const StepSummary> traj, const PhaseParams& params) {
  SgdPhaseDetector det(params);
  for (const auto& s : traj) det.feed(s);
  return det.times();
}

inline AdamPhaseTimes detect_adam_phases(std::span<const StepSummary> traj, double eta, std::size_t d) {
  AdamPhaseDetector det(eta, d);
  for (const auto& s : traj) det.feed(s);
  return det.times();
}

/// C1 lambda1^t + C2 lambda2^t with lambda_{1,2} = 1 -/+ eta ||A|| / (1 - beta).
struct FirstPhaseModel {
  double lambda1 = 1.0, lambda2 = 1.0;
  std::vector<double> C1, C2;

  std::vector<double> evaluate(double t) const {
    const double p1 = std::pow(lambda1, t), p2 = std::pow(lambda2, t);
    std::vector<double> out(C1.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = C1[i] * p1 + C2[i] * p2;
    return out;
  }
};

inline FirstPhaseModel first_phase_model(std::span<const double> W2_0, std::span<const double> W2_1, double norm_A,
                                         double eta, double beta) {
  if (W2_0.size() != W2_1.size()) throw std::invalid_argument("first_phase_model: length mismatch");
  if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("first_phase_model: beta must lie in [0, 1)");
  const double kappa = eta * norm_A / (1.0 - beta);
  if (!(eta > 0.0) || !(kappa < 1.0) || !(norm_A > 0.0))
    throw std::domain_error("first_phase_model: requires 0 < eta < (1 - beta) / ||A||");
  FirstPhaseModel m;
  m.lambda1 = 1.0 - kappa;
  m.lambda2 = 1.0 + kappa;
  const double gap = m.lambda2 - m.lambda1;
  m.C1.resize(W2_0.size());
  m.C2.resize(W2_0.size());
  for (std::size_t i = 0; i < W2_0.size(); ++i) {
    m.C1[i] = -(W2_1[i] - m.lambda2 * W2_0[i]) / gap;
    m.C2[i] = (W2_1[i] - m.lambda1 * W2_0[i]) / gap;
  }
  return m;
}

inline std::vector<double> first_phase_closed_form(std::span<const double> W2_0, std::span<const double> W2_1,
                                                   const Matrix& A, double eta, double beta, double t) {
  return first_phase_model(W2_0, W2_1, frobenius(A), eta, beta).evaluate(t);
}

struct OracleEstimate {
  double mean = 0.0;
  double std = 0.0;     ///< across trials
  double sem = 0.0;     ///< standard error of the mean
};

/// Monte-Carlo mean of max X_i^2 / median X_i^2 for d iid standard normals.
inline OracleEstimate gaussian_ratio_oracle(std::size_t d, std::size_t trials, std::uint64_t seed) {
  if (d == 0) throw std::invalid_argument("gaussian_ratio_oracle: d must be >= 1");
  if (trials < 100) throw std::invalid_argument("gaussian_ratio_oracle: need at least 100 trials");
  RngStream rng(seed, StreamTag::oracle);
  std::vector<double> x(d);
  double s = 0.0, s2 = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    for (auto& v : x) {
      const double z = rng.normal();
      v = z * z;
    }
    const double r = d == 1 ? 1.0 : max_over_median(x);
    s += r;
    s2 += r * r;
  }
  const double n = static_cast<double>(trials);
  OracleEstimate o;
  o.mean = s / n;
  o.std = std::sqrt(std::max(0.0, s2 / n - o.mean * o.mean));
  o.sem = o.std / std::sqrt(n);
  return o;
}

/// Extreme-value estimate of E[max X_i^2] over the median of chi-square(1).
inline double gaussian_ratio_envelope(std::size_t d) {
  const double ld = std::log(static_cast<double>(d));
  return (2.0 * ld - std::log(ld) - std::log(std::numbers::pi)) / 0.4549;
}

/// Linear-interpolation quantile (q in [0, 1]).
inline double quantile(std::span<const double> x, double q) {
  if (x.empty()) throw std::invalid_argument("quantile: empty input");
  std::vector<double> v(x.begin(), x.end());
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Up to `max_samples` evenly spaced elements (first and last included).
inline std::vector<double> sample_evenly(std::span<const double> x, std::size_t max_samples = 64) {
  if (x.size() <= max_samples || max_samples < 2) return {x.begin(), x.end()};
  std::vector<double> out(max_samples);
  const double stride = static_cast<double>(x.size() - 1) / static_cast<double>(max_samples - 1);
  for (std::size_t i = 0; i < max_samples; ++i)
    out[i] = x[static_cast<std::size_t>(std::llround(stride * static_cast<double>(i)))];
  return out;
}

/// Index range [first, last] from the first step with loss <= hi_frac * loss[0]
/// through the first step with loss <= lo_abs (or the end). Empty if never entered.
inline std::optional<std::pair<std::size_t, std::size_t>> loss_window(std::span<const double> loss, double hi_frac,
                                                                      double lo_abs) {
  if (loss.empty()) return std::nullopt;
  const double hi = hi_frac * loss[0];
  std::size_t i = 0;
  while (i < loss.size() && !(loss[i] <= hi)) ++i;
  if (i == loss.size()) return std::nullopt;
  std::size_t j = i;
  while (j + 1 < loss.size() && !(loss[j] <= lo_abs)) ++j;
  return std::pair{i, j};
}

/// R_med series of one run inside its window.
struct WindowSeries {
  std::vector<double> rmed1, rmed2;
};

struct RunPair {
  std::size_t d = 0;
  WindowSeries sgdm, adam;
};

struct GapTolerances {
  double adam_band_hi = 1.3;
  double adam_fraction = 0.95;
  double sgdm_floor_at_min_d = 2.5;
  double oracle_band = 0.5;
  std::size_t max_samples = 64;
};

struct LayerQuantiles {
  double q10 = 0.0, q50 = 0.0, q90 = 0.0;
};

struct GapRow {
  std::size_t d = 0;
  std::size_t replicates = 0;
  double sgdm_median[2] = {0.0, 0.0};  ///< median over replicates of per-run window medians
  double adam_median[2] = {0.0, 0.0};
  LayerQuantiles sgdm_q[2], adam_q[2];  ///< pooled over sampled steps
  double adam_fraction = 0.0;           ///< sampled Adam steps with both layers in [1, 1 + delta]
  double gap[2] = {0.0, 0.0};           ///< sgdm_median - adam_median
  std::optional<double> oracle;
  std::optional<double> oracle_over_sgdm;
};

struct GapReport {
  std::vector<GapRow> rows;
  std::optional<double> slope[2];  ///< least-squares slope of sgdm_median against ln d
  bool adam_band_ok = false;
  bool sgdm_floor_ok = false;
  bool sgdm_increasing = false;
  bool slope_positive = false;
  bool oracle_in_band = false;
  std::vector<std::string> flags;
  bool pass = false;
};

/// Least-squares slope of y against x; empty when x has fewer than two distinct values.
inline std::optional<double> ls_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) return std::nullopt;
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) return std::nullopt;
  return sxy / sxx;
}

/// Gap verdict over replicated SGDM/Adam pairs grouped by d. `oracle` maps d to
/// the Gaussian max/median mean used as the reference curve.
inline GapReport gap_report(std::span<const RunPair> pairs, const GapTolerances& tol = {},
                                      const std::map<std::size_t, double>& oracle = {}) {
  GapReport rep;
  std::map<std::size_t, std::vector<const RunPair*>> by_d;
  for (const auto& p : pairs) by_d[p.d].push_back(&p);
  bool any_empty = false;
  for (const auto& [d, runs] : by_d) {
    GapRow row;
    row.d = d;
    row.replicates = runs.size();
    std::vector<double> per_run_s[2], per_run_a[2], pooled_s[2], pooled_a[2];
    std::size_t in_band = 0, sampled = 0;
    for (const RunPair* r : runs) {
      const WindowSeries* ser[2] = {&r->sgdm, &r->adam};
      bool empty = false;
      for (const auto* s : ser) empty |= s->rmed1.empty() || s->rmed2.empty();
      if (empty) {
        any_empty = true;
        rep.flags.push_back("empty window at d=" + std::to_string(d));
        continue;
      }
      for (int l = 0; l < 2; ++l) {
        const auto& vs = l == 0 ? r->sgdm.rmed1 : r->sgdm.rmed2;
        const auto& va = l == 0 ? r->adam.rmed1 : r->adam.rmed2;
        const auto ss = sample_evenly(vs, tol.max_samples), sa = sample_evenly(va, tol.max_samples);
        per_run_s[l].push_back(median(ss));
        per_run_a[l].push_back(median(sa));
        pooled_s[l].insert(pooled_s[l].end(), ss.begin(), ss.end());
        pooled_a[l].insert(pooled_a[l].end(), sa.begin(), sa.end());
      }
      const auto a1 = sample_evenly(r->adam.rmed1, tol.max_samples), a2 = sample_evenly(r->adam.rmed2, tol.max_samples);
      for (std::size_t i = 0; i < std::min(a1.size(), a2.size()); ++i) {
        ++sampled;
        if (a1[i] >= 1.0 && a1[i] <= tol.adam_band_hi && a2[i] >= 1.0 && a2[i] <= tol.adam_band_hi) ++in_band;
      }
    }
    if (per_run_s[0].empty()) continue;
    for (int l = 0; l < 2; ++l) {
      row.sgdm_median[l] = median(per_run_s[l]);
      row.adam_median[l] = median(per_run_a[l]);
      row.sgdm_q[l] = {quantile(pooled_s[l], 0.1), quantile(pooled_s[l], 0.5), quantile(pooled_s[l], 0.9)};
      row.adam_q[l] = {quantile(pooled_a[l], 0.1), quantile(pooled_a[l], 0.5), quantile(pooled_a[l], 0.9)};
      row.gap[l] = row.sgdm_median[l] - row.adam_median[l];
    }
    row.adam_fraction = sampled ? static_cast<double>(in_band) / static_cast<double>(sampled) : 0.0;
    if (auto it = oracle.find(d); it != oracle.end()) {
      row.oracle = it->second;
      row.oracle_over_sgdm = it->second / row.sgdm_median[0];
    }
    rep.rows.push_back(row);
  }
  if (rep.rows.empty()) {
    rep.flags.push_back("no usable windows");
    return rep;
  }
  std::vector<double> lnd;
  for (const auto& r : rep.rows) lnd.push_back(std::log(static_cast<double>(r.d)));
  rep.adam_band_ok = std::all_of(rep.rows.begin(), rep.rows.end(),
                                 [&](const GapRow& r) { return r.adam_fraction >= tol.adam_fraction; });
  rep.sgdm_floor_ok = rep.rows.front().sgdm_median[0] >= tol.sgdm_floor_at_min_d &&
                      rep.rows.front().sgdm_median[1] >= tol.sgdm_floor_at_min_d;
  rep.sgdm_increasing = rep.rows.size() >= 2;
  for (std::size_t i = 1; i < rep.rows.size(); ++i)
    for (int l = 0; l < 2; ++l)
      if (!(rep.rows[i].sgdm_median[l] > rep.rows[i - 1].sgdm_median[l])) rep.sgdm_increasing = false;
  rep.slope_positive = true;
  for (int l = 0; l < 2; ++l) {
    std::vector<double> y;
    for (const auto& r : rep.rows) y.push_back(r.sgdm_median[l]);
    rep.slope[l] = ls_slope(lnd, y);
    if (!rep.slope[l]) {
      rep.flags.push_back("slope undefined for layer " + std::to_string(l + 1));
      rep.slope_positive = false;
    } else if (!(*rep.slope[l] > 0.0)) {
      rep.slope_positive = false;
    }
  }
  rep.oracle_in_band = !oracle.empty();
  for (const auto& r : rep.rows) {
    if (!r.oracle) {
      if (!oracle.empty()) rep.flags.push_back("no oracle value for d=" + std::to_string(r.d));
      rep.oracle_in_band = false;
      continue;
    }
    for (int l = 0; l < 2; ++l) {
      const double m = r.sgdm_median[l];
      if (!(*r.oracle >= (1.0 - tol.oracle_band) * m && *r.oracle <= (1.0 + tol.oracle_band) * m))
        rep.oracle_in_band = false;
    }
  }
  rep.pass = !any_empty && rep.adam_band_ok && rep.sgdm_floor_ok && rep.sgdm_increasing && rep.slope_positive &&
             rep.oracle_in_band;
  return rep;
}

/// Minimal view of a run for loss matching.
struct LossPoint {
  StepIndex step = 0;
  double loss = 0.0;
  double rmed1 = 0.0, rmed2 = 0.0;
};

struct LossMatch {
  double level = 0.0;
  StepIndex t_a = 0, t_b = 0;
  double t_a_interp = 0.0, t_b_interp = 0.0;  ///< linear in step index, reporting only
  double rmed_a[2] = {0.0, 0.0};
  double rmed_b[2] = {0.0, 0.0};
};

struct LossMatchTable {
  std::vector<LossMatch> matches;
  std::vector<std::string> notes;
};

namespace detail {
// First downward crossing: first index whose loss is <= level.
inline std::optional<std::size_t> first_crossing(std::span<const LossPoint> tr, double level) {
  for (std::size_t i = 0; i < tr.size(); ++i)
    if (tr[i].loss <= level) return i;
  return std::nullopt;
}
inline double interp_step(std::span<const LossPoint> tr, std::size_t i, double level) {
  if (i == 0) return static_cast<double>(tr[0].step);
  const auto& a = tr[i - 1];
  const auto& b = tr[i];
  if (a.loss == b.loss) return static_cast<double>(b.step);
  const double f = (a.loss - level) / (a.loss - b.loss);
  return static_cast<double>(a.step) + f * static_cast<double>(b.step - a.step);
}
}  // namespace detail

/// For each level, the first step each run reaches it and the R_med values there.
/// Levels at or above either initial loss, or never reached, are omitted with a note.
inline LossMatchTable equal_loss_pairs(std::span<const LossPoint> a, std::span<const LossPoint> b,
                                       std::span<const double> levels) {
  LossMatchTable out;
  if (a.empty() || b.empty()) {
    out.notes.push_back("empty trajectory");
    return out;
  }
  for (double level : levels) {
    if (level >= a.front().loss || level >= b.front().loss) {
      out.notes.push_back("level " + std::to_string(level) + " omitted: not below the initial loss");
      continue;
    }
    const auto ia = detail::first_crossing(a, level), ib = detail::first_crossing(b, level);
    if (!ia || !ib) {
      out.notes.push_back("level " + std::to_string(level) + " omitted: never reached by run " + (ia ? "b" : "a"));
      continue;
    }
    LossMatch m;
    m.level = level;
    m.t_a = a[*ia].step;
    m.t_b = b[*ib].step;
    m.t_a_interp = detail::interp_step(a, *ia, level);
    m.t_b_interp = detail::interp_step(b, *ib, level);
    m.rmed_a[0] = a[*ia].rmed1;
    m.rmed_a[1] = a[*ia].rmed2;
    m.rmed_b[0] = b[*ib].rmed1;
    m.rmed_b[1] = b[*ib].rmed2;
    out.matches.push_back(m);
  }
  return out;
}

}  // namespace diaggeo
