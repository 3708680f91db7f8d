#pragma once

// Steppers for SGD with momentum, Adam, Adagrad, RMSprop and AMSGrad.
// Every stepper folds the current gradient into its buffers before it
// moves the weights. In-place `*_update` functions do the work; `*_step`
// wrappers return fresh values.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "diaggeo/model.hpp"

namespace diaggeo {

enum class OptimizerKind { SGDM, Adam, Adagrad, RMSprop, AMSGrad };

inline std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::SGDM: return "SGDM";
    case OptimizerKind::Adam: return "Adam";
    case OptimizerKind::Adagrad: return "Adagrad";
    case OptimizerKind::RMSprop: return "RMSprop";
    case OptimizerKind::AMSGrad: return "AMSGrad";
  }
  return "?";
}

/// Case-insensitive.
inline OptimizerKind parse_optimizer_kind(std::string_view s) {
  auto eq = [](std::string_view a, std::string_view b) {
    return std::ranges::equal(a, b, [](char x, char y) {
      return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
    });
  };
  for (auto k : {OptimizerKind::SGDM, OptimizerKind::Adam, OptimizerKind::Adagrad, OptimizerKind::RMSprop,
                 OptimizerKind::AMSGrad})
    if (eq(to_string(k), s)) return k;
  throw std::invalid_argument("unknown optimizer kind '" + std::string(s) + "'");
}

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::SGDM;
  double eta = 1e-3;
  double beta = 0.9;      ///< SGDM momentum; RMSprop second-moment decay
  double beta1 = 0.9;
  double beta2 = 0.999;
  double xi = 1e-8;
  bool bias_correction = true;
  double momentum = 0.0;  ///< RMSprop heavy-ball term applied to the preconditioned gradient

  void validate() const {
    auto in01 = [](double b) { return b >= 0.0 && b < 1.0; };
    if (!(eta > 0.0) || !std::isfinite(eta)) throw std::invalid_argument("OptimizerSpec: eta must be > 0");
    if (!in01(beta) || !in01(beta1) || !in01(beta2) || !in01(momentum))
      throw std::invalid_argument("OptimizerSpec: betas must lie in [0, 1)");
    if (!(xi >= 0.0) || !std::isfinite(xi)) throw std::invalid_argument("OptimizerSpec: xi must be >= 0");
  }

  bool uses_moments() const noexcept { return kind == OptimizerKind::Adam || kind == OptimizerKind::AMSGrad; }
};

struct BufferTag {};
using Buffers = LayerStack<BufferTag>;

struct OptimizerState {
  std::uint64_t step = 0;   ///< steps taken in the current segment
  int segment = -1;         ///< schedule segment that produced the buffers
  Buffers u, m, v, vhat, G;

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

namespace detail {
inline void require_shapes(const Weights& w, const GradientSet& g, const char* who) {
  if (!w.same_shapes(g)) throw std::invalid_argument(std::string(who) + ": gradient shapes do not match weights");
}
inline void ensure(Buffers& b, const Weights& w) {
  if (b.empty()) b = Buffers::zeros_like(w);
  else if (!b.same_shapes(w)) throw std::invalid_argument("optimizer buffers do not match weights");
}
inline double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }
}  // namespace detail

inline void sgdm_update(OptimizerState& s, Weights& w, const GradientSet& g, const OptimizerSpec& spec) {
  detail::require_shapes(w, g, "sgdm_step");
  detail::ensure(s.u, w);
  for (std::size_t l = 0; l < w.depth(); ++l) {
    auto u = s.u[l].values();
    auto x = w[l].values();
    auto gl = g[l].values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      u[i] = spec.beta * u[i] + gl[i];
      x[i] -= spec.eta * u[i];
    }
  }
  ++s.step;
}

/// Effective Adam step size for the step about to be taken.
inline double adam_step_size(const OptimizerSpec& spec, std::uint64_t t) {
  if (!spec.bias_correction) return spec.eta;
  const double n = static_cast<double>(t + 1);
  return spec.eta * std::sqrt(1.0 - std::pow(spec.beta2, n)) / (1.0 - std::pow(spec.beta1, n));
}

/// Adam when `amsgrad` is false; otherwise the denominator uses the running max of v.
inline void adam_update(OptimizerState& s, Weights& w, const GradientSet& g, const OptimizerSpec& spec,
                        bool amsgrad = false) {
  detail::require_shapes(w, g, amsgrad ? "amsgrad_step" : "adam_step");
  detail::ensure(s.m, w);
  detail::ensure(s.v, w);
  if (amsgrad) detail::ensure(s.vhat, w);
  const double eta_t = adam_step_size(spec, s.step);
  const double b1 = spec.beta1, b2 = spec.beta2;
  for (std::size_t l = 0; l < w.depth(); ++l) {
    auto m = s.m[l].values();
    auto v = s.v[l].values();
    auto x = w[l].values();
    auto gl = g[l].values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * gl[i];
      v[i] = b2 * v[i] + (1.0 - b2) * gl[i] * gl[i];
      double den = v[i];
      if (amsgrad) {
        auto vh = s.vhat[l].values();
        vh[i] = std::max(vh[i], v[i]);
        den = vh[i];
      }
      x[i] -= eta_t * detail::safe_ratio(m[i], std::sqrt(den) + spec.xi);
    }
  }
  ++s.step;
}

inline void adagrad_update(OptimizerState& s, Weights& w, const GradientSet& g, const OptimizerSpec& spec) {
  detail::require_shapes(w, g, "adagrad_step");
  detail::ensure(s.G, w);
  for (std::size_t l = 0; l < w.depth(); ++l) {
    auto G = s.G[l].values();
    auto x = w[l].values();
    auto gl = g[l].values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      G[i] += gl[i] * gl[i];
      x[i] -= spec.eta * detail::safe_ratio(gl[i], std::sqrt(G[i]) + spec.xi);
    }
  }
  ++s.step;
}

inline void rmsprop_update(OptimizerState& s, Weights& w, const GradientSet& g, const OptimizerSpec& spec) {
  detail::require_shapes(w, g, "rmsprop_step");
  detail::ensure(s.v, w);
  if (spec.momentum > 0.0) detail::ensure(s.u, w);
  for (std::size_t l = 0; l < w.depth(); ++l) {
    auto v = s.v[l].values();
    auto x = w[l].values();
    auto gl = g[l].values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      v[i] = spec.beta * v[i] + (1.0 - spec.beta) * gl[i] * gl[i];
      double d = detail::safe_ratio(gl[i], std::sqrt(v[i]) + spec.xi);
      if (spec.momentum > 0.0) {
        auto u = s.u[l].values();
        u[i] = spec.momentum * u[i] + d;
        d = u[i];
      }
      x[i] -= spec.eta * d;
    }
  }
  ++s.step;
}

/// Dispatch on spec.kind. An empty gradient set leaves everything untouched.
inline void apply_update(OptimizerState& s, Weights& w, const GradientSet& g, const OptimizerSpec& spec) {
  if (g.empty()) return;
  switch (spec.kind) {
    case OptimizerKind::SGDM: sgdm_update(s, w, g, spec); break;
    case OptimizerKind::Adam: adam_update(s, w, g, spec, false); break;
    case OptimizerKind::AMSGrad: adam_update(s, w, g, spec, true); break;
    case OptimizerKind::Adagrad: adagrad_update(s, w, g, spec); break;
    case OptimizerKind::RMSprop: rmsprop_update(s, w, g, spec); break;
  }
}

struct StepResult {
  Weights weights;
  OptimizerState state;
};

namespace detail {
inline void require_kind(const OptimizerSpec& spec, std::initializer_list<OptimizerKind> ok, const char* who) {
  for (auto k : ok)
    if (spec.kind == k) return;
  throw std::invalid_argument(std::string(who) + ": wrong optimizer kind " + std::string(to_string(spec.kind)));
}
}  // namespace detail

inline StepResult sgdm_step(OptimizerState s, Weights w, const GradientSet& g, const OptimizerSpec& spec) {
  detail::require_kind(spec, {OptimizerKind::SGDM}, "sgdm_step");
  sgdm_update(s, w, g, spec);
  return {std::move(w), std::move(s)};
}

inline StepResult adam_step(OptimizerState s, Weights w, const GradientSet& g, const OptimizerSpec& spec) {
  detail::require_kind(spec, {OptimizerKind::Adam}, "adam_step");
  adam_update(s, w, g, spec, false);
  return {std::move(w), std::move(s)};
}

inline StepResult aux_adaptive_step(OptimizerState s, Weights w, const GradientSet& g, const OptimizerSpec& spec) {
  detail::require_kind(spec, {OptimizerKind::Adagrad, OptimizerKind::RMSprop, OptimizerKind::AMSGrad},
                       "aux_adaptive_step");
  apply_update(s, w, g, spec);
  return {std::move(w), std::move(s)};
}

struct ScheduleSegment {
  std::uint64_t start_step = 0;
  OptimizerSpec spec;
};

class Schedule {
 public:
  Schedule() = default;
  explicit Schedule(std::vector<ScheduleSegment> segs) : segs_(std::move(segs)) { validate(); }
  static Schedule single(const OptimizerSpec& spec) { return Schedule({{0, spec}}); }

  void validate() const {
    if (segs_.empty()) throw std::invalid_argument("Schedule: no segments");
    if (segs_.front().start_step != 0) throw std::invalid_argument("Schedule: first segment must start at step 0");
    for (std::size_t i = 1; i < segs_.size(); ++i)
      if (segs_[i].start_step <= segs_[i - 1].start_step)
        throw std::invalid_argument("Schedule: start steps must be strictly increasing");
    for (const auto& s : segs_) s.spec.validate();
  }

  /// Index of the segment active at global step t.
  std::size_t active(std::uint64_t t) const {
    std::size_t i = 0;
    while (i + 1 < segs_.size() && segs_[i + 1].start_step <= t) ++i;
    return i;
  }

  const std::vector<ScheduleSegment>& segments() const noexcept { return segs_; }
  const ScheduleSegment& operator[](std::size_t i) const { return segs_.at(i); }
  std::size_t size() const noexcept { return segs_.size(); }

 private:
  std::vector<ScheduleSegment> segs_;
};

/// In-place schedule step. Entering a new segment zeroes buffers and the
/// step counter unless `carry_buffers` is set.
inline void schedule_update(const Schedule& sched, OptimizerState& s, Weights& w, const GradientSet& g,
                            std::uint64_t t, bool carry_buffers = false) {
  if (g.empty()) return;
  const auto seg = static_cast<int>(sched.active(t));
  if (s.segment != seg) {
    if (!carry_buffers && s.segment >= 0) s = OptimizerState{};
    s.segment = seg;
  }
  apply_update(s, w, g, sched[static_cast<std::size_t>(seg)].spec);
}

inline StepResult step_with_schedule(const Schedule& sched, OptimizerState s, Weights w, const GradientSet& g,
                                     std::uint64_t t, bool carry_buffers = false) {
  schedule_update(sched, s, w, g, t, carry_buffers);
  return {std::move(w), std::move(s)};
}

/// Adam/AMSGrad update direction m / (sqrt(v) + xi) from the current buffers.
inline Buffers adaptive_direction(const OptimizerState& s, const OptimizerSpec& spec) {
  if (!spec.uses_moments()) throw std::invalid_argument("adaptive_direction: optimizer has no moment buffers");
  if (s.m.empty()) throw std::invalid_argument("adaptive_direction: buffers not initialized");
  const Buffers& den = spec.kind == OptimizerKind::AMSGrad ? s.vhat : s.v;
  Buffers out = Buffers::zeros_like(s.m);
  for (std::size_t l = 0; l < out.depth(); ++l)
    for (std::size_t i = 0; i < out[l].size(); ++i)
      out[l][i] = detail::safe_ratio(s.m[l][i], std::sqrt(den[l][i]) + spec.xi);
  return out;
}

enum class Preset { theory, experiment };

inline Preset parse_preset(std::string_view s) {
  if (s == "theory") return Preset::theory;
  if (s == "experiment") return Preset::experiment;
  throw std::invalid_argument("unknown preset '" + std::string(s) + "'");
}

inline std::string_view to_string(Preset p) { return p == Preset::theory ? "theory" : "experiment"; }

/// Default learning rate of each optimizer under a preset.
inline double preset_eta(Preset p, OptimizerKind k) {
  if (k == OptimizerKind::SGDM) return 1e-3;
  if (p == Preset::theory) return 1e-4;
  return 1e-2;
}

/// Hyperparameters of a preset; `eta` overrides the preset default when given.
inline OptimizerSpec preset_spec(Preset p, OptimizerKind k, std::optional<double> eta = std::nullopt) {
  OptimizerSpec s;
  s.kind = k;
  s.eta = eta.value_or(preset_eta(p, k));
  s.beta = (k == OptimizerKind::RMSprop) ? 0.99 : 0.9;
  s.beta1 = 0.9;
  s.bias_correction = true;
  if (p == Preset::theory) {
    s.beta2 = s.beta1 * s.beta1;
    s.xi = 1e-12;
  } else {
    s.beta2 = 0.999;
    s.xi = 1e-8;
  }
  return s;
}

/// The theory preset pairs beta2 with beta1^2.
inline void check_theory_constraints(const OptimizerSpec& s) {
  if (s.uses_moments() && std::abs(s.beta2 - s.beta1 * s.beta1) > 1e-15)
    throw std::invalid_argument("theory preset requires beta2 = beta1^2");
}

}  // namespace diaggeo
