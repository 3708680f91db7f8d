#pragma once

// Experiment configuration, deterministic run orchestration, trajectory
// recording and file emission, plus the compare and sweep drivers.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "diaggeo/hessian.hpp"
#include "diaggeo/model.hpp"
#include "diaggeo/optimizers.hpp"
#include "diaggeo/stats.hpp"
#include "diaggeo/theory.hpp"
#include "diaggeo/trajectory.hpp"

namespace diaggeo {

using json = nlohmann::ordered_json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ProblemConfig {
  std::size_t d = 64;
  double a_lo = 0.5, a_hi = 1.5;
  double sigma = 0.0;
  double l2_coeff = 0.0;
  bool symmetrize_noise = false;
};

struct NetworkSection {
  int depth = 2;
  double alpha = 1.0;
  std::vector<std::size_t> dims;  ///< empty: d, ..., d, 1
  bool theory_mode = false;
};

struct StatsConfig {
  RmedOptions rmed;
  bool hessian_route = true;
  bool record_hessian_full = false;
  bool record_svd = false;
  bool record_alignment = false;
  bool record_phases = true;
  double energy_threshold = 0.9;
  double phase_epsilon = 1e-3;
};

struct SeedConfig {
  std::uint64_t init = 1, data = 1, noise = 1;
};

struct OutputConfig {
  std::string path = "runs/run";
  std::string format = "csv";
};

struct ExperimentConfig {
  std::optional<Preset> preset;
  ProblemConfig problem;
  NetworkSection network;
  Schedule schedule = Schedule::single(OptimizerSpec{});
  bool carry_buffers = false;
  std::uint64_t steps = 1000;
  std::uint64_t record_every = 1;
  std::optional<double> stop_loss_per_dim;
  StatsConfig stats;
  SeedConfig seeds;
  OutputConfig output;

  NetworkConfig network_config() const {
    NetworkConfig n = NetworkConfig::standard(problem.d, network.depth, network.alpha);
    if (!network.dims.empty()) n.dims = network.dims;
    n.theory_mode = network.theory_mode;
    return n;
  }

  void validate() const {
    if (problem.d == 0) throw ConfigError("problem.d must be >= 1");
    if (!(problem.a_lo > 0.0) || problem.a_lo > problem.a_hi) throw ConfigError("problem.a_band must satisfy 0 < lo <= hi");
    if (!(problem.sigma >= 0.0)) throw ConfigError("problem.sigma must be >= 0");
    if (!(problem.l2_coeff >= 0.0)) throw ConfigError("problem.l2_coeff must be >= 0");
    const auto net = network_config();
    try {
      net.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("network: ") + e.what());
    }
    if (net.dims.front() != problem.d || net.dims.back() != 1)
      throw ConfigError("network.dims must start at problem.d and end at 1");
    schedule.validate();
    if (record_every < 1) throw ConfigError("record_every must be >= 1");
    if (stats.record_hessian_full && (net.depth != 2 || problem.d > kMaxFullHessianDim))
      throw ConfigError("stats.record_hessian_full needs depth 2 and d <= " + std::to_string(kMaxFullHessianDim));
    if (stats.rmed.top_k < 1) throw ConfigError("stats.rmed.top_k must be >= 1");
    if (!(stats.rmed.stabilizer_factor >= 0.0)) throw ConfigError("stats.rmed.stabilizer_factor must be >= 0");
    if (!(stats.energy_threshold > 0.0 && stats.energy_threshold <= 1.0))
      throw ConfigError("stats.energy_threshold must lie in (0, 1]");
    if (!(stats.phase_epsilon > 0.0 && stats.phase_epsilon < 1.0)) throw ConfigError("stats.phase_epsilon must lie in (0, 1)");
    if (output.format != "csv") throw ConfigError("output.format must be \"csv\"");
    if (preset == Preset::theory) {
      if (problem.sigma != 0.0) throw ConfigError("theory preset requires sigma = 0");
      for (const auto& s : schedule.segments()) check_theory_constraints(s.spec);
    }
  }
};

// ---------------------------------------------------------------------------
// JSON (de)serialization. Unknown keys are rejected so typos surface early.

namespace detail {
inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  std::set<std::string> ok(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) {
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

inline OptimizerSpec parse_optimizer(const json& j, std::optional<Preset> preset) {
  reject_unknown(j, {"kind", "eta", "beta", "beta1", "beta2", "xi", "bias_correction", "momentum"}, "optimizer");
  if (!j.contains("kind")) throw ConfigError("optimizer.kind is required");
  OptimizerKind kind;
  try {
    kind = parse_optimizer_kind(j.at("kind").get<std::string>());
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  OptimizerSpec s = preset_spec(preset.value_or(Preset::experiment), kind);
  read(j, "eta", s.eta);
  read(j, "beta", s.beta);
  read(j, "beta1", s.beta1);
  read(j, "beta2", s.beta2);
  if (preset == Preset::theory && j.contains("beta1") && !j.contains("beta2")) s.beta2 = s.beta1 * s.beta1;
  read(j, "xi", s.xi);
  read(j, "bias_correction", s.bias_correction);
  read(j, "momentum", s.momentum);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

inline json optimizer_json(const OptimizerSpec& s) {
  return json{{"kind", std::string(to_string(s.kind))}, {"eta", s.eta},       {"beta", s.beta},
              {"beta1", s.beta1},                       {"beta2", s.beta2},   {"xi", s.xi},
              {"bias_correction", s.bias_correction},   {"momentum", s.momentum}};
}
}  // namespace detail

inline ExperimentConfig config_from_json(const json& j) {
  using detail::read;
  detail::reject_unknown(j,
                         {"preset", "problem", "network", "schedule", "carry_buffers", "steps", "record_every",
                          "stop_loss_per_dim", "stats", "seeds", "output"},
                         "config");
  ExperimentConfig c;
  if (j.contains("preset") && !j["preset"].is_null()) {
    try {
      c.preset = parse_preset(j["preset"].get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  // Preset-dependent defaults, overridable below.
  c.network.alpha = c.preset == Preset::theory ? 2.0 : 1.0;
  c.network.theory_mode = c.preset == Preset::theory;
  c.stats.rmed.stabilizer_factor = c.preset == Preset::experiment ? 0.001 : 0.0;

  if (j.contains("problem")) {
    const auto& p = j["problem"];
    detail::reject_unknown(p, {"d", "a_band", "sigma", "l2_coeff", "symmetrize_noise"}, "problem");
    read(p, "d", c.problem.d);
    if (p.contains("a_band")) {
      const auto band = p["a_band"];
      if (!band.is_array() || band.size() != 2) throw ConfigError("problem.a_band must be [lo, hi]");
      c.problem.a_lo = band[0].get<double>();
      c.problem.a_hi = band[1].get<double>();
    }
    read(p, "sigma", c.problem.sigma);
    read(p, "l2_coeff", c.problem.l2_coeff);
    read(p, "symmetrize_noise", c.problem.symmetrize_noise);
  }
  if (j.contains("network")) {
    const auto& n = j["network"];
    detail::reject_unknown(n, {"depth", "alpha", "dims", "theory_mode"}, "network");
    read(n, "depth", c.network.depth);
    if (n.contains("alpha") && n["alpha"].is_string() && n["alpha"].get<std::string>() == "inf")
      c.network.alpha = std::numeric_limits<double>::infinity();
    else
      read(n, "alpha", c.network.alpha);
    read(n, "dims", c.network.dims);
    read(n, "theory_mode", c.network.theory_mode);
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    if (!s.is_array() || s.empty()) throw ConfigError("schedule must be a non-empty array");
    std::vector<ScheduleSegment> segs;
    for (const auto& seg : s) {
      detail::reject_unknown(seg, {"start_step", "optimizer"}, "schedule segment");
      ScheduleSegment ss;
      read(seg, "start_step", ss.start_step);
      if (!seg.contains("optimizer")) throw ConfigError("schedule segment needs an optimizer");
      ss.spec = detail::parse_optimizer(seg["optimizer"], c.preset);
      segs.push_back(ss);
    }
    try {
      c.schedule = Schedule(std::move(segs));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  } else {
    c.schedule = Schedule::single(preset_spec(c.preset.value_or(Preset::experiment), OptimizerKind::SGDM));
  }
  read(j, "carry_buffers", c.carry_buffers);
  read(j, "steps", c.steps);
  read(j, "record_every", c.record_every);
  if (j.contains("stop_loss_per_dim") && !j["stop_loss_per_dim"].is_null())
    c.stop_loss_per_dim = j["stop_loss_per_dim"].get<double>();
  if (j.contains("stats")) {
    const auto& s = j["stats"];
    detail::reject_unknown(s,
                           {"rmed", "hessian_route", "record_hessian_full", "record_svd", "record_alignment",
                            "record_phases", "energy_threshold", "phase_epsilon"},
                           "stats");
    if (s.contains("rmed")) {
      const auto& r = s["rmed"];
      detail::reject_unknown(r, {"stabilizer_factor", "top_k", "subsample"}, "stats.rmed");
      read(r, "stabilizer_factor", c.stats.rmed.stabilizer_factor);
      read(r, "top_k", c.stats.rmed.top_k);
      if (r.contains("subsample") && !r["subsample"].is_null()) {
        const auto& sub = r["subsample"];
        detail::reject_unknown(sub, {"count", "seed"}, "stats.rmed.subsample");
        Subsample ss;
        read(sub, "count", ss.count);
        read(sub, "seed", ss.seed);
        c.stats.rmed.subsample = ss;
      }
    }
    read(s, "hessian_route", c.stats.hessian_route);
    read(s, "record_hessian_full", c.stats.record_hessian_full);
    read(s, "record_svd", c.stats.record_svd);
    read(s, "record_alignment", c.stats.record_alignment);
    read(s, "record_phases", c.stats.record_phases);
    read(s, "energy_threshold", c.stats.energy_threshold);
    read(s, "phase_epsilon", c.stats.phase_epsilon);
  }
  if (j.contains("seeds")) {
    const auto& s = j["seeds"];
    detail::reject_unknown(s, {"init", "data", "noise"}, "seeds");
    read(s, "init", c.seeds.init);
    read(s, "data", c.seeds.data);
    read(s, "noise", c.seeds.noise);
  }
  if (j.contains("output")) {
    const auto& o = j["output"];
    detail::reject_unknown(o, {"path", "format"}, "output");
    read(o, "path", c.output.path);
    read(o, "format", c.output.format);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + file.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// Fully resolved config; feeding it back through config_from_json reproduces the run.
inline json config_to_json(const ExperimentConfig& c) {
  json sched = json::array();
  for (const auto& s : c.schedule.segments())
    sched.push_back({{"start_step", s.start_step}, {"optimizer", detail::optimizer_json(s.spec)}});
  json rmed{{"stabilizer_factor", c.stats.rmed.stabilizer_factor}, {"top_k", c.stats.rmed.top_k}, {"subsample", nullptr}};
  if (c.stats.rmed.subsample) rmed["subsample"] = {{"count", c.stats.rmed.subsample->count}, {"seed", c.stats.rmed.subsample->seed}};
  const auto net = c.network_config();
  json alpha = std::isinf(c.network.alpha) ? json("inf") : json(c.network.alpha);
  return json{
      {"preset", c.preset ? json(std::string(to_string(*c.preset))) : json(nullptr)},
      {"problem",
       {{"d", c.problem.d},
        {"a_band", {c.problem.a_lo, c.problem.a_hi}},
        {"sigma", c.problem.sigma},
        {"l2_coeff", c.problem.l2_coeff},
        {"symmetrize_noise", c.problem.symmetrize_noise}}},
      {"network", {{"depth", c.network.depth}, {"alpha", alpha}, {"dims", net.dims}, {"theory_mode", c.network.theory_mode}}},
      {"schedule", sched},
      {"carry_buffers", c.carry_buffers},
      {"steps", c.steps},
      {"record_every", c.record_every},
      {"stop_loss_per_dim", c.stop_loss_per_dim ? json(*c.stop_loss_per_dim) : json(nullptr)},
      {"stats",
       {{"rmed", rmed},
        {"hessian_route", c.stats.hessian_route},
        {"record_hessian_full", c.stats.record_hessian_full},
        {"record_svd", c.stats.record_svd},
        {"record_alignment", c.stats.record_alignment},
        {"record_phases", c.stats.record_phases},
        {"energy_threshold", c.stats.energy_threshold},
        {"phase_epsilon", c.stats.phase_epsilon}}},
      {"seeds", {{"init", c.seeds.init}, {"data", c.seeds.data}, {"noise", c.seeds.noise}}},
      {"output", {{"path", c.output.path}, {"format", c.output.format}}}};
}

// ---------------------------------------------------------------------------
// Simulation: one run's mutable state.

inline ProblemInstance make_problem(const ExperimentConfig& c) {
  ProblemInstance p = generate_problem(c.problem.d, {c.problem.a_lo, c.problem.a_hi}, c.problem.sigma, c.seeds.data);
  p.l2_coeff = c.problem.l2_coeff;
  p.symmetrize_noise = c.problem.symmetrize_noise;
  p.seed_noise = c.seeds.noise;
  return p;
}

class Simulation {
 public:
  explicit Simulation(const ExperimentConfig& cfg)
      : cfg_(cfg),
        problem_(make_problem(cfg)),
        weights_(init_weights(cfg.network_config(), cfg.problem.d, cfg.seeds.init)),
        noise_(cfg.seeds.noise, StreamTag::noise) {}

  std::uint64_t t() const noexcept { return t_; }
  const Weights& weights() const noexcept { return weights_; }
  Weights& weights() noexcept { return weights_; }
  const ProblemInstance& problem() const noexcept { return problem_; }
  const OptimizerState& state() const noexcept { return state_; }
  const ExperimentConfig& config() const noexcept { return cfg_; }
  std::size_t segment() const { return cfg_.schedule.active(t_); }
  const OptimizerSpec& active_spec() const { return cfg_.schedule[segment()].spec; }

  /// Draws the (possibly noisy) gradient at the current weights and applies one update.
  GradientSet step() {
    GradientSet g = batch_gradient(weights_, problem_, noise_);
    schedule_update(cfg_.schedule, state_, weights_, g, t_, cfg_.carry_buffers);
    ++t_;
    return g;
  }

 private:
  ExperimentConfig cfg_;
  ProblemInstance problem_;
  Weights weights_;
  RngStream noise_;
  OptimizerState state_;
  std::uint64_t t_ = 0;
};

/// Builds the phase-detector input from the current weights.
inline StepSummary make_summary(std::uint64_t t, const Weights& w, const ProblemInstance& p, const ForwardCache& fc) {
  StepSummary s;
  s.step = t;
  for (const auto& m : w.layers()) s.max_abs_weight = std::max(s.max_abs_weight, max_abs(m.values()));
  const Matrix E = fc.product() - p.A;
  s.E.assign(E.values().begin(), E.values().end());
  const std::size_t L = w.depth();
  const Matrix g = (L == 1) ? E : matmul_nt(E, fc.prefix(L - 1));
  s.g_out.assign(g.values().begin(), g.values().end());
  return s;
}

/// Statistics for one snapshot. Undefined statistics (zero medians at a zero
/// init, for example) are left empty.
inline TrajectoryRecord make_record(std::uint64_t t, int segment, const Weights& w, const ProblemInstance& p,
                                    const ForwardCache& fc, double loss, const StatsConfig& st) {
  TrajectoryRecord r;
  r.step = t;
  r.segment = segment;
  r.loss_bar = loss;
  const Matrix E = fc.product() - p.A;
  r.E_norm = frobenius(E);
  r.E_min = *std::min_element(E.values().begin(), E.values().end());
  r.E_max = *std::max_element(E.values().begin(), E.values().end());
  auto guarded = [](auto&& f) -> std::optional<double> {
    try {
      return f();
    } catch (const DegenerateInput&) {
      return std::nullopt;
    } catch (const SvdNotConverged&) {
      return std::nullopt;
    }
  };
  if (st.hessian_route) {
    r.rmed_l1_hess = guarded([&] { return r_med(hessian_diag_layer(w, 1, fc).values, st.rmed); });
    if (w.depth() >= 2) r.rmed_l2_hess = guarded([&] { return r_med(hessian_diag_layer(w, 2, fc).values, st.rmed); });
  }
  const bool two_layer = w.depth() == 2 && p.A.rows() == 1;
  if (two_layer) {
    r.rmed_l1_closed = guarded([&] { return r_med_closed_form_layer(w, 1, st.rmed); });
    r.rmed_l2_closed = guarded([&] { return r_med_closed_form_layer(w, 2, st.rmed); });
  }
  if (st.record_hessian_full && two_layer)
    r.r_diag_mean = guarded([&] { return r_diag(assemble(hessian_full_two_layer(w, p))).mean; });
  if (st.record_svd && w.depth() == 2) {
    r.stable_rank = std::nullopt;
    try {
      const auto sd = svd_diagnostics(w[0], st.energy_threshold);
      r.ru = sd.ru;
      r.rv = sd.rv;
      r.stable_rank = sd.stable_rank;
    } catch (const DegenerateInput&) {
    } catch (const SvdNotConverged&) {
    }
    if (two_layer) {
      try {
        const auto f = rank1_fit(w[0], w[1]);
        r.rank1_delta1 = f.delta1;
        r.rank1_delta2 = f.delta2;
      } catch (const DegenerateInput&) {
      } catch (const SvdNotConverged&) {
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// CSV emission.

inline constexpr const char* kRecordsSchema = "# diaggeo records v1";
inline constexpr const char* kRecordsHeader =
    "step,loss_bar,E_norm,E_min,E_max,rmed_l1_hess,rmed_l1_closed,rmed_l2_hess,rmed_l2_closed,r_diag_mean,"
    "rank1_delta1,rank1_delta2,ru,rv,stable_rank,segment";

/// Shortest round-trip decimal form.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline std::string format_opt(const std::optional<double>& x) { return x ? format_double(*x) : std::string(); }

inline std::string record_to_csv(const TrajectoryRecord& r) {
  std::string s = std::to_string(r.step);
  for (const std::string& f :
       {format_double(r.loss_bar), format_double(r.E_norm), format_double(r.E_min), format_double(r.E_max),
        format_opt(r.rmed_l1_hess), format_opt(r.rmed_l1_closed), format_opt(r.rmed_l2_hess),
        format_opt(r.rmed_l2_closed), format_opt(r.r_diag_mean), format_opt(r.rank1_delta1),
        format_opt(r.rank1_delta2), format_opt(r.ru), format_opt(r.rv), format_opt(r.stable_rank)}) {
    s += ',';
    s += f;
  }
  s += ',';
  s += std::to_string(r.segment);
  return s;
}

namespace detail {
inline std::optional<double> parse_opt(const std::string& s) {
  if (s.empty()) return std::nullopt;
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw std::runtime_error("bad CSV number '" + s + "'");
  return v;
}
}  // namespace detail

inline Trajectory read_records_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  Trajectory out;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != kRecordsHeader) throw std::runtime_error(file.string() + ": unexpected CSV header");
      header_seen = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 16) throw std::runtime_error(file.string() + ": wrong field count");
    TrajectoryRecord r;
    r.step = std::stoull(f[0]);
    r.loss_bar = *detail::parse_opt(f[1]);
    r.E_norm = *detail::parse_opt(f[2]);
    r.E_min = *detail::parse_opt(f[3]);
    r.E_max = *detail::parse_opt(f[4]);
    r.rmed_l1_hess = detail::parse_opt(f[5]);
    r.rmed_l1_closed = detail::parse_opt(f[6]);
    r.rmed_l2_hess = detail::parse_opt(f[7]);
    r.rmed_l2_closed = detail::parse_opt(f[8]);
    r.r_diag_mean = detail::parse_opt(f[9]);
    r.rank1_delta1 = detail::parse_opt(f[10]);
    r.rank1_delta2 = detail::parse_opt(f[11]);
    r.ru = detail::parse_opt(f[12]);
    r.rv = detail::parse_opt(f[13]);
    r.stable_rank = detail::parse_opt(f[14]);
    r.segment = std::stoi(f[15]);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// run_experiment

enum class RunStatus { ok, stopped, diverged };

inline std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::ok: return "ok";
    case RunStatus::stopped: return "stopped";
    case RunStatus::diverged: return "diverged";
  }
  return "?";
}

struct AlignmentRow {
  std::uint64_t step = 0;
  std::size_t layer = 0;
  double rho_g = 0.0, rho_adapt = 0.0, cv_g = 0.0, cv_adapt = 0.0;
};

struct RunResult {
  RunStatus status = RunStatus::ok;
  Trajectory records;
  SgdPhaseTimes sgd_phases;
  AdamPhaseTimes adam_phases;
  std::vector<AlignmentRow> alignment;
  Weights final_weights;
  double final_loss = 0.0;
  std::uint64_t final_step = 0;
  std::optional<std::filesystem::path> dir;
};

/// Seen by an observer once per update: weights before the step, the gradient
/// used, and the state and weights after it.
struct StepView {
  std::uint64_t t = 0;
  double loss = 0.0;
  const Weights& before;
  const GradientSet& grad;
  const Weights& after;
  const OptimizerState& state;
  const OptimizerSpec& spec;
  const ProblemInstance& problem;
};

using StepObserver = std::function<void(const StepView&)>;

inline json phases_json(const RunResult& r, const ExperimentConfig& cfg) {
  auto opt = [](const std::optional<StepIndex>& x) { return x ? json(*x) : json(nullptr); };
  json tf = json::array();
  for (const auto& x : r.adam_phases.Tf_per_coordinate) tf.push_back(opt(x));
  const auto& seg0 = cfg.schedule[0].spec;
  const PhaseParams pp{cfg.network.alpha, seg0.eta, cfg.stats.phase_epsilon, cfg.problem.d};
  return json{{"status", std::string(to_string(r.status))},
              {"final_step", r.final_step},
              {"final_loss", r.final_loss},
              {"sgd",
               {{"T1", opt(r.sgd_phases.T1)},
                {"T2", opt(r.sgd_phases.T2)},
                {"T3", opt(r.sgd_phases.T3)},
                {"eps0", std::isinf(pp.alpha) ? json(nullptr) : json(pp.eps0())}}},
              {"adam",
               {{"T1", opt(r.adam_phases.T1)},
                {"Tg", opt(r.adam_phases.Tg)},
                {"Tf", opt(r.adam_phases.Tf)},
                {"Ttilde", opt(r.adam_phases.Ttilde)},
                {"Tf_per_coordinate", tf}}}};
}

namespace detail {
inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

inline void write_outputs(const RunResult& r, const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string csv = std::string(kRecordsSchema) + "\n" + kRecordsHeader + "\n";
  for (const auto& rec : r.records) csv += record_to_csv(rec) + "\n";
  write_text(dir / "records.csv", csv);
  write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
  if (cfg.stats.record_phases) write_text(dir / "phases.json", phases_json(r, cfg).dump(2) + "\n");
  if (cfg.stats.record_alignment) {
    std::string a = "# diaggeo alignment v1\nstep,layer,rho_g,rho_adapt,cv_g,cv_adapt\n";
    for (const auto& row : r.alignment)
      a += std::to_string(row.step) + "," + std::to_string(row.layer) + "," + format_double(row.rho_g) + "," +
           format_double(row.rho_adapt) + "," + format_double(row.cv_g) + "," + format_double(row.cv_adapt) + "\n";
    write_text(dir / "alignment.csv", a);
  }
}
}  // namespace detail

/// Runs `cfg.steps` updates (or until the stop loss), recording every
/// `record_every` steps, at the last step, and at newly detected phase times.
/// Files are written when `write` is set, including after divergence.
inline RunResult run_experiment(const ExperimentConfig& cfg, bool write = true, const StepObserver& observer = {}) {
  cfg.validate();
  Simulation sim(cfg);
  RunResult res;
  const auto& seg0 = cfg.schedule[0].spec;
  const double alpha_for_phases = std::isinf(cfg.network.alpha) ? 1e9 : cfg.network.alpha;
  SgdPhaseDetector sgd_det(PhaseParams{alpha_for_phases, seg0.eta, cfg.stats.phase_epsilon, cfg.problem.d});
  AdamPhaseDetector adam_det(seg0.eta, cfg.problem.d);
  const double stop = cfg.stop_loss_per_dim ? *cfg.stop_loss_per_dim * static_cast<double>(cfg.problem.d)
                                            : -std::numeric_limits<double>::infinity();
  for (std::uint64_t t = 0;; ++t) {
    const Weights& w = sim.weights();
    const ForwardCache fc(w);
    const double loss = loss_bar(w, sim.problem());
    res.final_step = t;
    res.final_loss = loss;
    if (!std::isfinite(loss) || !std::all_of(w.layers().begin(), w.layers().end(),
                                             [](const Matrix& m) { return m.all_finite(); })) {
      res.status = RunStatus::diverged;
      break;
    }
    bool forced = false;
    if (cfg.stats.record_phases) {
      const StepSummary s = make_summary(t, w, sim.problem(), fc);
      const auto before_s = sgd_det.times();
      const auto before_a = adam_det.times();
      sgd_det.feed(s);
      adam_det.feed(s);
      const auto& a = sgd_det.times();
      const auto& b = adam_det.times();
      forced = a.T1 != before_s.T1 || a.T2 != before_s.T2 || a.T3 != before_s.T3 || b.T1 != before_a.T1 ||
               b.Tg != before_a.Tg || b.Tf != before_a.Tf;
    }
    const bool last = t >= cfg.steps || loss <= stop;
    if (last && loss <= stop && t < cfg.steps) res.status = RunStatus::stopped;
    if (forced || last || t % cfg.record_every == 0)
      res.records.push_back(make_record(t, static_cast<int>(sim.segment()), w, sim.problem(), fc, loss, cfg.stats));
    if (last) break;

    const auto& spec = cfg.schedule[cfg.schedule.active(t)].spec;
    const bool align_now = cfg.stats.record_alignment && spec.uses_moments() && t % cfg.record_every == 0;
    std::optional<Weights> before;
    std::vector<std::vector<double>> diag;
    if (observer) before = w;
    if (align_now)
      for (std::size_t k = 1; k <= std::min<std::size_t>(2, w.depth()); ++k)
        diag.push_back(hessian_diag_layer(w, k, fc).values);
    const GradientSet g = sim.step();
    if (align_now) {
      const Buffers dir = adaptive_direction(sim.state(), spec);
      for (std::size_t k = 0; k < diag.size(); ++k) {
        const auto p = alignment_profile(diag[k], g[k].values(), dir[k].values());
        res.alignment.push_back({t, k + 1, p.rho_g, p.rho_adapt, p.cv_g, p.cv_adapt});
      }
    }
    if (observer) observer(StepView{t, loss, *before, g, sim.weights(), sim.state(), spec, sim.problem()});
  }
  res.sgd_phases = sgd_det.times();
  res.adam_phases = adam_det.times();
  res.final_weights = sim.weights();
  if (write) {
    res.dir = cfg.output.path;
    detail::write_outputs(res, cfg, *res.dir);
  }
  return res;
}

// ---------------------------------------------------------------------------
// compare

struct ComparisonRow {
  double level = 0.0;
  std::uint64_t t_a = 0, t_b = 0;
  double rmed_a[2] = {0, 0}, rmed_b[2] = {0, 0};
  double ratio[2] = {0, 0};  ///< a / b per layer
};

struct Comparison {
  std::size_t d = 0;
  std::vector<ComparisonRow> rows;
  std::vector<std::string> notes;
};

inline std::vector<LossPoint> loss_points(const Trajectory& tr) {
  std::vector<LossPoint> pts;
  pts.reserve(tr.size());
  for (const auto& r : tr)
    pts.push_back({r.step, r.loss_bar, r.rmed_l1().value_or(std::numeric_limits<double>::quiet_NaN()),
                   r.rmed_l2().value_or(std::numeric_limits<double>::quiet_NaN())});
  return pts;
}

inline Comparison compare_trajectories(const Trajectory& a, const Trajectory& b, std::span<const double> levels) {
  Comparison c;
  const auto pa = loss_points(a), pb = loss_points(b);
  const auto table = equal_loss_pairs(pa, pb, levels);
  c.notes = table.notes;
  for (const auto& m : table.matches) {
    ComparisonRow row;
    row.level = m.level;
    row.t_a = m.t_a;
    row.t_b = m.t_b;
    for (int l = 0; l < 2; ++l) {
      row.rmed_a[l] = m.rmed_a[l];
      row.rmed_b[l] = m.rmed_b[l];
      row.ratio[l] = m.rmed_a[l] / m.rmed_b[l];
    }
    c.rows.push_back(row);
  }
  if (c.rows.empty()) c.notes.push_back("no common loss levels: the runs' loss ranges do not overlap at the requested levels");
  return c;
}

/// Levels default to d/2, d/10, d/100.
inline Comparison compare_runs(const std::filesystem::path& run_a, const std::filesystem::path& run_b,
                               std::vector<double> levels = {}) {
  const auto ca = load_config(run_a / "config.json"), cb = load_config(run_b / "config.json");
  if (ca.problem.d != cb.problem.d)
    throw std::invalid_argument("compare: runs have different d (" + std::to_string(ca.problem.d) + " vs " +
                                std::to_string(cb.problem.d) + ")");
  const double d = static_cast<double>(ca.problem.d);
  if (levels.empty()) levels = {d / 2, d / 10, d / 100};
  Comparison c = compare_trajectories(read_records_csv(run_a / "records.csv"), read_records_csv(run_b / "records.csv"), levels);
  c.d = ca.problem.d;
  return c;
}

inline json comparison_json(const Comparison& c) {
  json rows = json::array();
  for (const auto& r : c.rows)
    rows.push_back({{"level", r.level},
                    {"t_a", r.t_a},
                    {"t_b", r.t_b},
                    {"rmed_l1_a", r.rmed_a[0]},
                    {"rmed_l1_b", r.rmed_b[0]},
                    {"ratio_l1", r.ratio[0]},
                    {"rmed_l2_a", r.rmed_a[1]},
                    {"rmed_l2_b", r.rmed_b[1]},
                    {"ratio_l2", r.ratio[1]}});
  return json{{"d", c.d}, {"rows", rows}, {"notes", c.notes}};
}

// ---------------------------------------------------------------------------
// sweep

/// Applies `name=value` to a config. Supported names: d, alpha, eta, sigma,
/// steps, seed_init, seed_data, seed_noise.
inline void apply_param(ExperimentConfig& c, const std::string& name, double v) {
  if (name == "d") {
    c.problem.d = static_cast<std::size_t>(v);
    c.network.dims.clear();
  } else if (name == "alpha") {
    c.network.alpha = v;
  } else if (name == "eta") {
    std::vector<ScheduleSegment> segs = c.schedule.segments();
    for (auto& s : segs) s.spec.eta = v;
    c.schedule = Schedule(std::move(segs));
  } else if (name == "sigma") {
    c.problem.sigma = v;
  } else if (name == "steps") {
    c.steps = static_cast<std::uint64_t>(v);
  } else if (name == "seed_init") {
    c.seeds.init = static_cast<std::uint64_t>(v);
  } else if (name == "seed_data") {
    c.seeds.data = static_cast<std::uint64_t>(v);
  } else if (name == "seed_noise") {
    c.seeds.noise = static_cast<std::uint64_t>(v);
  } else {
    throw ConfigError("unknown sweep parameter '" + name + "'");
  }
}

struct SweepSpec {
  std::string name;
  std::vector<double> values;
  std::vector<std::string> labels;
};

/// Parses "name=v1,v2,...".
inline SweepSpec parse_sweep(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("sweep parameter must look like name=v1,v2");
  SweepSpec sp;
  sp.name = s.substr(0, eq);
  std::stringstream ss(s.substr(eq + 1));
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    double v = 0.0;
    const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) throw ConfigError("bad sweep value '" + tok + "'");
    sp.values.push_back(v);
    sp.labels.push_back(tok);
  }
  if (sp.values.empty()) throw ConfigError("sweep parameter has no values");
  return sp;
}

struct SweepEntry {
  std::string label;
  RunResult result;
};

/// Independent runs, one per value, each in `<output.path>/<name>=<value>`.
/// Runs execute on up to `threads` worker threads; results keep input order.
inline std::vector<SweepEntry> run_sweep(const ExperimentConfig& base, const SweepSpec& sp, unsigned threads = 0) {
  std::vector<ExperimentConfig> cfgs;
  for (std::size_t i = 0; i < sp.values.size(); ++i) {
    ExperimentConfig c = base;
    apply_param(c, sp.name, sp.values[i]);
    c.output.path = (std::filesystem::path(base.output.path) / (sp.name + "=" + sp.labels[i])).string();
    c.validate();
    cfgs.push_back(std::move(c));
  }
  std::vector<SweepEntry> out(cfgs.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  std::size_t next = 0;
  std::mutex mu;
  std::exception_ptr err;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lk(mu);
        if (next >= cfgs.size() || err) return;
        i = next++;
      }
      try {
        out[i] = {sp.name + "=" + sp.labels[i], run_experiment(cfgs[i])};
      } catch (...) {
        std::lock_guard lk(mu);
        err = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (unsigned k = 0; k < std::min<std::size_t>(threads, cfgs.size()); ++k) pool.emplace_back(worker);
  }
  if (err) std::rethrow_exception(err);
  return out;
}

}  // namespace diaggeo
