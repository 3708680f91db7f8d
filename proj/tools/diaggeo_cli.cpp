// diaggeo command-line driver: run, compare, sweep, verify, hessian-check.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 divergence,
// 3 verification failure.

#include <CLI11.hpp>

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "diaggeo/acceptance.hpp"
#include "diaggeo/harness.hpp"

namespace {

using namespace diaggeo;

enum Exit : int { kOk = 0, kUsage = 1, kDiverged = 2, kCheckFailed = 3 };

int cmd_run(const std::string& config_file, const std::string& out_override) {
  auto cfg = load_config(config_file);
  if (!out_override.empty()) cfg.output.path = out_override;
  const auto res = run_experiment(cfg);
  std::cout << phases_json(res, cfg).dump(2) << "\n";
  std::cerr << "wrote " << res.records.size() << " records to " << res.dir->string() << "\n";
  return res.status == RunStatus::diverged ? kDiverged : kOk;
}

int cmd_compare(const std::string& a, const std::string& b, const std::vector<double>& levels) {
  const auto cmp = compare_runs(a, b, levels);
  std::cout << comparison_json(cmp).dump(2) << "\n";
  for (const auto& n : cmp.notes) std::cerr << "note: " << n << "\n";
  return kOk;
}

int cmd_sweep(const std::string& config_file, const std::string& param, unsigned threads) {
  const auto base = load_config(config_file);
  const auto entries = run_sweep(base, parse_sweep(param), threads);
  json out = json::array();
  bool diverged = false;
  for (const auto& e : entries) {
    diverged |= e.result.status == RunStatus::diverged;
    out.push_back({{"label", e.label},
                   {"dir", e.result.dir ? json(e.result.dir->string()) : json(nullptr)},
                   {"status", std::string(to_string(e.result.status))},
                   {"final_step", e.result.final_step},
                   {"final_loss", e.result.final_loss}});
  }
  std::cout << out.dump(2) << "\n";
  return diverged ? kDiverged : kOk;
}

int cmd_verify(const std::string& suite) {
  const auto results =
      acceptance::run_suite(suite, [](const acceptance::CriterionResult& c) { std::cerr << acceptance::format_line(c) << "\n"; });
  const json report = acceptance::report_json(suite, results);
  std::cout << report.dump(2) << "\n";
  return report["pass"].get<bool>() ? kOk : kCheckFailed;
}

// Compares the closed-form Hessian against central differences at the weights
// reached after `at_step` updates of the configured run.
int cmd_hessian_check(const std::string& config_file, std::uint64_t at_step, double tol, double h, bool full) {
  const auto cfg = load_config(config_file);
  Simulation sim(cfg);
  for (std::uint64_t t = 0; t < at_step; ++t) sim.step();
  const Weights& w = sim.weights();
  const auto& p = sim.problem();
  json layers = json::array();
  bool pass = true;
  for (std::size_t k = 1; k <= w.depth(); ++k) {
    const double err = max_rel_error(hessian_diag_layer(w, k).values, fd_diag_layer(w, p, k, h));
    pass &= err <= tol;
    layers.push_back({{"layer", k}, {"entries", w[k - 1].size()}, {"max_rel_error", err}});
  }
  json report{{"step", at_step}, {"tolerance", tol}, {"diagonal", layers}};
  if (full) {
    if (w.depth() != 2 || cfg.problem.d > kMaxFullHessianDim)
      throw ConfigError("--full needs depth 2 and d <= " + std::to_string(kMaxFullHessianDim));
    const Matrix H = assemble(hessian_full_two_layer(w, p));
    std::vector<IndexPair> pairs;
    for (std::size_t i = 0; i < H.rows(); ++i)
      for (std::size_t j = 0; j < H.cols(); ++j) pairs.push_back({i, j});
    const auto fd = hessian_fd_oracle([&](const Weights& x) { return loss_bar<long double>(x, p); }, w, pairs);
    const double err = max_rel_error(H.values(), fd);
    const double asym = max_abs_diff(H, transpose(H));
    pass &= err <= tol && asym <= 1e-12;
    report["full"] = {{"entries", H.size()}, {"max_rel_error", err}, {"asymmetry", asym}};
  }
  report["pass"] = pass;
  std::cout << report.dump(2) << "\n";
  return pass ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hessian-diagonal geometry experiments for deep linear networks"};
  app.require_subcommand(1);

  std::string config, out_dir, run_a, run_b, param, suite = "all";
  std::vector<double> levels;
  unsigned threads = 0;
  std::uint64_t at_step = 0;
  // The loss is exactly quadratic in any single weight, so a large diagonal
  // step adds no truncation error and keeps the constant loss offset from
  // swamping small curvatures.
  double tol = 1e-6, fd_step = 0.1;
  bool full = false;

  auto* run = app.add_subcommand("run", "Run one experiment and write records.csv, config.json, phases.json");
  run->add_option("config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--out", out_dir, "Override output.path");

  auto* compare = app.add_subcommand("compare", "Equal-loss comparison of two finished runs");
  compare->add_option("run_a", run_a, "First run directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("run_b", run_b, "Second run directory")->required()->check(CLI::ExistingDirectory);
  compare->add_option("--levels", levels, "Loss levels (default d/2, d/10, d/100)")->delimiter(',');

  auto* sweep = app.add_subcommand("sweep", "Independent runs over one parameter");
  sweep->add_option("config", config, "Base experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--param", param, "name=v1,v2,... (d, alpha, eta, sigma, steps, seed_*)")->required();
  sweep->add_option("-j,--threads", threads, "Worker threads (default: hardware concurrency)");

  auto* verify = app.add_subcommand("verify", "Run an acceptance suite; JSON report on stdout");
  verify->add_option("suite", suite, "Suite name")->check(CLI::IsMember(diaggeo::acceptance::suite_names()));

  auto* hcheck = app.add_subcommand("hessian-check", "Closed-form Hessian versus finite differences");
  hcheck->add_option("config", config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  hcheck->add_option("--at-step", at_step, "Check after this many updates");
  hcheck->add_option("--tol", tol, "Maximum relative error");
  hcheck->add_option("--fd-step", fd_step, "Finite-difference step for the diagonal")->check(CLI::PositiveNumber);
  hcheck->add_flag("--full", full, "Also check every two-layer Hessian entry");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*run) return cmd_run(config, out_dir);
    if (*compare) return cmd_compare(run_a, run_b, levels);
    if (*sweep) return cmd_sweep(config, param, threads);
    if (*verify) return cmd_verify(suite);
    if (*hcheck) return cmd_hessian_check(config, at_step, tol, fd_step, full);
  } catch (const diaggeo::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}
