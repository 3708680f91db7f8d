#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "diaggeo/acceptance.hpp"
#include "diaggeo/harness.hpp"

using namespace diaggeo;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("diaggeo_test_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig small_config(const fs::path& out, OptimizerKind kind = OptimizerKind::SGDM) {
  ExperimentConfig c;
  c.problem.d = 8;
  c.schedule = Schedule::single(preset_spec(Preset::experiment, kind, 1e-2));
  c.steps = 60;
  c.record_every = 10;
  c.output.path = out.string();
  return c;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  const json j = json::parse(R"({
    "preset": "experiment",
    "problem": {"d": 6, "sigma": 0.1, "symmetrize_noise": true},
    "network": {"depth": 3, "alpha": 1.5},
    "schedule": [
      {"start_step": 0, "optimizer": {"kind": "sgdm", "eta": 0.01}},
      {"start_step": 20, "optimizer": {"kind": "adam", "eta": 0.001}}
    ],
    "carry_buffers": true,
    "steps": 50,
    "stats": {"rmed": {"top_k": 2, "subsample": {"count": 3, "seed": 9}}, "record_svd": true},
    "seeds": {"init": 4, "data": 5, "noise": 6}
  })");
  const auto c = config_from_json(j);
  EXPECT_EQ(c.problem.d, 6u);
  EXPECT_EQ(c.network.depth, 3);
  EXPECT_EQ(c.schedule.segments().size(), 2u);
  EXPECT_EQ(c.schedule[1].spec.kind, OptimizerKind::Adam);
  EXPECT_TRUE(c.carry_buffers);
  EXPECT_EQ(c.stats.rmed.subsample->count, 3u);
  const json again = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(again)), again);
}

TEST(Config, InfiniteAlphaRoundTrips) {
  const auto c = config_from_json(json::parse(R"({"network": {"alpha": "inf"}})"));
  EXPECT_TRUE(std::isinf(c.network.alpha));
  EXPECT_EQ(config_to_json(c)["network"]["alpha"], "inf");
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_json(json::parse(R"({"stepz": 5})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"problem": {"dim": 5}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"problem": {"d": 0}})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"record_every": 0})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"schedule": []})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"schedule": [{"start_step": 3, "optimizer": {"kind": "adam"}}]})")),
               ConfigError);
}

TEST(Config, TheoryPresetRequiresNoiselessData) {
  EXPECT_NO_THROW(config_from_json(json::parse(R"({"preset": "theory"})")));
  EXPECT_THROW(config_from_json(json::parse(R"({"preset": "theory", "problem": {"sigma": 0.1}})")), ConfigError);
  const auto c = config_from_json(json::parse(R"({"preset": "theory"})"));
  EXPECT_EQ(c.network.alpha, 2.0);
  EXPECT_TRUE(c.network.theory_mode);
}

TEST(Run, ZeroStepsWritesOneRecord) {
  TempDir tmp;
  auto c = small_config(tmp.path() / "r");
  c.steps = 0;
  const auto res = run_experiment(c);
  ASSERT_EQ(res.records.size(), 1u);
  EXPECT_EQ(res.records[0].step, 0u);
  EXPECT_EQ(res.status, RunStatus::ok);
  EXPECT_EQ(read_records_csv(tmp.path() / "r" / "records.csv").size(), 1u);
}

TEST(Run, RecordsAtCadenceAndFinalStep) {
  TempDir tmp;
  auto c = small_config(tmp.path() / "r");
  c.stats.record_phases = false;
  c.steps = 55;
  const auto res = run_experiment(c, false);
  std::vector<std::uint64_t> steps;
  for (const auto& r : res.records) steps.push_back(r.step);
  EXPECT_EQ(steps, (std::vector<std::uint64_t>{0, 10, 20, 30, 40, 50, 55}));
}

TEST(Run, SameSeedsGiveByteIdenticalFiles) {
  TempDir tmp;
  auto a = small_config(tmp.path() / "a", OptimizerKind::Adam);
  a.problem.sigma = 0.05;
  a.stats.record_alignment = true;
  auto b = a;
  b.output.path = (tmp.path() / "b").string();
  run_experiment(a);
  run_experiment(b);
  for (const char* f : {"records.csv", "phases.json", "alignment.csv"})
    EXPECT_EQ(slurp(tmp.path() / "a" / f), slurp(tmp.path() / "b" / f)) << f;
}

TEST(Run, DifferentNoiseSeedChangesNoisyRun) {
  auto a = small_config("unused");
  a.problem.sigma = 0.1;
  auto b = a;
  b.seeds.noise += 1;
  EXPECT_NE(run_experiment(a, false).final_loss, run_experiment(b, false).final_loss);
}

TEST(Run, CsvRoundTripsEveryField) {
  TempDir tmp;
  auto c = small_config(tmp.path() / "r");
  c.stats.record_svd = true;
  const auto res = run_experiment(c);
  const auto back = read_records_csv(tmp.path() / "r" / "records.csv");
  ASSERT_EQ(back.size(), res.records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].step, res.records[i].step);
    EXPECT_EQ(back[i].loss_bar, res.records[i].loss_bar);
    EXPECT_EQ(back[i].rmed_l1_hess, res.records[i].rmed_l1_hess);
    EXPECT_EQ(back[i].rmed_l2_closed, res.records[i].rmed_l2_closed);
    EXPECT_EQ(back[i].stable_rank, res.records[i].stable_rank);
    EXPECT_EQ(back[i].segment, res.records[i].segment);
  }
}

TEST(Run, DivergenceKeepsPartialRecords) {
  TempDir tmp;
  auto c = small_config(tmp.path() / "r");
  c.network.alpha = 0.01;  // near unit-scale init
  c.schedule = Schedule::single(preset_spec(Preset::experiment, OptimizerKind::SGDM, 5.0));
  c.steps = 500;
  c.record_every = 1;
  const auto res = run_experiment(c);
  EXPECT_EQ(res.status, RunStatus::diverged);
  EXPECT_LT(res.final_step, 500u);
  EXPECT_FALSE(res.records.empty());
  EXPECT_FALSE(read_records_csv(tmp.path() / "r" / "records.csv").empty());
  EXPECT_EQ(json::parse(slurp(tmp.path() / "r" / "phases.json"))["status"], "diverged");
}

TEST(Run, StopLossEndsEarly) {
  auto c = small_config("unused", OptimizerKind::Adam);
  c.steps = 100000;
  c.stop_loss_per_dim = 0.1;
  const auto res = run_experiment(c, false);
  EXPECT_EQ(res.status, RunStatus::stopped);
  EXPECT_LE(res.final_loss, 0.1 * 8);
  EXPECT_EQ(res.records.back().step, res.final_step);
}

TEST(Run, TheoryPresetPairReachesTargetWithAdamFlatter) {
  auto run = [](OptimizerKind k, double eta) {
    ExperimentConfig c;
    c.preset = Preset::theory;
    c.network.alpha = 2.0;
    c.network.theory_mode = true;
    c.problem.d = 64;
    c.schedule = Schedule::single(preset_spec(Preset::theory, k, eta));
    c.steps = 200000;
    c.stop_loss_per_dim = 1e-3;
    c.stats.hessian_route = false;
    c.stats.record_phases = false;
    c.record_every = 100000;
    return run_experiment(c, false);
  };
  const auto sgdm = run(OptimizerKind::SGDM, 1e-3), adam = run(OptimizerKind::Adam, 1e-4);
  ASSERT_EQ(sgdm.status, RunStatus::stopped);
  ASSERT_EQ(adam.status, RunStatus::stopped);
  EXPECT_LT(*adam.records.back().rmed_l1(), *sgdm.records.back().rmed_l1());
  EXPECT_LT(*adam.records.back().rmed_l2(), *sgdm.records.back().rmed_l2());
}

TEST(Compare, SelfComparisonHasUnitRatios) {
  TempDir tmp;
  auto c = small_config(tmp.path() / "r", OptimizerKind::Adam);
  c.steps = 300;
  c.record_every = 1;
  run_experiment(c);
  const auto cmp = compare_runs(tmp.path() / "r", tmp.path() / "r", {4.0, 3.0});
  ASSERT_FALSE(cmp.rows.empty());
  for (const auto& r : cmp.rows) {
    EXPECT_EQ(r.t_a, r.t_b);
    EXPECT_EQ(r.ratio[0], 1.0);
    EXPECT_EQ(r.ratio[1], 1.0);
  }
  EXPECT_EQ(comparison_json(cmp)["rows"].size(), cmp.rows.size());
}

TEST(Compare, DisjointRangesGiveEmptyTableWithNote) {
  std::vector<TrajectoryRecord> a(2), b(2);
  a[0].loss_bar = 10;
  a[1].step = 1, a[1].loss_bar = 9;
  b[0].loss_bar = 1;
  b[1].step = 1, b[1].loss_bar = 0.5;
  const std::vector<double> levels{5.0};
  const auto cmp = compare_trajectories(a, b, levels);
  EXPECT_TRUE(cmp.rows.empty());
  EXPECT_FALSE(cmp.notes.empty());
}

TEST(Compare, MismatchedDimensionIsAnError) {
  TempDir tmp;
  auto a = small_config(tmp.path() / "a");
  auto b = small_config(tmp.path() / "b");
  b.problem.d = 4;
  a.steps = b.steps = 1;
  run_experiment(a);
  run_experiment(b);
  EXPECT_THROW(compare_runs(tmp.path() / "a", tmp.path() / "b"), std::invalid_argument);
}

TEST(Sweep, ParseAndApply) {
  const auto sp = parse_sweep("d=4,8,16");
  EXPECT_EQ(sp.name, "d");
  EXPECT_EQ(sp.values, (std::vector<double>{4, 8, 16}));
  EXPECT_THROW(parse_sweep("d"), ConfigError);
  EXPECT_THROW(parse_sweep("d=4,x"), ConfigError);
  EXPECT_THROW(parse_sweep("=1"), ConfigError);

  ExperimentConfig c;
  apply_param(c, "eta", 0.5);
  EXPECT_EQ(c.schedule[0].spec.eta, 0.5);
  apply_param(c, "seed_noise", 7);
  EXPECT_EQ(c.seeds.noise, 7u);
  EXPECT_THROW(apply_param(c, "bogus", 1), ConfigError);
}

TEST(Sweep, RunsEachValueInItsOwnDirectory) {
  TempDir tmp;
  auto c = small_config(tmp.path() / "s");
  c.steps = 5;
  const auto out = run_sweep(c, parse_sweep("d=4,8"), 2);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].label, "d=4");
  EXPECT_TRUE(fs::exists(tmp.path() / "s" / "d=4" / "records.csv"));
  EXPECT_TRUE(fs::exists(tmp.path() / "s" / "d=8" / "records.csv"));
  EXPECT_EQ(load_config(tmp.path() / "s" / "d=8" / "config.json").problem.d, 8u);
}

// A deliberately wrong diagonal must be caught by the finite-difference criterion.
TEST(Mutation, TamperedDiagonalFailsOracle) {
  const acceptance::DiagFn tampered = [](const Weights& w, std::size_t k) {
    auto h = hessian_diag_layer(w, k);
    h.values[h.values.size() / 2] *= 1.001;
    return h;
  };
  EXPECT_FALSE(acceptance::fd_diagonal(tampered).pass);
  EXPECT_TRUE(acceptance::fd_diagonal().pass);
}

TEST(Mutation, FdSuitePasses) {
  const auto results = acceptance::run_suite("fd-oracle", {});
  ASSERT_EQ(results.size(), 2u);
  for (const auto& r : results) EXPECT_TRUE(r.pass) << acceptance::format_line(r);
  EXPECT_THROW(acceptance::suite_checks("nope"), std::invalid_argument);
}
