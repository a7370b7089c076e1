#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>
#include <vector>

#include "oracles.hpp"
#include "qcd/calibration.hpp"

using namespace qcd;

namespace {

LadderOptions ladder_opts(std::size_t reps, std::uint64_t seed = 1, std::uint64_t budget = 100'000'000) {
  LadderOptions o;
  o.reps = reps;
  o.seed = seed;
  o.step_budget = budget;
  return o;
}

ThresholdSearchOptions search_opts(std::size_t reps, std::uint64_t seed = 1) {
  ThresholdSearchOptions s;
  s.ladder = ladder_opts(reps, seed);
  return s;
}

DetectorSpec dcusum_spec(std::size_t sensors, double delta, double lambda) {
  DetectorSpec s;
  s.kind = DetectorKind::dcusum;
  s.quantizer.sensors.assign(sensors, SensorQuantizer{delta, delta, {}, {}, {lambda}, {lambda}});
  return s;
}

/// Thresholds inside one lattice gap give the same rule, which the ladder
/// shows as identical stopping times; a randomized rule then moves up
/// through its weight.
bool rule_increases(FalseAlarmLadder& ladder, const CalibrationRecord& a, const CalibrationRecord& b) {
  if (ladder.at(b.threshold).stop_steps != ladder.at(a.threshold).stop_steps) return b.threshold > a.threshold;
  return a.randomized() && b.randomized() &&
         ladder.at(b.threshold_low).stop_steps == ladder.at(a.threshold_low).stop_steps &&
         b.mix_weight > a.mix_weight;
}

}  // namespace

TEST(DetectorNames, RoundTrip) {
  for (auto k : {DetectorKind::centralized, DetectorKind::qcusum, DetectorKind::dcusum, DetectorKind::mei,
                 DetectorKind::mincusum}) {
    EXPECT_EQ(parse_detector(detector_name(k)), k);
  }
  EXPECT_THROW(parse_detector("cusum"), std::invalid_argument);
}

TEST(ReplicationIds, PurposesNeverCollide) {
  std::set<std::uint64_t> ids;
  for (auto p : {RunPurpose::false_alarm, RunPurpose::delay, RunPurpose::diagnostic}) {
    for (std::uint64_t r = 0; r < 1000; ++r) ids.insert(replication_id(p, r));
  }
  EXPECT_EQ(ids.size(), 3000u);
}

TEST(Ladder, AgreesWithIndependentRuns) {
  const auto model = SensorModel::gaussian(3, 1.0);
  for (const DetectorSpec& spec : {DetectorSpec{}, dcusum_spec(3, 1.287, 1.87)}) {
    FalseAlarmLadder ladder(spec, model, ladder_opts(50, 9));
    for (double x : {2.0, 4.5}) {
      const auto s = ladder.at(x);
      for (std::size_t i = 0; i < 50; ++i) {
        const auto r = run_detector(spec, model, x, kNoChange, 9, replication_id(RunPurpose::false_alarm, i),
                                    std::numeric_limits<std::int64_t>::max());
        ASSERT_EQ(s.stop_steps[i], double(r.stop_time)) << spec.name() << " x=" << x << " i=" << i;
        ASSERT_DOUBLE_EQ(s.u_at_stop[i], r.u_at_stop);
      }
    }
  }
}

TEST(Ladder, BridgedCentralizedAgreesWithIndependentRuns) {
  // Bridge draws depend on the watched level, so the agreement is in law only.
  const auto model = SensorModel::brownian(2, 1.0, 1e-2);
  DetectorSpec spec;
  FalseAlarmLadder ladder(spec, model, ladder_opts(10000, 4));
  const auto s = ladder.at(2.5);
  std::vector<double> steps, minus_u;
  for (std::size_t i = 0; i < 10000; ++i) {
    const auto r = run_detector(spec, model, 2.5, kNoChange, 5, replication_id(RunPurpose::false_alarm, i),
                                std::numeric_limits<std::int64_t>::max());
    steps.push_back(double(r.stop_time));
    minus_u.push_back(-r.u_at_stop);
  }
  EXPECT_TRUE(agree_within(estimate_of(s.stop_steps), estimate_of(steps)));
  const auto fa = summarize_false_alarm(s, model);
  EXPECT_TRUE(agree_within(fa.gamma_direct, estimate_of(minus_u)));
}

TEST(Ladder, PathwiseMonotoneInThreshold) {
  FalseAlarmLadder ladder({}, SensorModel::gaussian(2, 1.0), ladder_opts(200));
  const auto a = ladder.at(3.0), b = ladder.at(5.0);
  for (std::size_t i = 0; i < 200; ++i) EXPECT_LE(a.stop_steps[i], b.stop_steps[i]);
  // Going back down reuses the records.
  const auto steps = ladder.steps_used();
  ladder.at(4.0);
  EXPECT_EQ(ladder.steps_used(), steps);
}

TEST(Ladder, IndependentOfJobs) {
  const auto model = SensorModel::gaussian(5, 1.0);
  auto o1 = ladder_opts(64), o4 = ladder_opts(64);
  o4.jobs = 4;
  FalseAlarmLadder a(dcusum_spec(5, 1.287, 1.87), model, o1), b(dcusum_spec(5, 1.287, 1.87), model, o4);
  EXPECT_EQ(a.at(6.0).stop_steps, b.at(6.0).stop_steps);
}

TEST(Ladder, BudgetExceeded) {
  FalseAlarmLadder ladder({}, SensorModel::gaussian(1, 1.0), ladder_opts(10, 1, 1000));
  EXPECT_THROW(ladder.at(30.0), CalibrationError);
  EXPECT_THROW(FalseAlarmLadder({}, SensorModel::gaussian(1, 1.0), ladder_opts(1)), std::invalid_argument);
}

TEST(FalseAlarm, WaldIdentity) {
  const auto model = SensorModel::gaussian(5, 1.0);
  FalseAlarmLadder ladder({}, model, ladder_opts(4000, 3));
  const auto fa = summarize_false_alarm(ladder.at(4.0), model);
  EXPECT_TRUE(agree_within(fa.gamma_direct, fa.gamma_wald, 3.0))
      << fa.gamma_direct.mean << " vs " << fa.gamma_wald.mean;
  EXPECT_DOUBLE_EQ(pooled_drift_per_step(model), 2.5);
}

TEST(FalseAlarm, ContinuousTimeClosedForm) {
  const auto model = SensorModel::brownian(1, 1.0, 1e-3);
  FalseAlarmLadder ladder({}, model, ladder_opts(10000, 5, 1'000'000'000));
  const auto fa = summarize_false_alarm(ladder.at(3.0), model);
  EXPECT_NEAR(fa.gamma_direct.mean / ct_closed_forms(3.0).gamma, 1.0, 0.03);
}

TEST(CalibrateThreshold, ContinuousCentralizedMatchesInverse) {
  const auto model = SensorModel::brownian(1, 1.0, 1e-3);
  auto opt = search_opts(4000, 2);
  opt.ladder.step_budget = 1'000'000'000;
  const auto rec = calibrate_threshold(DetectorSpec{}, model, {16.085536923187668, GammaMeasure::kl_units}, opt);
  EXPECT_FALSE(rec.randomized());
  EXPECT_NEAR(rec.threshold / 3.0, 1.0, 0.01);
}

TEST(CalibrateThreshold, TargetReachedAndMonotone) {
  const auto model = SensorModel::gaussian(2, 1.0);
  DetectorSpec q;
  q.kind = DetectorKind::qcusum;
  QcusumCalibrationOptions qo;
  qo.reps = 100000;
  q.qcusum = calibrate_qcusum(model, 3, 2, qo);
  DetectorSpec mei, mn;
  mei.kind = DetectorKind::mei;
  mn.kind = DetectorKind::mincusum;
  for (const auto& spec : {DetectorSpec{}, dcusum_spec(2, 1.287, 1.87), q, mei, mn}) {
    const std::vector<FalseAlarmTarget> targets{{50, GammaMeasure::kl_units}, {100, GammaMeasure::kl_units}};
    const auto recs = calibrate_thresholds(spec, model, targets, search_opts(1000, 6));
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const auto& r = recs[i];
      EXPECT_NEAR(r.achieved_gamma_wald.mean / targets[i].gamma, 1.0, 0.02) << spec.name();
      EXPECT_LE(r.threshold_low, r.threshold);
      EXPECT_GT(r.mix_weight, 0.0);
      EXPECT_LE(r.mix_weight, 1.0);
      EXPECT_FALSE(r.trace.empty());
    }
    FalseAlarmLadder ladder(spec, model, search_opts(1000, 6).ladder);
    EXPECT_TRUE(rule_increases(ladder, recs[0], recs[1])) << spec.name();
  }
}

TEST(CalibrateThreshold, PhysicalTimeMeasure) {
  const auto model = SensorModel::gaussian(2, 1.0);
  const auto rec = calibrate_threshold(DetectorSpec{}, model, {80, GammaMeasure::physical_time}, search_opts(1000));
  EXPECT_NEAR(rec.achieved_gamma.mean / 80.0, 1.0, 0.02);
  EXPECT_DOUBLE_EQ(rec.achieved_gamma.mean, rec.fa_period_steps.mean);
}

TEST(CalibrateThreshold, LatticeStatisticIsRandomized) {
  // Binary D-CUSUM with one sensor: the statistic moves in multiples of 1.87.
  const auto model = SensorModel::gaussian(1, 1.0);
  const auto rec =
      calibrate_threshold(dcusum_spec(1, 1.287, 1.87), model, {60, GammaMeasure::kl_units}, search_opts(2000));
  EXPECT_TRUE(rec.randomized());
  EXPECT_LT(rec.threshold_low, rec.threshold);
  EXPECT_NEAR(rec.achieved_gamma_wald.mean / 60.0, 1.0, 0.02);
}

TEST(CalibrateThreshold, MixSamplesIsConvexCombination) {
  FalseAlarmLadder::Sample hi{{10, 20}, {-5, -6}}, lo{{2, 4}, {-1, -2}};
  const auto m = mix_samples(hi, lo, 0.25);
  EXPECT_DOUBLE_EQ(m.stop_steps[0], 4.0);
  EXPECT_DOUBLE_EQ(m.stop_steps[1], 8.0);
  EXPECT_DOUBLE_EQ(m.u_at_stop[1], -3.0);
}

TEST(CalibrateThreshold, UnattainablyFrequentAlarms) {
  // Stopping at the first step already gives gamma = K Ibar_inf = 0.5.
  EXPECT_THROW(calibrate_threshold(DetectorSpec{}, SensorModel::gaussian(1, 1.0), {0.05, GammaMeasure::kl_units},
                                   search_opts(200)),
               CalibrationError);
  EXPECT_THROW(calibrate_threshold(DetectorSpec{}, SensorModel::gaussian(1, 1.0), {-1.0, GammaMeasure::kl_units},
                                   search_opts(200)),
               std::invalid_argument);
}

TEST(NuTildeBound, Values) {
  EXPECT_NEAR(nu_tilde_bound(1e3, 0.5), 7.60090245954208, 1e-12);
  EXPECT_NEAR(nu_tilde_bound(1e4, 0.5) - nu_tilde_bound(1e3, 0.5), std::log(10.0), 1e-12);
  EXPECT_THROW(nu_tilde_bound(1e3, 0.0), std::invalid_argument);
  EXPECT_THROW(nu_tilde_bound(0.1, 0.5), std::invalid_argument);
}

TEST(NuTildeBound, HoldsForCalibratedDcusum) {
  const auto model = SensorModel::gaussian(5, 1.0);
  ExitSimOptions mc;
  mc.reps = 200000;
  DeltaSearchOptions dopt;
  dopt.sim = mc;
  DetectorSpec spec;
  spec.kind = DetectorKind::dcusum;
  spec.quantizer = to_config(calibrate_quantizer(model, 3.0, 1, dopt, mc));
  const std::vector<FalseAlarmTarget> targets{{1e2, GammaMeasure::kl_units}, {1e3, GammaMeasure::kl_units},
                                              {1e4, GammaMeasure::kl_units}};
  const auto recs = calibrate_thresholds(spec, model, targets, search_opts(1000, 8));
  const double ibar_inf = kl_numbers(model).ibar_inf;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_LE(std::max(recs[i].threshold, recs[i].threshold_low), nu_tilde_bound(targets[i].gamma, ibar_inf));
  }
}

TEST(SprtOracle, MatchesDirectCusum) {
  const auto model = SensorModel::gaussian(1, 1.0);
  const double nu = 4.0;
  const auto o = sprt_cusum_oracle(model, nu, 400000, 7);

  std::vector<double> post;
  for (std::uint64_t i = 0; i < 20000; ++i) {
    post.push_back(run_detector({}, model, nu, 0, 7, replication_id(RunPurpose::delay, i), 1'000'000).u_at_stop);
  }
  const Estimate direct0 = estimate_of(post);
  EXPECT_TRUE(agree_within(o.e0_u_at_stop, direct0)) << o.e0_u_at_stop.mean << " vs " << direct0.mean;

  FalseAlarmLadder ladder({}, model, ladder_opts(4000, 7));
  const auto fa = summarize_false_alarm(ladder.at(nu), model);
  EXPECT_TRUE(agree_within(o.einf_minus_u_at_stop, fa.gamma_direct))
      << o.einf_minus_u_at_stop.mean << " vs " << fa.gamma_direct.mean;
}

TEST(SprtOracle, OneCycleLimit) {
  // For a vanishing threshold a cycle is one step: E0[x] / P0(x > 0).
  const auto o = sprt_cusum_oracle(SensorModel::gaussian(1, 1.0), 1e-12, 400000, 3);
  const double p_pos = 0.5 * std::erfc(-0.5 / std::sqrt(2.0));
  EXPECT_NEAR(o.p0_upper, p_pos, 0.003);
  EXPECT_NEAR(o.e0_u_at_stop.mean, 0.5 / p_pos, 3 * o.e0_u_at_stop.std_error);
}

TEST(SprtOracle, RejectsBridgedModels) {
  EXPECT_THROW(sprt_cusum_oracle(SensorModel::brownian(1, 1.0), 2.0, 100), std::invalid_argument);
  EXPECT_THROW(sprt_cusum_oracle(SensorModel::gaussian(1, 1.0), 0.0, 100), std::invalid_argument);
}
