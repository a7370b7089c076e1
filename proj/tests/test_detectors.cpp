#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "oracles.hpp"
#include "qcd/calibration.hpp"
#include "qcd/detectors.hpp"

using namespace qcd;

namespace {

PathBundle constant_paths(std::size_t sensors, double value, std::int64_t horizon) {
  PathBundle b;
  b.change_time = 0;
  b.horizon = horizon;
  b.increments.assign(sensors, std::vector<double>(static_cast<std::size_t>(horizon), value));
  return b;
}

QuantizerConfig binary_config(std::size_t sensors, double delta, double lambda) {
  QuantizerConfig c;
  c.sensors.assign(sensors, SensorQuantizer{delta, delta, {}, {}, {lambda}, {lambda}});
  return c;
}

}  // namespace

TEST(CusumStep, Recursion) {
  CusumState s;
  s = cusum_step(s, 0.0);
  EXPECT_EQ(s.y, 0.0);
  CusumState t;
  t.y = -1.0;
  t = cusum_step(t, 0.5);
  EXPECT_EQ(t.y, 0.5);
  t.stopped_at = 3;
  EXPECT_THROW(cusum_step(t, 1.0), std::logic_error);
}

TEST(CusumStep, EqualsPathDefinition) {
  const auto paths = oracle::random_walks({1.0}, 5000, 10000, 21);
  const auto& x = paths.increments[0];
  const auto want = oracle::cusum_by_definition(x);
  CusumState s;
  for (std::size_t n = 0; n < x.size(); ++n) {
    s = cusum_step(s, x[n]);
    ASSERT_NEAR(s.y, want[n], 1e-9) << n;
    ASSERT_NEAR(s.u - s.min_u, std::max(s.y, 0.0), 1e-9);
  }
}

TEST(Centralized, DeterministicRamp) {
  const auto r = run_centralized(constant_paths(1, 0.5, 10), 2.0);
  EXPECT_TRUE(r.stopped);
  EXPECT_EQ(r.stop_time, 4);
  EXPECT_DOUBLE_EQ(r.u_at_stop, 2.0);
}

TEST(Centralized, TinyThresholdStopsOnFirstPositiveIncrement) {
  const auto r = run_centralized(constant_paths(1, 0.1, 5), 1e-12);
  EXPECT_EQ(r.stop_time, 1);
  auto b = constant_paths(1, -0.1, 5);
  b.increments[0][3] = 0.2;
  EXPECT_EQ(run_centralized(b, 1e-12).stop_time, 4);
  EXPECT_THROW(run_centralized(b, 0.0), std::invalid_argument);
}

TEST(Centralized, MatchesOracleOnPooledWalk) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto paths = oracle::random_walks({1.0, 0.5, 2.0}, 100, 3000, seed);
    const double nu = 6.0;
    const auto r = run_centralized(paths, nu);
    const auto want = oracle::first_crossing(oracle::cusum_by_definition(oracle::pooled(paths)), nu);
    ASSERT_GT(want, 0);
    EXPECT_EQ(r.stop_time, want) << seed;
  }
}

TEST(Centralized, NotStoppedReportsHorizon) {
  const auto r = run_centralized(constant_paths(2, -1.0, 50), 1.0);
  EXPECT_FALSE(r.stopped);
  EXPECT_EQ(r.stop_time, 50);
  EXPECT_DOUBLE_EQ(r.u_at_stop, -100.0);
}

TEST(FusionCenter, ThirdMessageCrossesFive) {
  const auto cfg = binary_config(1, 1.287, 1.87);
  std::vector<Message> msgs;
  for (int i = 1; i <= 5; ++i) msgs.push_back({0, 3 * i, 1});
  const auto r = run_dcusum(msgs, cfg, 5.0);
  EXPECT_TRUE(r.stopped);
  EXPECT_EQ(r.stop_time, 9);
  EXPECT_EQ(r.messages_consumed, 3);
  EXPECT_EQ(r.bits_transmitted, 3);
  EXPECT_NEAR(r.statistic_at_stop, 3 * 1.87, 1e-12);
}

TEST(FusionCenter, AlternatingMessagesNeverStop) {
  const auto cfg = binary_config(1, 1.287, 1.87);
  std::vector<Message> msgs;
  FusionCenter f(cfg);
  for (int i = 1; i <= 1000; ++i) {
    const Message m{0, i, i % 2 ? 1 : -1};
    msgs.push_back(m);
    const double y = f.consume(std::span<const Message>(&m, 1));
    ASSERT_LE(y, 1.87 + 1e-12);
  }
  EXPECT_FALSE(run_dcusum(msgs, cfg, 1.9).stopped);
}

TEST(FusionCenter, OrderOfSimultaneousMessagesIrrelevant) {
  QuantizerConfig cfg;
  cfg.sensors = {SensorQuantizer{1, 1, {}, {}, {0.1}, {0.3}}, SensorQuantizer{1, 1, {}, {}, {1e16}, {0.7}},
                 SensorQuantizer{1, 1, {}, {}, {1e-3}, {2.0}}};
  std::vector<Message> a{{0, 1, 1}, {1, 1, 1}, {2, 1, -1}};
  std::vector<Message> b{{2, 1, -1}, {0, 1, 1}, {1, 1, 1}};
  FusionCenter fa(cfg), fb(cfg);
  EXPECT_EQ(fa.consume(a), fb.consume(b));
  EXPECT_EQ(fa.u_tilde(), fb.u_tilde());
  EXPECT_EQ(fa.bits(), 3);
}

TEST(FusionCenter, RejectsUnorderedStream) {
  const auto cfg = binary_config(1, 1.0, 1.0);
  std::vector<Message> msgs{{0, 5, 1}, {0, 3, -1}};
  EXPECT_THROW(run_dcusum(msgs, cfg, 10.0), std::invalid_argument);
  EXPECT_THROW(run_dcusum(msgs, cfg, 0.0), std::invalid_argument);
}

TEST(DCusum, MatchesOracleOnRandomPaths) {
  QuantizerConfig cfg;
  cfg.sensors = {SensorQuantizer{1.287, 1.287, {0.583}, {0.583}, {1.54, 2.35}, {1.54, 2.35}},
                 SensorQuantizer{1.0, 0.8, {0.4}, {0.3}, {1.2, 1.9}, {1.0, 1.5}},
                 SensorQuantizer{2.0, 2.0, {0.5}, {0.5}, {2.5, 3.1}, {2.5, 3.1}}};
  const double nu = 8.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto paths = oracle::random_walks({1.0, 0.8, 1.2}, 200, 4000, seed);
    const auto want = oracle::dcusum(paths, cfg.sensors, nu);
    ASSERT_GT(want.stop, 0);

    DCusum det(cfg);
    const auto r = run_on_bundle(det, paths, nu, "dcusum");
    EXPECT_EQ(r.stop_time, want.stop) << seed;
    EXPECT_NEAR(det.statistic(), want.y[static_cast<std::size_t>(want.stop - 1)], 1e-9);

    std::vector<std::vector<Message>> per;
    for (std::size_t k = 0; k < 3; ++k) per.push_back(run_sensor(paths.increments[k], cfg[k], k));
    const auto streamed = run_dcusum(merge_messages(per), cfg, nu);
    EXPECT_EQ(streamed.stop_time, want.stop);
    EXPECT_EQ(streamed.messages_consumed, r.messages_consumed);
    EXPECT_EQ(streamed.bits_transmitted, 2 * r.messages_consumed);
  }
}

TEST(DCusum, OvershootBounded) {
  const auto cfg = binary_config(5, 1.287, 1.87);
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const auto paths = oracle::random_walks(std::vector<double>(5, 1.0), 0, 2000, seed);
    const double nu = 7.0;
    DCusum det(cfg);
    const auto r = run_on_bundle(det, paths, nu, "dcusum");
    ASSERT_TRUE(r.stopped);
    EXPECT_LE(r.statistic_at_stop, nu + 5 * cfg.max_lambda());
  }
}

TEST(DCusum, MessagesOnlyAtExitInstants) {
  const auto cfg = binary_config(2, 1.0, 1.0);
  DCusum det(cfg);
  std::vector<double> step{0.4, -0.6};
  int events = 0;
  for (int t = 1; t <= 6; ++t) {
    const auto obs = det.step(step);
    if (obs.evaluated) {
      ++events;
      EXPECT_FALSE(det.last_messages().empty());
    }
  }
  EXPECT_EQ(events, 4);  // t = 2, 3, 4, 6
}

TEST(QCusum, StopsOnBlockBoundaries) {
  QcusumCalibrationOptions o;
  o.reps = 100000;
  const auto model = SensorModel::gaussian(3, 1.0);
  auto cfg = calibrate_qcusum(model, 3, 2, o);
  cfg.nu_hat = 5.0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto paths = oracle::random_walks({1.0, 1.0, 1.0}, 50, 3000, seed);
    const auto r = run_qcusum(paths, cfg);
    ASSERT_TRUE(r.stopped);
    EXPECT_EQ(r.stop_time % 3, 0);
    std::vector<std::vector<double>> g, l;
    for (const auto& s : cfg.sensors) {
      g.push_back(s.gammas);
      l.push_back(s.block_llrs);
    }
    EXPECT_EQ(r.stop_time, oracle::qcusum_stop(paths, 3, g, l, cfg.nu_hat)) << seed;
  }
}

TEST(QCusum, SymmetricBinaryBlocks) {
  QcusumCalibrationOptions o;
  o.reps = 400000;
  o.gammas = {{0.0}};
  const auto cfg = calibrate_qcusum(SensorModel::gaussian(1, 1.0), 3, 2, o);
  const auto& l = cfg.sensors[0].block_llrs;
  // Each side estimated from 4e5 blocks: log-ratio error below 0.01.
  EXPECT_NEAR(l[1], -l[0], 0.02);
  EXPECT_GT(l[1], 0.0);
}

TEST(QCusum, BlockLlrsMatchFreshCellMasses) {
  QcusumCalibrationOptions o;
  o.reps = 400000;
  const auto cfg = calibrate_qcusum(SensorModel::gaussian(1, 1.0), 3, 4, o);
  const auto& s = cfg.sensors[0];
  std::mt19937_64 eng(31337);
  std::normal_distribution<double> n01;
  const int n = 400000;
  std::vector<double> c0(4), ci(4);
  for (int i = 0; i < n; ++i) {
    double b0 = 0, bi = 0;
    for (int j = 0; j < 3; ++j) {
      b0 += n01(eng) + 0.5;
      bi += n01(eng) - 0.5;
    }
    c0[QcusumConfig::cell(s, b0) - 1] += 1;
    ci[QcusumConfig::cell(s, bi) - 1] += 1;
  }
  for (int j = 0; j < 4; ++j) {
    const double want = std::log(c0[j] / ci[j]);
    // Both estimates carry the same binomial error.
    const double se = std::sqrt((1 - c0[j] / n) / c0[j] + (1 - ci[j] / n) / ci[j]);
    EXPECT_NEAR(s.block_llrs[j], want, 3 * std::sqrt(2.0) * se) << j;
    EXPECT_NEAR(s.p0_mass[j], 0.25, 0.005);
  }
  EXPECT_GT(qcusum_information(cfg), 0.0);
}

TEST(QCusum, ConfigValidation) {
  QcusumConfig c{3, 2, {QcusumSensor{{0.0}, {1.0, -1.0}, {0.5, 0.5}}}, 1.0};
  EXPECT_NO_THROW(c.validate());
  c.alphabet = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.alphabet = 2;
  c.period = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(calibrate_qcusum(SensorModel::gaussian(1, 1.0), 3, 1), std::invalid_argument);
}

TEST(LocalRules, SingleSensorIsCusum) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto paths = oracle::random_walks({1.0}, 100, 3000, seed);
    const LocalCusumBank bank{{4.0}};
    const auto c = run_centralized(paths, 4.0);
    EXPECT_EQ(run_mei(paths, bank).stop_time, c.stop_time);
    EXPECT_EQ(run_mincusum(paths, bank).stop_time, c.stop_time);
  }
}

TEST(LocalRules, MatchOracleAndOrdering) {
  const std::vector<double> c{3.0, 5.0, 4.0};
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto paths = oracle::random_walks({1.0, 1.5, 0.7}, 100, 5000, seed);
    const auto mei = run_mei(paths, {c});
    const auto mn = run_mincusum(paths, {c});
    EXPECT_EQ(mei.stop_time, oracle::local_rule_stop(paths, c, true));
    EXPECT_EQ(mn.stop_time, oracle::local_rule_stop(paths, c, false));
    EXPECT_LE(mn.stop_time, mei.stop_time);

    // Mei cannot stop before every sensor has crossed on its own.
    const auto y = oracle::local_cusums(paths);
    std::int64_t latest = 0;
    for (std::size_t k = 0; k < 3; ++k) latest = std::max(latest, oracle::first_crossing(y[k], c[k]));
    EXPECT_GE(mei.stop_time, latest);
  }
  EXPECT_THROW(run_mei(oracle::random_walks({1.0}, 0, 10, 1), {{1.0, 2.0}}), std::invalid_argument);
  EXPECT_THROW(run_mei(oracle::random_walks({1.0}, 0, 10, 1), {{0.0}}), std::invalid_argument);
}

TEST(LocalRules, MeiSimultaneityOnRampPaths) {
  // Sensor 0 crosses at 4 then falls back below before sensor 1 arrives.
  PathBundle b;
  b.horizon = 12;
  b.increments = {{1, 1, 1, 1, -3, 0, 0, 0, 0, 1, 1, 1}, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5}};
  const LocalCusumBank bank{{3.5, 4.0}};
  EXPECT_EQ(run_mei(b, bank).stop_time, oracle::local_rule_stop(b, bank.thresholds, true));
  EXPECT_EQ(run_mei(b, bank).stop_time, 12);
  EXPECT_EQ(run_mincusum(b, bank).stop_time, 4);
}

TEST(LocalRules, ThresholdsProportionalToInformation) {
  // DetectorRun weights sensor k by I0^k, so threshold c means c^k = c I0^k.
  const auto model = SensorModel::gaussian({1.0, 2.0});
  DetectorSpec mei;
  mei.kind = DetectorKind::mei;
  const double c = 6.0;
  for (std::uint64_t rep = 0; rep < 10; ++rep) {
    const auto r = run_detector(mei, model, c, 0, 3, rep, 100000);
    PathStream ps(model, 0, 3, rep);
    PathBundle b;
    b.horizon = r.stop_time;
    b.increments.assign(2, {});
    std::vector<double> x(2);
    for (std::int64_t t = 0; t < r.stop_time; ++t) {
      ps.next(x);
      b.increments[0].push_back(x[0]);
      b.increments[1].push_back(x[1]);
    }
    EXPECT_EQ(oracle::local_rule_stop(b, {c * 0.5, c * 2.0}, true), r.stop_time);
  }
}
