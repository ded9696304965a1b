#include <cmath>

#include <gtest/gtest.h>

#include "mfpam/evaluation.hpp"
#include "mfpam/random.hpp"

using namespace mfpam;
using namespace mfpam::eval;

namespace {

PitchTrajectory traj(std::vector<double> f, double hop = 0.002) {
  return PitchTrajectory{hop, hop / 2, std::move(f)};
}

struct Naive {
  double rpa, rca, mae;
};

// per-frame loop written straight from the metric definitions
Naive naive(const std::vector<double>& est, const std::vector<double>& ref) {
  int voiced = 0, hit = 0, chroma = 0;
  double err = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (ref[i] <= 0.0) continue;
    ++voiced;
    if (est[i] <= 0.0) {
      err += ref[i];
      continue;
    }
    const double cents = 1200.0 * std::log2(est[i] / ref[i]);
    if (std::abs(cents) <= 50.0) ++hit;
    const double octaves = std::round(cents / 1200.0);
    if (std::abs(cents - 1200.0 * octaves) <= 50.0) ++chroma;
    err += std::abs(est[i] - ref[i]);
  }
  return {100.0 * hit / voiced, 100.0 * chroma / voiced, err / voiced};
}

}  // namespace

TEST(Rpa, Examples) {
  auto ref = traj({100, 200, 300});
  EXPECT_EQ(rpa(ref, ref), 100.0);
  EXPECT_EQ(rpa(traj({200, 400, 600}), ref), 0.0);
  EXPECT_NEAR(rpa(traj({101, 230, 300}), ref), 200.0 / 3.0, 1e-9);
}

TEST(Rca, Examples) {
  auto ref = traj({100, 200, 300});
  EXPECT_EQ(rca(traj({200, 400, 600}), ref), 100.0);
  EXPECT_EQ(rca(traj({50, 100, 150}), ref), 100.0);
  EXPECT_EQ(rca(ref, ref), 100.0);
  const double tritone = std::pow(2.0, 0.5);
  EXPECT_EQ(rca(traj({100 * tritone, 200 * tritone, 300 * tritone}), ref), 0.0);
  EXPECT_EQ(rpa(traj({100 * tritone, 200 * tritone, 300 * tritone}), ref), 0.0);
}

TEST(Mae, Examples) {
  auto ref = traj({100, 100});
  EXPECT_EQ(mae_hz(ref, ref), 0.0);
  EXPECT_EQ(mae_hz(traj({101, 99}), ref), 1.0);
  EXPECT_EQ(mae_hz(traj({0, 100}), ref), 50.0);
}

TEST(Metrics, Errors) {
  EXPECT_THROW(rpa(traj({1, 2}), traj({1, 2, 3})), UsageError);
  EXPECT_THROW(rpa(traj({100, 0}), traj({0, 0})), UsageError);
  EXPECT_THROW(mae_hz(traj({}), traj({})), UsageError);
}

TEST(Metrics, MatchNaiveOracleOnRandomPairs) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(100);
    std::vector<double> ref(n), est(n);
    for (std::size_t i = 0; i < n; ++i) {
      ref[i] = rng.uniform() < 0.2 ? 0.0 : rng.uniform(50, 1000);
      const double u = rng.uniform();
      if (u < 0.1) est[i] = 0.0;
      else if (u < 0.3) est[i] = ref[i] > 0 ? ref[i] * std::exp2(double(rng.index(5)) - 2.0) : 0.0;
      else if (u < 0.6) est[i] = ref[i] > 0 ? ref[i] * std::exp2(rng.uniform(-60, 60) / 1200.0) : 0.0;
      else est[i] = rng.uniform(50, 1000);
    }
    ref[0] = ref[0] > 0 ? ref[0] : 200.0;
    const auto o = naive(est, ref);
    EXPECT_EQ(rpa(traj(est), traj(ref)), o.rpa);
    EXPECT_EQ(rca(traj(est), traj(ref)), o.rca);
    EXPECT_NEAR(mae_hz(traj(est), traj(ref)), o.mae, 1e-9);
  }
}

TEST(Metrics, Properties) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.index(60);
    std::vector<double> ref(n), est(n);
    for (std::size_t i = 0; i < n; ++i) {
      ref[i] = rng.uniform(60, 900);
      est[i] = rng.uniform() < 0.1 ? 0.0 : ref[i] * std::exp2(rng.uniform(-2500, 2500) / 1200.0);
    }
    const auto e = traj(est), r = traj(ref);
    const double p = rpa(e, r), c = rca(e, r);
    EXPECT_GE(c, p);
    EXPECT_GE(p, 0.0);
    EXPECT_LE(c, 100.0);
    EXPECT_GE(mae_hz(e, r), 0.0);
    // appending unvoiced reference frames changes nothing
    auto e2 = est, r2 = ref;
    for (int k = 0; k < 7; ++k) {
      e2.push_back(rng.uniform(60, 900));
      r2.push_back(0.0);
    }
    EXPECT_EQ(rpa(traj(e2), traj(r2)), p);
    EXPECT_EQ(rca(traj(e2), traj(r2)), c);
  }
}

TEST(Metrics, SignSymmetricCentsError) {
  std::vector<double> ref(50), up(50), down(50);
  Rng rng(3);
  for (std::size_t i = 0; i < 50; ++i) {
    ref[i] = rng.uniform(80, 800);
    const double k = rng.uniform(0, 100);
    up[i] = ref[i] * std::exp2(k / 1200.0);
    down[i] = ref[i] * std::exp2(-k / 1200.0);
  }
  EXPECT_EQ(rpa(traj(up), traj(ref)), rpa(traj(down), traj(ref)));
}

TEST(Align, NearestFrameAndHopCheck) {
  // estimate at 4 ms hop onto a 2 ms reference grid
  PitchTrajectory est{0.004, 0.002, {100, 200, 300}};
  PitchTrajectory ref{0.002, 0.001, std::vector<double>(6, 1.0)};
  auto a = align_to(est, ref);
  ASSERT_EQ(a.size(), 6u);
  EXPECT_EQ(a.f0_hz[0], 100.0);
  EXPECT_EQ(a.f0_hz[5], 300.0);
  PitchTrajectory odd{0.003, 0.0015, {1, 2}};
  EXPECT_THROW(align_to(odd, ref), UsageError);
}

TEST(Aggregate, PoolsAndOmitsEmptyBuckets) {
  std::vector<LabelledPair> pairs{
      {"clean", traj({100, 200}), traj({100, 200})},
      {"noise", traj({100, 0}), traj({100, 200})},
      {"reverb", traj({100}), traj({0})},
  };
  auto rep = aggregate(pairs);
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_EQ(rep.rows[0].condition, "clean");
  EXPECT_EQ(rep.rows[0].rpa_pct, 100.0);
  EXPECT_EQ(rep.rows[0].mae_hz, 0.0);
  EXPECT_EQ(rep.rows[1].rpa_pct, 50.0);
  EXPECT_EQ(rep.rows[1].n_frames, 2u);
  ASSERT_EQ(rep.warnings.size(), 1u);
  EXPECT_NE(rep.warnings[0].find("reverb"), std::string::npos);
  EXPECT_EQ(rep.find("reverb"), nullptr);
}

TEST(Aggregate, DuplicationInvariant) {
  std::vector<LabelledPair> pairs{
      {"noise", traj({100, 230, 0}), traj({100, 200, 300})},
      {"noise", traj({400, 120}), traj({200, 100})},
  };
  auto once = aggregate(pairs);
  auto twice_pairs = pairs;
  twice_pairs.insert(twice_pairs.end(), pairs.begin(), pairs.end());
  auto twice = aggregate(twice_pairs);
  EXPECT_EQ(once.rows[0].rpa_pct, twice.rows[0].rpa_pct);
  EXPECT_EQ(once.rows[0].rca_pct, twice.rows[0].rca_pct);
  EXPECT_NEAR(once.rows[0].mae_hz, twice.rows[0].mae_hz, 1e-12);
}

TEST(Report, TableAndCsv) {
  EvalReport rep;
  rep.rows.push_back({"clean", 99.5, 99.75, 1.25, 512});
  EXPECT_EQ(rep.csv(), "condition,rpa,rca,mae,n_frames\nclean,99.5000,99.7500,1.2500,512\n");
  const auto t = rep.table();
  EXPECT_NE(t.find("MAE(Hz)"), std::string::npos);
  EXPECT_NE(t.find("99.50"), std::string::npos);
}
