#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "qrng/errors.hpp"
#include "qrng/optical_model.hpp"
#include "qrng/stats.hpp"

using namespace qrng;
using namespace qrng::optics;

namespace {

constexpr double kPi = std::numbers::pi;
const GainAggregates kPaperAgg{19.4730, 11.5700, 1871.2};

// Random physically valid system with a solvable routine 1 and 2.
SystemParams random_params(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> frac(0.05, 0.95), eta(0.2, 1.0), gain(1e3, 2e4), lo(0.0, 0.2);
  SystemParams p;
  p.t13 = frac(rng);
  p.r14 = frac(rng);
  p.r23 = frac(rng);
  p.t24 = frac(rng);
  p.eta_pm0 = eta(rng);
  p.eta_pm1 = eta(rng);
  p.eta_pm2 = eta(rng);
  p.g_pd1 = gain(rng);
  p.g_pd2 = gain(rng);
  p.e_lo = lo(rng);
  return p;
}

// Second, independently written evaluation of the aggregates.
GainAggregates direct_aggregates(const SystemParams& p) {
  const double e1 = p.eta_pm1, e2 = p.eta_pm2;
  return {p.g_pd1 * p.t13 * e1 * e1 - p.g_pd2 * p.r14 * e1 * e1, p.g_pd1 * p.r23 * e2 * e2 - p.g_pd2 * p.t24 * e2 * e2,
          e1 * e2 * (p.g_pd1 * std::sqrt(p.t13) * std::sqrt(p.r23) + p.g_pd2 * std::sqrt(p.r14) * std::sqrt(p.t24))};
}

}  // namespace

TEST(Coefficients, BalancedSystemHasOnlyInterferenceTerm) {
  SystemParams p;
  p.g_pd1 = p.g_pd2 = 7.5e3;
  const auto g = compute_coefficients(p);
  EXPECT_DOUBLE_EQ(g.a, 0.0);
  EXPECT_DOUBLE_EQ(g.b, 0.0);
  EXPECT_DOUBLE_EQ(g.c, 7.5e3);
}

TEST(Coefficients, MatchesDirectEvaluation) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_params(rng);
    const auto g = compute_coefficients(p);
    const auto d = direct_aggregates(p);
    EXPECT_NEAR(g.a, d.a, 1e-9 * std::abs(d.c));
    EXPECT_NEAR(g.b, d.b, 1e-9 * std::abs(d.c));
    EXPECT_NEAR(g.c, d.c, 1e-12 * d.c);
    EXPECT_GT(g.c, 0.0);
  }
}

TEST(Coefficients, RejectsInvalidParameters) {
  SystemParams p;
  p.t13 = 0.0;
  EXPECT_THROW(compute_coefficients(p), InvalidParameter);
  p = {};
  p.r_ad = 1.5;
  EXPECT_THROW(compute_coefficients(p), InvalidParameter);
  p = {};
  p.eta_pm1 = 0.0;
  EXPECT_THROW(compute_coefficients(p), InvalidParameter);
  p = {};
  p.g_pd1 = -1.0;
  EXPECT_THROW(compute_coefficients(p), InvalidParameter);
  p = {};
  p.e_lo = std::nan("");
  EXPECT_THROW(compute_coefficients(p), InvalidParameter);
}

TEST(CompensationPhase, ClosedFormValues) {
  EXPECT_NEAR(solve_compensation_phase({1, 1, 2}, 1.0), 2.0 * kPi / 3.0, 1e-15);
  EXPECT_NEAR(solve_compensation_phase({0, 0, 5}, 3.0), kPi / 2.0, 1e-15);
  EXPECT_NEAR(solve_compensation_phase(kPaperAgg, 0.5942), 1.5788, 5e-5);
}

TEST(CompensationPhase, OutOfDomainNamesMagnitude) {
  try {
    solve_compensation_phase({10, 10, 1}, 1.0);
    FAIL() << "expected NoSolution";
  } catch (const NoSolution& e) {
    EXPECT_NE(std::string(e.what()).find("exceeds 1"), std::string::npos);
  }
}

TEST(CompensationPhase, Routine2ConsistencyProperty) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.01, 10.0);
  for (int i = 0; i < 1000; ++i) {
    GainAggregates g{u(rng), u(rng), 0.0};
    g.c = std::sqrt(g.a * g.b) * (1.0 + u(rng));
    EXPECT_NEAR(solve_compensation_phase(g, g.b / g.a), std::acos(-std::sqrt(g.a * g.b / (g.c * g.c))), 1e-12);
  }
}

TEST(Routines, PaperCoefficients) {
  const auto r1 = solve_routine(1, kPaperAgg);
  EXPECT_EQ(r1.x_setting.delta_phi, kPi);
  EXPECT_NEAR(r1.x_setting.xi / 3.6934e4, 1.0, 5e-5);
  const auto r2 = solve_routine(2, kPaperAgg);
  EXPECT_NEAR(r2.x_setting.xi, 0.5942, 5e-5);
  EXPECT_NEAR(r2.x_setting.delta_phi, 1.5788, 5e-5);
}

TEST(Routines, Routine1HandExample) {
  const double xi = routine1_split_ratio({1, 1, 2});
  EXPECT_NEAR(xi, 7.0 + 4.0 * std::sqrt(3.0), 1e-12);
  EXPECT_NEAR(xi + 1.0 - 4.0 * std::sqrt(xi), 0.0, 1e-12 * xi);
}

TEST(Routines, PhaseSchedules) {
  const auto r1 = solve_routine(1, kPaperAgg);
  EXPECT_EQ(r1.phi_for_x(), 0.0);
  EXPECT_EQ(r1.phi_for_p(), kPi / 2.0);
  const auto r2 = solve_routine(2, kPaperAgg);
  EXPECT_EQ(r2.phi_for_x(), kPi / 2.0);
  EXPECT_EQ(r2.phi_for_p(), 0.0);
  EXPECT_DOUBLE_EQ(r2.x_setting.xi, kPaperAgg.b / kPaperAgg.a);
  const auto r3 = solve_routine(3, kPaperAgg);
  EXPECT_EQ(r3.phi_for_x(), kPi / 2.0);
  EXPECT_EQ(r3.phi_for_p(), kPi / 2.0);
  EXPECT_DOUBLE_EQ(r3.x_setting.xi, r2.x_setting.xi);
  EXPECT_DOUBLE_EQ(r3.p_setting.xi, r1.x_setting.xi);
  EXPECT_EQ(r3.p_setting.delta_phi, kPi);
}

TEST(Routines, BalancedRoutine2IsQuarterWave) {
  const auto r2 = solve_routine(2, {0.0, 0.0, 1e4});
  EXPECT_DOUBLE_EQ(r2.x_setting.delta_phi, kPi / 2.0);
}

TEST(Routines, DegenerateCoefficientsAreReported) {
  EXPECT_THROW(solve_routine(1, {0.0, 1.0, 1.0}), NoSolution);
  EXPECT_THROW(solve_routine(1, {4.0, 4.0, 1.0}), NoSolution);
  EXPECT_THROW(solve_routine(2, {1.0, -1.0, 5.0}), NoSolution);
  EXPECT_THROW(solve_routine(2, {4.0, 4.0, 1.0}), NoSolution);
  EXPECT_THROW(solve_routine(4, kPaperAgg), InvalidParameter);
  try {
    routine2_split_ratio({4.0, 4.0, 1.0});
  } catch (const NoSolution& e) {
    EXPECT_NE(std::string(e.what()).find("AB <= C^2"), std::string::npos);
  }
}

TEST(Routines, ClosedLoopBiasCancellationAndExclusivity) {
  std::mt19937_64 rng(13);
  int solved = 0;
  for (int i = 0; i < 2000; ++i) {
    auto base = random_params(rng);
    base.e_lo = 0.1;
    const auto g = compute_coefficients(base);
    for (int routine = 1; routine <= 3; ++routine) {
      RoutineConfig rc;
      try {
        rc = solve_routine(routine, g);
      } catch (const NoSolution&) {
        continue;
      }
      ++solved;
      const auto qx = quadrature_coefficients(apply(base, rc.x_setting), g);
      const auto qp = quadrature_coefficients(apply(base, rc.p_setting), g);
      const double sx = dc_term_scale(apply(base, rc.x_setting), g);
      const double sp = dc_term_scale(apply(base, rc.p_setting), g);
      EXPECT_LT(std::abs(qx.dc), kZeroTolerance * sx);
      EXPECT_LT(std::abs(qp.dc), kZeroTolerance * sp);
      EXPECT_LT(std::abs(qx.p), kZeroTolerance * std::abs(qx.x)) << "routine " << routine;
      EXPECT_LT(std::abs(qp.x), kZeroTolerance * std::abs(qp.p)) << "routine " << routine;
    }
  }
  EXPECT_GT(solved, 2000);
}

TEST(Routines, Routine2XMultiplier) {
  SystemParams base;
  base.t13 = 0.48;
  base.r14 = 0.52;
  base.r23 = 0.47;
  base.t24 = 0.53;
  base.g_pd1 = 1.1e4;
  base.g_pd2 = 0.9e4;
  base.eta_pm0 = 0.9;
  base.e_lo = 0.05;
  const auto g = compute_coefficients(base);
  const auto rc = solve_routine(2, g);
  const auto p = apply(base, rc.x_setting);
  const auto q = quadrature_coefficients(p, g);
  const double expect = 2.0 * g.c * p.eta_pm0 * p.e_lo *
                        (std::sqrt(p.r_bc_eff() * p.r_ad) + std::sqrt(p.t_ac * p.t_bd_eff())) * std::sin(p.delta_phi);
  EXPECT_NEAR(q.x, expect, 1e-12 * std::abs(expect));
}

TEST(Routines, Routine1SelectsQuadratureByLoPhase) {
  SystemParams base;
  base.t13 = 0.55;
  base.e_lo = 0.1;
  const auto g = compute_coefficients(base);
  const auto rc = solve_routine(1, g);
  const auto at0 = quadrature_coefficients(apply(base, rc.x_setting), g);
  const auto at90 = quadrature_coefficients(apply(base, rc.p_setting), g);
  EXPECT_LT(std::abs(at0.p), 1e-12 * std::abs(at0.x));
  EXPECT_LT(std::abs(at90.x), 1e-12 * std::abs(at90.p));
}

TEST(Routines, ModeBMismatchKeepsRoutine2Exclusive) {
  // At the routine-2 point the r_bc and t_bd groups of the in-phase term vanish
  // separately, so a mode-b polarization mismatch leaves X exclusive.
  SystemParams base;
  base.t13 = 0.55;
  base.r23 = 0.52;
  base.e_lo = 0.1;
  const auto g = compute_coefficients(base);
  const auto rc = solve_routine(2, g);
  auto p = apply(base, rc.x_setting);
  p.r_bc = 0.3;
  p.t_bd = 0.7;
  const auto q = quadrature_coefficients(p, g);
  EXPECT_LT(std::abs(q.dc), kZeroTolerance * dc_term_scale(p, g));
  EXPECT_LT(std::abs(q.p), 1e-9 * std::abs(q.x));
}

TEST(SplitRatio, Reparameterization) {
  const auto p = SystemParams{}.with_split_ratio(3.0);
  EXPECT_DOUBLE_EQ(p.t_ac, 0.75);
  EXPECT_DOUBLE_EQ(p.r_ad, 0.25);
  EXPECT_DOUBLE_EQ(p.xi(), 3.0);
  EXPECT_THROW(SystemParams{}.with_split_ratio(0.0), InvalidParameter);
}

TEST(CommonMode, BlocksSecondDetector) {
  SystemParams p;
  p.e_lo = 0.1;
  const auto cm = common_mode(p);
  EXPECT_EQ(cm.g_pd2, 0.0);
  const auto g = compute_coefficients(cm);
  EXPECT_DOUBLE_EQ(g.a, p.g_pd1 * p.t13);
}

TEST(DbConversion, Conventions) {
  EXPECT_NEAR(db_loss_to_linear(3.0, DbScale::power), 0.501187233627, 1e-12);
  EXPECT_NEAR(db_loss_to_linear(3.0, DbScale::amplitude), 0.707945784384, 1e-12);
  EXPECT_DOUBLE_EQ(db_loss_to_linear(0.0, DbScale::power), 1.0);
}

TEST(DbConversion, PaperTableUnderPowerConvention) {
  CalibrationTableDb t{3.7039, 3.7882, 3.7603, 3.7109, 3.1066, 3.3585, 9.93e3, 9.69e3};
  const auto g = compute_coefficients(from_calibration_db(t, {DbScale::power, DbScale::power}));
  // B and C agree with the published triple to four figures; A does not.
  EXPECT_NEAR(g.b, 11.57, 0.005);
  EXPECT_NEAR(g.c / 1871.2, 1.0, 5e-5);
  EXPECT_GT(std::abs(g.a - 19.4730), 1.0);
}

namespace {

stats::PsdResult tone_spectrum(double amplitude, double freq, double noise_sd, std::uint64_t seed) {
  const double rate = 6.0e8;
  const std::size_t n = 1 << 17;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, noise_sd);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = amplitude * std::sin(2.0 * kPi * freq * i / rate) + gauss(rng);
  return stats::welch_psd(v, rate, 4096, 0.5, stats::PsdScaling::spectrum);
}

}  // namespace

TEST(Cmrr, IdenticalSpectraGiveZero) {
  const auto s = tone_spectrum(1.0, 5e7, 1e-3, 1);
  EXPECT_DOUBLE_EQ(cmrr_from_spectra(s, s, 5e7), 0.0);
}

TEST(Cmrr, SyntheticSixtyDb) {
  for (double f : {5.0e7, 5.0e7 + 0.37 * 6.0e8 / 4096}) {
    const auto common = tone_spectrum(1.0, f, 1e-4, 2);
    const auto diff = tone_spectrum(1e-3, f, 1e-4, 3);
    EXPECT_NEAR(cmrr_from_spectra(diff, common, f), 60.0, 0.1) << f;
  }
}

TEST(Cmrr, ToneOutsideSpectrum) {
  const auto s = tone_spectrum(1.0, 5e7, 1e-3, 1);
  EXPECT_THROW(cmrr_from_spectra(s, s, 4e8), InvalidParameter);
}
