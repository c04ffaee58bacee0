/**
 * @file optical_model.hpp
 * @brief Transfer-matrix model of the unbalanced interferometer feeding a
 * balanced homodyne detector, and closed-form solves for the operating points
 * that cancel the LO bias term.
 *
 * Signal chain: LO (phase phi) and the untrusted vacuum input meet at a PBS
 * (ports a, b -> c, d), each arm passes a phase modulator (PM1 carries the
 * compensation phase), and a BS recombines them onto PD1 / PD2 (ports 3, 4).
 * The detector output is
 *
 *   v = dc * (eta0^2 E_L^2 + 2 eta0 E_L dX_L) + kx * dX_s + kp * dP_s
 *
 * with dc, kx, kp returned by quadrature_coefficients().
 */
#pragma once

#include <numbers>
#include <optional>

#include "qrng/stats.hpp"

namespace qrng::optics {

struct SystemParams {
  // Output beam splitter, power fractions.
  double t13 = 0.5;
  double t24 = 0.5;
  double r14 = 0.5;
  double r23 = 0.5;
  // Polarization beam splitter, power fractions. Mode b defaults to tracking
  // mode a (t_bd = t_ac, r_bc = r_ad) unless set explicitly.
  double t_ac = 0.5;
  double r_ad = 0.5;
  std::optional<double> r_bc;
  std::optional<double> t_bd;
  // Phase modulator field transmission factors.
  double eta_pm0 = 1.0;
  double eta_pm1 = 1.0;
  double eta_pm2 = 1.0;
  // Detector gains, V/W.
  double g_pd1 = 1.0e4;
  double g_pd2 = 1.0e4;
  // LO field amplitude, sqrt(W).
  double e_lo = 0.0;
  double phi = 0.0;
  double delta_phi = 0.0;

  double r_bc_eff() const { return r_bc.value_or(r_ad); }
  double t_bd_eff() const { return t_bd.value_or(t_ac); }
  double xi() const { return t_ac / r_ad; }

  // Throws InvalidParameter naming the first violated invariant.
  void validate() const;

  // Copy with (t_ac, r_ad) = (xi / (1 + xi), 1 / (1 + xi)).
  SystemParams with_split_ratio(double xi) const;
};

// Gain aggregates multiplying |E_c|^2, |E_d|^2 and the interference term.
struct GainAggregates {
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
};

// Multipliers of the LO term, dX_s and dP_s at the params' (phi, delta_phi).
struct QuadratureCoefficients {
  double dc = 0.0;
  double x = 0.0;
  double p = 0.0;
};

GainAggregates compute_coefficients(const SystemParams& params);

QuadratureCoefficients quadrature_coefficients(const SystemParams& params, const GainAggregates& agg);
inline QuadratureCoefficients quadrature_coefficients(const SystemParams& params) {
  return quadrature_coefficients(params, compute_coefficients(params));
}

// Magnitude scale of the DC bracket's terms, |A| t_ac + |B| r_ad + 2 C sqrt(t_ac r_ad).
// Used to express "coef_dc == 0" as a relative tolerance.
double dc_term_scale(const SystemParams& params, const GainAggregates& agg);

inline constexpr double kZeroTolerance = 1e-9;

// Compensation phase zeroing the DC bracket for power split ratio xi, on the
// principal arccos branch. Throws NoSolution when the arccos argument leaves [-1, 1].
double solve_compensation_phase(const GainAggregates& agg, double xi);

struct OperatingPoint {
  double delta_phi = 0.0;
  double xi = 1.0;
  double phi = 0.0;
};

struct RoutineConfig {
  int routine = 0;
  OperatingPoint x_setting;  // records dX_s only
  OperatingPoint p_setting;  // records dP_s only

  double phi_for_x() const { return x_setting.phi; }
  double phi_for_p() const { return p_setting.phi; }
};

// Routine 1: delta_phi = pi, xi from the DC-bracket root; LO phase selects X (0) / P (pi/2).
// Routine 2: xi = B / A, delta_phi from the compensation phase; LO phase selects X (pi/2) / P (0).
// Routine 3: phi fixed at pi/2; X uses the routine-2 point, P the routine-1 point.
// Throws NoSolution for degenerate coefficients and InvalidParameter for an unknown id.
RoutineConfig solve_routine(int routine, const GainAggregates& agg);
double routine1_split_ratio(const GainAggregates& agg);
double routine2_split_ratio(const GainAggregates& agg);

// Params configured at an operating point (phi, delta_phi and the xi reparameterization).
SystemParams apply(const SystemParams& params, const OperatingPoint& point);

// Single-detector (common-mode) measurement: PD2 blocked.
SystemParams common_mode(const SystemParams& params);

// Common-mode rejection: common-mode fundamental power (dB) minus differential-mode
// fundamental power (dB), each taken as the peak within two bins of tone_hz.
// Throws InvalidParameter when the tone is outside either spectrum.
double cmrr_from_spectra(const stats::PsdResult& diff_psd, const stats::PsdResult& common_psd, double tone_hz);

// dB calibration helpers. `power` maps x dB of loss to 10^(-x/10), `amplitude` to 10^(-x/20).
enum class DbScale { power, amplitude };
double db_loss_to_linear(double loss_db, DbScale scale);

struct CalibrationTableDb {
  double t13_db = 0.0;
  double r14_db = 0.0;
  double r23_db = 0.0;
  double t24_db = 0.0;
  double eta_pm1_db = 0.0;
  double eta_pm2_db = 0.0;
  double g_pd1 = 1.0e4;
  double g_pd2 = 1.0e4;
};

struct DbConvention {
  DbScale splitters = DbScale::power;
  DbScale modulators = DbScale::power;
};

// Overwrites the BS fractions, PM1/PM2 factors and gains of `base`.
SystemParams from_calibration_db(const CalibrationTableDb& table, DbConvention convention,
                                 SystemParams base = {});

}  // namespace qrng::optics
