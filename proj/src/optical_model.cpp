#include "qrng/optical_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include "qrng/errors.hpp"

namespace qrng::optics {

namespace {

constexpr double kPi = std::numbers::pi;

void require_fraction(double v, const char* name) {
  if (!(v > 0.0 && v < 1.0)) {
    std::ostringstream os;
    os << name << " must lie in (0,1), got " << v;
    throw InvalidParameter(os.str());
  }
}

void require_factor(double v, const char* name) {
  if (!(v > 0.0 && v <= 1.0)) {
    std::ostringstream os;
    os << name << " must lie in (0,1], got " << v;
    throw InvalidParameter(os.str());
  }
}

void require_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    std::ostringstream os;
    os << name << " must be positive and finite, got " << v;
    throw InvalidParameter(os.str());
  }
}

void require_finite(double v, const char* name) {
  if (!std::isfinite(v)) throw InvalidParameter(std::string(name) + " must be finite");
}

}  // namespace

void SystemParams::validate() const {
  require_fraction(t13, "t13");
  require_fraction(t24, "t24");
  require_fraction(r14, "r14");
  require_fraction(r23, "r23");
  require_fraction(t_ac, "t_ac");
  require_fraction(r_ad, "r_ad");
  require_fraction(r_bc_eff(), "r_bc");
  require_fraction(t_bd_eff(), "t_bd");
  require_factor(eta_pm0, "eta_pm0");
  require_factor(eta_pm1, "eta_pm1");
  require_factor(eta_pm2, "eta_pm2");
  // A zero gain models a blocked photodiode (common-mode measurement).
  if (!(g_pd1 >= 0.0 && g_pd2 >= 0.0) || !std::isfinite(g_pd1) || !std::isfinite(g_pd2)) {
    throw InvalidParameter("detector gains must be nonnegative and finite");
  }
  require_positive(g_pd1 + g_pd2, "g_pd1 + g_pd2");
  if (!(e_lo >= 0.0) || !std::isfinite(e_lo)) throw InvalidParameter("e_lo must be nonnegative and finite");
  require_finite(phi, "phi");
  require_finite(delta_phi, "delta_phi");
}

SystemParams SystemParams::with_split_ratio(double ratio) const {
  if (!(ratio > 0.0) || !std::isfinite(ratio)) {
    throw InvalidParameter("split ratio xi must be positive and finite");
  }
  SystemParams out = *this;
  out.t_ac = ratio / (1.0 + ratio);
  out.r_ad = 1.0 / (1.0 + ratio);
  return out;
}

GainAggregates compute_coefficients(const SystemParams& p) {
  p.validate();
  GainAggregates g;
  g.a = (p.g_pd1 * p.t13 - p.g_pd2 * p.r14) * p.eta_pm1 * p.eta_pm1;
  g.b = (p.g_pd1 * p.r23 - p.g_pd2 * p.t24) * p.eta_pm2 * p.eta_pm2;
  g.c = (p.g_pd1 * std::sqrt(p.t13 * p.r23) + p.g_pd2 * std::sqrt(p.r14 * p.t24)) * p.eta_pm1 * p.eta_pm2;
  return g;
}

QuadratureCoefficients quadrature_coefficients(const SystemParams& p, const GainAggregates& g) {
  const double t_ac = p.t_ac;
  const double r_ad = p.r_ad;
  const double r_bc = p.r_bc_eff();
  const double t_bd = p.t_bd_eff();
  const double cos_d = std::cos(p.delta_phi);
  const double sin_d = std::sin(p.delta_phi);
  const double lo = 2.0 * p.eta_pm0 * p.e_lo;

  QuadratureCoefficients q;
  q.dc = g.a * t_ac + g.b * r_ad + 2.0 * g.c * std::sqrt(t_ac * r_ad) * cos_d;

  // In-phase group multiplies (dX cos phi + dP sin phi); the sin(delta_phi)
  // group multiplies (dX sin phi + dP cos phi).
  const double in_phase = lo * (g.a * std::sqrt(t_ac * r_bc) - g.b * std::sqrt(r_ad * t_bd) +
                                g.c * (std::sqrt(r_bc * r_ad) - std::sqrt(t_ac * t_bd)) * cos_d);
  const double crossed = lo * g.c * (std::sqrt(r_bc * r_ad) + std::sqrt(t_ac * t_bd)) * sin_d;
  const double cos_p = std::cos(p.phi);
  const double sin_p = std::sin(p.phi);
  q.x = in_phase * cos_p + crossed * sin_p;
  q.p = in_phase * sin_p + crossed * cos_p;
  return q;
}

double dc_term_scale(const SystemParams& p, const GainAggregates& g) {
  return std::abs(g.a) * p.t_ac + std::abs(g.b) * p.r_ad + 2.0 * std::abs(g.c) * std::sqrt(p.t_ac * p.r_ad);
}

double solve_compensation_phase(const GainAggregates& g, double xi) {
  if (!(xi > 0.0) || !std::isfinite(xi)) throw InvalidParameter("xi must be positive and finite");
  if (!(g.c > 0.0)) throw NoSolution("compensation phase undefined: C must be positive");
  const double root = std::sqrt(xi);
  const double arg = -(g.a * root + g.b / root) / (2.0 * g.c);
  if (!(std::abs(arg) <= 1.0)) {
    std::ostringstream os;
    os << "no compensation phase: |-(A xi^1/2 + B xi^-1/2) / 2C| = " << std::abs(arg) << " exceeds 1";
    throw NoSolution(os.str());
  }
  return std::acos(arg);
}

double routine1_split_ratio(const GainAggregates& g) {
  if (g.a == 0.0) throw NoSolution("routine 1 requires A != 0");
  const double disc = g.c * g.c - g.a * g.b;
  if (disc < 0.0) {
    std::ostringstream os;
    os << "routine 1 requires C^2 >= AB, got C^2 - AB = " << disc;
    throw NoSolution(os.str());
  }
  // sqrt(xi) is a positive root of A s^2 - 2C s + B = 0.
  const double big = g.c + std::sqrt(disc);
  double s = 0.0;
  if (g.a > 0.0) {
    s = big / g.a;
  } else {
    s = g.b / big;  // the other root, written without cancellation
  }
  if (!(s > 0.0) || !std::isfinite(s)) throw NoSolution("routine 1 has no positive split ratio for these coefficients");
  return s * s;
}

double routine2_split_ratio(const GainAggregates& g) {
  if (g.a == 0.0) throw NoSolution("routine 2 requires A != 0");
  if (g.a * g.b <= 0.0) {
    std::ostringstream os;
    os << "routine 2 requires AB > 0 for a positive split ratio, got AB = " << g.a * g.b;
    throw NoSolution(os.str());
  }
  if (g.a * g.b > g.c * g.c) {
    std::ostringstream os;
    os << "routine 2 requires AB <= C^2, got AB - C^2 = " << g.a * g.b - g.c * g.c;
    throw NoSolution(os.str());
  }
  return g.b / g.a;
}

namespace {

OperatingPoint routine1_point(const GainAggregates& g, double phi) {
  return {kPi, routine1_split_ratio(g), phi};
}

OperatingPoint routine2_point(const GainAggregates& g, double phi) {
  if (g.a == 0.0 && g.b == 0.0) {
    // Balanced detector: the DC bracket reduces to 2C sqrt(t r) cos(delta_phi),
    // zero at pi/2 for every split ratio; take the symmetric split.
    return {kPi / 2.0, 1.0, phi};
  }
  const double xi = routine2_split_ratio(g);
  return {solve_compensation_phase(g, xi), xi, phi};
}

}  // namespace

RoutineConfig solve_routine(int routine, const GainAggregates& g) {
  RoutineConfig cfg;
  cfg.routine = routine;
  switch (routine) {
    case 1:
      cfg.x_setting = routine1_point(g, 0.0);
      cfg.p_setting = routine1_point(g, kPi / 2.0);
      break;
    case 2:
      cfg.x_setting = routine2_point(g, kPi / 2.0);
      cfg.p_setting = routine2_point(g, 0.0);
      break;
    case 3:
      cfg.x_setting = routine2_point(g, kPi / 2.0);
      cfg.p_setting = routine1_point(g, kPi / 2.0);
      break;
    default:
      throw InvalidParameter("routine must be 1, 2 or 3, got " + std::to_string(routine));
  }
  return cfg;
}

SystemParams apply(const SystemParams& params, const OperatingPoint& point) {
  SystemParams out = params.with_split_ratio(point.xi);
  out.delta_phi = point.delta_phi;
  out.phi = point.phi;
  return out;
}

SystemParams common_mode(const SystemParams& params) {
  SystemParams out = params;
  out.g_pd2 = 0.0;
  return out;
}

namespace {

double peak_db_near(const stats::PsdResult& psd, double tone_hz) {
  if (psd.freqs_hz.empty()) throw InvalidParameter("empty spectrum");
  const double lo = psd.freqs_hz.front();
  const double hi = psd.freqs_hz.back();
  if (!(tone_hz >= lo && tone_hz <= hi)) {
    std::ostringstream os;
    os << "tone " << tone_hz << " Hz outside spectral range [" << lo << ", " << hi << "] Hz";
    throw InvalidParameter(os.str());
  }
  const double width = psd.bin_width();
  const auto centre = static_cast<long>(std::lround((tone_hz - lo) / width));
  const long last = static_cast<long>(psd.freqs_hz.size()) - 1;
  double best = -std::numeric_limits<double>::infinity();
  for (long i = std::max(0L, centre - 2); i <= std::min(last, centre + 2); ++i) {
    best = std::max(best, psd.power_db[static_cast<std::size_t>(i)]);
  }
  return best;
}

}  // namespace

double cmrr_from_spectra(const stats::PsdResult& diff_psd, const stats::PsdResult& common_psd, double tone_hz) {
  return peak_db_near(common_psd, tone_hz) - peak_db_near(diff_psd, tone_hz);
}

double db_loss_to_linear(double loss_db, DbScale scale) {
  return std::pow(10.0, -loss_db / (scale == DbScale::power ? 10.0 : 20.0));
}

SystemParams from_calibration_db(const CalibrationTableDb& t, DbConvention conv, SystemParams base) {
  base.t13 = db_loss_to_linear(t.t13_db, conv.splitters);
  base.r14 = db_loss_to_linear(t.r14_db, conv.splitters);
  base.r23 = db_loss_to_linear(t.r23_db, conv.splitters);
  base.t24 = db_loss_to_linear(t.t24_db, conv.splitters);
  base.eta_pm1 = db_loss_to_linear(t.eta_pm1_db, conv.modulators);
  base.eta_pm2 = db_loss_to_linear(t.eta_pm2_db, conv.modulators);
  base.g_pd1 = t.g_pd1;
  base.g_pd2 = t.g_pd2;
  return base;
}

}  // namespace qrng::optics
