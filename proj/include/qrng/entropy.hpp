/**
 * @file entropy.hpp
 * @brief Source-independent randomness certification.
 *
 * The untrusted state's covariance matrix is bounded from the quantized X and
 * P records (finite-resolution worst-casing, zero cross-covariance), the
 * Holevo quantity of the Gaussian state with that covariance bounds the
 * eavesdropper, and the per-sample rate is H(a_x) - S. The switching bits that
 * chose which quadrature each sample measured are charged against the total.
 */
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace qrng::entropy {

// Counts per ADC code for one quadrature. Values are code * delta.
class QuadratureHistogram {
 public:
  QuadratureHistogram(int bits, double delta);

  static QuadratureHistogram from_codes(std::span<const std::int16_t> codes, int bits, double delta);

  void add(std::int32_t code, std::uint64_t count = 1);
  // Associative, commutative; both sides must share bits and delta.
  void merge(const QuadratureHistogram& other);

  int bits() const { return bits_; }
  double delta() const { return delta_; }
  std::uint64_t total() const { return total_; }
  std::int32_t min_code() const { return -(std::int32_t{1} << (bits_ - 1)); }
  std::int32_t max_code() const { return (std::int32_t{1} << (bits_ - 1)) - 1; }
  std::uint64_t count(std::int32_t code) const;

 private:
  int bits_;
  double delta_;
  std::uint64_t total_ = 0;
  std::vector<std::uint64_t> counts_;
};

// -sum p log2 p over occupied bins.
double shannon_entropy(const QuadratureHistogram& hist);

// Population variance of code * delta.
double plain_variance(const QuadratureHistogram& hist);

// Population variance after moving each value half a bin away from zero
// (a <= 0 -> a - delta/2, a > 0 -> a + delta/2). Requires total >= 2;
// throws DegenerateInput when the result is zero.
double worst_case_variance(const QuadratureHistogram& hist);

// S(lambda) = ((l+1)/2) log2((l+1)/2) - ((l-1)/2) log2((l-1)/2); S(1) = 0.
// Throws InvalidState for lambda < 1.
double holevo_bound(double lambda);

// lambda >= 1 with holevo_bound(lambda) == s, by bisection.
double invert_holevo(double s_bits);

// Conversion from V^2 to shot-noise units, per measured quadrature setting.
struct SnuCalibration {
  double snu_x = 1.0;  // V^2 per shot-noise unit, X setting
  double snu_p = 1.0;  // V^2 per shot-noise unit, P setting
  std::string provenance;
};

// Calibration that reproduces a known per-sample rate from reported (V_x, V_p, H):
// lambda = invert_holevo(H - R), and one scale for both quadratures.
SnuCalibration snu_from_anchor(double v_x_bar_v2, double v_p_bar_v2, double h_bits, double r_per_sample,
                               std::string provenance);

struct CovarianceEstimate {
  double v_x_bar = 0.0;  // shot-noise units
  double v_p_bar = 0.0;
  double c = 0.0;        // cross-covariance used for lambda; always 0
  double c_empirical = 0.0;  // diagnostic only, V^2
  double lambda = 0.0;
  SnuCalibration snu;
};

CovarianceEstimate estimate_covariance(double v_x_bar_v2, double v_p_bar_v2, const SnuCalibration& snu,
                                       double c_empirical = 0.0);

// ceil(log2(n_tot choose n_c)).
std::uint64_t switching_cost(std::uint64_t n_tot, std::uint64_t n_c);
// Arbitrary-precision integer evaluation.
std::uint64_t switching_cost_exact(std::uint64_t n_tot, std::uint64_t n_c);
// Log-gamma evaluation with a 1e-9 guard below the ceiling.
std::uint64_t switching_cost_lgamma(std::uint64_t n_tot, std::uint64_t n_c);

inline constexpr std::uint64_t kExactSwitchingLimit = 1'000'000;

struct EntropyReport {
  double h_axi = 0.0;
  double s_holevo = 0.0;
  double r_per_sample = 0.0;
  std::uint64_t n_tot = 0;
  std::uint64_t n_c = 0;
  std::uint64_t t_switch = 0;
  double r_dis_avg = 0.0;
  bool certifiable = false;  // false when r_dis_avg <= 0
  CovarianceEstimate covariance;
  double v_x_bar_v2 = 0.0;
  double v_p_bar_v2 = 0.0;
};

// Certification from already-reduced statistics (worst-cased variances in V^2 and H).
EntropyReport certify_moments(double v_x_bar_v2, double v_p_bar_v2, double h_bits, std::uint64_t n_tot,
                              std::uint64_t n_c, const SnuCalibration& snu, double c_empirical = 0.0);

// Full certification: H from the X record, worst-cased variances from both records.
// Requires n_tot > n_c >= 1.
EntropyReport certify(const QuadratureHistogram& hist_x, const QuadratureHistogram& hist_p, std::uint64_t n_tot,
                      std::uint64_t n_c, const SnuCalibration& snu, double c_empirical = 0.0);

void to_json(nlohmann::json& j, const EntropyReport& r);
void from_json(const nlohmann::json& j, EntropyReport& r);

}  // namespace qrng::entropy
