/**
 * @file stats.hpp
 * @brief Statistical verification surface: autocorrelation, Welch power
 * spectra, and a three-test randomness battery (monobit, block frequency,
 * runs) with NIST SP 800-22 P-value definitions.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace qrng::stats {

struct AutocorrResult {
  std::vector<double> coefficients;  // lags 1..max_lag
  std::size_t n = 0;
  double bound = 0.0;  // 3 / sqrt(n)

  double mean_signed() const;
  double mean_abs() const;
  double max_abs() const;
  bool within_bound() const;
};

// Biased, mean-removed, lag-0 normalized sample autocorrelation.
// Requires n > 10 * max_lag; throws DegenerateInput on a constant sequence.
AutocorrResult autocorrelation(std::span<const double> data, std::size_t max_lag = 100);

// Same estimator on a packed bit stream (MSB-first within bytes), bits read as 0/1.
AutocorrResult autocorrelation_bits(std::span<const std::uint8_t> packed, std::size_t nbits,
                                    std::size_t max_lag = 100);

enum class PsdScaling {
  density,   // V^2/Hz
  spectrum,  // V^2 per bin; a bin-centred sinusoid of amplitude a peaks at a^2/2
};

struct PsdResult {
  std::vector<double> freqs_hz;
  std::vector<double> power;     // linear, per `scaling`
  std::vector<double> power_db;  // 10 log10(power)
  std::size_t segment_len = 0;
  double overlap = 0.0;
  std::size_t segments = 0;
  double rate_hz = 0.0;
  std::string window = "hann";
  PsdScaling scaling = PsdScaling::density;

  double bin_width() const { return rate_hz / static_cast<double>(segment_len); }
};

// One-sided Welch estimate with a periodic Hann window.
PsdResult welch_psd(std::span<const double> data, double rate_hz, std::size_t segment_len,
                    double overlap = 0.5, PsdScaling scaling = PsdScaling::density);

struct TestResult {
  std::string name;
  double p_value = 0.0;
  bool passed = false;
};

struct BatteryResult {
  std::vector<TestResult> tests;
  std::size_t nbits = 0;
  bool all_passed() const;
};

inline constexpr double kPassLow = 0.01;
inline constexpr double kPassHigh = 0.99;
inline constexpr std::size_t kBatteryMinBits = 1'000'000;

double monobit_p(std::span<const std::uint8_t> packed, std::size_t nbits);
double block_frequency_p(std::span<const std::uint8_t> packed, std::size_t nbits, std::size_t block = 128);
double runs_p(std::span<const std::uint8_t> packed, std::size_t nbits);

// Runs the three tests; a test passes iff kPassLow <= P <= kPassHigh.
// Throws InvalidParameter below kBatteryMinBits.
BatteryResult randomness_battery(std::span<const std::uint8_t> packed, std::size_t nbits);

}  // namespace qrng::stats
