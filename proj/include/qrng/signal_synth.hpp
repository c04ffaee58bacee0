/**
 * @file signal_synth.hpp
 * @brief Stochastic homodyne trace synthesis and ADC quantization.
 *
 * Traces are generated in fixed-length blocks; block b draws from the
 * substream seeded by substream_seed(seed, b), so the output depends only on
 * (seed, n, configuration) and never on the worker count.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "qrng/optical_model.hpp"

namespace qrng::synth {

enum class Quadrature : std::uint8_t { x = 0, p = 1 };

const char* to_string(Quadrature q);

struct NoiseSpec {
  // Vacuum quadrature variances, shot-noise units.
  double vacuum_var_x = 1.0;
  double vacuum_var_p = 1.0;
  // Field amplitude (sqrt(W)) of one shot-noise unit of quadrature fluctuation.
  double vacuum_amplitude = 1.0;
  // Relative LO intensity fluctuation: AR(1) with this stationary variance and
  // lag-1 coefficient. Each block restarts from the stationary law.
  double lo_fluct_var = 0.0;
  double lo_fluct_corr = 0.0;
  // Optional sinusoidal LO intensity modulation (CMRR probe).
  double lo_tone_hz = 0.0;
  double lo_tone_depth = 0.0;
  // Additive detector noise, V^2.
  double elec_noise_var = 0.0;
  // Linear drift of the compensation phase.
  double phase_drift_rad_per_s = 0.0;
  // Single-pole low-pass stage, 0 disables.
  double bandwidth_hz = 0.0;

  void validate() const;
};

// One draw of the input fields. The source mean E_s is always zero.
struct FieldState {
  double delta_x_s = 0.0;
  double delta_p_s = 0.0;
  double delta_x_l = 0.0;
  static constexpr double e_s = 0.0;
};

struct SynthOptions {
  double rate_hz = 6.0e8;
  std::size_t block_len = std::size_t{1} << 16;
  unsigned workers = 1;  // 0 selects std::thread::hardware_concurrency()
};

// Single-setting trace of n samples, volts.
std::vector<double> synth_analog(const optics::SystemParams& params, const NoiseSpec& noise, std::size_t n,
                                 std::uint64_t seed, const SynthOptions& options = {});

// Trace whose sample i is measured at x_setting or p_setting according to schedule[i].
std::vector<double> synth_switched(const optics::SystemParams& x_setting, const optics::SystemParams& p_setting,
                                   std::span<const Quadrature> schedule, const NoiseSpec& noise,
                                   std::uint64_t seed, const SynthOptions& options = {});

// Positions of n_c check (P) measurements among n_tot, drawn uniformly without
// replacement; returned as a per-sample label sequence.
std::vector<Quadrature> switching_schedule(std::size_t n_tot, std::size_t n_c, std::uint64_t seed);

struct SampleBlock {
  std::vector<std::int16_t> codes;
  double delta = 0.0;  // quantization interval, V
  int bits = 12;
  double rate_hz = 6.0e8;
  Quadrature quadrature_label = Quadrature::x;
  std::uint64_t block_seed = 0;
  std::uint64_t saturated = 0;

  std::int32_t min_code() const { return -(std::int32_t{1} << (bits - 1)); }
  std::int32_t max_code() const { return (std::int32_t{1} << (bits - 1)) - 1; }
};

// Mid-tread uniform quantizer with delta = full_scale / 2^bits. Out-of-range
// values clip to the extreme codes and are counted in `saturated`.
SampleBlock quantize(std::span<const double> analog, int bits, double full_scale);

// Sum of saturation counters; associative and commutative.
std::uint64_t merge_saturation(std::span<const SampleBlock> blocks);

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
};

struct SweepPoint {
  double lo_power_w = 0.0;
  double variance = 0.0;
};

struct SweepResult {
  std::vector<SweepPoint> points;
  LinearFit fit;
};

LinearFit least_squares(std::span<const double> x, std::span<const double> y);

// Output variance against LO power (E_L = sqrt(P)); requires >= 2 power points.
SweepResult variance_sweep(const optics::SystemParams& params, const NoiseSpec& noise,
                           std::span<const double> lo_powers_w, std::size_t samples_per_point,
                           std::uint64_t seed, const SynthOptions& options = {});

// Raw sample files: little-endian int16, one code per sample.
void write_raw(const std::filesystem::path& path, std::span<const std::int16_t> codes);
std::vector<std::int16_t> read_raw(const std::filesystem::path& path);

}  // namespace qrng::synth
