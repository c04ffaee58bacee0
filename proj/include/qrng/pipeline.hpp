/**
 * @file pipeline.hpp
 * @brief Run configuration, stage drivers and report assembly behind the CLI.
 *
 * A run directory holds, per stage:
 *   simulate: raw.bin, raw.json, calibration.json
 *   entropy:  entropy.json
 *   extract:  bits.bin, manifest.json
 *   analyze:  battery.json, autocorr_raw.tsv, autocorr_bits.tsv, psd.tsv, cmrr.json, cmrr_psd.tsv
 *   report:   report.json
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qrng/entropy.hpp"
#include "qrng/optical_model.hpp"
#include "qrng/signal_synth.hpp"

namespace qrng::cli {

inline constexpr const char* kStageVersion = "qrng-pipeline/1";

struct AdcSettings {
  int bits = 12;
  double full_scale_v = 1.0;
  double rate_hz = 6.0e8;
};

struct RunLengths {
  std::uint64_t n_tot = std::uint64_t{1} << 20;
  std::uint64_t n_c = 1024;
  std::uint64_t calibration_samples = std::uint64_t{1} << 20;
};

struct ExtractorSettings {
  std::size_t k = 3072;
  std::optional<std::size_t> j = 1792;  // nullopt: largest j the certified rate allows
  double epsilon_log2 = 100.0;
};

struct CmrrSettings {
  double lo_power_w = 4.0e-5;
  double tone_hz = 5.0e7;
  double tone_depth = 0.5;
  std::uint64_t samples = std::uint64_t{1} << 18;
  std::size_t segment_len = 4096;
};

struct AnalysisSettings {
  std::size_t max_lag = 100;
  std::size_t psd_segment = 4096;
  CmrrSettings cmrr;
};

struct PipelineConfig {
  optics::SystemParams system;
  int routine = 2;
  double lo_power_w = 0.02;
  synth::NoiseSpec noise;
  RunLengths run;
  AdcSettings adc;
  ExtractorSettings extractor;
  AnalysisSettings analysis;
  unsigned workers = 1;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "run";

  // Throws InvalidParameter on inconsistent settings (k not a multiple of the
  // ADC bits, n_c >= n_tot, invalid physics parameters, ...).
  void validate() const;

  // SHA-256 of the canonical configuration without seed, out_dir and workers
  // (none of which changes the physics or the output bits).
  std::string config_hash() const;

  // Sets n_tot so that n_tot - ceil(sqrt(n_tot)) = blocks * k / bits, n_c = ceil(sqrt(n_tot)).
  void set_blocks(std::uint64_t blocks);
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, PipelineConfig& c);

// Built-in configuration: the reference calibration table at 20 mW LO, routine 2.
PipelineConfig default_config();

// Reads a config file over default_config(), then applies QRNG_SEED / QRNG_OUT_DIR environment overrides.
PipelineConfig load_config(const std::filesystem::path& path);
PipelineConfig config_from_env(PipelineConfig base);

// Operating points for the configured routine at the configured LO power.
struct OperatingSettings {
  optics::GainAggregates agg;
  optics::RoutineConfig routine;
  optics::SystemParams x_params;
  optics::SystemParams p_params;
};
OperatingSettings operating_settings(const PipelineConfig& cfg);

// Table of (A, B, C) and the solved point of each routine, with closed-loop checks.
nlohmann::json solve_summary(const PipelineConfig& cfg);

// Stage failures that should stop the pipeline with a dedicated exit status.
class Uncertifiable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void stage_simulate(const PipelineConfig& cfg, const std::filesystem::path& dir);
entropy::EntropyReport stage_entropy(const PipelineConfig& cfg, const std::filesystem::path& dir);
nlohmann::json stage_extract(const PipelineConfig& cfg, const std::filesystem::path& dir);
nlohmann::json stage_analyze(const PipelineConfig& cfg, const std::filesystem::path& dir);

enum class ExitStatus : int {
  ok = 0,
  error = 1,
  battery_failed = 2,
  uncertifiable = 3,
};

struct PipelineOutcome {
  ExitStatus status = ExitStatus::ok;
  std::string message;
};

PipelineOutcome run_pipeline(const PipelineConfig& cfg);

// Files each stage must leave in a run directory.
std::vector<std::string> missing_stage_outputs(const std::filesystem::path& dir);

// Aggregates stage outputs into one document and writes report.json.
// Throws std::runtime_error listing missing stage outputs.
nlohmann::json build_report(const std::filesystem::path& dir);

// Structural check of a report document; returns the list of violations.
std::vector<std::string> validate_report(const nlohmann::json& report);

// Report with timestamp fields removed, for determinism comparisons.
nlohmann::json strip_timestamps(nlohmann::json report);

}  // namespace qrng::cli
