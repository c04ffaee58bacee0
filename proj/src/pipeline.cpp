#include "qrng/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "qrng/digest.hpp"
#include "qrng/errors.hpp"
#include "qrng/extractor.hpp"
#include "qrng/stats.hpp"

namespace qrng::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Substream tags under the master seed.
enum Stream : std::uint64_t {
  kScheduleStream = 1,
  kTraceStream = 2,
  kCalibrationX = 3,
  kCalibrationP = 4,
  kToeplitzStream = 5,
  kCmrrDiff = 6,
  kCmrrCommon = 7,
};

// Calibration table of the reference setup, with BS fractions and modulator
// factors both read as 10^(-dB/10).
optics::SystemParams default_system() {
  optics::CalibrationTableDb table;
  table.t13_db = 3.7039;
  table.r14_db = 3.7882;
  table.r23_db = 3.7603;
  table.t24_db = 3.7109;
  table.eta_pm1_db = 3.1066;
  table.eta_pm2_db = 3.3585;
  table.g_pd1 = 9.93e3;
  table.g_pd2 = 9.69e3;
  return optics::from_calibration_db(table, {optics::DbScale::power, optics::DbScale::power});
}

synth::NoiseSpec default_noise() {
  synth::NoiseSpec n;
  n.vacuum_amplitude = 3.0934e-5;  // ~2.68e-4 V^2 of vacuum noise at 20 mW, routine 2
  n.elec_noise_var = 1.73e-5;      // 11.9 dB below the vacuum noise
  return n;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing stage output " + path.filename().string() + " in " + path.parent_path().string());
  return json::parse(in);
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing stage output " + path.filename().string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::uint64_t ceil_sqrt(std::uint64_t n) {
  auto r = static_cast<std::uint64_t>(std::sqrt(static_cast<double>(n)));
  while (r * r < n) ++r;
  while (r > 0 && (r - 1) * (r - 1) >= n) --r;
  return r;
}

json operating_point_json(const optics::OperatingPoint& p) {
  return {{"delta_phi", p.delta_phi}, {"xi", p.xi}, {"phi", p.phi}};
}

synth::SynthOptions synth_options(const PipelineConfig& cfg) {
  synth::SynthOptions o;
  o.rate_hz = cfg.adc.rate_hz;
  o.workers = cfg.workers;
  return o;
}

double population_variance(std::span<const double> v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return var / static_cast<double>(v.size());
}

struct RawRecord {
  std::vector<std::int16_t> codes;
  std::vector<synth::Quadrature> schedule;
  json meta;
};

RawRecord load_raw(const fs::path& dir) {
  RawRecord rec;
  rec.meta = read_json(dir / "raw.json");
  rec.codes = synth::read_raw(dir / "raw.bin");
  if (rec.codes.size() != rec.meta.at("samples").get<std::size_t>()) {
    throw std::runtime_error("raw.bin length does not match raw.json sample count");
  }
  rec.schedule.assign(rec.codes.size(), synth::Quadrature::x);
  for (auto pos : rec.meta.at("schedule").at("p_positions")) {
    rec.schedule.at(pos.get<std::size_t>()) = synth::Quadrature::p;
  }
  return rec;
}

std::vector<std::int16_t> codes_of(const RawRecord& rec, synth::Quadrature q) {
  std::vector<std::int16_t> out;
  for (std::size_t i = 0; i < rec.codes.size(); ++i) {
    if (rec.schedule[i] == q) out.push_back(rec.codes[i]);
  }
  return out;
}

void write_autocorr_tsv(const fs::path& path, const stats::AutocorrResult& ac) {
  std::ostringstream os;
  os << "lag\tcoefficient\n";
  for (std::size_t i = 0; i < ac.coefficients.size(); ++i) os << i + 1 << '\t' << format_double(ac.coefficients[i]) << '\n';
  write_text(path, os.str());
}

json autocorr_summary(const stats::AutocorrResult& ac) {
  return {{"n", ac.n},
          {"max_lag", ac.coefficients.size()},
          {"bound", ac.bound},
          {"max_abs", ac.max_abs()},
          {"mean_abs", ac.mean_abs()},
          {"mean_signed", ac.mean_signed()},
          {"within_bound", ac.within_bound()}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
  system.validate();
  noise.validate();
  if (routine < 1 || routine > 3) throw InvalidParameter("routine must be 1, 2 or 3");
  if (!(lo_power_w >= 0.0)) throw InvalidParameter("lo_power_w must be >= 0");
  if (adc.bits < 2 || adc.bits > 16) throw InvalidParameter("adc.bits must lie in [2,16]");
  if (!(adc.full_scale_v > 0.0 && adc.rate_hz > 0.0)) throw InvalidParameter("adc full scale and rate must be positive");
  if (!(run.n_c >= 1 && run.n_c < run.n_tot)) throw InvalidParameter("run lengths require 1 <= n_c < n_tot");
  if (run.calibration_samples < 2) throw InvalidParameter("calibration_samples must be >= 2");
  if (extractor.k == 0 || extractor.k % static_cast<std::size_t>(adc.bits) != 0) {
    throw InvalidParameter("extractor.k must be a positive multiple of adc.bits");
  }
  if (extractor.j && !(*extractor.j >= 1 && *extractor.j < extractor.k)) {
    throw InvalidParameter("extractor.j must satisfy 1 <= j < k");
  }
  if (analysis.max_lag == 0) throw InvalidParameter("analysis.max_lag must be >= 1");
}

std::string PipelineConfig::config_hash() const {
  json j = *this;
  j.erase("seed");
  j.erase("out_dir");
  j.erase("workers");
  return sha256_hex(j.dump());
}

void PipelineConfig::set_blocks(std::uint64_t blocks) {
  if (blocks == 0) throw InvalidParameter("--blocks must be >= 1");
  const std::uint64_t n_x = blocks * extractor.k / static_cast<std::uint64_t>(adc.bits);
  std::uint64_t n = n_x + ceil_sqrt(n_x);
  while (n - ceil_sqrt(n) > n_x) --n;
  while (n - ceil_sqrt(n) < n_x) ++n;
  run.n_tot = n;
  run.n_c = ceil_sqrt(n);
}

void to_json(json& j, const PipelineConfig& c) {
  const auto& s = c.system;
  json system = {{"t13", s.t13},         {"t24", s.t24},         {"r14", s.r14},         {"r23", s.r23},
                 {"eta_pm0", s.eta_pm0}, {"eta_pm1", s.eta_pm1}, {"eta_pm2", s.eta_pm2}, {"g_pd1", s.g_pd1},
                 {"g_pd2", s.g_pd2}};
  system["r_bc"] = s.r_bc ? json(*s.r_bc) : json(nullptr);
  system["t_bd"] = s.t_bd ? json(*s.t_bd) : json(nullptr);
  const auto& n = c.noise;
  j = json{
      {"system", system},
      {"routine", c.routine},
      {"lo_power_w", c.lo_power_w},
      {"noise",
       {{"vacuum_var_x", n.vacuum_var_x},
        {"vacuum_var_p", n.vacuum_var_p},
        {"vacuum_amplitude", n.vacuum_amplitude},
        {"lo_fluct_var", n.lo_fluct_var},
        {"lo_fluct_corr", n.lo_fluct_corr},
        {"lo_tone_hz", n.lo_tone_hz},
        {"lo_tone_depth", n.lo_tone_depth},
        {"elec_noise_var", n.elec_noise_var},
        {"phase_drift_rad_per_s", n.phase_drift_rad_per_s},
        {"bandwidth_hz", n.bandwidth_hz}}},
      {"run", {{"n_tot", c.run.n_tot}, {"n_c", c.run.n_c}, {"calibration_samples", c.run.calibration_samples}}},
      {"adc", {{"bits", c.adc.bits}, {"full_scale_v", c.adc.full_scale_v}, {"rate_hz", c.adc.rate_hz}}},
      {"extractor",
       {{"k", c.extractor.k},
        {"j", c.extractor.j ? json(*c.extractor.j) : json("auto")},
        {"epsilon_log2", c.extractor.epsilon_log2}}},
      {"analysis",
       {{"max_lag", c.analysis.max_lag},
        {"psd_segment", c.analysis.psd_segment},
        {"cmrr",
         {{"lo_power_w", c.analysis.cmrr.lo_power_w},
          {"tone_hz", c.analysis.cmrr.tone_hz},
          {"tone_depth", c.analysis.cmrr.tone_depth},
          {"samples", c.analysis.cmrr.samples},
          {"segment_len", c.analysis.cmrr.segment_len}}}}},
      {"workers", c.workers},
      {"seed", c.seed},
      {"out_dir", c.out_dir.string()},
  };
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& dst) {
  if (j.contains(key) && !j.at(key).is_null()) j.at(key).get_to(dst);
}

optics::DbScale parse_scale(const std::string& s) {
  if (s == "power") return optics::DbScale::power;
  if (s == "amplitude") return optics::DbScale::amplitude;
  throw InvalidParameter("dB scale must be \"power\" or \"amplitude\", got " + s);
}

}  // namespace

void from_json(const json& j, PipelineConfig& c) {
  if (j.contains("system")) {
    const auto& s = j.at("system");
    auto& p = c.system;
    if (s.contains("calibration_db")) {
      const auto& t = s.at("calibration_db");
      optics::CalibrationTableDb table;
      t.at("t13_db").get_to(table.t13_db);
      t.at("r14_db").get_to(table.r14_db);
      t.at("r23_db").get_to(table.r23_db);
      t.at("t24_db").get_to(table.t24_db);
      t.at("eta_pm1_db").get_to(table.eta_pm1_db);
      t.at("eta_pm2_db").get_to(table.eta_pm2_db);
      t.at("g_pd1").get_to(table.g_pd1);
      t.at("g_pd2").get_to(table.g_pd2);
      optics::DbConvention conv;
      if (t.contains("splitters")) conv.splitters = parse_scale(t.at("splitters").get<std::string>());
      if (t.contains("modulators")) conv.modulators = parse_scale(t.at("modulators").get<std::string>());
      p = optics::from_calibration_db(table, conv, p);
    }
    maybe(s, "t13", p.t13);
    maybe(s, "t24", p.t24);
    maybe(s, "r14", p.r14);
    maybe(s, "r23", p.r23);
    maybe(s, "eta_pm0", p.eta_pm0);
    maybe(s, "eta_pm1", p.eta_pm1);
    maybe(s, "eta_pm2", p.eta_pm2);
    maybe(s, "g_pd1", p.g_pd1);
    maybe(s, "g_pd2", p.g_pd2);
    if (s.contains("r_bc")) p.r_bc = s.at("r_bc").is_null() ? std::nullopt : std::optional(s.at("r_bc").get<double>());
    if (s.contains("t_bd")) p.t_bd = s.at("t_bd").is_null() ? std::nullopt : std::optional(s.at("t_bd").get<double>());
  }
  maybe(j, "routine", c.routine);
  maybe(j, "lo_power_w", c.lo_power_w);
  if (j.contains("noise")) {
    const auto& n = j.at("noise");
    maybe(n, "vacuum_var_x", c.noise.vacuum_var_x);
    maybe(n, "vacuum_var_p", c.noise.vacuum_var_p);
    maybe(n, "vacuum_amplitude", c.noise.vacuum_amplitude);
    maybe(n, "lo_fluct_var", c.noise.lo_fluct_var);
    maybe(n, "lo_fluct_corr", c.noise.lo_fluct_corr);
    maybe(n, "lo_tone_hz", c.noise.lo_tone_hz);
    maybe(n, "lo_tone_depth", c.noise.lo_tone_depth);
    maybe(n, "elec_noise_var", c.noise.elec_noise_var);
    maybe(n, "phase_drift_rad_per_s", c.noise.phase_drift_rad_per_s);
    maybe(n, "bandwidth_hz", c.noise.bandwidth_hz);
  }
  if (j.contains("run")) {
    const auto& r = j.at("run");
    maybe(r, "n_tot", c.run.n_tot);
    if (r.contains("n_c") && !r.at("n_c").is_null()) {
      r.at("n_c").get_to(c.run.n_c);
    } else {
      c.run.n_c = ceil_sqrt(c.run.n_tot);
    }
    maybe(r, "calibration_samples", c.run.calibration_samples);
  }
  if (j.contains("adc")) {
    const auto& a = j.at("adc");
    maybe(a, "bits", c.adc.bits);
    maybe(a, "full_scale_v", c.adc.full_scale_v);
    maybe(a, "rate_hz", c.adc.rate_hz);
  }
  if (j.contains("extractor")) {
    const auto& e = j.at("extractor");
    maybe(e, "k", c.extractor.k);
    if (e.contains("j")) {
      const auto& jj = e.at("j");
      if (jj.is_string()) {
        if (jj.get<std::string>() != "auto") throw InvalidParameter("extractor.j must be an integer or \"auto\"");
        c.extractor.j.reset();
      } else {
        c.extractor.j = jj.get<std::size_t>();
      }
    }
    maybe(e, "epsilon_log2", c.extractor.epsilon_log2);
  }
  if (j.contains("analysis")) {
    const auto& a = j.at("analysis");
    maybe(a, "max_lag", c.analysis.max_lag);
    maybe(a, "psd_segment", c.analysis.psd_segment);
    if (a.contains("cmrr")) {
      const auto& m = a.at("cmrr");
      maybe(m, "lo_power_w", c.analysis.cmrr.lo_power_w);
      maybe(m, "tone_hz", c.analysis.cmrr.tone_hz);
      maybe(m, "tone_depth", c.analysis.cmrr.tone_depth);
      maybe(m, "samples", c.analysis.cmrr.samples);
      maybe(m, "segment_len", c.analysis.cmrr.segment_len);
    }
  }
  maybe(j, "workers", c.workers);
  maybe(j, "seed", c.seed);
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
}

PipelineConfig default_config() {
  PipelineConfig cfg;
  cfg.system = default_system();
  cfg.noise = default_noise();
  return cfg;
}

PipelineConfig config_from_env(PipelineConfig base) {
  if (const char* seed = std::getenv("QRNG_SEED"); seed && *seed) base.seed = std::stoull(seed);
  if (const char* out = std::getenv("QRNG_OUT_DIR"); out && *out) base.out_dir = out;
  return base;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  PipelineConfig cfg = default_config();
  from_json(json::parse(in, nullptr, true, true), cfg);
  return config_from_env(std::move(cfg));
}

// ---------------------------------------------------------------------------
// Solve

OperatingSettings operating_settings(const PipelineConfig& cfg) {
  OperatingSettings s;
  optics::SystemParams base = cfg.system;
  base.e_lo = std::sqrt(cfg.lo_power_w);
  s.agg = optics::compute_coefficients(base);
  s.routine = optics::solve_routine(cfg.routine, s.agg);
  s.x_params = optics::apply(base, s.routine.x_setting);
  s.p_params = optics::apply(base, s.routine.p_setting);
  return s;
}

json solve_summary(const PipelineConfig& cfg) {
  optics::SystemParams base = cfg.system;
  base.e_lo = std::sqrt(cfg.lo_power_w);
  const auto agg = optics::compute_coefficients(base);
  json out = {{"A", agg.a}, {"B", agg.b}, {"C", agg.c}, {"lo_power_w", cfg.lo_power_w}};
  json routines = json::array();
  for (int r = 1; r <= 3; ++r) {
    json entry = {{"routine", r}};
    try {
      const auto rc = optics::solve_routine(r, agg);
      entry["solvable"] = true;
      entry["x_setting"] = operating_point_json(rc.x_setting);
      entry["p_setting"] = operating_point_json(rc.p_setting);
      json checks = json::object();
      for (const auto& [name, point] : {std::pair{"x", rc.x_setting}, std::pair{"p", rc.p_setting}}) {
        const auto params = optics::apply(base, point);
        const auto q = optics::quadrature_coefficients(params, agg);
        const double rel_dc = std::abs(q.dc) / optics::dc_term_scale(params, agg);
        checks[name] = {{"coef_dc", q.dc},
                        {"coef_x", q.x},
                        {"coef_p", q.p},
                        {"relative_dc", rel_dc},
                        {"bias_cancelled", rel_dc < optics::kZeroTolerance}};
      }
      entry["checks"] = checks;
    } catch (const NoSolution& e) {
      entry["solvable"] = false;
      entry["reason"] = e.what();
    }
    routines.push_back(entry);
  }
  out["routines"] = routines;
  return out;
}

// ---------------------------------------------------------------------------
// Stages

void stage_simulate(const PipelineConfig& cfg, const fs::path& dir) {
  cfg.validate();
  fs::create_directories(dir);
  const auto ops = operating_settings(cfg);
  const auto opts = synth_options(cfg);

  const auto schedule = synth::switching_schedule(cfg.run.n_tot, cfg.run.n_c, substream_seed(cfg.seed, kScheduleStream));
  const auto analog = synth::synth_switched(ops.x_params, ops.p_params, schedule, cfg.noise,
                                            substream_seed(cfg.seed, kTraceStream), opts);
  auto block = synth::quantize(analog, cfg.adc.bits, cfg.adc.full_scale_v);
  block.rate_hz = cfg.adc.rate_hz;
  block.block_seed = substream_seed(cfg.seed, kTraceStream);
  synth::write_raw(dir / "raw.bin", block.codes);

  json p_positions = json::array();
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (schedule[i] == synth::Quadrature::p) p_positions.push_back(i);
  }
  write_json(dir / "raw.json",
             {{"format", "int16le"},
              {"stage_version", kStageVersion},
              {"config_hash", cfg.config_hash()},
              {"master_seed", cfg.seed},
              {"block_seed", block.block_seed},
              {"samples", block.codes.size()},
              {"bits", block.bits},
              {"rate_hz", block.rate_hz},
              {"delta_v", block.delta},
              {"full_scale_v", cfg.adc.full_scale_v},
              {"saturated", block.saturated},
              {"routine", cfg.routine},
              {"settings", {{"x", operating_point_json(ops.routine.x_setting)}, {"p", operating_point_json(ops.routine.p_setting)}}},
              {"schedule", {{"default", "X"}, {"p_label", "P"}, {"p_positions", p_positions}}}});

  // Shot-noise scale: trusted vacuum input at the operating point, detector noise off,
  // so detector noise in the data run is charged to the source.
  synth::NoiseSpec vacuum;
  vacuum.vacuum_amplitude = cfg.noise.vacuum_amplitude;
  vacuum.bandwidth_hz = cfg.noise.bandwidth_hz;
  const auto cal_n = static_cast<std::size_t>(cfg.run.calibration_samples);
  const double snu_x = population_variance(synth::synth_analog(ops.x_params, vacuum, cal_n, substream_seed(cfg.seed, kCalibrationX), opts));
  const double snu_p = population_variance(synth::synth_analog(ops.p_params, vacuum, cal_n, substream_seed(cfg.seed, kCalibrationP), opts));
  write_json(dir / "calibration.json",
             {{"stage_version", kStageVersion},
              {"config_hash", cfg.config_hash()},
              {"snu_x_v2", snu_x},
              {"snu_p_v2", snu_p},
              {"samples", cal_n},
              {"provenance",
               "vacuum-only calibration run at the operating LO power (" + format_double(cfg.lo_power_w) +
                   " W), 1 SNU input, detector noise excluded from the unit"}});
}

entropy::EntropyReport stage_entropy(const PipelineConfig& cfg, const fs::path& dir) {
  const auto rec = load_raw(dir);
  const json cal = read_json(dir / "calibration.json");
  const int bits = rec.meta.at("bits").get<int>();
  const double delta = rec.meta.at("delta_v").get<double>();

  entropy::QuadratureHistogram hx(bits, delta), hp(bits, delta);
  double sum_xp = 0.0, sum_x = 0.0, sum_p = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < rec.codes.size(); ++i) {
    (rec.schedule[i] == synth::Quadrature::x ? hx : hp).add(rec.codes[i]);
    if (i > 0 && rec.schedule[i] == synth::Quadrature::p && rec.schedule[i - 1] == synth::Quadrature::x) {
      const double x = rec.codes[i - 1] * delta, p = rec.codes[i] * delta;
      sum_xp += x * p;
      sum_x += x;
      sum_p += p;
      ++pairs;
    }
  }
  const double c_emp = pairs ? sum_xp / pairs - (sum_x / pairs) * (sum_p / pairs) : 0.0;

  entropy::SnuCalibration snu{cal.at("snu_x_v2").get<double>(), cal.at("snu_p_v2").get<double>(),
                              cal.at("provenance").get<std::string>()};
  json doc = {{"stage_version", kStageVersion},
              {"config_hash", cfg.config_hash()},
              {"master_seed", cfg.seed},
              {"inputs", {{"raw.bin", sha256_file(dir / "raw.bin")}, {"calibration.json", sha256_file(dir / "calibration.json")}}}};
  entropy::EntropyReport report;
  try {
    report = entropy::certify(hx, hp, rec.codes.size(), hp.total(), snu, c_emp);
  } catch (const std::domain_error& e) {
    doc["certifiable"] = false;
    doc["error"] = e.what();
    write_json(dir / "entropy.json", doc);
    throw Uncertifiable(std::string("no certifiable randomness: ") + e.what());
  } catch (const InvalidParameter& e) {
    doc["certifiable"] = false;
    doc["error"] = e.what();
    write_json(dir / "entropy.json", doc);
    throw Uncertifiable(std::string("no certifiable randomness: ") + e.what());
  }
  json body = report;
  doc.update(body);
  write_json(dir / "entropy.json", doc);
  if (!report.certifiable) {
    throw Uncertifiable("no certifiable randomness: average extractable rate " + format_double(report.r_dis_avg) +
                        " bits/sample");
  }
  return report;
}

json stage_extract(const PipelineConfig& cfg, const fs::path& dir) {
  const json ent = read_json(dir / "entropy.json");
  if (!ent.value("certifiable", false)) throw Uncertifiable("entropy stage did not certify randomness; refusing to extract");
  const double r = ent.at("r_dis_avg").get<double>();
  const auto rec = load_raw(dir);
  const int bits = rec.meta.at("bits").get<int>();

  std::size_t j = 0;
  std::size_t j_max = 0;
  try {
    j_max = extract::size_output(cfg.extractor.k, r, bits, cfg.extractor.epsilon_log2);
    j = cfg.extractor.j.value_or(std::min(j_max, cfg.extractor.k - 1));
  } catch (const ExtractionRefused& e) {
    throw Uncertifiable(e.what());
  }
  const std::uint64_t toeplitz_seed = substream_seed(cfg.seed, kToeplitzStream);
  const auto xcfg = extract::ExtractorConfig::with_generated_seed(cfg.extractor.k, j, cfg.extractor.epsilon_log2, toeplitz_seed);
  std::optional<extract::StreamExtractor> ex;
  try {
    ex.emplace(xcfg, r, bits, cfg.workers);
  } catch (const ExtractionRefused& e) {
    throw Uncertifiable(e.what());
  }
  ex->push(codes_of(rec, synth::Quadrature::x));
  const auto summary = ex->finish();
  write_bytes(dir / "bits.bin", ex->output());

  const auto seed_bytes = xcfg.seed.to_bytes();
  json manifest = {{"stage_version", kStageVersion},
                   {"config_hash", cfg.config_hash()},
                   {"master_seed", cfg.seed},
                   {"k", xcfg.k},
                   {"j", xcfg.j},
                   {"j_max", j_max},
                   {"epsilon_log2", xcfg.epsilon_log2},
                   {"r_dis_avg", r},
                   {"bits_per_sample", bits},
                   {"seed_bits", xcfg.seed.size()},
                   {"seed_generator_value", toeplitz_seed},
                   {"seed_digest", sha256_hex(seed_bytes)},
                   {"seed_reused_across_blocks", true},
                   {"blocks", summary.blocks},
                   {"output_bits", summary.output_bits},
                   {"discarded_bits", summary.discarded_bits},
                   {"bit_order", "samples MSB-first; output MSB-first within bytes"},
                   {"inputs", {{"raw.bin", sha256_file(dir / "raw.bin")}, {"entropy.json", sha256_file(dir / "entropy.json")}}},
                   {"output_digest", sha256_file(dir / "bits.bin")},
                   {"timestamps", {{"completed_utc", utc_now()}}}};
  write_json(dir / "manifest.json", manifest);
  return manifest;
}

json stage_analyze(const PipelineConfig& cfg, const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  const auto bytes = read_bytes(dir / "bits.bin");
  const auto nbits = manifest.at("output_bits").get<std::size_t>();
  const auto rec = load_raw(dir);
  const double delta = rec.meta.at("delta_v").get<double>();
  const double rate = rec.meta.at("rate_hz").get<double>();

  json battery_doc = {{"stage_version", kStageVersion}, {"config_hash", cfg.config_hash()}, {"nbits", nbits},
                      {"pass_band", {stats::kPassLow, stats::kPassHigh}}};
  bool battery_ok = true;
  if (nbits >= stats::kBatteryMinBits) {
    const auto bat = stats::randomness_battery(bytes, nbits);
    json tests = json::array();
    for (const auto& t : bat.tests) tests.push_back({{"name", t.name}, {"p_value", t.p_value}, {"passed", t.passed}});
    battery_doc["tests"] = tests;
    battery_doc["all_passed"] = bat.all_passed();
    battery_ok = bat.all_passed();
  } else {
    battery_doc["tests"] = json::array();
    battery_doc["all_passed"] = false;
    battery_doc["skipped"] = "insufficient data: " + std::to_string(nbits) + " bits";
    battery_ok = false;
  }
  write_json(dir / "battery.json", battery_doc);

  std::vector<double> x_volts;
  for (auto c : codes_of(rec, synth::Quadrature::x)) x_volts.push_back(c * delta);
  json autocorr = json::object();
  try {
    const auto ac_raw = stats::autocorrelation(x_volts, cfg.analysis.max_lag);
    write_autocorr_tsv(dir / "autocorr_raw.tsv", ac_raw);
    autocorr["raw"] = autocorr_summary(ac_raw);
  } catch (const std::exception& e) {
    autocorr["raw"] = {{"error", e.what()}};
  }
  try {
    const auto ac_bits = stats::autocorrelation_bits(bytes, nbits, cfg.analysis.max_lag);
    write_autocorr_tsv(dir / "autocorr_bits.tsv", ac_bits);
    autocorr["bits"] = autocorr_summary(ac_bits);
  } catch (const std::exception& e) {
    autocorr["bits"] = {{"error", e.what()}};
  }

  if (x_volts.size() >= cfg.analysis.psd_segment) {
    const auto psd = stats::welch_psd(x_volts, rate, cfg.analysis.psd_segment);
    std::ostringstream os;
    os << "frequency_hz\tpower_db\n";
    for (std::size_t k = 0; k < psd.freqs_hz.size(); ++k) os << format_double(psd.freqs_hz[k]) << '\t' << format_double(psd.power_db[k]) << '\n';
    write_text(dir / "psd.tsv", os.str());
  }

  // Common-mode rejection with a modulated LO at the probe power.
  const auto& cm = cfg.analysis.cmrr;
  PipelineConfig probe = cfg;
  probe.lo_power_w = cm.lo_power_w;
  const auto ops = operating_settings(probe);
  synth::NoiseSpec tone = cfg.noise;
  tone.lo_tone_hz = cm.tone_hz;
  tone.lo_tone_depth = cm.tone_depth;
  const auto opts = synth_options(cfg);
  const auto n_cm = static_cast<std::size_t>(cm.samples);
  const auto diff = synth::synth_analog(ops.x_params, tone, n_cm, substream_seed(cfg.seed, kCmrrDiff), opts);
  const auto common = synth::synth_analog(optics::common_mode(ops.x_params), tone, n_cm, substream_seed(cfg.seed, kCmrrCommon), opts);
  const auto psd_diff = stats::welch_psd(diff, rate, cm.segment_len, 0.5, stats::PsdScaling::spectrum);
  const auto psd_common = stats::welch_psd(common, rate, cm.segment_len, 0.5, stats::PsdScaling::spectrum);
  const double cmrr = optics::cmrr_from_spectra(psd_diff, psd_common, cm.tone_hz);
  {
    std::ostringstream os;
    os << "frequency_hz\tdifferential_db\tcommon_db\n";
    for (std::size_t k = 0; k < psd_diff.freqs_hz.size(); ++k) {
      os << format_double(psd_diff.freqs_hz[k]) << '\t' << format_double(psd_diff.power_db[k]) << '\t'
         << format_double(psd_common.power_db[k]) << '\n';
    }
    write_text(dir / "cmrr_psd.tsv", os.str());
  }
  json cmrr_doc = {{"stage_version", kStageVersion},
                   {"config_hash", cfg.config_hash()},
                   {"cmrr_db", cmrr},
                   {"tone_hz", cm.tone_hz},
                   {"tone_depth", cm.tone_depth},
                   {"lo_power_w", cm.lo_power_w},
                   {"segment_len", cm.segment_len},
                   {"overlap", 0.5},
                   {"window", "hann"},
                   {"samples", cm.samples}};
  write_json(dir / "cmrr.json", cmrr_doc);

  json analysis = {{"stage_version", kStageVersion}, {"config_hash", cfg.config_hash()}, {"autocorrelation", autocorr}};
  write_json(dir / "analysis.json", analysis);
  return {{"battery_passed", battery_ok}, {"cmrr_db", cmrr}, {"autocorrelation", autocorr}};
}

PipelineOutcome run_pipeline(const PipelineConfig& cfg) {
  PipelineOutcome out;
  const fs::path dir = cfg.out_dir;
  try {
    stage_simulate(cfg, dir);
    stage_entropy(cfg, dir);
    stage_extract(cfg, dir);
    const json analysis = stage_analyze(cfg, dir);
    build_report(dir);
    if (!analysis.at("battery_passed").get<bool>()) {
      out.status = ExitStatus::battery_failed;
      out.message = "pipeline ran; extracted bits failed the randomness battery";
    } else {
      out.message = "pipeline complete";
    }
  } catch (const Uncertifiable& e) {
    out.status = ExitStatus::uncertifiable;
    out.message = std::string("refused: ") + e.what();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

std::vector<std::string> missing_stage_outputs(const fs::path& dir) {
  static const char* kRequired[] = {"raw.bin",     "raw.json",         "calibration.json", "entropy.json",
                                    "bits.bin",    "manifest.json",    "battery.json",     "analysis.json",
                                    "cmrr.json",   "autocorr_raw.tsv", "autocorr_bits.tsv"};
  std::vector<std::string> missing;
  for (const char* f : kRequired) {
    if (!fs::exists(dir / f)) missing.emplace_back(f);
  }
  return missing;
}

namespace {

json read_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing stage output " + path.filename().string());
  std::string line;
  std::getline(in, line);  // header
  json rows = json::array();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    double a = 0, b = 0;
    ls >> a >> b;
    rows.push_back({a, b});
  }
  return rows;
}

}  // namespace

json build_report(const fs::path& dir) {
  const auto missing = missing_stage_outputs(dir);
  if (!missing.empty()) {
    std::ostringstream os;
    os << "run directory " << dir.string() << " is missing stage outputs:";
    for (const auto& m : missing) os << ' ' << m;
    throw std::runtime_error(os.str());
  }
  json manifest = read_json(dir / "manifest.json");
  json timestamps = {{"extract_completed_utc", manifest.at("timestamps").at("completed_utc")}, {"report_generated_utc", utc_now()}};
  manifest.erase("timestamps");

  json entropy_doc = read_json(dir / "entropy.json");
  json analysis = read_json(dir / "analysis.json");
  json report = {
      {"schema", "qrng-report/1"},
      {"stage_version", kStageVersion},
      {"config_hash", manifest.at("config_hash")},
      {"master_seed", manifest.at("master_seed")},
      {"simulation", read_json(dir / "raw.json")},
      {"calibration", read_json(dir / "calibration.json")},
      {"entropy", entropy_doc},
      {"extractor", manifest},
      {"battery", read_json(dir / "battery.json")},
      {"cmrr", read_json(dir / "cmrr.json")},
      {"autocorrelation",
       {{"raw", {{"summary", analysis.at("autocorrelation").at("raw")}, {"table", read_table(dir / "autocorr_raw.tsv")}}},
        {"bits", {{"summary", analysis.at("autocorrelation").at("bits")}, {"table", read_table(dir / "autocorr_bits.tsv")}}}}},
      {"timestamps", timestamps},
  };
  // The P-position list is bulky and already in raw.json.
  report["simulation"]["schedule"].erase("p_positions");
  write_json(dir / "report.json", report);
  return report;
}

std::vector<std::string> validate_report(const json& report) {
  std::vector<std::string> errors;
  auto need = [&](const json& obj, const std::string& path, const char* key, json::value_t type) {
    if (!obj.is_object() || !obj.contains(key)) {
      errors.push_back("missing " + path + key);
      return;
    }
    const auto t = obj.at(key).type();
    const bool numeric_ok = (type == json::value_t::number_float) &&
                            (t == json::value_t::number_integer || t == json::value_t::number_unsigned);
    const bool unsigned_ok = type == json::value_t::number_integer && t == json::value_t::number_unsigned;
    if (t != type && !numeric_ok && !unsigned_ok) errors.push_back("wrong type for " + path + key);
  };
  using vt = json::value_t;
  need(report, "", "schema", vt::string);
  need(report, "", "config_hash", vt::string);
  need(report, "", "master_seed", vt::number_unsigned);
  need(report, "", "stage_version", vt::string);
  for (const char* section : {"simulation", "calibration", "entropy", "extractor", "battery", "cmrr", "autocorrelation", "timestamps"}) {
    need(report, "", section, vt::object);
  }
  if (!errors.empty()) return errors;
  const auto& e = report.at("entropy");
  for (const char* k : {"h_axi", "s_holevo", "r_per_sample", "r_dis_avg"}) need(e, "entropy.", k, vt::number_float);
  need(e, "entropy.", "t_switch", vt::number_unsigned);
  need(e, "entropy.", "certifiable", vt::boolean);
  const auto& x = report.at("extractor");
  for (const char* k : {"k", "j", "blocks", "output_bits", "discarded_bits"}) need(x, "extractor.", k, vt::number_unsigned);
  need(x, "extractor.", "seed_digest", vt::string);
  need(report.at("battery"), "battery.", "tests", vt::array);
  need(report.at("battery"), "battery.", "all_passed", vt::boolean);
  need(report.at("cmrr"), "cmrr.", "cmrr_db", vt::number_float);
  for (const char* k : {"raw", "bits"}) {
    need(report.at("autocorrelation"), "autocorrelation.", k, vt::object);
    if (report.at("autocorrelation").contains(k)) {
      need(report.at("autocorrelation").at(k), std::string("autocorrelation.") + k + ".", "table", vt::array);
    }
  }
  return errors;
}

json strip_timestamps(json report) {
  report.erase("timestamps");
  if (report.contains("extractor")) report["extractor"].erase("timestamps");
  return report;
}

}  // namespace qrng::cli
