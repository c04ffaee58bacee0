#include "qrng/signal_synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <thread>
#include <unordered_set>

#include "qrng/digest.hpp"
#include "qrng/errors.hpp"

namespace qrng::synth {

const char* to_string(Quadrature q) { return q == Quadrature::x ? "X" : "P"; }

void NoiseSpec::validate() const {
  auto nonneg = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw InvalidParameter(std::string(name) + " must be >= 0");
  };
  nonneg(vacuum_var_x, "vacuum_var_x");
  nonneg(vacuum_var_p, "vacuum_var_p");
  nonneg(vacuum_amplitude, "vacuum_amplitude");
  nonneg(lo_fluct_var, "lo_fluct_var");
  nonneg(lo_tone_hz, "lo_tone_hz");
  nonneg(elec_noise_var, "elec_noise_var");
  nonneg(bandwidth_hz, "bandwidth_hz");
  if (!(lo_fluct_corr >= 0.0 && lo_fluct_corr < 1.0)) throw InvalidParameter("lo_fluct_corr must lie in [0,1)");
  if (!(lo_tone_depth >= 0.0 && lo_tone_depth <= 1.0)) throw InvalidParameter("lo_tone_depth must lie in [0,1]");
  if (!std::isfinite(phase_drift_rad_per_s)) throw InvalidParameter("phase_drift_rad_per_s must be finite");
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Setting {
  optics::SystemParams params;
  optics::GainAggregates agg;
  optics::QuadratureCoefficients coef;
};

Setting make_setting(const optics::SystemParams& p) {
  Setting s{p, optics::compute_coefficients(p), {}};
  s.coef = optics::quadrature_coefficients(p, s.agg);
  return s;
}

template <typename Selector>
std::vector<double> synthesize(std::span<const Setting> settings, Selector select, std::size_t n,
                               const NoiseSpec& noise, std::uint64_t seed, const SynthOptions& opt) {
  noise.validate();
  if (n == 0) throw InvalidParameter("sample count must be >= 1");
  if (!(opt.rate_hz > 0.0)) throw InvalidParameter("rate_hz must be positive");
  if (opt.block_len == 0) throw InvalidParameter("block_len must be positive");

  std::vector<double> out(n);
  const std::size_t blocks = (n + opt.block_len - 1) / opt.block_len;
  const double sd_x = noise.vacuum_amplitude * std::sqrt(noise.vacuum_var_x);
  const double sd_p = noise.vacuum_amplitude * std::sqrt(noise.vacuum_var_p);
  const double sd_e = std::sqrt(noise.elec_noise_var);
  const double sd_lo = std::sqrt(noise.lo_fluct_var);
  const double rho = noise.lo_fluct_corr;
  const double innov = std::sqrt(1.0 - rho * rho);
  const bool drifting = noise.phase_drift_rad_per_s != 0.0;
  const double alpha = noise.bandwidth_hz > 0.0 ? 1.0 - std::exp(-kTwoPi * noise.bandwidth_hz / opt.rate_hz) : 1.0;

  auto run_block = [&](std::size_t b) {
    std::mt19937_64 rng(substream_seed(seed, b));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t begin = b * opt.block_len;
    const std::size_t end = std::min(n, begin + opt.block_len);
    double eps = sd_lo * gauss(rng);
    double filtered = 0.0;
    for (std::size_t g = begin; g < end; ++g) {
      const Setting& s = settings[select(g)];
      const double t = static_cast<double>(g) / opt.rate_hz;
      optics::QuadratureCoefficients c = s.coef;
      if (drifting) {
        optics::SystemParams drifted = s.params;
        drifted.delta_phi += noise.phase_drift_rad_per_s * t;
        c = optics::quadrature_coefficients(drifted, s.agg);
      }
      FieldState f;
      f.delta_x_s = sd_x * gauss(rng);
      f.delta_p_s = sd_p * gauss(rng);
      const double step = gauss(rng);
      if (g != begin) eps = rho * eps + innov * sd_lo * step;
      const double eta_el = s.params.eta_pm0 * s.params.e_lo;
      // 2 eta0 E_L dX_L carries the relative intensity fluctuation eps of the LO power.
      f.delta_x_l = 0.5 * eta_el * eps;
      const double tone = noise.lo_tone_depth * std::sin(kTwoPi * noise.lo_tone_hz * t);
      const double lo_term = eta_el * eta_el * (1.0 + tone) + 2.0 * eta_el * f.delta_x_l;
      const double v = c.dc * lo_term + c.x * f.delta_x_s + c.p * f.delta_p_s + sd_e * gauss(rng);
      filtered = (g == begin) ? v : filtered + alpha * (v - filtered);
      out[g] = filtered;
    }
  };

  unsigned workers = opt.workers == 0 ? std::max(1u, std::thread::hardware_concurrency()) : opt.workers;
  workers = static_cast<unsigned>(std::min<std::size_t>(workers, blocks));
  if (workers <= 1) {
    for (std::size_t b = 0; b < blocks; ++b) run_block(b);
    return out;
  }
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t b = next.fetch_add(1); b < blocks; b = next.fetch_add(1)) run_block(b);
      });
    }
  }
  return out;
}

}  // namespace

std::vector<double> synth_analog(const optics::SystemParams& params, const NoiseSpec& noise, std::size_t n,
                                 std::uint64_t seed, const SynthOptions& options) {
  const Setting settings[] = {make_setting(params)};
  return synthesize(settings, [](std::size_t) { return std::size_t{0}; }, n, noise, seed, options);
}

std::vector<double> synth_switched(const optics::SystemParams& x_setting, const optics::SystemParams& p_setting,
                                   std::span<const Quadrature> schedule, const NoiseSpec& noise,
                                   std::uint64_t seed, const SynthOptions& options) {
  const Setting settings[] = {make_setting(x_setting), make_setting(p_setting)};
  return synthesize(
      settings, [schedule](std::size_t g) { return static_cast<std::size_t>(schedule[g]); }, schedule.size(),
      noise, seed, options);
}

std::vector<Quadrature> switching_schedule(std::size_t n_tot, std::size_t n_c, std::uint64_t seed) {
  if (n_c >= n_tot) throw InvalidParameter("switching schedule requires n_c < n_tot");
  std::vector<Quadrature> labels(n_tot, Quadrature::x);
  std::mt19937_64 rng(seed);
  // Floyd's sampling: n_c distinct positions in O(n_c).
  std::unordered_set<std::size_t> chosen;
  chosen.reserve(n_c * 2);
  for (std::size_t j = n_tot - n_c; j < n_tot; ++j) {
    std::uniform_int_distribution<std::size_t> pick(0, j);
    const std::size_t r = pick(rng);
    const std::size_t pos = chosen.insert(r).second ? r : j;
    if (pos == j) chosen.insert(j);
    labels[pos] = Quadrature::p;
  }
  return labels;
}

SampleBlock quantize(std::span<const double> analog, int bits, double full_scale) {
  if (!(full_scale > 0.0)) throw InvalidParameter("full_scale must be positive");
  if (bits < 2 || bits > 16) throw InvalidParameter("ADC bits must lie in [2,16]");
  SampleBlock block;
  block.bits = bits;
  block.delta = full_scale / std::ldexp(1.0, bits);
  const double lo = block.min_code();
  const double hi = block.max_code();
  block.codes.resize(analog.size());
  for (std::size_t i = 0; i < analog.size(); ++i) {
    double code = std::round(analog[i] / block.delta);
    if (code > hi) {
      code = hi;
      ++block.saturated;
    } else if (code < lo) {
      code = lo;
      ++block.saturated;
    }
    block.codes[i] = static_cast<std::int16_t>(code);
  }
  return block;
}

std::uint64_t merge_saturation(std::span<const SampleBlock> blocks) {
  std::uint64_t total = 0;
  for (const auto& b : blocks) total += b.saturated;
  return total;
}

LinearFit least_squares(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidParameter("least squares needs >= 2 paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) throw InvalidParameter("least squares needs distinct abscissae");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  return fit;
}

SweepResult variance_sweep(const optics::SystemParams& params, const NoiseSpec& noise,
                           std::span<const double> lo_powers_w, std::size_t samples_per_point,
                           std::uint64_t seed, const SynthOptions& options) {
  if (lo_powers_w.size() < 2) throw InvalidParameter("variance sweep needs >= 2 LO power points");
  SweepResult res;
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < lo_powers_w.size(); ++i) {
    const double power = lo_powers_w[i];
    if (!(power >= 0.0)) throw InvalidParameter("LO power must be >= 0");
    optics::SystemParams p = params;
    p.e_lo = std::sqrt(power);
    const auto trace = synth_analog(p, noise, samples_per_point, substream_seed(seed, i), options);
    double mean = 0.0;
    for (double v : trace) mean += v;
    mean /= static_cast<double>(trace.size());
    double var = 0.0;
    for (double v : trace) var += (v - mean) * (v - mean);
    var /= static_cast<double>(trace.size());
    res.points.push_back({power, var});
    xs.push_back(power);
    ys.push_back(var);
  }
  res.fit = least_squares(xs, ys);
  return res;
}

void write_raw(const std::filesystem::path& path, std::span<const std::int16_t> codes) {
  std::vector<char> bytes(codes.size() * 2);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto u = static_cast<std::uint16_t>(codes[i]);
    bytes[2 * i] = static_cast<char>(u & 0xFF);
    bytes[2 * i + 1] = static_cast<char>(u >> 8);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::int16_t> read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 2 != 0) throw InvalidParameter("raw file length is not a multiple of 2: " + path.string());
  std::vector<std::int16_t> codes(bytes.size() / 2);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto lo = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[2 * i]));
    const auto hi = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[2 * i + 1]));
    codes[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
  }
  return codes;
}

}  // namespace qrng::synth
