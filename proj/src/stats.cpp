#include "qrng/stats.hpp"

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <bit>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>
#include <numeric>
#include <sstream>

#include "qrng/errors.hpp"

namespace qrng::stats {

double AutocorrResult::mean_signed() const {
  if (coefficients.empty()) return 0.0;
  return std::accumulate(coefficients.begin(), coefficients.end(), 0.0) / static_cast<double>(coefficients.size());
}

double AutocorrResult::mean_abs() const {
  if (coefficients.empty()) return 0.0;
  double s = 0.0;
  for (double c : coefficients) s += std::abs(c);
  return s / static_cast<double>(coefficients.size());
}

double AutocorrResult::max_abs() const {
  double m = 0.0;
  for (double c : coefficients) m = std::max(m, std::abs(c));
  return m;
}

bool AutocorrResult::within_bound() const { return max_abs() <= bound; }

namespace {

void check_lag(std::size_t n, std::size_t max_lag) {
  if (max_lag == 0) throw InvalidParameter("max_lag must be >= 1");
  if (n <= 10 * max_lag) {
    std::ostringstream os;
    os << "autocorrelation needs n > 10 * max_lag (n=" << n << ", max_lag=" << max_lag << ")";
    throw InvalidParameter(os.str());
  }
}

// Packed MSB-first bytes -> words with bit i at position i % 64.
std::vector<std::uint64_t> unpack_words(std::span<const std::uint8_t> packed, std::size_t nbits) {
  if (packed.size() * 8 < nbits) throw InvalidParameter("packed buffer shorter than nbits");
  static const std::array<std::uint8_t, 256> kReverse = [] {
    std::array<std::uint8_t, 256> t{};
    for (unsigned v = 0; v < 256; ++v) {
      unsigned r = 0;
      for (unsigned b = 0; b < 8; ++b) r |= ((v >> b) & 1U) << (7 - b);
      t[v] = static_cast<std::uint8_t>(r);
    }
    return t;
  }();
  std::vector<std::uint64_t> words((nbits + 63) / 64 + 2, 0);
  const std::size_t nbytes = (nbits + 7) / 8;
  for (std::size_t i = 0; i < nbytes; ++i) {
    words[i >> 3] |= static_cast<std::uint64_t>(kReverse[packed[i]]) << (8 * (i & 7));
  }
  const std::size_t tail = nbits & 63;
  if (tail != 0) words[nbits >> 6] &= (std::uint64_t{1} << tail) - 1;
  return words;
}

inline bool bit_at(const std::vector<std::uint64_t>& w, std::size_t i) { return (w[i >> 6] >> (i & 63)) & 1U; }

// Word t of the stream advanced by `lag` bits.
inline std::uint64_t advanced(const std::vector<std::uint64_t>& w, std::size_t t, std::size_t lag) {
  const std::size_t q = t + (lag >> 6);
  const unsigned r = lag & 63;
  if (r == 0) return w[q];
  return (w[q] >> r) | (w[q + 1] << (64 - r));
}

// Number of i < count with bits i and i + lag both set (and_mode) or differing.
std::uint64_t pair_count(const std::vector<std::uint64_t>& w, std::size_t count, std::size_t lag, bool and_mode) {
  std::uint64_t total = 0;
  const std::size_t full = count >> 6;
  for (std::size_t t = 0; t < full; ++t) {
    const std::uint64_t a = w[t];
    const std::uint64_t b = advanced(w, t, lag);
    total += static_cast<std::uint64_t>(std::popcount(and_mode ? (a & b) : (a ^ b)));
  }
  const std::size_t rem = count & 63;
  if (rem != 0) {
    const std::uint64_t mask = (std::uint64_t{1} << rem) - 1;
    const std::uint64_t a = w[full];
    const std::uint64_t b = advanced(w, full, lag);
    total += static_cast<std::uint64_t>(std::popcount((and_mode ? (a & b) : (a ^ b)) & mask));
  }
  return total;
}

std::uint64_t ones(const std::vector<std::uint64_t>& w, std::size_t nbits) {
  std::uint64_t c = 0;
  for (std::size_t t = 0; t < (nbits + 63) / 64; ++t) c += static_cast<std::uint64_t>(std::popcount(w[t]));
  return c;
}

}  // namespace

AutocorrResult autocorrelation(std::span<const double> data, std::size_t max_lag) {
  check_lag(data.size(), max_lag);
  const std::size_t n = data.size();
  const double mean = std::accumulate(data.begin(), data.end(), 0.0) / static_cast<double>(n);
  std::vector<double> centred(n);
  double denom = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    centred[i] = data[i] - mean;
    denom += centred[i] * centred[i];
  }
  if (!(denom > 0.0)) throw DegenerateInput("autocorrelation of a constant sequence is undefined");
  AutocorrResult res;
  res.n = n;
  res.bound = 3.0 / std::sqrt(static_cast<double>(n));
  res.coefficients.resize(max_lag);
  for (std::size_t lag = 1; lag <= max_lag; ++lag) {
    double s = 0.0;
    for (std::size_t i = 0; i + lag < n; ++i) s += centred[i] * centred[i + lag];
    res.coefficients[lag - 1] = s / denom;
  }
  return res;
}

AutocorrResult autocorrelation_bits(std::span<const std::uint8_t> packed, std::size_t nbits, std::size_t max_lag) {
  check_lag(nbits, max_lag);
  const auto w = unpack_words(packed, nbits);
  const double n = static_cast<double>(nbits);
  const double total = static_cast<double>(ones(w, nbits));
  const double m = total / n;
  const double denom = n * m * (1.0 - m);
  if (!(denom > 0.0)) throw DegenerateInput("autocorrelation of a constant bit stream is undefined");

  AutocorrResult res;
  res.n = nbits;
  res.bound = 3.0 / std::sqrt(n);
  res.coefficients.resize(max_lag);
  double head = 0.0;  // ones among the first `lag` bits
  double tail = 0.0;  // ones among the last `lag` bits
  for (std::size_t lag = 1; lag <= max_lag; ++lag) {
    head += bit_at(w, lag - 1);
    tail += bit_at(w, nbits - lag);
    const double both = static_cast<double>(pair_count(w, nbits - lag, lag, true));
    const double a = total - tail;  // sum of y_i, i < n - lag
    const double b = total - head;  // sum of y_i, i >= lag
    const double s = both - m * (a + b) + static_cast<double>(nbits - lag) * m * m;
    res.coefficients[lag - 1] = s / denom;
  }
  return res;
}

namespace {

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwRealPlan {
  explicit FftwRealPlan(std::size_t n) : n_(n) {
    in_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
    out_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
    if (!in_ || !out_) throw std::bad_alloc();
    std::lock_guard lock(fftw_planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
  }
  ~FftwRealPlan() {
    {
      std::lock_guard lock(fftw_planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }
  FftwRealPlan(const FftwRealPlan&) = delete;
  FftwRealPlan& operator=(const FftwRealPlan&) = delete;

  void execute() { fftw_execute(plan_); }

  std::size_t n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

}  // namespace

PsdResult welch_psd(std::span<const double> data, double rate_hz, std::size_t segment_len, double overlap,
                    PsdScaling scaling) {
  if (segment_len < 2 || !std::has_single_bit(segment_len)) {
    throw InvalidParameter("segment length must be a power of two >= 2");
  }
  if (segment_len > data.size()) throw InvalidParameter("segment longer than data");
  if (!(rate_hz > 0.0)) throw InvalidParameter("rate must be positive");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw InvalidParameter("overlap must lie in [0,1)");

  const std::size_t n = segment_len;
  const std::size_t step = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(n * (1.0 - overlap))));
  const std::size_t segments = 1 + (data.size() - n) / step;
  const std::size_t bins = n / 2 + 1;

  std::vector<double> window(n);
  double sum_w = 0.0, sum_w2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    window[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n)));
    sum_w += window[i];
    sum_w2 += window[i] * window[i];
  }

  FftwRealPlan fft(n);
  std::vector<double> acc(bins, 0.0);
  for (std::size_t s = 0; s < segments; ++s) {
    const double* seg = data.data() + s * step;
    const double mean = std::accumulate(seg, seg + n, 0.0) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) fft.in_[i] = (seg[i] - mean) * window[i];
    fft.execute();
    for (std::size_t k = 0; k < bins; ++k) acc[k] += fft.out_[k][0] * fft.out_[k][0] + fft.out_[k][1] * fft.out_[k][1];
  }

  const double norm = scaling == PsdScaling::density ? rate_hz * sum_w2 : sum_w * sum_w;
  PsdResult res;
  res.segment_len = n;
  res.overlap = overlap;
  res.segments = segments;
  res.rate_hz = rate_hz;
  res.scaling = scaling;
  res.freqs_hz.resize(bins);
  res.power.resize(bins);
  res.power_db.resize(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    double p = acc[k] / (static_cast<double>(segments) * norm);
    if (k != 0 && k != n / 2) p *= 2.0;  // fold negative frequencies
    res.freqs_hz[k] = static_cast<double>(k) * rate_hz / static_cast<double>(n);
    res.power[k] = p;
    res.power_db[k] = 10.0 * std::log10(std::max(p, std::numeric_limits<double>::min()));
  }
  return res;
}

bool BatteryResult::all_passed() const {
  return !tests.empty() && std::all_of(tests.begin(), tests.end(), [](const TestResult& t) { return t.passed; });
}

double monobit_p(std::span<const std::uint8_t> packed, std::size_t nbits) {
  if (nbits == 0) throw InvalidParameter("monobit test needs data");
  const auto w = unpack_words(packed, nbits);
  const double n = static_cast<double>(nbits);
  const double s = 2.0 * static_cast<double>(ones(w, nbits)) - n;
  return std::erfc(std::abs(s) / std::sqrt(n) / std::numbers::sqrt2);
}

double block_frequency_p(std::span<const std::uint8_t> packed, std::size_t nbits, std::size_t block) {
  if (block == 0 || nbits < block) throw InvalidParameter("block frequency test needs at least one block");
  const auto w = unpack_words(packed, nbits);
  const std::size_t blocks = nbits / block;
  double chi2 = 0.0;
  for (std::size_t b = 0; b < blocks; ++b) {
    std::size_t c = 0;
    for (std::size_t i = b * block; i < (b + 1) * block; ++i) c += bit_at(w, i);
    const double pi = static_cast<double>(c) / static_cast<double>(block) - 0.5;
    chi2 += pi * pi;
  }
  chi2 *= 4.0 * static_cast<double>(block);
  return boost::math::gamma_q(static_cast<double>(blocks) / 2.0, chi2 / 2.0);
}

double runs_p(std::span<const std::uint8_t> packed, std::size_t nbits) {
  if (nbits < 2) throw InvalidParameter("runs test needs at least 2 bits");
  const auto w = unpack_words(packed, nbits);
  const double n = static_cast<double>(nbits);
  const double pi = static_cast<double>(ones(w, nbits)) / n;
  if (std::abs(pi - 0.5) >= 2.0 / std::sqrt(n)) return 0.0;  // frequency prerequisite fails
  const double v = 1.0 + static_cast<double>(pair_count(w, nbits - 1, 1, false));
  const double q = pi * (1.0 - pi);
  return std::erfc(std::abs(v - 2.0 * n * q) / (2.0 * std::sqrt(2.0 * n) * q));
}

BatteryResult randomness_battery(std::span<const std::uint8_t> packed, std::size_t nbits) {
  if (nbits < kBatteryMinBits) {
    std::ostringstream os;
    os << "randomness battery needs >= " << kBatteryMinBits << " bits, got " << nbits;
    throw InvalidParameter(os.str());
  }
  BatteryResult res;
  res.nbits = nbits;
  auto add = [&](std::string name, double p) {
    res.tests.push_back({std::move(name), p, p >= kPassLow && p <= kPassHigh});
  };
  add("monobit", monobit_p(packed, nbits));
  add("block_frequency", block_frequency_p(packed, nbits, 128));
  add("runs", runs_p(packed, nbits));
  return res;
}

}  // namespace qrng::stats
