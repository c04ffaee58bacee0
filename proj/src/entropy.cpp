#include "qrng/entropy.hpp"

#include <gmp.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "qrng/errors.hpp"

namespace qrng::entropy {

QuadratureHistogram::QuadratureHistogram(int bits, double delta) : bits_(bits), delta_(delta) {
  if (bits < 1 || bits > 16) throw InvalidParameter("histogram bits must lie in [1,16]");
  if (!(delta > 0.0)) throw InvalidParameter("histogram delta must be positive");
  counts_.assign(std::size_t{1} << bits, 0);
}

QuadratureHistogram QuadratureHistogram::from_codes(std::span<const std::int16_t> codes, int bits, double delta) {
  QuadratureHistogram h(bits, delta);
  for (auto c : codes) h.add(c);
  return h;
}

void QuadratureHistogram::add(std::int32_t code, std::uint64_t count) {
  if (code < min_code() || code > max_code()) {
    throw InvalidParameter("code " + std::to_string(code) + " outside " + std::to_string(bits_) + "-bit range");
  }
  counts_[static_cast<std::size_t>(code - min_code())] += count;
  total_ += count;
}

void QuadratureHistogram::merge(const QuadratureHistogram& other) {
  if (other.bits_ != bits_ || other.delta_ != delta_) {
    throw InvalidParameter("cannot merge histograms with different bits or delta");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  total_ += other.total_;
}

std::uint64_t QuadratureHistogram::count(std::int32_t code) const {
  if (code < min_code() || code > max_code()) return 0;
  return counts_[static_cast<std::size_t>(code - min_code())];
}

double shannon_entropy(const QuadratureHistogram& hist) {
  if (hist.total() == 0) throw InvalidParameter("Shannon entropy of an empty histogram");
  const double n = static_cast<double>(hist.total());
  double h = 0.0;
  for (std::int32_t c = hist.min_code(); c <= hist.max_code(); ++c) {
    const auto k = hist.count(c);
    if (k == 0) continue;
    const double p = static_cast<double>(k) / n;
    h -= p * std::log2(p);
  }
  return h;
}

namespace {

template <typename Shift>
double histogram_variance(const QuadratureHistogram& hist, Shift shift) {
  const double n = static_cast<double>(hist.total());
  double mean = 0.0;
  for (std::int32_t c = hist.min_code(); c <= hist.max_code(); ++c) {
    if (auto k = hist.count(c)) mean += static_cast<double>(k) * shift(c);
  }
  mean /= n;
  double var = 0.0;
  for (std::int32_t c = hist.min_code(); c <= hist.max_code(); ++c) {
    if (auto k = hist.count(c)) {
      const double d = shift(c) - mean;
      var += static_cast<double>(k) * d * d;
    }
  }
  return var / n;
}

}  // namespace

double plain_variance(const QuadratureHistogram& hist) {
  if (hist.total() == 0) throw InvalidParameter("variance of an empty histogram");
  const double delta = hist.delta();
  return histogram_variance(hist, [delta](std::int32_t c) { return c * delta; });
}

double worst_case_variance(const QuadratureHistogram& hist) {
  if (hist.total() < 2) throw InvalidParameter("worst-case variance needs at least 2 samples");
  const double delta = hist.delta();
  const double v = histogram_variance(hist, [delta](std::int32_t c) {
    const double a = c * delta;
    return a <= 0.0 ? a - 0.5 * delta : a + 0.5 * delta;
  });
  if (!(v > 0.0)) throw DegenerateInput("degenerate histogram: worst-cased variance is zero");
  return v;
}

namespace {

double xlog2x(double x) { return x > 0.0 ? x * std::log2(x) : 0.0; }

}  // namespace

double holevo_bound(double lambda) {
  if (!(lambda >= 1.0)) {
    std::ostringstream os;
    os << "lambda = " << lambda << " < 1: covariance is below the shot-noise limit (check SNU calibration)";
    throw InvalidState(os.str());
  }
  if (lambda == 1.0) return 0.0;
  return xlog2x((lambda + 1.0) / 2.0) - xlog2x((lambda - 1.0) / 2.0);
}

double invert_holevo(double s_bits) {
  if (!(s_bits >= 0.0) || !std::isfinite(s_bits)) throw InvalidParameter("Holevo quantity must be >= 0");
  if (s_bits == 0.0) return 1.0;
  double lo = 1.0;
  double hi = 2.0;
  while (holevo_bound(hi) < s_bits) {
    lo = hi;
    hi *= 2.0;
  }
  for (int i = 0; i < 200 && hi - lo > 4 * std::numeric_limits<double>::epsilon() * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    (holevo_bound(mid) < s_bits ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

SnuCalibration snu_from_anchor(double v_x_bar_v2, double v_p_bar_v2, double h_bits, double r_per_sample,
                               std::string provenance) {
  if (!(v_x_bar_v2 > 0.0 && v_p_bar_v2 > 0.0)) throw InvalidParameter("anchor variances must be positive");
  const double lambda = invert_holevo(h_bits - r_per_sample);
  const double scale = std::sqrt(v_x_bar_v2 * v_p_bar_v2) / lambda;
  return {scale, scale, std::move(provenance)};
}

CovarianceEstimate estimate_covariance(double v_x_bar_v2, double v_p_bar_v2, const SnuCalibration& snu,
                                       double c_empirical) {
  if (!(snu.snu_x > 0.0 && snu.snu_p > 0.0)) throw InvalidParameter("SNU calibration must be positive");
  CovarianceEstimate est;
  est.v_x_bar = v_x_bar_v2 / snu.snu_x;
  est.v_p_bar = v_p_bar_v2 / snu.snu_p;
  if (!(est.v_x_bar > 0.0 && est.v_p_bar > 0.0)) throw DegenerateInput("worst-cased variances must be positive");
  est.c = 0.0;
  est.c_empirical = c_empirical;
  est.lambda = std::sqrt(est.v_x_bar * est.v_p_bar - est.c * est.c);
  est.snu = snu;
  return est;
}

std::uint64_t switching_cost_exact(std::uint64_t n_tot, std::uint64_t n_c) {
  if (n_c > n_tot) throw InvalidParameter("n_c must not exceed n_tot");
  mpz_t bin;
  mpz_init(bin);
  mpz_bin_uiui(bin, static_cast<unsigned long>(n_tot), static_cast<unsigned long>(n_c));
  // ceil(log2 x) for integer x >= 1 is the bit length of x - 1.
  mpz_sub_ui(bin, bin, 1);
  const std::uint64_t bits = mpz_sgn(bin) == 0 ? 0 : mpz_sizeinbase(bin, 2);
  mpz_clear(bin);
  return bits;
}

std::uint64_t switching_cost_lgamma(std::uint64_t n_tot, std::uint64_t n_c) {
  if (n_c > n_tot) throw InvalidParameter("n_c must not exceed n_tot");
  const long double n = static_cast<long double>(n_tot);
  const long double k = static_cast<long double>(n_c);
  const long double log2_binom =
      (std::lgamma(n + 1.0L) - std::lgamma(k + 1.0L) - std::lgamma(n - k + 1.0L)) / std::log(2.0L);
  const long double guarded = std::ceil(log2_binom - 1e-9L);
  return guarded <= 0.0L ? 0 : static_cast<std::uint64_t>(guarded);
}

std::uint64_t switching_cost(std::uint64_t n_tot, std::uint64_t n_c) {
  return n_tot < kExactSwitchingLimit ? switching_cost_exact(n_tot, n_c) : switching_cost_lgamma(n_tot, n_c);
}

EntropyReport certify_moments(double v_x_bar_v2, double v_p_bar_v2, double h_bits, std::uint64_t n_tot,
                              std::uint64_t n_c, const SnuCalibration& snu, double c_empirical) {
  if (!(n_c >= 1 && n_tot > n_c)) throw InvalidParameter("certification requires n_tot > n_c >= 1");
  EntropyReport r;
  r.v_x_bar_v2 = v_x_bar_v2;
  r.v_p_bar_v2 = v_p_bar_v2;
  r.covariance = estimate_covariance(v_x_bar_v2, v_p_bar_v2, snu, c_empirical);
  r.h_axi = h_bits;
  r.s_holevo = holevo_bound(r.covariance.lambda);
  r.r_per_sample = r.h_axi - r.s_holevo;
  r.n_tot = n_tot;
  r.n_c = n_c;
  r.t_switch = switching_cost(n_tot, n_c);
  const double total = static_cast<double>(n_tot);
  r.r_dis_avg = (static_cast<double>(n_tot - n_c) * r.r_per_sample - static_cast<double>(r.t_switch)) / total;
  r.certifiable = r.r_dis_avg > 0.0;
  return r;
}

EntropyReport certify(const QuadratureHistogram& hist_x, const QuadratureHistogram& hist_p, std::uint64_t n_tot,
                      std::uint64_t n_c, const SnuCalibration& snu, double c_empirical) {
  if (hist_x.total() == 0 || hist_p.total() == 0) throw InvalidParameter("certification needs nonempty histograms");
  return certify_moments(worst_case_variance(hist_x), worst_case_variance(hist_p), shannon_entropy(hist_x), n_tot,
                         n_c, snu, c_empirical);
}

void to_json(nlohmann::json& j, const EntropyReport& r) {
  j = nlohmann::json{
      {"h_axi", r.h_axi},
      {"s_holevo", r.s_holevo},
      {"r_per_sample", r.r_per_sample},
      {"n_tot", r.n_tot},
      {"n_c", r.n_c},
      {"t_switch", r.t_switch},
      {"r_dis_avg", r.r_dis_avg},
      {"certifiable", r.certifiable},
      {"v_x_bar_v2", r.v_x_bar_v2},
      {"v_p_bar_v2", r.v_p_bar_v2},
      {"covariance",
       {{"v_x_bar_snu", r.covariance.v_x_bar},
        {"v_p_bar_snu", r.covariance.v_p_bar},
        {"c", r.covariance.c},
        {"c_empirical_v2", r.covariance.c_empirical},
        {"lambda", r.covariance.lambda}}},
      {"snu_calibration",
       {{"snu_x_v2", r.covariance.snu.snu_x},
        {"snu_p_v2", r.covariance.snu.snu_p},
        {"provenance", r.covariance.snu.provenance}}},
  };
}

void from_json(const nlohmann::json& j, EntropyReport& r) {
  j.at("h_axi").get_to(r.h_axi);
  j.at("s_holevo").get_to(r.s_holevo);
  j.at("r_per_sample").get_to(r.r_per_sample);
  j.at("n_tot").get_to(r.n_tot);
  j.at("n_c").get_to(r.n_c);
  j.at("t_switch").get_to(r.t_switch);
  j.at("r_dis_avg").get_to(r.r_dis_avg);
  j.at("certifiable").get_to(r.certifiable);
  j.at("v_x_bar_v2").get_to(r.v_x_bar_v2);
  j.at("v_p_bar_v2").get_to(r.v_p_bar_v2);
  const auto& cov = j.at("covariance");
  cov.at("v_x_bar_snu").get_to(r.covariance.v_x_bar);
  cov.at("v_p_bar_snu").get_to(r.covariance.v_p_bar);
  cov.at("c").get_to(r.covariance.c);
  cov.at("c_empirical_v2").get_to(r.covariance.c_empirical);
  cov.at("lambda").get_to(r.covariance.lambda);
  const auto& snu = j.at("snu_calibration");
  snu.at("snu_x_v2").get_to(r.covariance.snu.snu_x);
  snu.at("snu_p_v2").get_to(r.covariance.snu.snu_p);
  snu.at("provenance").get_to(r.covariance.snu.provenance);
}

}  // namespace qrng::entropy
