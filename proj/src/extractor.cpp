#include "qrng/extractor.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <random>
#include <sstream>
#include <thread>

#include "qrng/errors.hpp"

namespace qrng::extract {

BitVector& BitVector::operator^=(const BitVector& other) {
  if (other.size_ != size_) throw InvalidParameter("BitVector size mismatch in xor");
  for (std::size_t i = 0; i < words_.size(); ++i) words_[i] ^= other.words_[i];
  return *this;
}

std::vector<std::uint8_t> BitVector::to_bytes() const {
  std::vector<std::uint8_t> out((size_ + 7) / 8, 0);
  for (std::size_t i = 0; i < size_; ++i) {
    if (get(i)) out[i >> 3] |= static_cast<std::uint8_t>(0x80U >> (i & 7));
  }
  return out;
}

BitVector BitVector::from_bytes(std::span<const std::uint8_t> bytes, std::size_t nbits) {
  if (bytes.size() * 8 < nbits) throw InvalidParameter("not enough bytes for requested bit count");
  BitVector v(nbits);
  for (std::size_t i = 0; i < nbits; ++i) v.set(i, (bytes[i >> 3] >> (7 - (i & 7))) & 1U);
  return v;
}

void ExtractorConfig::validate() const {
  if (!(j >= 1 && j < k)) {
    std::ostringstream os;
    os << "extractor requires 1 <= j < k, got k=" << k << " j=" << j;
    throw InvalidParameter(os.str());
  }
  if (seed.size() != k + j - 1) {
    std::ostringstream os;
    os << "Toeplitz seed must have k + j - 1 = " << k + j - 1 << " bits, got " << seed.size();
    throw InvalidParameter(os.str());
  }
  if (!(epsilon_log2 >= 0.0)) throw InvalidParameter("epsilon_log2 must be >= 0");
}

ExtractorConfig ExtractorConfig::with_generated_seed(std::size_t k, std::size_t j, double epsilon_log2,
                                                     std::uint64_t seed_value) {
  ExtractorConfig cfg;
  cfg.k = k;
  cfg.j = j;
  cfg.epsilon_log2 = epsilon_log2;
  if (k + j == 0) throw InvalidParameter("extractor dimensions must be positive");
  cfg.seed = BitVector(k + j - 1);
  std::mt19937_64 rng(seed_value);
  auto words = cfg.seed.words();
  for (auto& w : words) w = rng();
  const std::size_t tail = cfg.seed.size() & 63;
  if (tail != 0 && !words.empty()) words.back() &= (std::uint64_t{1} << tail) - 1;
  return cfg;
}

std::size_t size_output(std::size_t k, double r_dis_avg, int bits_per_sample, double epsilon_log2) {
  if (bits_per_sample <= 0) throw InvalidParameter("bits_per_sample must be positive");
  if (k == 0 || k % static_cast<std::size_t>(bits_per_sample) != 0) {
    throw InvalidParameter("k must be a positive multiple of bits_per_sample");
  }
  if (!(r_dis_avg > 0.0 && r_dis_avg <= bits_per_sample)) {
    std::ostringstream os;
    os << "certified rate " << r_dis_avg << " outside (0, " << bits_per_sample << "]";
    throw ExtractionRefused(os.str());
  }
  if (!(epsilon_log2 >= 0.0)) throw InvalidParameter("epsilon_log2 must be >= 0");
  const double bound = std::floor(static_cast<double>(k) * r_dis_avg / bits_per_sample - 2.0 * epsilon_log2);
  if (!(bound >= 1.0)) {
    std::ostringstream os;
    os << "leftover hash bound leaves no output: floor(k r / bits - 2 log2(1/eps)) = " << bound;
    throw ExtractionRefused(os.str());
  }
  return static_cast<std::size_t>(bound);
}

ToeplitzHasher::ToeplitzHasher(const ExtractorConfig& config)
    : k_(config.k), j_(config.j), out_words_((config.j + 63) / 64) {
  config.validate();
  const std::size_t len = k_ + j_ - 1;
  stride_ = (len + 63) / 64 + 1;
  // Diagonal sequence D[q] = T[i][m] for q = j-1+m-i, reversed: R[u] = D[len-1-u].
  // Column m of T is then R[k-1-m .. k-1-m+j-1] in row order.
  auto diag = [&](std::size_t q) { return q < j_ ? config.seed.get(j_ - 1 - q) : config.seed.get(q); };
  std::vector<std::uint64_t> rev(stride_ + 1, 0);
  for (std::size_t u = 0; u < len; ++u) {
    if (diag(len - 1 - u)) rev[u >> 6] |= std::uint64_t{1} << (u & 63);
  }
  shifted_.assign(64 * stride_, 0);
  for (std::size_t s = 0; s < 64; ++s) {
    std::uint64_t* dst = &shifted_[s * stride_];
    for (std::size_t w = 0; w < stride_; ++w) {
      const std::uint64_t lo = rev[w] >> s;
      const std::uint64_t hi = (s == 0) ? 0 : (rev[w + 1] << (64 - s));
      dst[w] = lo | hi;
    }
  }
}

void ToeplitzHasher::hash_words(std::span<const std::uint64_t> input, std::span<std::uint64_t> output) const {
  std::fill(output.begin(), output.begin() + static_cast<std::ptrdiff_t>(out_words_), 0);
  std::uint64_t* acc = output.data();
  const std::size_t in_words = (k_ + 63) / 64;
  for (std::size_t w = 0; w < in_words; ++w) {
    std::uint64_t bits = input[w];
    if (w == in_words - 1 && (k_ & 63) != 0) bits &= (std::uint64_t{1} << (k_ & 63)) - 1;
    while (bits != 0) {
      const std::size_t m = w * 64 + static_cast<std::size_t>(std::countr_zero(bits));
      bits &= bits - 1;
      const std::size_t offset = k_ - 1 - m;
      const std::uint64_t* col = &shifted_[(offset & 63) * stride_ + (offset >> 6)];
      for (std::size_t t = 0; t < out_words_; ++t) acc[t] ^= col[t];
    }
  }
  if ((j_ & 63) != 0) acc[out_words_ - 1] &= (std::uint64_t{1} << (j_ & 63)) - 1;
}

BitVector ToeplitzHasher::hash(const BitVector& input) const {
  if (input.size() != k_) {
    std::ostringstream os;
    os << "extractor input must be exactly k=" << k_ << " bits, got " << input.size();
    throw InvalidParameter(os.str());
  }
  BitVector out(j_);
  hash_words(input.words(), out.words());
  return out;
}

BitVector extract_block(const BitVector& input, const ExtractorConfig& config) {
  return ToeplitzHasher(config).hash(input);
}

namespace {

std::size_t checked_j_max(const ExtractorConfig& config, double r, int bits) {
  config.validate();
  const std::size_t j_max = size_output(config.k, r, bits, config.epsilon_log2);
  if (config.j > j_max) {
    std::ostringstream os;
    os << "refusing to extract: j=" << config.j << " exceeds leftover-hash bound " << j_max
       << " for certified rate " << r;
    throw ExtractionRefused(os.str());
  }
  return j_max;
}

constexpr std::size_t kFlushBlocks = 256;

}  // namespace

StreamExtractor::StreamExtractor(const ExtractorConfig& config, double r_dis_avg, int bits_per_sample,
                                 unsigned workers)
    : hasher_(config),
      bits_(bits_per_sample),
      workers_(workers == 0 ? std::max(1u, std::thread::hardware_concurrency()) : workers),
      j_max_(checked_j_max(config, r_dis_avg, bits_per_sample)),
      in_words_((config.k + 63) / 64) {
  pending_.assign(in_words_, 0);
}

void StreamExtractor::append_input_bit(bool b) {
  const std::size_t base = blocks_in_buffer() * in_words_;
  if (b) pending_[base + (pending_bits_ >> 6)] |= std::uint64_t{1} << (pending_bits_ & 63);
  if (++pending_bits_ == hasher_.input_bits()) {
    pending_bits_ = 0;
    pending_.resize(pending_.size() + in_words_, 0);
    if (blocks_in_buffer() >= kFlushBlocks) flush_blocks();
  }
}

void StreamExtractor::push(std::span<const std::int16_t> codes) {
  if (finished_) throw InvalidParameter("push after finish");
  for (auto c : codes) {
    const auto u = static_cast<std::uint16_t>(c);
    for (int b = bits_ - 1; b >= 0; --b) append_input_bit((u >> b) & 1U);
  }
}

void StreamExtractor::flush_blocks() {
  const std::size_t count = blocks_in_buffer();
  if (count == 0) return;
  const std::size_t out_words = (hasher_.output_bits() + 63) / 64;
  std::vector<std::uint64_t> results(count * out_words, 0);
  auto work = [&](std::size_t b) {
    hasher_.hash_words(std::span(pending_).subspan(b * in_words_, in_words_),
                       std::span(results).subspan(b * out_words, out_words));
  };
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(workers_, count));
  if (workers <= 1) {
    for (std::size_t b = 0; b < count; ++b) work(b);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t b = next.fetch_add(1); b < count; b = next.fetch_add(1)) work(b);
      });
    }
  }
  for (std::size_t b = 0; b < count; ++b) append_output(std::span(results).subspan(b * out_words, out_words));
  blocks_ += count;
  // Keep the partially filled block.
  std::vector<std::uint64_t> partial(pending_.end() - static_cast<std::ptrdiff_t>(in_words_), pending_.end());
  pending_ = std::move(partial);
}

void StreamExtractor::append_output(std::span<const std::uint64_t> words) {
  const std::size_t j = hasher_.output_bits();
  out_bytes_.resize((out_bits_ + j + 7) / 8, 0);
  for (std::size_t i = 0; i < j; ++i, ++out_bits_) {
    if ((words[i >> 6] >> (i & 63)) & 1U) out_bytes_[out_bits_ >> 3] |= static_cast<std::uint8_t>(0x80U >> (out_bits_ & 7));
  }
}

ExtractionSummary StreamExtractor::finish() {
  if (!finished_) {
    flush_blocks();
    finished_ = true;
  }
  ExtractionSummary s;
  s.blocks = blocks_;
  s.output_bits = out_bits_;
  s.discarded_bits = pending_bits_;
  return s;
}

ExtractionResult extract_stream(std::span<const synth::SampleBlock> samples, double r_dis_avg,
                                const ExtractorConfig& config, unsigned workers) {
  if (samples.empty()) {
    // Nothing to hash; still enforce the leftover-hash bound.
    checked_j_max(config, r_dis_avg, 12);
    return {};
  }
  const int bits = samples.front().bits;
  StreamExtractor ex(config, r_dis_avg, bits, workers);
  for (const auto& block : samples) {
    if (block.bits != bits) throw InvalidParameter("sample blocks must share one ADC precision");
    ex.push(block.codes);
  }
  ExtractionResult res;
  res.summary = ex.finish();
  res.bytes = ex.output();
  return res;
}

}  // namespace qrng::extract
