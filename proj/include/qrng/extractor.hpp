/**
 * @file extractor.hpp
 * @brief Seeded Toeplitz hashing over GF(2).
 *
 * Bit conventions:
 *  - ADC codes enter the input stream MSB-first, as the low `bits` bits of the
 *    two's-complement code.
 *  - The seed is the matrix's first column T[0..j-1][0] followed by the
 *    remaining first row T[0][1..k-1] (k + j - 1 bits).
 *  - Output bits are packed MSB-first within bytes.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "qrng/signal_synth.hpp"

namespace qrng::extract {

// Fixed-length bit string; bit i lives in word i / 64 at position i % 64.
class BitVector {
 public:
  BitVector() = default;
  explicit BitVector(std::size_t nbits) : words_((nbits + 63) / 64, 0), size_(nbits) {}

  std::size_t size() const { return size_; }
  bool get(std::size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1U; }
  void set(std::size_t i, bool v) {
    const std::uint64_t m = std::uint64_t{1} << (i & 63);
    words_[i >> 6] = v ? (words_[i >> 6] | m) : (words_[i >> 6] & ~m);
  }
  std::span<const std::uint64_t> words() const { return words_; }
  std::span<std::uint64_t> words() { return words_; }

  BitVector& operator^=(const BitVector& other);
  friend BitVector operator^(BitVector a, const BitVector& b) { return a ^= b; }
  bool operator==(const BitVector& other) const = default;

  // MSB-first byte packing; a partial final byte is zero-padded.
  std::vector<std::uint8_t> to_bytes() const;
  static BitVector from_bytes(std::span<const std::uint8_t> bytes, std::size_t nbits);

 private:
  std::vector<std::uint64_t> words_;
  std::size_t size_ = 0;
};

struct ExtractorConfig {
  std::size_t k = 3072;
  std::size_t j = 1792;
  double epsilon_log2 = 100.0;
  BitVector seed;  // k + j - 1 bits

  // Throws InvalidParameter unless 1 <= j < k and seed.size() == k + j - 1.
  void validate() const;

  // Config whose seed is drawn from a generator seeded with `seed_value`.
  static ExtractorConfig with_generated_seed(std::size_t k, std::size_t j, double epsilon_log2,
                                             std::uint64_t seed_value);
};

// Largest output length allowed by the leftover hash lemma:
// floor(k * r / bits_per_sample - 2 * epsilon_log2). Throws ExtractionRefused
// when nonpositive and InvalidParameter on malformed arguments.
std::size_t size_output(std::size_t k, double r_dis_avg, int bits_per_sample, double epsilon_log2);

class ToeplitzHasher {
 public:
  explicit ToeplitzHasher(const ExtractorConfig& config);

  std::size_t input_bits() const { return k_; }
  std::size_t output_bits() const { return j_; }

  // Throws InvalidParameter when input.size() != k.
  BitVector hash(const BitVector& input) const;

  // Word-level form: `input` holds k bits, `output` receives j bits.
  void hash_words(std::span<const std::uint64_t> input, std::span<std::uint64_t> output) const;

 private:
  std::size_t k_;
  std::size_t j_;
  std::size_t out_words_;
  std::size_t stride_;
  // 64 copies of the reversed diagonal sequence, copy s shifted right by s bits,
  // so any column window starts on a word boundary of some copy.
  std::vector<std::uint64_t> shifted_;
};

BitVector extract_block(const BitVector& input, const ExtractorConfig& config);

struct ExtractionSummary {
  std::size_t blocks = 0;
  std::size_t output_bits = 0;
  std::size_t discarded_bits = 0;
};

// Streams ADC codes through the hasher. Chunk boundaries do not affect output.
class StreamExtractor {
 public:
  // Refuses (ExtractionRefused) when config.j exceeds the leftover-hash bound
  // for the certified r_dis_avg.
  StreamExtractor(const ExtractorConfig& config, double r_dis_avg, int bits_per_sample, unsigned workers = 1);

  void push(std::span<const std::int16_t> codes);

  // Hashes any complete buffered blocks, discards the tail, and returns totals.
  ExtractionSummary finish();

  const std::vector<std::uint8_t>& output() const { return out_bytes_; }
  std::size_t output_bits() const { return out_bits_; }
  std::size_t j_max() const { return j_max_; }

 private:
  std::size_t blocks_in_buffer() const { return pending_.size() / in_words_ - 1; }
  void append_input_bit(bool b);
  void flush_blocks();
  void append_output(std::span<const std::uint64_t> words);

  ToeplitzHasher hasher_;
  int bits_;
  unsigned workers_;
  std::size_t j_max_;
  std::size_t in_words_;
  std::vector<std::uint64_t> pending_;  // whole blocks, in_words_ words each
  std::size_t pending_bits_ = 0;        // bits in the block being filled
  std::size_t blocks_ = 0;
  std::vector<std::uint8_t> out_bytes_;
  std::size_t out_bits_ = 0;
  bool finished_ = false;
};

struct ExtractionResult {
  std::vector<std::uint8_t> bytes;
  ExtractionSummary summary;
};

ExtractionResult extract_stream(std::span<const synth::SampleBlock> samples, double r_dis_avg,
                                const ExtractorConfig& config, unsigned workers = 1);

}  // namespace qrng::extract
