#pragma once

// Table-free token input interface.
//
//   t  ->  c(t)        K-bit binary expansion, bit j = floor(t / 2^j) mod 2
//      ->  A c(t) ^ b  optional invertible affine recoding over GF(2)
//      ->  x(t)        cast to {0.0, 1.0} and tiled d / K times
//
// No part of this map is trainable.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tablefree/dense.hpp"
#include "tablefree/error.hpp"
#include "tablefree/gf2.hpp"

namespace tablefree::codes {

using TokenId = std::int64_t;

struct Recoder {
  gf2::BitMatrix matrix;
  gf2::BitVector shift;
};

// Draws A uniformly from GL(k, 2) and then b uniformly from {0,1}^k, both
// from one generator seeded with `seed`.
Recoder sample_recoder(int k, std::uint64_t seed);

// Smallest K with 2^K >= V; 1 for V = 1.
int minimal_width(std::int64_t vocab_size);

class CodeSpec {
 public:
  // Throws InvalidCodeSpec unless vocab_size >= 1, lift_width is a positive
  // multiple of minimal_width(vocab_size), and any recoder is invertible and
  // of matching width.
  CodeSpec(std::int64_t vocab_size, int lift_width, std::optional<Recoder> recoder = std::nullopt);

  // Skips the invertibility check on the recoder. Only for exercising the
  // collision detector with a deliberately singular matrix.
  static CodeSpec unchecked(std::int64_t vocab_size, int lift_width, Recoder recoder);

  std::int64_t vocab_size() const { return vocab_size_; }
  int code_width() const { return code_width_; }
  int lift_width() const { return lift_width_; }
  int tiles() const { return lift_width_ / code_width_; }
  bool full_vocabulary() const { return vocab_size_ == (std::int64_t{1} << code_width_); }
  const std::optional<Recoder>& recoder() const { return recoder_; }

 private:
  CodeSpec() = default;

  std::int64_t vocab_size_ = 0;
  int code_width_ = 0;
  int lift_width_ = 0;
  std::optional<Recoder> recoder_;
};

// Throws TokenOutOfRange unless 0 <= t < 2^k.
gf2::BitVector canonical_code(TokenId t, int k);

// Identity without a recoder, else A code ^ b. Throws DimensionMismatch.
gf2::BitVector recode(const gf2::BitVector& code, const CodeSpec& spec);

// out[i] = code[i mod K]. Throws NonDivisibleWidth unless d is a positive
// multiple of the code width.
template <typename Scalar = float>
Vector<Scalar> lift(const gf2::BitVector& code, int d) {
  const int k = code.size();
  if (d <= 0 || d % k != 0) {
    throw Error(Errc::NonDivisibleWidth,
                "lift width " + std::to_string(d) + " is not a multiple of " + std::to_string(k));
  }
  Vector<Scalar> out(d);
  for (int i = 0; i < d; ++i) out[i] = code[i % k] ? Scalar(1) : Scalar(0);
  return out;
}

// The binary code fed to the lift, after any recoding. Throws TokenOutOfRange.
gf2::BitVector token_code(TokenId t, const CodeSpec& spec);

template <typename Scalar = float>
Vector<Scalar> encode_token(TokenId t, const CodeSpec& spec) {
  return lift<Scalar>(token_code(t, spec), spec.lift_width());
}

// Row r is encode_token(ids[r]). Writes into `out`, which must be
// [ids.size(), d].
template <typename Scalar, typename Id>
void encode_tokens(std::span<const Id> ids, const CodeSpec& spec,
                   Eigen::Ref<Matrix<Scalar>> out) {
  const int k = spec.code_width();
  const int d = spec.lift_width();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto code = token_code(static_cast<TokenId>(ids[r]), spec);
    for (int i = 0; i < d; ++i) {
      out(static_cast<Index>(r), i) = code[i % k] ? Scalar(1) : Scalar(0);
    }
  }
}

// Precomputed non-trainable lookup whose row t is encode_token(t).
struct FrozenTable {
  static constexpr bool trainable = false;
  Matrix<float> rows;

  std::int64_t vocab_size() const { return rows.rows(); }
  int width() const { return static_cast<int>(rows.cols()); }
};

FrozenTable export_frozen_table(const CodeSpec& spec);

// "V=<int> d=<int> dtype=f32\n" followed by V*d little-endian float32, row-major.
void write_frozen_table(std::ostream& out, const FrozenTable& table);
FrozenTable read_frozen_table(std::istream& in);
void save_frozen_table(const std::string& path, const FrozenTable& table);
FrozenTable load_frozen_table(const std::string& path);

struct TableMismatch {
  TokenId token;
  int column;
};

// First entry, in row-major order, where the table differs bit-wise from the
// on-the-fly encoding; nullopt when identical.
std::optional<TableMismatch> compare_with_encoding(const FrozenTable& table, const CodeSpec& spec);

struct InjectivityReport {
  bool ok = true;
  std::optional<std::pair<TokenId, TokenId>> colliding_pair;
};

// Exhaustive: encodes every token and looks for two identical vectors.
InjectivityReport verify_injectivity(const CodeSpec& spec);

struct PairPatternCounts {
  int i = 0;
  int j = 0;
  // Indexed by 2 * bit_i + bit_j: patterns 00, 01, 10, 11.
  std::array<std::int64_t, 4> counts{};
};

struct BalanceReport {
  std::vector<std::int64_t> per_bit_ones;
  std::vector<PairPatternCounts> pairs;  // every i < j

  // Every bit count is 2^(K-1) and every pattern count is 2^(K-2).
  bool balanced() const;
};

// Throws NotFullVocabulary unless V = 2^K.
BalanceReport verify_balance(const CodeSpec& spec);

// Exact rank over the rationals of {encode_token(t) : t < V}.
int effective_rank(const CodeSpec& spec);

// Structured-text CodeSpec: vocab_size, code_width, lift_width and either
// recoder.seed, recoder.matrix_file + recoder.shift, or inline
// recoder.matrix (rows joined by '/') + recoder.shift. Relative matrix
// paths resolve against `base_dir`.
CodeSpec read_code_spec(std::istream& in, const std::string& base_dir = ".");
CodeSpec load_code_spec(const std::string& path);
// Writes the recoder inline so the file is self-contained.
void write_code_spec(std::ostream& out, const CodeSpec& spec);

}  // namespace tablefree::codes
