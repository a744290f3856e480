#pragma once

// Dense linear algebra over GF(2) for square matrices of side k <= 64.
//
// Bit j of a vector (or of a matrix row) is the coefficient of 2^j, so a
// vector and the integer it encodes share the same word. Each matrix row is a
// single 64-bit word; addition is XOR and multiplication is AND.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace tablefree {
class Rng;
}

namespace tablefree::gf2 {

inline constexpr int kMaxWidth = 64;

constexpr std::uint64_t low_mask(int k) {
  return k >= 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << k) - 1;
}

class BitVector {
 public:
  BitVector() = default;
  // Throws DimensionMismatch if `bits` has a set bit at index >= k.
  explicit BitVector(int k, std::uint64_t bits = 0);

  // Characters in {0,1}; character j is bit j.
  static BitVector parse(std::string_view bits);
  static BitVector ones(int k) { return BitVector(k, low_mask(k)); }

  int size() const { return k_; }
  std::uint64_t word() const { return bits_; }
  bool operator[](int j) const { return (bits_ >> j) & 1U; }
  void set(int j, bool value);
  int popcount() const;
  std::string to_string() const;

  friend bool operator==(const BitVector&, const BitVector&) = default;

 private:
  int k_ = 0;
  std::uint64_t bits_ = 0;
};

// Componentwise XOR. Throws DimensionMismatch on width mismatch.
BitVector operator^(const BitVector& a, const BitVector& b);

class BitMatrix {
 public:
  BitMatrix() = default;
  // Zero matrix of side k.
  explicit BitMatrix(int k);
  // Row i is rows[i]; bit j of the word is entry (i, j).
  BitMatrix(int k, std::vector<std::uint64_t> rows);

  static BitMatrix identity(int k);
  // Each string is one row, character j is column j.
  static BitMatrix parse_rows(const std::vector<std::string>& rows);

  int size() const { return k_; }
  bool operator()(int i, int j) const { return (rows_[i] >> j) & 1U; }
  void set(int i, int j, bool value);
  std::uint64_t row(int i) const { return rows_[i]; }
  const std::vector<std::uint64_t>& rows() const { return rows_; }
  void swap_rows(int a, int b);
  BitMatrix transpose() const;

  friend bool operator==(const BitMatrix&, const BitMatrix&) = default;

 private:
  int k_ = 0;
  std::vector<std::uint64_t> rows_;
};

int rank(const BitMatrix& m);
bool is_invertible(const BitMatrix& m);
// Gauss-Jordan on [m | I]. Throws SingularMatrix if rank(m) < k.
BitMatrix inverse(const BitMatrix& m);

BitVector matvec(const BitMatrix& m, const BitVector& v);
BitMatrix matmul(const BitMatrix& a, const BitMatrix& b);

// a * v XOR b.
BitVector affine_apply(const BitMatrix& a, const BitVector& b, const BitVector& v);

// Uniform over GL(k, 2) by rejection sampling of uniform bit matrices.
// Gives up with SamplingFailure after `max_attempts` singular draws.
BitMatrix sample_invertible(int k, Rng& rng, int max_attempts = 1000);
BitMatrix sample_invertible(int k, std::uint64_t seed);

BitVector random_vector(int k, Rng& rng);

// |GL(k, 2)| = prod_{i<k} (2^k - 2^i); exact for k <= 7 (fits in 64 bits).
std::uint64_t general_linear_order(int k);

// Fixture format: "k=<int>" then k lines of k characters, character j of
// line i being entry (i, j).
void write_text(std::ostream& out, const BitMatrix& m);
BitMatrix read_text(std::istream& in);
BitMatrix load_text(const std::string& path);
void save_text(const std::string& path, const BitMatrix& m);

}  // namespace tablefree::gf2
