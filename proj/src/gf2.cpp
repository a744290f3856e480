#include "tablefree/gf2.hpp"

#include <bit>
#include <fstream>
#include <istream>
#include <ostream>
#include <utility>

#include "tablefree/error.hpp"
#include "tablefree/random.hpp"

namespace tablefree::gf2 {

namespace {

void check_width(int k) {
  if (k < 1 || k > kMaxWidth) {
    throw Error(Errc::DimensionMismatch, "width " + std::to_string(k) + " outside [1, 64]");
  }
}

}  // namespace

BitVector::BitVector(int k, std::uint64_t bits) : k_(k), bits_(bits) {
  check_width(k);
  if ((bits & ~low_mask(k)) != 0) {
    throw Error(Errc::DimensionMismatch, "bit pattern wider than " + std::to_string(k));
  }
}

BitVector BitVector::parse(std::string_view bits) {
  BitVector v(static_cast<int>(bits.size()));
  for (std::size_t j = 0; j < bits.size(); ++j) {
    if (bits[j] != '0' && bits[j] != '1') {
      throw Error(Errc::ParseError, "bit string contains '" + std::string(1, bits[j]) + "'");
    }
    v.set(static_cast<int>(j), bits[j] == '1');
  }
  return v;
}

void BitVector::set(int j, bool value) {
  const std::uint64_t bit = std::uint64_t{1} << j;
  bits_ = value ? (bits_ | bit) : (bits_ & ~bit);
}

int BitVector::popcount() const { return std::popcount(bits_); }

std::string BitVector::to_string() const {
  std::string s(static_cast<std::size_t>(k_), '0');
  for (int j = 0; j < k_; ++j) {
    if ((*this)[j]) s[static_cast<std::size_t>(j)] = '1';
  }
  return s;
}

BitVector operator^(const BitVector& a, const BitVector& b) {
  if (a.size() != b.size()) {
    throw Error(Errc::DimensionMismatch, "xor of widths " + std::to_string(a.size()) +
                                             " and " + std::to_string(b.size()));
  }
  return BitVector(a.size(), a.word() ^ b.word());
}

BitMatrix::BitMatrix(int k) : k_(k), rows_(static_cast<std::size_t>(k), 0) { check_width(k); }

BitMatrix::BitMatrix(int k, std::vector<std::uint64_t> rows) : k_(k), rows_(std::move(rows)) {
  check_width(k);
  if (rows_.size() != static_cast<std::size_t>(k)) {
    throw Error(Errc::DimensionMismatch, "expected " + std::to_string(k) + " rows");
  }
  for (auto r : rows_) {
    if ((r & ~low_mask(k)) != 0) throw Error(Errc::DimensionMismatch, "row wider than k");
  }
}

BitMatrix BitMatrix::identity(int k) {
  BitMatrix m(k);
  for (int i = 0; i < k; ++i) m.rows_[i] = std::uint64_t{1} << i;
  return m;
}

BitMatrix BitMatrix::parse_rows(const std::vector<std::string>& rows) {
  const int k = static_cast<int>(rows.size());
  BitMatrix m(k);
  for (int i = 0; i < k; ++i) {
    const auto v = BitVector::parse(rows[i]);
    if (v.size() != k) {
      throw Error(Errc::DimensionMismatch, "row " + std::to_string(i) + " has " +
                                               std::to_string(v.size()) + " columns, expected " +
                                               std::to_string(k));
    }
    m.rows_[i] = v.word();
  }
  return m;
}

void BitMatrix::set(int i, int j, bool value) {
  const std::uint64_t bit = std::uint64_t{1} << j;
  rows_[i] = value ? (rows_[i] | bit) : (rows_[i] & ~bit);
}

void BitMatrix::swap_rows(int a, int b) { std::swap(rows_[a], rows_[b]); }

BitMatrix BitMatrix::transpose() const {
  BitMatrix t(k_);
  for (int i = 0; i < k_; ++i) {
    for (int j = 0; j < k_; ++j) {
      if ((*this)(i, j)) t.rows_[j] |= std::uint64_t{1} << i;
    }
  }
  return t;
}

int rank(const BitMatrix& m) {
  const int k = m.size();
  std::vector<std::uint64_t> rows = m.rows();
  int r = 0;
  for (int col = 0; col < k && r < k; ++col) {
    const std::uint64_t bit = std::uint64_t{1} << col;
    int pivot = r;
    while (pivot < k && (rows[pivot] & bit) == 0) ++pivot;
    if (pivot == k) continue;
    std::swap(rows[r], rows[pivot]);
    for (int i = r + 1; i < k; ++i) {
      if (rows[i] & bit) rows[i] ^= rows[r];
    }
    ++r;
  }
  return r;
}

bool is_invertible(const BitMatrix& m) { return rank(m) == m.size(); }

BitMatrix inverse(const BitMatrix& m) {
  const int k = m.size();
  std::vector<std::uint64_t> left = m.rows();
  std::vector<std::uint64_t> right = BitMatrix::identity(k).rows();
  for (int col = 0; col < k; ++col) {
    const std::uint64_t bit = std::uint64_t{1} << col;
    int pivot = col;
    while (pivot < k && (left[pivot] & bit) == 0) ++pivot;
    if (pivot == k) {
      throw Error(Errc::SingularMatrix, "no pivot in column " + std::to_string(col));
    }
    std::swap(left[col], left[pivot]);
    std::swap(right[col], right[pivot]);
    for (int i = 0; i < k; ++i) {
      if (i != col && (left[i] & bit)) {
        left[i] ^= left[col];
        right[i] ^= right[col];
      }
    }
  }
  return BitMatrix(k, std::move(right));
}

BitVector matvec(const BitMatrix& m, const BitVector& v) {
  if (m.size() != v.size()) {
    throw Error(Errc::DimensionMismatch, "matrix side " + std::to_string(m.size()) +
                                             " vs vector width " + std::to_string(v.size()));
  }
  std::uint64_t out = 0;
  for (int i = 0; i < m.size(); ++i) {
    out |= static_cast<std::uint64_t>(std::popcount(m.row(i) & v.word()) & 1) << i;
  }
  return BitVector(m.size(), out);
}

BitMatrix matmul(const BitMatrix& a, const BitMatrix& b) {
  if (a.size() != b.size()) throw Error(Errc::DimensionMismatch, "matmul of unequal sides");
  const int k = a.size();
  std::vector<std::uint64_t> rows(static_cast<std::size_t>(k), 0);
  // Row i of a*b is the XOR of the rows of b selected by row i of a.
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      if (a(i, j)) rows[i] ^= b.row(j);
    }
  }
  return BitMatrix(k, std::move(rows));
}

BitVector affine_apply(const BitMatrix& a, const BitVector& b, const BitVector& v) {
  return matvec(a, v) ^ b;
}

BitVector random_vector(int k, Rng& rng) { return BitVector(k, rng.next() & low_mask(k)); }

BitMatrix sample_invertible(int k, Rng& rng, int max_attempts) {
  check_width(k);
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    std::vector<std::uint64_t> rows(static_cast<std::size_t>(k));
    for (auto& r : rows) r = rng.next() & low_mask(k);
    BitMatrix m(k, std::move(rows));
    if (is_invertible(m)) return m;
  }
  throw Error(Errc::SamplingFailure,
              "no invertible matrix after " + std::to_string(max_attempts) + " draws");
}

BitMatrix sample_invertible(int k, std::uint64_t seed) {
  Rng rng(seed);
  return sample_invertible(k, rng);
}

std::uint64_t general_linear_order(int k) {
  if (k < 1 || k > 7) throw Error(Errc::DimensionMismatch, "order only tabulated for k <= 7");
  std::uint64_t order = 1;
  const std::uint64_t full = std::uint64_t{1} << k;
  for (int i = 0; i < k; ++i) order *= full - (std::uint64_t{1} << i);
  return order;
}

void write_text(std::ostream& out, const BitMatrix& m) {
  out << "k=" << m.size() << '\n';
  for (int i = 0; i < m.size(); ++i) {
    out << BitVector(m.size(), m.row(i)).to_string() << '\n';
  }
}

BitMatrix read_text(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("k=", 0) != 0) {
    throw Error(Errc::ParseError, "bit matrix must start with 'k=<int>'");
  }
  int k = 0;
  try {
    k = std::stoi(line.substr(2));
  } catch (const std::exception&) {
    throw Error(Errc::ParseError, "bad header '" + line + "'");
  }
  check_width(k);
  std::vector<std::string> rows;
  while (static_cast<int>(rows.size()) < k && std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    rows.push_back(line);
  }
  if (static_cast<int>(rows.size()) != k) {
    throw Error(Errc::ParseError, "expected " + std::to_string(k) + " rows");
  }
  return BitMatrix::parse_rows(rows);
}

BitMatrix load_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path);
  return read_text(in);
}

void save_text(const std::string& path, const BitMatrix& m) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::IoFailure, "cannot write " + path);
  write_text(out, m);
}

}  // namespace tablefree::gf2
