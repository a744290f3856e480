#include "tablefree/token_codes.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string_view>
#include <unordered_map>

#include <boost/multiprecision/cpp_int.hpp>

#include "tablefree/config.hpp"
#include "tablefree/random.hpp"

namespace tablefree::codes {

namespace {

static_assert(std::endian::native == std::endian::little,
              "frozen table and checkpoint files assume a little-endian host");

void check_token(TokenId t, std::int64_t limit) {
  if (t < 0 || t >= limit) {
    throw Error(Errc::TokenOutOfRange,
                "token " + std::to_string(t) + " outside [0, " + std::to_string(limit) + ")");
  }
}

}  // namespace

Recoder sample_recoder(int k, std::uint64_t seed) {
  Rng rng(seed);
  auto matrix = gf2::sample_invertible(k, rng);
  auto shift = gf2::random_vector(k, rng);
  return {std::move(matrix), shift};
}

int minimal_width(std::int64_t vocab_size) {
  if (vocab_size < 1) throw Error(Errc::InvalidCodeSpec, "vocabulary size must be positive");
  if (vocab_size == 1) return 1;
  return std::bit_width(static_cast<std::uint64_t>(vocab_size - 1));
}

CodeSpec::CodeSpec(std::int64_t vocab_size, int lift_width, std::optional<Recoder> recoder)
    : vocab_size_(vocab_size),
      code_width_(minimal_width(vocab_size)),
      lift_width_(lift_width),
      recoder_(std::move(recoder)) {
  if (code_width_ > gf2::kMaxWidth) throw Error(Errc::InvalidCodeSpec, "vocabulary too large");
  if (lift_width_ <= 0 || lift_width_ % code_width_ != 0) {
    throw Error(Errc::InvalidCodeSpec, "lift width " + std::to_string(lift_width_) +
                                           " is not a positive multiple of K=" +
                                           std::to_string(code_width_));
  }
  if (recoder_) {
    if (recoder_->matrix.size() != code_width_ || recoder_->shift.size() != code_width_) {
      throw Error(Errc::InvalidCodeSpec, "recoder width does not match K=" +
                                             std::to_string(code_width_));
    }
    if (!gf2::is_invertible(recoder_->matrix)) {
      throw Error(Errc::InvalidCodeSpec, "recoder matrix is singular over GF(2)");
    }
  }
}

CodeSpec CodeSpec::unchecked(std::int64_t vocab_size, int lift_width, Recoder recoder) {
  CodeSpec spec(vocab_size, lift_width);
  spec.recoder_ = std::move(recoder);
  return spec;
}

gf2::BitVector canonical_code(TokenId t, int k) {
  if (k < 1 || k > gf2::kMaxWidth) throw Error(Errc::DimensionMismatch, "bad code width");
  if (t < 0 || (k < 63 && t >= (TokenId{1} << k))) {
    throw Error(Errc::TokenOutOfRange, "token " + std::to_string(t) + " does not fit in " +
                                           std::to_string(k) + " bits");
  }
  return gf2::BitVector(k, static_cast<std::uint64_t>(t));
}

gf2::BitVector recode(const gf2::BitVector& code, const CodeSpec& spec) {
  if (code.size() != spec.code_width()) {
    throw Error(Errc::DimensionMismatch, "code width " + std::to_string(code.size()) +
                                             " vs K=" + std::to_string(spec.code_width()));
  }
  if (!spec.recoder()) return code;
  return gf2::affine_apply(spec.recoder()->matrix, spec.recoder()->shift, code);
}

gf2::BitVector token_code(TokenId t, const CodeSpec& spec) {
  check_token(t, spec.vocab_size());
  return recode(canonical_code(t, spec.code_width()), spec);
}

FrozenTable export_frozen_table(const CodeSpec& spec) {
  FrozenTable table;
  table.rows.resize(spec.vocab_size(), spec.lift_width());
  for (TokenId t = 0; t < spec.vocab_size(); ++t) {
    table.rows.row(t) = encode_token<float>(t, spec).transpose();
  }
  return table;
}

void write_frozen_table(std::ostream& out, const FrozenTable& table) {
  out << "V=" << table.vocab_size() << " d=" << table.width() << " dtype=f32\n";
  out.write(reinterpret_cast<const char*>(table.rows.data()),
            static_cast<std::streamsize>(table.rows.size() * sizeof(float)));
  if (!out) throw Error(Errc::IoFailure, "failed writing frozen table");
}

FrozenTable read_frozen_table(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw Error(Errc::ParseError, "missing frozen table header");
  const auto fields = parse_record(header);
  if (!fields.count("V") || !fields.count("d") || fields.count("dtype") == 0 ||
      fields.at("dtype") != "f32") {
    throw Error(Errc::ParseError, "bad frozen table header: " + header);
  }
  const auto rows = std::stoll(fields.at("V"));
  const auto cols = std::stoll(fields.at("d"));
  if (rows <= 0 || cols <= 0) throw Error(Errc::ParseError, "bad frozen table extents");
  FrozenTable table;
  table.rows.resize(rows, cols);
  in.read(reinterpret_cast<char*>(table.rows.data()),
          static_cast<std::streamsize>(table.rows.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(table.rows.size() * sizeof(float))) {
    throw Error(Errc::ParseError, "frozen table payload truncated");
  }
  return table;
}

void save_frozen_table(const std::string& path, const FrozenTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::IoFailure, "cannot write " + path);
  write_frozen_table(out, table);
}

FrozenTable load_frozen_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path);
  return read_frozen_table(in);
}

std::optional<TableMismatch> compare_with_encoding(const FrozenTable& table,
                                                   const CodeSpec& spec) {
  if (table.vocab_size() != spec.vocab_size() || table.width() != spec.lift_width()) {
    return TableMismatch{std::min(table.vocab_size(), spec.vocab_size()), 0};
  }
  for (TokenId t = 0; t < spec.vocab_size(); ++t) {
    const auto expected = encode_token<float>(t, spec);
    for (int c = 0; c < spec.lift_width(); ++c) {
      if (std::bit_cast<std::uint32_t>(table.rows(t, c)) !=
          std::bit_cast<std::uint32_t>(expected[c])) {
        return TableMismatch{t, c};
      }
    }
  }
  return std::nullopt;
}

InjectivityReport verify_injectivity(const CodeSpec& spec) {
  InjectivityReport report;
  std::unordered_map<std::string, TokenId> seen;
  seen.reserve(static_cast<std::size_t>(spec.vocab_size()));
  for (TokenId t = 0; t < spec.vocab_size(); ++t) {
    const auto x = encode_token<float>(t, spec);
    std::string key(reinterpret_cast<const char*>(x.data()), x.size() * sizeof(float));
    const auto [it, inserted] = seen.emplace(std::move(key), t);
    if (!inserted) {
      report.ok = false;
      report.colliding_pair = std::make_pair(it->second, t);
      return report;
    }
  }
  return report;
}

bool BalanceReport::balanced() const {
  const auto k = static_cast<int>(per_bit_ones.size());
  if (k == 0) return false;
  const std::int64_t half = std::int64_t{1} << (k - 1);
  for (auto c : per_bit_ones) {
    if (c != half) return false;
  }
  if (k < 2) return true;
  const std::int64_t quarter = std::int64_t{1} << (k - 2);
  for (const auto& p : pairs) {
    for (auto c : p.counts) {
      if (c != quarter) return false;
    }
  }
  return true;
}

BalanceReport verify_balance(const CodeSpec& spec) {
  if (!spec.full_vocabulary()) {
    throw Error(Errc::NotFullVocabulary, "balance holds only for V = 2^K; V=" +
                                             std::to_string(spec.vocab_size()));
  }
  const int k = spec.code_width();
  BalanceReport report;
  report.per_bit_ones.assign(static_cast<std::size_t>(k), 0);
  for (int i = 0; i < k; ++i) {
    for (int j = i + 1; j < k; ++j) report.pairs.push_back({i, j, {}});
  }
  for (TokenId t = 0; t < spec.vocab_size(); ++t) {
    const auto code = token_code(t, spec);
    for (int i = 0; i < k; ++i) report.per_bit_ones[i] += code[i];
    for (auto& p : report.pairs) ++p.counts[2 * code[p.i] + code[p.j]];
  }
  return report;
}

int effective_rank(const CodeSpec& spec) {
  using Rational = boost::multiprecision::cpp_rational;
  const int d = spec.lift_width();
  // Reduced row-echelon basis: basis[r] has a 1 at pivots[r] and 0 at every
  // other pivot column.
  std::vector<std::vector<Rational>> basis;
  std::vector<int> pivots;
  std::vector<Rational> x(static_cast<std::size_t>(d));
  for (TokenId t = 0; t < spec.vocab_size() && static_cast<int>(basis.size()) < d; ++t) {
    const auto input = encode_token<double>(t, spec);
    for (int c = 0; c < d; ++c) x[c] = static_cast<int>(input[c]);
    for (std::size_t r = 0; r < basis.size(); ++r) {
      const Rational factor = x[pivots[r]];
      if (factor == 0) continue;
      for (int c = 0; c < d; ++c) x[c] -= factor * basis[r][c];
    }
    int pivot = 0;
    while (pivot < d && x[pivot] == 0) ++pivot;
    if (pivot == d) continue;
    const Rational lead = x[pivot];
    for (auto& v : x) v /= lead;
    for (auto& row : basis) {
      const Rational factor = row[pivot];
      if (factor == 0) continue;
      for (int c = 0; c < d; ++c) row[c] -= factor * x[c];
    }
    basis.push_back(x);
    pivots.push_back(pivot);
  }
  return static_cast<int>(basis.size());
}

namespace {

gf2::BitMatrix parse_inline_matrix(const std::string& text) {
  std::vector<std::string> rows;
  std::stringstream ss(text);
  std::string row;
  while (std::getline(ss, row, '/')) rows.push_back(row);
  return gf2::BitMatrix::parse_rows(rows);
}

}  // namespace

CodeSpec read_code_spec(std::istream& in, const std::string& base_dir) {
  const auto kv = KeyValues::parse(in);
  const auto vocab = kv.get_int("vocab_size");
  const auto lift = static_cast<int>(kv.get_int("lift_width"));
  if (kv.has("code_width") && kv.get_int("code_width") != minimal_width(vocab)) {
    throw Error(Errc::InvalidCodeSpec, "code_width must equal ceil(log2 vocab_size) = " +
                                           std::to_string(minimal_width(vocab)));
  }
  const int k = minimal_width(vocab);
  std::optional<Recoder> recoder;
  if (kv.has("recoder.seed")) {
    recoder = sample_recoder(k, static_cast<std::uint64_t>(kv.get_int("recoder.seed")));
  } else if (kv.has("recoder.matrix_file") || kv.has("recoder.matrix")) {
    gf2::BitMatrix matrix;
    if (kv.has("recoder.matrix")) {
      matrix = parse_inline_matrix(kv.get("recoder.matrix"));
    } else {
      std::filesystem::path path = kv.get("recoder.matrix_file");
      if (path.is_relative()) path = std::filesystem::path(base_dir) / path;
      matrix = gf2::load_text(path.string());
    }
    const auto shift = kv.has("recoder.shift") ? gf2::BitVector::parse(kv.get("recoder.shift"))
                                               : gf2::BitVector(k);
    recoder = Recoder{std::move(matrix), shift};
  }
  return CodeSpec(vocab, lift, std::move(recoder));
}

CodeSpec load_code_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path);
  const auto dir = std::filesystem::path(path).parent_path();
  return read_code_spec(in, dir.empty() ? "." : dir.string());
}

void write_code_spec(std::ostream& out, const CodeSpec& spec) {
  out << "vocab_size = " << spec.vocab_size() << '\n';
  out << "code_width = " << spec.code_width() << '\n';
  out << "lift_width = " << spec.lift_width() << '\n';
  if (const auto& r = spec.recoder()) {
    out << "recoder.matrix = ";
    for (int i = 0; i < r->matrix.size(); ++i) {
      if (i) out << '/';
      out << gf2::BitVector(r->matrix.size(), r->matrix.row(i)).to_string();
    }
    out << '\n' << "recoder.shift = " << r->shift.to_string() << '\n';
  }
}

}  // namespace tablefree::codes
