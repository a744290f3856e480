#include <doctest.h>

#include <Eigen/SVD>
#include <bit>
#include <cstring>
#include <filesystem>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "tablefree/gf2.hpp"
#include "tablefree/token_codes.hpp"

using namespace tablefree;
using codes::CodeSpec;

namespace {

// Binary expansion by repeated division, independent of the shift-based code.
std::vector<int> digits(std::int64_t t, int k) {
  std::vector<int> out;
  for (int j = 0; j < k; ++j) {
    out.push_back(static_cast<int>(t % 2));
    t /= 2;
  }
  return out;
}

std::uint64_t code_word(const Vector<float>& x, int k) {
  std::uint64_t w = 0;
  for (int j = 0; j < k; ++j) w |= static_cast<std::uint64_t>(x[j] == 1.0F) << j;
  return w;
}

}  // namespace

TEST_CASE("minimal width") {
  CHECK(codes::minimal_width(65536) == 16);
  CHECK(codes::minimal_width(256) == 8);
  CHECK(codes::minimal_width(1000) == 10);
  CHECK(codes::minimal_width(1) == 1);
  CHECK(codes::minimal_width(2) == 1);
  CHECK(codes::minimal_width(3) == 2);
  for (std::int64_t v = 2; v <= (1 << 20); v += 1 + v / 97) {
    const int k = codes::minimal_width(v);
    CHECK((std::int64_t{1} << k) >= v);
    CHECK((std::int64_t{1} << (k - 1)) < v);
  }
}

TEST_CASE("canonical code") {
  CHECK(codes::canonical_code(0, 4).word() == 0);
  const auto five = codes::canonical_code(5, 4);
  CHECK(five[0]);
  CHECK_FALSE(five[1]);
  CHECK(five[2]);
  CHECK_FALSE(five[3]);
  CHECK(codes::canonical_code(65535, 16) == gf2::BitVector::ones(16));
  for (std::int64_t t = 0; t < 4096; t += 7) {
    const auto c = codes::canonical_code(t, 12);
    const auto ref = digits(t, 12);
    for (int j = 0; j < 12; ++j) CHECK(static_cast<int>(c[j]) == ref[j]);
  }
  CHECK_THROWS_AS(codes::canonical_code(16, 4), Error);
  CHECK_THROWS_AS(codes::canonical_code(-1, 4), Error);
}

TEST_CASE("recode") {
  const CodeSpec plain(16, 4);
  const auto c = codes::canonical_code(9, 4);
  CHECK(codes::recode(c, plain) == c);
  const CodeSpec identity(16, 4, codes::Recoder{gf2::BitMatrix::identity(4), gf2::BitVector(4)});
  CHECK(codes::recode(c, identity) == c);
}

TEST_CASE("lift") {
  const auto c = gf2::BitVector::parse("1010");
  const auto x = codes::lift<float>(c, 8);
  const std::vector<float> expect{1, 0, 1, 0, 1, 0, 1, 0};
  for (int i = 0; i < 8; ++i) CHECK(x[i] == expect[static_cast<std::size_t>(i)]);
  CHECK(codes::lift<double>(c, 4) == Vector<double>(Eigen::Vector4d(1, 0, 1, 0)));

  const auto wide = codes::lift<float>(codes::canonical_code(40000, 16), 1024);
  for (int i = 0; i < 1024; ++i) CHECK(wide[i] == wide[i % 16]);

  CHECK_THROWS_AS(codes::lift<float>(c, 6), Error);
}

TEST_CASE("encode_token and tiling") {
  const CodeSpec plain(256, 64);
  CHECK(codes::encode_token(0, plain).isZero());

  const auto recoder = codes::sample_recoder(8, 3);
  REQUIRE(recoder.shift.word() != 0);
  const CodeSpec affine(256, 64, recoder);
  const auto zero = codes::encode_token(0, affine);
  for (int i = 0; i < 64; ++i) CHECK(zero[i] == (recoder.shift[i % 8] ? 1.0F : 0.0F));

  for (std::int64_t t = 0; t < 256; ++t) {
    const auto x = codes::encode_token(t, affine);
    for (int i = 0; i < 64; ++i) {
      CHECK((x[i] == 0.0F || x[i] == 1.0F));
      CHECK(x[i] == x[i % 8]);
    }
  }
}

TEST_CASE("encode_tokens fills rows like encode_token") {
  const CodeSpec spec(256, 32, codes::sample_recoder(8, 9));
  const std::vector<std::int32_t> ids{0, 255, 17, 17, 128};
  Matrix<float> out(5, 32);
  codes::encode_tokens<float, std::int32_t>(ids, spec, out);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    CHECK(out.row(static_cast<Index>(r)).transpose() == codes::encode_token(ids[r], spec));
  }
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(CodeSpec(0, 8), Error);
  CHECK_THROWS_AS(CodeSpec(256, 12), Error);
  CHECK_THROWS_AS(CodeSpec(256, 8, codes::sample_recoder(7, 1)), Error);
  // A singular matrix is rejected by the checked constructor.
  CHECK_THROWS_AS(CodeSpec(4, 2, codes::Recoder{gf2::BitMatrix::parse_rows({"11", "11"}),
                                                gf2::BitVector(2)}),
                  Error);
  CHECK(CodeSpec(1000, 20).code_width() == 10);
  CHECK(CodeSpec(1000, 20).tiles() == 2);
}

TEST_CASE("injectivity with and without a recoder, and the corrupted witness") {
  CHECK(codes::verify_injectivity(CodeSpec(256, 64)).ok);
  CHECK(codes::verify_injectivity(CodeSpec(1000, 20, codes::sample_recoder(10, 4))).ok);

  const auto singular = gf2::BitMatrix::parse_rows({"1100", "0110", "1010", "0001"});
  REQUIRE_FALSE(gf2::is_invertible(singular));
  const auto bad = CodeSpec::unchecked(16, 4, codes::Recoder{singular, gf2::BitVector(4)});
  const auto report = codes::verify_injectivity(bad);
  CHECK_FALSE(report.ok);
  REQUIRE(report.colliding_pair.has_value());
  const auto [a, b] = *report.colliding_pair;
  CHECK(a != b);
  CHECK(codes::encode_token(a, bad) == codes::encode_token(b, bad));

  // Exhaustive oracle: the first colliding pair in scan order.
  std::optional<std::pair<std::int64_t, std::int64_t>> first;
  for (std::int64_t j = 0; j < 16 && !first; ++j) {
    for (std::int64_t i = 0; i < j && !first; ++i) {
      if (oracle::matvec(singular.rows(), static_cast<std::uint64_t>(i), 4) ==
          oracle::matvec(singular.rows(), static_cast<std::uint64_t>(j), 4)) {
        first = std::make_pair(i, j);
      }
    }
  }
  REQUIRE(first.has_value());
  CHECK(std::min(a, b) == first->first);
  CHECK(std::max(a, b) == first->second);
}

TEST_CASE("injectivity at 65536 tokens") {
  CHECK(codes::verify_injectivity(CodeSpec(65536, 32)).ok);
  CHECK(codes::verify_injectivity(CodeSpec(65536, 32, codes::sample_recoder(16, 8))).ok);
}

TEST_CASE("hypercube coverage and balance") {
  for (int k = 2; k <= 12; ++k) {
    const CodeSpec spec(std::int64_t{1} << k, k, codes::sample_recoder(k, 50 + k));
    std::set<std::uint64_t> seen;
    for (std::int64_t t = 0; t < spec.vocab_size(); ++t) {
      seen.insert(code_word(codes::encode_token(t, spec), k));
    }
    CHECK(seen.size() == (std::size_t{1} << k));

    const auto report = codes::verify_balance(spec);
    CHECK(report.balanced());
    for (auto ones : report.per_bit_ones) CHECK(ones == (std::int64_t{1} << (k - 1)));
    CHECK(report.pairs.size() == static_cast<std::size_t>(k * (k - 1) / 2));
    for (const auto& p : report.pairs) {
      for (auto n : p.counts) CHECK(n == (std::int64_t{1} << (k - 2)));
    }
  }

  const auto small = codes::verify_balance(CodeSpec(4, 2));
  CHECK(small.per_bit_ones == std::vector<std::int64_t>{2, 2});
  REQUIRE(small.pairs.size() == 1);
  CHECK(small.pairs[0].counts == std::array<std::int64_t, 4>{1, 1, 1, 1});

  try {
    codes::verify_balance(CodeSpec(1000, 10));
    FAIL("expected NotFullVocabulary");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::NotFullVocabulary);
  }
}

TEST_CASE("effective rank") {
  for (int k = 2; k <= 10; ++k) {
    CHECK(codes::effective_rank(CodeSpec(std::int64_t{1} << k, 2 * k,
                                         codes::sample_recoder(k, 7 * k))) == k);
  }
  CHECK(codes::effective_rank(CodeSpec(256, 64)) == 8);
  CHECK(codes::effective_rank(CodeSpec(3, 4)) == 2);
  CHECK(codes::effective_rank(CodeSpec(1, 1)) == 0);
  const gf2::BitVector one(1, 1);
  CHECK(codes::effective_rank(CodeSpec(1, 2, codes::Recoder{gf2::BitMatrix::identity(1), one})) ==
        1);

  // Floating-point SVD as a cross-check on small cases.
  for (std::int64_t v : {3, 5, 6, 7, 12, 33}) {
    const CodeSpec spec(v, 2 * codes::minimal_width(v));
    Eigen::MatrixXd x(v, spec.lift_width());
    for (std::int64_t t = 0; t < v; ++t) {
      x.row(t) = codes::encode_token<double>(t, spec).transpose();
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(x);
    svd.setThreshold(1e-9);
    CHECK(codes::effective_rank(spec) == svd.rank());
    CHECK(codes::effective_rank(spec) <= spec.code_width());
  }
}

TEST_CASE("frozen table export and equivalence") {
  const auto table16 = codes::export_frozen_table(CodeSpec(16, 4));
  CHECK_FALSE(codes::FrozenTable::trainable);
  for (int t = 0; t < 16; ++t) {
    const auto ref = digits(t, 4);
    for (int j = 0; j < 4; ++j) CHECK(table16.rows(t, j) == static_cast<float>(ref[j]));
  }

  const CodeSpec plain(256, 16);
  const CodeSpec affine(256, 16, codes::sample_recoder(8, 21));
  const auto a = codes::export_frozen_table(plain);
  const auto b = codes::export_frozen_table(affine);
  std::multiset<std::vector<float>> rows_a;
  std::multiset<std::vector<float>> rows_b;
  for (int t = 0; t < 256; ++t) {
    rows_a.insert(std::vector<float>(a.rows.row(t).begin(), a.rows.row(t).end()));
    rows_b.insert(std::vector<float>(b.rows.row(t).begin(), b.rows.row(t).end()));
  }
  CHECK(rows_a == rows_b);
  CHECK_FALSE(codes::compare_with_encoding(b, affine).has_value());

  const CodeSpec big(65536, 32, codes::sample_recoder(16, 2));
  CHECK_FALSE(codes::compare_with_encoding(codes::export_frozen_table(big), big).has_value());
}

TEST_CASE("frozen table file round trip and mismatch location") {
  const CodeSpec spec(256, 32, codes::sample_recoder(8, 6));
  const auto table = codes::export_frozen_table(spec);
  std::stringstream ss;
  codes::write_frozen_table(ss, table);
  const std::string bytes = ss.str();
  CHECK(bytes.rfind("V=256 d=32 dtype=f32\n", 0) == 0);
  CHECK(bytes.size() == std::string("V=256 d=32 dtype=f32\n").size() + 256 * 32 * 4);

  auto back = codes::read_frozen_table(ss);
  CHECK(std::memcmp(back.rows.data(), table.rows.data(), 256 * 32 * sizeof(float)) == 0);
  CHECK_FALSE(codes::compare_with_encoding(back, spec).has_value());

  back.rows(77, 13) = std::bit_cast<float>(std::bit_cast<std::uint32_t>(back.rows(77, 13)) ^ 1U);
  const auto mismatch = codes::compare_with_encoding(back, spec);
  REQUIRE(mismatch.has_value());
  CHECK(mismatch->token == 77);
  CHECK(mismatch->column == 13);

  std::stringstream truncated(bytes.substr(0, bytes.size() - 4));
  CHECK_THROWS_AS(codes::read_frozen_table(truncated), Error);
}

TEST_CASE("code spec text round trip") {
  const CodeSpec spec(1000, 30, codes::sample_recoder(10, 12));
  std::stringstream ss;
  codes::write_code_spec(ss, spec);
  const auto back = codes::read_code_spec(ss);
  CHECK(back.vocab_size() == 1000);
  CHECK(back.lift_width() == 30);
  REQUIRE(back.recoder().has_value());
  CHECK(back.recoder()->matrix == spec.recoder()->matrix);
  CHECK(back.recoder()->shift == spec.recoder()->shift);

  std::stringstream seeded("vocab_size = 256\ncode_width = 8\nlift_width = 64\nrecoder.seed = 5\n");
  const auto s = codes::read_code_spec(seeded);
  CHECK(s.recoder()->matrix == codes::sample_recoder(8, 5).matrix);

  const auto dir = std::filesystem::temp_directory_path() / "tablefree_spec_test";
  std::filesystem::create_directories(dir);
  const auto m = gf2::sample_invertible(4, 3);
  gf2::save_text((dir / "a.txt").string(), m);
  std::stringstream with_file(
      "vocab_size = 16\ncode_width = 4\nlift_width = 8\nrecoder.matrix_file = a.txt\n"
      "recoder.shift = 0110\n");
  const auto f = codes::read_code_spec(with_file, dir.string());
  CHECK(f.recoder()->matrix == m);
  CHECK(f.recoder()->shift == gf2::BitVector::parse("0110"));

  std::stringstream wrong_width("vocab_size = 256\ncode_width = 9\nlift_width = 64\n");
  CHECK_THROWS_AS(codes::read_code_spec(wrong_width), Error);
}
