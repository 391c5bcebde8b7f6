#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "opro/errors.hpp"
#include "opro/posenc.hpp"

using namespace opro;

namespace {

Mat gaussian(Index rows, Index cols, double std, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std);
  Mat m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

Mat skew(Index d, double std, std::uint64_t seed) {
  const Mat m = gaussian(d, d, std, seed);
  return m - m.transpose();
}

Coord2D random_coord(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-8.0, 8.0);
  return {u(rng), u(rng)};
}

Coord2D minus(Coord2D a, Coord2D b) { return {a.x - b.x, a.y - b.y}; }

double max_abs(const Mat& m) { return m.cwiseAbs().maxCoeff(); }

// Independent dense 2D RoPE: block k uses x for the first half of the blocks.
Mat rope_oracle(Coord2D c, Index d, double base) {
  const Index m = d / 2;
  const Index mx = (m + 1) / 2;
  Mat out = Mat::Zero(d, d);
  for (Index k = 0; k < m; ++k) {
    const Index j = k < mx ? k : k - mx;
    const Index per_axis = k < mx ? mx : m - mx;
    const double theta = std::pow(base, -static_cast<double>(j) / static_cast<double>(per_axis));
    const double a = theta * (k < mx ? c.x : c.y);
    out(2 * k, 2 * k) = std::cos(a);
    out(2 * k, 2 * k + 1) = -std::sin(a);
    out(2 * k + 1, 2 * k) = std::sin(a);
    out(2 * k + 1, 2 * k + 1) = std::cos(a);
  }
  return out;
}

}  // namespace

TEST_CASE("encoder names round-trip") {
  for (EncoderKind k : {EncoderKind::Ape, EncoderKind::Rope, EncoderKind::Liere, EncoderKind::Comrope}) {
    CHECK(parse_encoder(to_string(k)) == k);
  }
  CHECK_THROWS_AS(parse_encoder("alibi"), ConfigError);
}

TEST_CASE("APE examples") {
  const Mat x = gaussian(5, 8, 1.0, 1);
  CHECK(encode_ape(x, PositionTable{Mat::Zero(5, 8)}) == x);
  const PositionTable t = PositionTable::init(1, 8, 0.02, 3);
  CHECK(encode_ape(x.topRows(1), t) == x.topRows(1) + t.table);
  CHECK(PositionTable::init(5, 8, 0.02, 9).table == PositionTable::init(5, 8, 0.02, 9).table);
  CHECK_THROWS_AS(encode_ape(x, PositionTable{Mat::Zero(4, 8)}), ShapeError);
}

TEST_CASE("RoPE examples") {
  const FrequencyBank bank = FrequencyBank::rope2d(16);
  const Vec v = gaussian(16, 1, 1.0, 2);
  CHECK(rope2d_apply(v, {0, 0}, bank) == v);

  FrequencyBank one{{1.0}};
  Vec e(2);
  e << 1, 0;
  const Vec r = rope2d_apply(e, {M_PI / 2, 0}, one);
  CHECK(std::abs(r(0)) < 1e-15);
  CHECK(std::abs(r(1) - 1.0) < 1e-15);

  CHECK_THROWS_AS(FrequencyBank::rope2d(7), ConfigError);
  CHECK_THROWS_AS(rope2d_apply(gaussian(7, 1, 1.0, 1), {1, 1}, bank), ConfigError);
  CHECK_THROWS_AS(rope2d_apply(gaussian(8, 1, 1.0, 1), {1, 1}, bank), ShapeError);
}

TEST_CASE("RoPE matrix matches an independent construction") {
  std::mt19937_64 rng(5);
  for (Index d : {4, 8, 12, 16, 64}) {
    const FrequencyBank bank = FrequencyBank::rope2d(d);
    for (int t = 0; t < 5; ++t) {
      const Coord2D c = random_coord(rng);
      CHECK(max_abs(rope2d_matrix(c, bank) - rope_oracle(c, d, 10000.0)) < 1e-12);
    }
  }
}

TEST_CASE("rotary encoders are isometries") {
  std::mt19937_64 rng(7);
  const Index d = 16;
  const FrequencyBank bank = FrequencyBank::rope2d(d);
  const LieReGenerators lie{skew(d, 0.3, 1), skew(d, 0.3, 2)};
  ComRopeRates com{gaussian(d / 2, 2, 1.0, 3)};
  for (int t = 0; t < 50; ++t) {
    const Vec v = gaussian(d, 1, 1.0, 100 + t);
    const Coord2D c = random_coord(rng);
    CHECK(std::abs(rope2d_apply(v, c, bank).norm() - v.norm()) <= 1e-9 * v.norm());
    CHECK(std::abs(liere_apply(v, c, lie).norm() - v.norm()) <= 1e-9 * v.norm());
    CHECK(std::abs(comrope_apply(v, c, com).norm() - v.norm()) <= 1e-9 * v.norm());
  }
}

TEST_CASE("relative-position property for RoPE and ComRoPE") {
  std::mt19937_64 rng(9);
  const Index d = 12;
  const FrequencyBank bank = FrequencyBank::rope2d(d);
  const ComRopeRates com{gaussian(d / 2, 2, 1.0, 4)};
  for (int t = 0; t < 50; ++t) {
    const Coord2D a = random_coord(rng), b = random_coord(rng);
    const Vec v = gaussian(d, 1, 1.0, 200 + t), w = gaussian(d, 1, 1.0, 300 + t);
    const double lhs = rope2d_apply(v, a, bank).dot(rope2d_apply(w, b, bank));
    const double rhs = v.dot(rope2d_apply(w, minus(b, a), bank));
    CHECK(std::abs(lhs - rhs) <= 1e-9 * (1.0 + std::abs(lhs)));
    CHECK(max_abs(comrope_matrix(a, com).transpose() * comrope_matrix(b, com) - comrope_matrix(minus(b, a), com)) <=
          1e-9);
  }
}

TEST_CASE("ComRoPE identities") {
  const ComRopeRates zero{Mat::Zero(4, 2)};
  const Vec v = gaussian(8, 1, 1.0, 1);
  CHECK(comrope_apply(v, {3.0, -2.0}, zero) == v);
  const ComRopeRates r{gaussian(4, 2, 1.0, 2)};
  CHECK(comrope_apply(v, {0.0, 0.0}, r) == v);
  // Per-axis rotations commute.
  const Mat rx = comrope_matrix({1.3, 0.0}, r), ry = comrope_matrix({0.0, -0.7}, r);
  CHECK(max_abs(rx * ry - ry * rx) < 1e-12);
  // from_rope reproduces the RoPE angles.
  const FrequencyBank bank = FrequencyBank::rope2d(8);
  CHECK(max_abs(comrope_matrix({2.0, 5.0}, ComRopeRates::from_rope(bank)) - rope2d_matrix({2.0, 5.0}, bank)) < 1e-12);
  CHECK_THROWS_AS(comrope_apply(gaussian(6, 1, 1.0, 1), {1, 1}, r), ShapeError);
}

TEST_CASE("LieRE examples") {
  const Index d = 8;
  const LieReGenerators lie{skew(d, 0.5, 11), skew(d, 0.5, 12)};
  const Vec v = gaussian(d, 1, 1.0, 3);
  CHECK(max_abs(liere_apply(v, {0, 0}, lie) - v) < 1e-15);

  // Single-axis motion: the relative property holds along x.
  const LieReGenerators xonly{skew(d, 0.5, 13), Mat::Zero(d, d)};
  for (double a : {-2.0, 0.5, 3.0}) {
    for (double b : {-1.0, 1.5}) {
      const Mat lhs = liere_matrix({a, 0}, xonly).transpose() * liere_matrix({b, 0}, xonly);
      CHECK(max_abs(lhs - liere_matrix({b - a, 0}, xonly)) < 1e-9);
    }
  }

  // Commuting generators (shared 2x2 block basis) restore the full property.
  Mat ax = Mat::Zero(d, d), ay = Mat::Zero(d, d);
  for (Index k = 0; k < d / 2; ++k) {
    ax(2 * k + 1, 2 * k) = 0.3 + k;
    ax(2 * k, 2 * k + 1) = -(0.3 + k);
    ay(2 * k + 1, 2 * k) = 1.1 - 0.2 * k;
    ay(2 * k, 2 * k + 1) = -(1.1 - 0.2 * k);
  }
  const LieReGenerators comm{ax, ay};
  const Coord2D a{1.5, -2.0}, b{-0.5, 3.0};
  CHECK(max_abs(liere_matrix(a, comm).transpose() * liere_matrix(b, comm) - liere_matrix(minus(b, a), comm)) < 1e-9);

  // Non-commuting generators break it, while isometry survives.
  const Mat gap = liere_matrix(a, lie).transpose() * liere_matrix(b, lie) - liere_matrix(minus(b, a), lie);
  CHECK(max_abs(gap) > 1e-3);
  CHECK(std::abs(liere_apply(v, a, lie).norm() - v.norm()) < 1e-9 * v.norm());

  Mat bad = skew(d, 1.0, 14);
  bad(0, 1) += 0.5;
  CHECK_THROWS_AS(liere_apply(v, {1, 0}, LieReGenerators{bad, Mat::Zero(d, d)}), InvariantError);
  CHECK_THROWS_AS(liere_apply(gaussian(6, 1, 1.0, 1), {1, 0}, lie), ShapeError);
}
