#include "opro/posenc.hpp"

#include <cmath>
#include <random>

#include "opro/errors.hpp"

namespace opro {

std::string_view to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::Ape: return "ape";
    case EncoderKind::Rope: return "rope";
    case EncoderKind::Liere: return "liere";
    case EncoderKind::Comrope: return "comrope";
  }
  return "?";
}

EncoderKind parse_encoder(std::string_view text) {
  if (text == "ape") return EncoderKind::Ape;
  if (text == "rope") return EncoderKind::Rope;
  if (text == "liere") return EncoderKind::Liere;
  if (text == "comrope") return EncoderKind::Comrope;
  throw ConfigError("unknown encoder '" + std::string(text) + "' (expected ape|rope|liere|comrope)");
}

void FrequencyBank::validate() const {
  for (double t : thetas) {
    if (!std::isfinite(t)) throw ConfigError("frequency bank has non-finite entries");
  }
}

FrequencyBank FrequencyBank::rope2d(Index dim, double base) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("rotary encodings need an even head dimension, got " + std::to_string(dim));
  if (!(base > 0.0)) throw ConfigError("rope base must be positive");
  FrequencyBank bank;
  const Index blocks = dim / 2;
  const Index x_blocks = (blocks + 1) / 2;
  const Index y_blocks = blocks - x_blocks;
  auto half = [&](Index count) {
    for (Index j = 0; j < count; ++j) {
      bank.thetas.push_back(std::pow(base, -static_cast<double>(j) / static_cast<double>(count)));
    }
  };
  half(x_blocks);
  half(y_blocks);
  return bank;
}

void LieReGenerators::validate() const {
  if (ax.rows() != ax.cols() || ay.rows() != ay.cols() || ax.rows() != ay.rows()) {
    throw ShapeError("LieRE generators must be square and of equal size");
  }
  // SkewMatrix::from throws InvariantError / NumericError as appropriate.
  (void)SkewMatrix::from(ax);
  (void)SkewMatrix::from(ay);
}

SkewMatrix LieReGenerators::generator_at(Coord2D c) const {
  return SkewMatrix::from(c.x * ax + c.y * ay);
}

void ComRopeRates::validate() const {
  if (rates.cols() != 2) throw ShapeError("ComRoPE rates must have one column per axis");
  if (!rates.allFinite()) throw NumericError("ComRoPE rates have non-finite entries");
}

ComRopeRates ComRopeRates::from_rope(const FrequencyBank& bank) {
  ComRopeRates out{Mat::Zero(bank.block_count(), 2)};
  for (Index k = 0; k < bank.block_count(); ++k) {
    out.rates(k, k < bank.x_blocks() ? 0 : 1) = bank.thetas[k];
  }
  return out;
}

PositionTable PositionTable::init(Index rows, Index cols, double scale, std::uint64_t seed) {
  PositionTable t{Mat::Zero(rows, cols)};
  if (scale > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, scale);
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < cols; ++c) t.table(r, c) = normal(rng);
    }
  }
  return t;
}

Mat encode_ape(const Mat& embeddings, const PositionTable& table) {
  if (embeddings.rows() != table.table.rows() || embeddings.cols() != table.table.cols()) {
    throw ShapeError("APE: embeddings " + std::to_string(embeddings.rows()) + "x" + std::to_string(embeddings.cols()) +
                     " vs table " + std::to_string(table.table.rows()) + "x" + std::to_string(table.table.cols()));
  }
  return embeddings + table.table;
}

Vec rotate_blocks(const Vec& vec, const std::vector<double>& angles) {
  if (vec.size() % 2 != 0) throw ConfigError("block rotation needs an even dimension");
  if (static_cast<Index>(angles.size()) * 2 != vec.size()) throw ShapeError("block rotation: angle count mismatch");
  Vec out(vec.size());
  for (std::size_t k = 0; k < angles.size(); ++k) {
    const double c = std::cos(angles[k]);
    const double s = std::sin(angles[k]);
    const double v0 = vec(2 * k);
    const double v1 = vec(2 * k + 1);
    out(2 * k) = c * v0 - s * v1;
    out(2 * k + 1) = s * v0 + c * v1;
  }
  return out;
}

namespace {

std::vector<double> rope_angles(Coord2D coord, const FrequencyBank& bank) {
  std::vector<double> angles(bank.thetas.size());
  for (Index k = 0; k < bank.block_count(); ++k) angles[k] = bank.angle(k, coord);
  return angles;
}

std::vector<double> comrope_angles(Coord2D coord, const ComRopeRates& gens) {
  std::vector<double> angles(gens.rates.rows());
  for (Index k = 0; k < gens.rates.rows(); ++k) angles[k] = gens.angle(k, coord);
  return angles;
}

Mat block_matrix(const std::vector<double>& angles) {
  const Index n = 2 * static_cast<Index>(angles.size());
  Mat m = Mat::Zero(n, n);
  for (std::size_t k = 0; k < angles.size(); ++k) {
    const double c = std::cos(angles[k]);
    const double s = std::sin(angles[k]);
    m(2 * k, 2 * k) = c;
    m(2 * k, 2 * k + 1) = -s;
    m(2 * k + 1, 2 * k) = s;
    m(2 * k + 1, 2 * k + 1) = c;
  }
  return m;
}

}  // namespace

Vec rope2d_apply(const Vec& vec, Coord2D coord, const FrequencyBank& bank) {
  if (vec.size() % 2 != 0) throw ConfigError("RoPE needs an even dimension, got " + std::to_string(vec.size()));
  if (vec.size() != bank.dim()) throw ShapeError("RoPE: vector length does not match frequency bank");
  return rotate_blocks(vec, rope_angles(coord, bank));
}

Vec liere_apply(const Vec& vec, Coord2D coord, const LieReGenerators& gens) {
  gens.validate();
  if (vec.size() != gens.dim()) throw ShapeError("LieRE: vector length does not match generators");
  return liere_matrix(coord, gens) * vec;
}

Vec comrope_apply(const Vec& vec, Coord2D coord, const ComRopeRates& gens) {
  gens.validate();
  if (vec.size() != gens.dim()) throw ShapeError("ComRoPE: vector length does not match rate table");
  return rotate_blocks(vec, comrope_angles(coord, gens));
}

Mat rope2d_matrix(Coord2D coord, const FrequencyBank& bank) { return block_matrix(rope_angles(coord, bank)); }

Mat liere_matrix(Coord2D coord, const LieReGenerators& gens) {
  return matrix_exp(gens.generator_at(coord)).data();
}

Mat comrope_matrix(Coord2D coord, const ComRopeRates& gens) { return block_matrix(comrope_angles(coord, gens)); }

}  // namespace opro
