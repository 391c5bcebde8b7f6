#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "opro/ortho.hpp"

namespace opro {

enum class EncoderKind { Ape, Rope, Liere, Comrope };

std::string_view to_string(EncoderKind kind);
EncoderKind parse_encoder(std::string_view text);  // ConfigError on unknown names

/// Token-grid coordinate in patch units.
struct Coord2D {
  double x = 0.0;
  double y = 0.0;
};

/// Per-block base angles of a 2D rotary encoding. Block k is driven by x for
/// k < x_blocks() and by y otherwise.
struct FrequencyBank {
  std::vector<double> thetas;

  Index dim() const { return 2 * static_cast<Index>(thetas.size()); }
  Index block_count() const { return static_cast<Index>(thetas.size()); }
  Index x_blocks() const { return (block_count() + 1) / 2; }
  double angle(Index block, Coord2D c) const { return thetas[block] * (block < x_blocks() ? c.x : c.y); }

  void validate() const;

  /// Geometric progression base^(-j/m) repeated for each axis half.
  static FrequencyBank rope2d(Index dim, double base = 10000.0);
};

/// Dense per-axis skew generators (LieRE).
struct LieReGenerators {
  Mat ax;
  Mat ay;

  Index dim() const { return ax.rows(); }
  /// InvariantError unless both generators are skew within 1e-12.
  void validate() const;
  /// x·A_x + y·A_y
  SkewMatrix generator_at(Coord2D c) const;
};

/// Learnable per-block angular rates (ComRoPE): block k rotates by
/// rates(k,0)·x + rates(k,1)·y. Rotations share the 2×2 block basis, so the
/// family commutes.
struct ComRopeRates {
  Mat rates;  // (dim/2) x 2

  Index dim() const { return 2 * rates.rows(); }
  double angle(Index block, Coord2D c) const { return rates(block, 0) * c.x + rates(block, 1) * c.y; }
  void validate() const;

  static ComRopeRates from_rope(const FrequencyBank& bank);
};

/// Learnable additive table (APE), one row per token including any class token.
struct PositionTable {
  Mat table;

  static PositionTable init(Index rows, Index cols, double scale, std::uint64_t seed);
};

Mat encode_ape(const Mat& embeddings, const PositionTable& table);

/// Rotate consecutive channel pairs (v₂ₖ, v₂ₖ₊₁) by angles[k].
Vec rotate_blocks(const Vec& vec, const std::vector<double>& angles);

Vec rope2d_apply(const Vec& vec, Coord2D coord, const FrequencyBank& bank);
Vec liere_apply(const Vec& vec, Coord2D coord, const LieReGenerators& gens);
Vec comrope_apply(const Vec& vec, Coord2D coord, const ComRopeRates& gens);

/// Dense matrix form of each encoder at a coordinate (used by tests and by
/// the block-diagonal adapter analysis).
Mat rope2d_matrix(Coord2D coord, const FrequencyBank& bank);
Mat liere_matrix(Coord2D coord, const LieReGenerators& gens);
Mat comrope_matrix(Coord2D coord, const ComRopeRates& gens);

}  // namespace opro
