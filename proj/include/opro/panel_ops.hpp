#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "opro/ortho.hpp"

namespace opro {

/// Panel assignment of every token. Tokens marked kExempt (e.g. a class
/// token) bypass all panel modulation.
struct PanelMap {
  static constexpr int kExempt = -1;

  std::vector<int> assignment;
  int panel_count = 1;

  Index size() const { return static_cast<Index>(assignment.size()); }
  /// IndexError on ids outside [0, panel_count) other than kExempt.
  void validate() const;
  /// Token indices of each panel, in order.
  std::vector<std::vector<Index>> members() const;

  /// Row-major token grid of side `grid_side` tiled into n×n panels. A token
  /// belongs to the panel containing its patch centre. With `leading_exempt`
  /// an exempt token (class token) is prepended.
  static PanelMap tiled(int grid_side, int n, bool leading_exempt = false);
  static PanelMap single(Index tokens) { return PanelMap{std::vector<int>(tokens, 0), 1}; }
};

/// Per-layer, per-panel low-rank generators with cached operators.
class OproBank {
 public:
  OproBank() = default;
  /// Zero-interference initialisation of every generator.
  OproBank(int layers, int panels, Index dim, Index rank, double sigma, std::uint64_t seed);

  int layers() const { return static_cast<int>(gens_.size()); }
  int panels() const { return gens_.empty() ? 0 : static_cast<int>(gens_.front().size()); }
  Index dim() const { return dim_; }
  Index rank() const { return rank_; }

  const LowRankGenerator& generator(int layer, int panel) const;
  /// Mutable access marks the cache stale until refresh_cache().
  LowRankGenerator& generator_mut(int layer, int panel);
  void set_generator(int layer, int panel, LowRankGenerator gen);

  const OrthogonalOperator& op(int layer, int panel) const;
  bool cache_fresh() const { return fresh_; }

  /// Recompute every cached operator from its generator.
  void refresh_cache();

 private:
  void check(int layer, int panel) const;

  Index dim_ = 0;
  Index rank_ = 0;
  std::vector<std::vector<LowRankGenerator>> gens_;
  std::vector<std::vector<OrthogonalOperator>> cache_;
  bool fresh_ = false;
};

/// OPRO-BD: per-layer, per-panel phase offsets, one per 2×2 channel block.
struct BlockDiagOproBank {
  std::vector<std::vector<Vec>> phases;  // [layer][panel] -> dim/2

  static BlockDiagOproBank zeros(int layers, int panels, Index dim);
  Index dim() const { return phases.empty() || phases[0].empty() ? 0 : 2 * phases[0][0].size(); }
  int panels() const { return phases.empty() ? 0 : static_cast<int>(phases[0].size()); }
  /// Dense form diag(R(φ_{p,1}), …).
  Mat op_matrix(int layer, int panel) const;
};

/// APB ablation: additive per-panel query/key biases.
struct AdditiveBiasBank {
  std::vector<std::vector<Vec>> query_bias;  // [layer][panel] -> dim
  std::vector<std::vector<Vec>> key_bias;

  static AdditiveBiasBank zeros(int layers, int panels, Index dim);
  int panels() const { return query_bias.empty() ? 0 : static_cast<int>(query_bias[0].size()); }
};

/// Asym-OPRO ablation: independent operators U_p (queries) and V_p (keys).
struct AsymOproBank {
  OproBank query_ops;
  OproBank key_ops;

  static AsymOproBank zero_init(int layers, int panels, Index dim, Index rank, double sigma, std::uint64_t seed);
  void refresh_cache() {
    query_ops.refresh_cache();
    key_ops.refresh_cache();
  }
};

using QueryKey = std::pair<Mat, Mat>;

// Token vectors are rows: q_tilde is tokens × dim.

/// q̂_i = U_{p(i)} q̃_i, k̂_j = U_{p(j)} k̃_j.
QueryKey modulate(const Mat& q_tilde, const Mat& k_tilde, const PanelMap& map, const OproBank& bank, int layer);

/// U_{p_i}ᵀ U_{p_j}; exactly I when p_i == p_j.
OrthogonalOperator relative_operator(const OproBank& bank, int layer, int p_i, int p_j);

QueryKey bd_modulate(const Mat& q_tilde, const Mat& k_tilde, const PanelMap& map, const BlockDiagOproBank& bank,
                     int layer);

QueryKey apb_modulate(const Mat& q_tilde, const Mat& k_tilde, const PanelMap& map, const AdditiveBiasBank& bank,
                      int layer = 0);

QueryKey asym_modulate(const Mat& q_tilde, const Mat& k_tilde, const PanelMap& map, const AsymOproBank& bank,
                       int layer = 0);

/// Free-function spelling of OproBank::refresh_cache.
inline void refresh_cache(OproBank& bank) { bank.refresh_cache(); }

}  // namespace opro
