#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "opro/panel_ops.hpp"
#include "opro/posenc.hpp"

namespace opro {

enum class Pooling { Mean, ClassToken };

/// Which parameter set is trained. `Full` is Stage-1 pretraining; the rest
/// are Stage-2 adapter regimes on a frozen backbone.
enum class Regime { Full, LinearProbe, Lora, LoraOpro, LoraOproBd, LoraApb, LoraAsym };

enum class ParamGroup { Backbone, Encoder, Head, Lora, Opro, OproBd, Apb, Asym };

std::string_view to_string(Pooling p);
std::string_view to_string(Regime r);
std::string_view to_string(ParamGroup g);
Pooling parse_pooling(std::string_view text);
/// Accepts the CLI adapter names (`none` is the linear probe) plus `full`.
Regime parse_regime(std::string_view text);

bool uses_lora(Regime r);

struct VitConfig {
  int image_size = 64;
  int patch_size = 8;
  int model_dim = 64;
  int head_count = 4;
  int layer_count = 4;
  int mlp_ratio = 4;
  int class_count = 8;
  EncoderKind encoder = EncoderKind::Rope;
  Pooling pooling = Pooling::Mean;
  double rope_base = 10000.0;
  double liere_init_scale = 1e-3;
  double init_std = 0.02;

  int head_dim() const { return model_dim / head_count; }
  int grid_side() const { return image_size / patch_size; }
  int patch_tokens() const { return grid_side() * grid_side(); }
  int token_count() const { return patch_tokens() + (pooling == Pooling::ClassToken ? 1 : 0); }
  int patch_area() const { return patch_size * patch_size; }
  bool rotary() const { return encoder != EncoderKind::Ape; }

  /// ConfigError on any violated divisibility or positivity constraint.
  void validate() const;
};

struct AdapterConfig {
  Regime regime = Regime::Full;
  int panel_count = 1;
  int lora_rank = 8;
  double lora_alpha = 16.0;
  int opro_rank = 8;
  double opro_sigma = 0.02;
};

/// A parameter value with its gradient accumulator (double precision master copy).
struct Tensor {
  Mat value;
  Mat grad;

  explicit Tensor(Mat v = Mat()) : value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}
};

struct ParamRef {
  std::string name;
  ParamGroup group;
  Tensor* tensor;
};

struct ConstParamRef {
  std::string name;
  ParamGroup group;
  const Tensor* tensor;
};

/// Low-rank update x ↦ scale · (x · down) · up with `up` zero-initialised.
struct LoraAdapter {
  Tensor down;  // model_dim x r
  Tensor up;    // r x model_dim
  double scale = 1.0;
};

enum Projection { kQuery = 0, kKey = 1, kValue = 2, kOutput = 3 };

struct AttentionLayer {
  Tensor ln1_g, ln1_b;
  std::array<Tensor, 4> w;  // q, k, v, out: model_dim x model_dim (x · W)
  std::array<Tensor, 4> b;  // 1 x model_dim
  std::array<std::optional<LoraAdapter>, 4> lora;
  Tensor ln2_g, ln2_b;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct ClassifierHead {
  Tensor w1, b1, w2, b2;
};

using Image = std::vector<std::uint8_t>;

/// Small vision transformer: patch embedding, pluggable positional encoding,
/// pre-LN attention blocks with optional LoRA and panel adapters, mean-pool
/// (or class-token) readout and a two-layer classifier head.
class VitModel {
 public:
  VitModel(VitConfig cfg, std::uint64_t seed);

  const VitConfig& config() const { return cfg_; }
  const AdapterConfig& adapters() const { return adapter_cfg_; }
  Regime regime() const { return adapter_cfg_.regime; }

  /// Add zero-initialised adapters for `a.regime` (Stage 2). The regime's
  /// forward at this point equals the frozen backbone's.
  void attach_adapters(const AdapterConfig& a, std::uint64_t seed);

  /// Mark exactly the regime's groups trainable. ConfigError if the adapters
  /// required by the regime are not attached.
  void set_trainable(Regime regime);
  bool trainable(ParamGroup g) const { return trainable_[static_cast<int>(g)]; }

  /// All parameters. The mutable listing marks derived caches stale until
  /// refresh() is called.
  std::vector<ParamRef> mutable_params();
  std::vector<ConstParamRef> param_views() const;
  std::vector<ConstParamRef> trainable_views() const;

  void zero_grads();
  /// Rebuild derived state: OPRO operator caches and LieRE per-token rotations.
  void refresh();
  bool stale() const { return stale_; }

  /// Token coordinates (patch units) in token order.
  const std::vector<Coord2D>& coords() const { return coords_; }
  const FrequencyBank& frequencies() const { return freqs_; }

  // Component access for the compute engine and tests.
  Tensor& patch_w() { return patch_w_; }
  const Tensor& patch_w() const { return patch_w_; }
  const Tensor& patch_b() const { return patch_b_; }
  Tensor& patch_b() { return patch_b_; }
  const std::optional<Tensor>& cls_token() const { return cls_; }
  std::optional<Tensor>& cls_token() { return cls_; }
  const std::optional<Tensor>& ape_table() const { return ape_; }
  std::optional<Tensor>& ape_table() { return ape_; }
  const std::optional<Tensor>& liere_wx() const { return liere_wx_; }
  std::optional<Tensor>& liere_wx() { return liere_wx_; }
  const std::optional<Tensor>& liere_wy() const { return liere_wy_; }
  std::optional<Tensor>& liere_wy() { return liere_wy_; }
  const std::optional<Tensor>& comrope_rates() const { return comrope_; }
  std::optional<Tensor>& comrope_rates() { return comrope_; }
  const std::vector<AttentionLayer>& layers() const { return layers_; }
  std::vector<AttentionLayer>& layers() { return layers_; }
  const Tensor& final_ln_g() const { return lnf_g_; }
  Tensor& final_ln_g() { return lnf_g_; }
  const Tensor& final_ln_b() const { return lnf_b_; }
  Tensor& final_ln_b() { return lnf_b_; }
  const ClassifierHead& head() const { return head_; }
  ClassifierHead& head() { return head_; }

  bool has_opro() const { return opro_bank_.has_value(); }
  bool has_asym() const { return asym_bank_.has_value(); }
  bool has_bd() const { return !bd_phases_.empty(); }
  bool has_apb() const { return !apb_q_.empty(); }

  const OproBank& opro_bank() const;
  const AsymOproBank& asym_bank() const;
  /// [layer][panel] generator tensors (left, right).
  const std::vector<std::vector<std::array<Tensor, 2>>>& opro_tensors() const { return opro_gens_; }
  std::vector<std::vector<std::array<Tensor, 2>>>& opro_tensors() { return opro_gens_; }
  const std::vector<std::vector<std::array<Tensor, 2>>>& asym_u_tensors() const { return asym_u_; }
  const std::vector<std::vector<std::array<Tensor, 2>>>& asym_v_tensors() const { return asym_v_; }
  std::vector<std::vector<std::array<Tensor, 2>>>& asym_u_tensors() { return asym_u_; }
  std::vector<std::vector<std::array<Tensor, 2>>>& asym_v_tensors() { return asym_v_; }
  const std::vector<std::vector<Tensor>>& bd_phases() const { return bd_phases_; }
  std::vector<std::vector<Tensor>>& bd_phases() { return bd_phases_; }
  const std::vector<std::vector<Tensor>>& apb_query() const { return apb_q_; }
  const std::vector<std::vector<Tensor>>& apb_key() const { return apb_k_; }
  std::vector<std::vector<Tensor>>& apb_query() { return apb_q_; }
  std::vector<std::vector<Tensor>>& apb_key() { return apb_k_; }

  /// exp(x A_x + y A_y) for each token (LieRE only).
  const std::vector<Mat>& liere_rotations() const { return liere_rot_; }
  /// x A_x + y A_y for each token (LieRE only).
  const std::vector<SkewMatrix>& liere_generators() const { return liere_gen_; }

  /// Stable digest of every tensor in `group` (bit-level); used to verify freezing.
  std::uint64_t group_hash(ParamGroup group) const;
  std::size_t param_count(ParamGroup group) const;

 private:
  template <class Self, class Emit>
  static void visit(Self& self, Emit&& emit);
  void build_coords();
  void reset_trainable();

  VitConfig cfg_;
  AdapterConfig adapter_cfg_;
  std::array<bool, 8> trainable_{};
  bool stale_ = true;

  FrequencyBank freqs_;
  std::vector<Coord2D> coords_;

  Tensor patch_w_, patch_b_;
  std::optional<Tensor> cls_;
  std::optional<Tensor> ape_;
  std::optional<Tensor> liere_wx_, liere_wy_;
  std::optional<Tensor> comrope_;
  std::vector<AttentionLayer> layers_;
  Tensor lnf_g_, lnf_b_;
  ClassifierHead head_;

  std::vector<std::vector<std::array<Tensor, 2>>> opro_gens_;
  std::vector<std::vector<std::array<Tensor, 2>>> asym_u_, asym_v_;
  std::vector<std::vector<Tensor>> bd_phases_;
  std::vector<std::vector<Tensor>> apb_q_, apb_k_;

  std::optional<OproBank> opro_bank_;
  std::optional<AsymOproBank> asym_bank_;
  std::vector<Mat> liere_rot_;
  std::vector<SkewMatrix> liere_gen_;
};

/// Softmax attention probabilities of one forward pass:
/// probs[layer] is (batch·heads·tokens) x tokens.
template <typename T>
struct AttentionTrace {
  std::vector<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> probs;
  std::vector<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> scores;
};

template <typename T>
using Logits = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LossResult {
  double loss = 0.0;
  int correct = 0;
  int count = 0;
};

/// Class logits for every image (batch x class_count).
template <typename T>
Logits<T> forward(const VitModel& model, std::span<const Image* const> images, const PanelMap& map,
                  AttentionTrace<T>* trace = nullptr);

/// Mean cross-entropy and exact gradients, accumulated (+=) into the grad
/// fields of every trainable tensor. NumericError on a non-finite loss.
template <typename T>
LossResult loss_and_grads(VitModel& model, std::span<const Image* const> images, std::span<const int> labels,
                          const PanelMap& map);

/// Mean cross-entropy and accuracy of given logits.
template <typename T>
LossResult cross_entropy(const Logits<T>& logits, std::span<const int> labels);

/// Panel map matching a model's token layout for an n×n grid (n = 1 for Stage 1).
PanelMap panel_map_for(const VitConfig& cfg, int grid);

}  // namespace opro
