#include "opro/vit.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "opro/errors.hpp"
#include "opro/rng.hpp"

namespace opro {

std::string_view to_string(Pooling p) { return p == Pooling::Mean ? "mean" : "cls"; }

Pooling parse_pooling(std::string_view text) {
  if (text == "mean") return Pooling::Mean;
  if (text == "cls") return Pooling::ClassToken;
  throw ConfigError("unknown pooling '" + std::string(text) + "' (expected mean|cls)");
}

std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::Full: return "full";
    case Regime::LinearProbe: return "linear-probe";
    case Regime::Lora: return "lora";
    case Regime::LoraOpro: return "lora+opro";
    case Regime::LoraOproBd: return "lora+opro-bd";
    case Regime::LoraApb: return "lora+apb";
    case Regime::LoraAsym: return "lora+asym";
  }
  return "?";
}

Regime parse_regime(std::string_view text) {
  if (text == "full") return Regime::Full;
  if (text == "none" || text == "linear-probe") return Regime::LinearProbe;
  if (text == "lora") return Regime::Lora;
  if (text == "lora+opro") return Regime::LoraOpro;
  if (text == "lora+opro-bd") return Regime::LoraOproBd;
  if (text == "lora+apb") return Regime::LoraApb;
  if (text == "lora+asym") return Regime::LoraAsym;
  throw ParameterError("unknown regime '" + std::string(text) +
                       "' (expected full|none|linear-probe|lora|lora+opro|lora+opro-bd|lora+apb|lora+asym)");
}

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Backbone: return "backbone";
    case ParamGroup::Encoder: return "encoder";
    case ParamGroup::Head: return "head";
    case ParamGroup::Lora: return "lora";
    case ParamGroup::Opro: return "opro";
    case ParamGroup::OproBd: return "opro-bd";
    case ParamGroup::Apb: return "apb";
    case ParamGroup::Asym: return "asym";
  }
  return "?";
}

bool uses_lora(Regime r) { return r != Regime::Full && r != Regime::LinearProbe; }

void VitConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(image_size, "image_size");
  positive(patch_size, "patch_size");
  positive(model_dim, "model_dim");
  positive(head_count, "head_count");
  positive(layer_count, "layer_count");
  positive(mlp_ratio, "mlp_ratio");
  positive(class_count, "class_count");
  if (image_size % patch_size != 0) throw ConfigError("image_size must be divisible by patch_size");
  if (model_dim % head_count != 0) throw ConfigError("model_dim must be divisible by head_count");
  if (rotary() && head_dim() % 2 != 0) throw ConfigError("rotary encoders need an even head dimension");
  if (!(rope_base > 0.0)) throw ConfigError("rope_base must be positive");
}

namespace {

Mat gaussian(Index rows, Index cols, double std, std::uint64_t seed) {
  Mat m = Mat::Zero(rows, cols);
  if (std <= 0.0) return m;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, std);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = normal(rng);
  }
  return m;
}

Tensor ones(Index cols) { return Tensor(Mat::Ones(1, cols)); }
Tensor zeros(Index rows, Index cols) { return Tensor(Mat::Zero(rows, cols)); }

enum SeedTag : std::uint64_t {
  kSeedPatch = 1,
  kSeedCls,
  kSeedApe,
  kSeedLiereX,
  kSeedLiereY,
  kSeedLayer,
  kSeedHead,
  kSeedLora,
  kSeedOpro,
  kSeedAsym,
};

}  // namespace

VitModel::VitModel(VitConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const Index d = cfg_.model_dim;
  const Index dh = cfg_.head_dim();
  const double s = cfg_.init_std;

  patch_w_ = Tensor(gaussian(cfg_.patch_area(), d, 1.0 / std::sqrt(static_cast<double>(cfg_.patch_area())),
                             derive_seed(seed, {kSeedPatch})));
  patch_b_ = zeros(1, d);
  if (cfg_.pooling == Pooling::ClassToken) cls_ = Tensor(gaussian(1, d, s, derive_seed(seed, {kSeedCls})));

  if (cfg_.rotary()) freqs_ = FrequencyBank::rope2d(dh, cfg_.rope_base);
  switch (cfg_.encoder) {
    case EncoderKind::Ape:
      ape_ = Tensor(PositionTable::init(cfg_.token_count(), d, s, derive_seed(seed, {kSeedApe})).table);
      break;
    case EncoderKind::Liere:
      liere_wx_ = Tensor(gaussian(dh, dh, cfg_.liere_init_scale, derive_seed(seed, {kSeedLiereX})));
      liere_wy_ = Tensor(gaussian(dh, dh, cfg_.liere_init_scale, derive_seed(seed, {kSeedLiereY})));
      break;
    case EncoderKind::Comrope:
      comrope_ = Tensor(ComRopeRates::from_rope(freqs_).rates);
      break;
    case EncoderKind::Rope:
      break;
  }

  const Index hidden = d * cfg_.mlp_ratio;
  layers_.resize(cfg_.layer_count);
  for (int l = 0; l < cfg_.layer_count; ++l) {
    AttentionLayer& layer = layers_[l];
    auto ls = [&](std::uint64_t k) { return derive_seed(seed, {kSeedLayer, static_cast<std::uint64_t>(l), k}); };
    layer.ln1_g = ones(d);
    layer.ln1_b = zeros(1, d);
    for (int p = 0; p < 4; ++p) {
      layer.w[p] = Tensor(gaussian(d, d, s, ls(p)));
      layer.b[p] = zeros(1, d);
    }
    layer.ln2_g = ones(d);
    layer.ln2_b = zeros(1, d);
    layer.mlp_w1 = Tensor(gaussian(d, hidden, s, ls(10)));
    layer.mlp_b1 = zeros(1, hidden);
    layer.mlp_w2 = Tensor(gaussian(hidden, d, s, ls(11)));
    layer.mlp_b2 = zeros(1, d);
  }
  lnf_g_ = ones(d);
  lnf_b_ = zeros(1, d);
  head_.w1 = Tensor(gaussian(d, d, s, derive_seed(seed, {kSeedHead, 0})));
  head_.b1 = zeros(1, d);
  head_.w2 = Tensor(gaussian(d, cfg_.class_count, s, derive_seed(seed, {kSeedHead, 1})));
  head_.b2 = zeros(1, cfg_.class_count);

  build_coords();
  set_trainable(Regime::Full);
  refresh();
}

void VitModel::build_coords() {
  coords_.clear();
  if (cfg_.pooling == Pooling::ClassToken) coords_.push_back({0.0, 0.0});
  const int g = cfg_.grid_side();
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) coords_.push_back({static_cast<double>(c), static_cast<double>(r)});
  }
}

void VitModel::attach_adapters(const AdapterConfig& a, std::uint64_t seed) {
  if (a.panel_count <= 0) throw ConfigError("adapter panel_count must be positive");
  const Index d = cfg_.model_dim;
  const Index dh = cfg_.head_dim();
  const int layers = cfg_.layer_count;

  for (auto& layer : layers_) layer.lora = {};
  opro_gens_.clear();
  asym_u_.clear();
  asym_v_.clear();
  bd_phases_.clear();
  apb_q_.clear();
  apb_k_.clear();
  opro_bank_.reset();
  asym_bank_.reset();

  if (uses_lora(a.regime)) {
    if (a.lora_rank <= 0 || a.lora_rank > d) throw ConfigError("LoRA rank must be in [1, model_dim]");
    for (int l = 0; l < layers; ++l) {
      for (int p = 0; p < 4; ++p) {
        LoraAdapter lora;
        lora.down = Tensor(gaussian(d, a.lora_rank, 1.0 / std::sqrt(static_cast<double>(d)),
                                    derive_seed(seed, {kSeedLora, static_cast<std::uint64_t>(l),
                                                       static_cast<std::uint64_t>(p)})));
        lora.up = zeros(a.lora_rank, d);
        lora.scale = a.lora_alpha / a.lora_rank;
        layers_[l].lora[p] = std::move(lora);
      }
    }
  }

  auto make_gens = [&](std::uint64_t tag) {
    if (a.opro_rank < 0 || a.opro_rank > dh) throw ConfigError("OPRO rank must be in [0, head_dim]");
    std::vector<std::vector<std::array<Tensor, 2>>> gens(layers);
    for (int l = 0; l < layers; ++l) {
      for (int p = 0; p < a.panel_count; ++p) {
        LowRankGenerator g = init_zero_interference(
            dh, a.opro_rank, a.opro_sigma,
            derive_seed(seed, {tag, static_cast<std::uint64_t>(l), static_cast<std::uint64_t>(p)}));
        gens[l].push_back({Tensor(g.left), Tensor(g.right)});
      }
    }
    return gens;
  };

  switch (a.regime) {
    case Regime::LoraOpro:
      opro_gens_ = make_gens(kSeedOpro);
      break;
    case Regime::LoraAsym:
      asym_u_ = make_gens(kSeedAsym);
      asym_v_ = make_gens(kSeedAsym + 100);
      break;
    case Regime::LoraOproBd:
      if (dh % 2 != 0) throw ConfigError("OPRO-BD needs an even head dimension");
      bd_phases_.assign(layers, std::vector<Tensor>(a.panel_count, zeros(dh / 2, 1)));
      break;
    case Regime::LoraApb:
      apb_q_.assign(layers, std::vector<Tensor>(a.panel_count, zeros(dh, 1)));
      apb_k_.assign(layers, std::vector<Tensor>(a.panel_count, zeros(dh, 1)));
      break;
    default:
      break;
  }
  adapter_cfg_ = a;
  set_trainable(a.regime);
  refresh();
}

void VitModel::reset_trainable() { trainable_.fill(false); }

void VitModel::set_trainable(Regime regime) {
  auto need = [&](bool ok, const char* what) {
    if (!ok) {
      throw ConfigError(std::string("regime ") + std::string(to_string(regime)) + " requires " + what +
                        " adapters to be attached");
    }
  };
  const bool lora_attached = !layers_.empty() && layers_[0].lora[0].has_value();
  if (uses_lora(regime)) need(lora_attached, "LoRA");
  if (regime == Regime::LoraOpro) need(!opro_gens_.empty(), "OPRO");
  if (regime == Regime::LoraAsym) need(!asym_u_.empty(), "Asym-OPRO");
  if (regime == Regime::LoraOproBd) need(!bd_phases_.empty(), "OPRO-BD");
  if (regime == Regime::LoraApb) need(!apb_q_.empty(), "APB");

  reset_trainable();
  auto on = [&](ParamGroup g) { trainable_[static_cast<int>(g)] = true; };
  on(ParamGroup::Head);
  switch (regime) {
    case Regime::Full:
      on(ParamGroup::Backbone);
      on(ParamGroup::Encoder);
      break;
    case Regime::LinearProbe:
      break;
    case Regime::Lora:
      on(ParamGroup::Lora);
      break;
    case Regime::LoraOpro:
      on(ParamGroup::Lora);
      on(ParamGroup::Opro);
      break;
    case Regime::LoraOproBd:
      on(ParamGroup::Lora);
      on(ParamGroup::OproBd);
      break;
    case Regime::LoraApb:
      on(ParamGroup::Lora);
      on(ParamGroup::Apb);
      break;
    case Regime::LoraAsym:
      on(ParamGroup::Lora);
      on(ParamGroup::Asym);
      break;
  }
}

template <class Self, class Emit>
void VitModel::visit(Self& self, Emit&& emit) {
  using G = ParamGroup;
  emit("patch.w", G::Backbone, self.patch_w_);
  emit("patch.b", G::Backbone, self.patch_b_);
  if (self.cls_) emit("cls", G::Backbone, *self.cls_);
  if (self.ape_) emit("ape.table", G::Encoder, *self.ape_);
  if (self.liere_wx_) emit("liere.wx", G::Encoder, *self.liere_wx_);
  if (self.liere_wy_) emit("liere.wy", G::Encoder, *self.liere_wy_);
  if (self.comrope_) emit("comrope.rates", G::Encoder, *self.comrope_);
  static const char* kProj[4] = {"q", "k", "v", "o"};
  for (std::size_t l = 0; l < self.layers_.size(); ++l) {
    auto& layer = self.layers_[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    emit(p + "ln1.g", G::Backbone, layer.ln1_g);
    emit(p + "ln1.b", G::Backbone, layer.ln1_b);
    for (int j = 0; j < 4; ++j) {
      emit(p + "attn." + kProj[j] + ".w", G::Backbone, layer.w[j]);
      emit(p + "attn." + kProj[j] + ".b", G::Backbone, layer.b[j]);
    }
    emit(p + "ln2.g", G::Backbone, layer.ln2_g);
    emit(p + "ln2.b", G::Backbone, layer.ln2_b);
    emit(p + "mlp.w1", G::Backbone, layer.mlp_w1);
    emit(p + "mlp.b1", G::Backbone, layer.mlp_b1);
    emit(p + "mlp.w2", G::Backbone, layer.mlp_w2);
    emit(p + "mlp.b2", G::Backbone, layer.mlp_b2);
  }
  emit("final_ln.g", G::Backbone, self.lnf_g_);
  emit("final_ln.b", G::Backbone, self.lnf_b_);
  emit("head.w1", G::Head, self.head_.w1);
  emit("head.b1", G::Head, self.head_.b1);
  emit("head.w2", G::Head, self.head_.w2);
  emit("head.b2", G::Head, self.head_.b2);
  for (std::size_t l = 0; l < self.layers_.size(); ++l) {
    auto& layer = self.layers_[l];
    for (int j = 0; j < 4; ++j) {
      if (!layer.lora[j]) continue;
      const std::string p = "lora.layer" + std::to_string(l) + "." + kProj[j] + ".";
      emit(p + "down", G::Lora, layer.lora[j]->down);
      emit(p + "up", G::Lora, layer.lora[j]->up);
    }
  }
  auto gens = [&](const std::string& prefix, G group, auto& table) {
    for (std::size_t l = 0; l < table.size(); ++l) {
      for (std::size_t q = 0; q < table[l].size(); ++q) {
        const std::string p = prefix + ".layer" + std::to_string(l) + ".panel" + std::to_string(q) + ".";
        emit(p + "left", group, table[l][q][0]);
        emit(p + "right", group, table[l][q][1]);
      }
    }
  };
  gens("opro", G::Opro, self.opro_gens_);
  gens("asym.u", G::Asym, self.asym_u_);
  gens("asym.v", G::Asym, self.asym_v_);
  auto vecs = [&](const std::string& prefix, G group, auto& table) {
    for (std::size_t l = 0; l < table.size(); ++l) {
      for (std::size_t q = 0; q < table[l].size(); ++q) {
        emit(prefix + ".layer" + std::to_string(l) + ".panel" + std::to_string(q), group, table[l][q]);
      }
    }
  };
  vecs("opro_bd.phase", G::OproBd, self.bd_phases_);
  vecs("apb.query", G::Apb, self.apb_q_);
  vecs("apb.key", G::Apb, self.apb_k_);
}


std::vector<ParamRef> VitModel::mutable_params() {
  stale_ = true;
  std::vector<ParamRef> out;
  visit(*this, [&](std::string name, ParamGroup g, Tensor& t) { out.push_back(ParamRef{std::move(name), g, &t}); });
  return out;
}

std::vector<ConstParamRef> VitModel::param_views() const {
  std::vector<ConstParamRef> out;
  visit(*this,
        [&](std::string name, ParamGroup g, const Tensor& t) { out.push_back(ConstParamRef{std::move(name), g, &t}); });
  return out;
}

std::vector<ConstParamRef> VitModel::trainable_views() const {
  std::vector<ConstParamRef> out;
  for (auto& r : param_views()) {
    if (trainable(r.group)) out.push_back(std::move(r));
  }
  return out;
}

void VitModel::zero_grads() {
  const bool was_stale = stale_;
  for (auto& r : mutable_params()) r.tensor->grad.setZero(r.tensor->value.rows(), r.tensor->value.cols());
  stale_ = was_stale;
}

void VitModel::refresh() {
  const Index dh = cfg_.head_dim();
  auto build_bank = [&](const std::vector<std::vector<std::array<Tensor, 2>>>& gens) {
    OproBank bank(static_cast<int>(gens.size()), adapter_cfg_.panel_count, dh, adapter_cfg_.opro_rank,
                  0.0, 0);
    for (std::size_t l = 0; l < gens.size(); ++l) {
      for (std::size_t p = 0; p < gens[l].size(); ++p) {
        bank.set_generator(static_cast<int>(l), static_cast<int>(p),
                           LowRankGenerator{gens[l][p][0].value, gens[l][p][1].value});
      }
    }
    bank.refresh_cache();
    return bank;
  };
  if (!opro_gens_.empty()) opro_bank_ = build_bank(opro_gens_);
  if (!asym_u_.empty()) asym_bank_ = AsymOproBank{build_bank(asym_u_), build_bank(asym_v_)};

  liere_rot_.clear();
  liere_gen_.clear();
  if (liere_wx_) {
    LieReGenerators gens{liere_wx_->value - liere_wx_->value.transpose(),
                         liere_wy_->value - liere_wy_->value.transpose()};
    for (const Coord2D& c : coords_) {
      liere_gen_.push_back(gens.generator_at(c));
      liere_rot_.push_back(matrix_exp(liere_gen_.back()).data());
    }
  }
  stale_ = false;
}

const OproBank& VitModel::opro_bank() const {
  if (!opro_bank_) throw ConfigError("model has no OPRO adapters attached");
  return *opro_bank_;
}

const AsymOproBank& VitModel::asym_bank() const {
  if (!asym_bank_) throw ConfigError("model has no Asym-OPRO adapters attached");
  return *asym_bank_;
}

std::uint64_t VitModel::group_hash(ParamGroup group) const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& r : param_views()) {
    if (r.group != group) continue;
    mix(r.name.data(), r.name.size());
    mix(r.tensor->value.data(), sizeof(double) * static_cast<std::size_t>(r.tensor->value.size()));
  }
  return h;
}

std::size_t VitModel::param_count(ParamGroup group) const {
  std::size_t n = 0;
  for (const auto& r : param_views()) {
    if (r.group == group) n += static_cast<std::size_t>(r.tensor->value.size());
  }
  return n;
}

PanelMap panel_map_for(const VitConfig& cfg, int grid) {
  if (grid <= 0) throw ParameterError("grid size must be positive");
  return PanelMap::tiled(cfg.grid_side(), grid, cfg.pooling == Pooling::ClassToken);
}

}  // namespace opro
