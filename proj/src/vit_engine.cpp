#include <cmath>
#include <limits>
#include <sstream>

#include "opro/errors.hpp"
#include "opro/vit.hpp"

namespace opro {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowV = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <typename T>
MatR<T> cast(const Tensor& t) {
  return t.value.cast<T>();
}

template <typename T>
void accumulate(Tensor& t, const MatR<T>& g) {
  t.grad += g.template cast<double>();
}

constexpr double kLnEps = 1e-5;

template <typename T>
T gelu(T u) {
  constexpr T c = T(0.7978845608028654);
  const T inner = c * (u + T(0.044715) * u * u * u);
  return T(0.5) * u * (T(1) + std::tanh(inner));
}

template <typename T>
T gelu_grad(T u) {
  constexpr T c = T(0.7978845608028654);
  const T inner = c * (u + T(0.044715) * u * u * u);
  const T t = std::tanh(inner);
  return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * u * u);
}

// Row-wise layer norm; keeps xhat and 1/σ for the backward pass.
template <typename T>
void layer_norm(const MatR<T>& x, const MatR<T>& g, const MatR<T>& b, MatR<T>& y, MatR<T>& xhat,
                Eigen::Matrix<T, Eigen::Dynamic, 1>& rstd) {
  const Index n = x.rows();
  const Index d = x.cols();
  xhat.resize(n, d);
  y.resize(n, d);
  rstd.resize(n);
  for (Index r = 0; r < n; ++r) {
    const T mean = x.row(r).sum() / T(d);
    const T var = (x.row(r).array() - mean).square().sum() / T(d);
    const T rs = T(1) / std::sqrt(var + T(kLnEps));
    rstd(r) = rs;
    xhat.row(r) = (x.row(r).array() - mean) * rs;
    y.row(r) = xhat.row(r).cwiseProduct(g) + b;
  }
}

template <typename T>
MatR<T> layer_norm_backward(const MatR<T>& dy, const MatR<T>& xhat, const Eigen::Matrix<T, Eigen::Dynamic, 1>& rstd,
                            const MatR<T>& g, MatR<T>* dg, MatR<T>* db) {
  const Index n = dy.rows();
  const Index d = dy.cols();
  if (dg) *dg += (dy.cwiseProduct(xhat)).colwise().sum();
  if (db) *db += dy.colwise().sum();
  MatR<T> dx(n, d);
  for (Index r = 0; r < n; ++r) {
    const RowV<T> dxhat = dy.row(r).cwiseProduct(g);
    const T m1 = dxhat.sum() / T(d);
    const T m2 = dxhat.cwiseProduct(xhat.row(r)).sum() / T(d);
    dx.row(r) = rstd(r) * (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix();
  }
  return dx;
}

template <typename T>
struct LoraW {
  MatR<T> down, up;
  T scale = T(1);
};

template <typename T>
struct LayerW {
  MatR<T> ln1_g, ln1_b, ln2_g, ln2_b;
  std::array<MatR<T>, 4> w, b;
  std::array<std::optional<LoraW<T>>, 4> lora;
  MatR<T> w1, b1, w2, b2;
};

template <typename T>
struct LayerCache {
  MatR<T> xhat1, h1, xhat2, h2;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd1, rstd2;
  std::array<MatR<T>, 4> lora_mid;
  MatR<T> q_raw, k_raw, v, q_pos, k_pos, q_hat, k_hat;
  MatR<T> probs;
  MatR<T> attn;
  MatR<T> u, act;
};

enum class Adapter { None, Opro, Asym, Bd, Apb };

// Forward/backward engine for one model snapshot. Parameters are cast to T at
// construction; gradients are accumulated back into the double master copies.
template <typename T>
class Engine {
 public:
  Engine(const VitModel& model, const PanelMap& map) : model_(model), cfg_(model.config()), map_(map) {
    if (model.stale()) throw InvariantError("model caches are stale; call refresh() after updating parameters");
    if (map.size() != cfg_.token_count()) {
      throw ShapeError("panel map covers " + std::to_string(map.size()) + " tokens, model has " +
                       std::to_string(cfg_.token_count()));
    }
    map.validate();
    tokens_ = cfg_.token_count();
    dim_ = cfg_.model_dim;
    heads_ = cfg_.head_count;
    dh_ = cfg_.head_dim();
    cls_offset_ = cfg_.pooling == Pooling::ClassToken ? 1 : 0;

    patch_w_ = cast<T>(model.patch_w());
    patch_b_ = cast<T>(model.patch_b());
    if (model.cls_token()) cls_ = cast<T>(*model.cls_token());
    if (model.ape_table()) ape_ = cast<T>(*model.ape_table());
    for (const auto& layer : model.layers()) {
      LayerW<T> w;
      w.ln1_g = cast<T>(layer.ln1_g);
      w.ln1_b = cast<T>(layer.ln1_b);
      w.ln2_g = cast<T>(layer.ln2_g);
      w.ln2_b = cast<T>(layer.ln2_b);
      for (int p = 0; p < 4; ++p) {
        w.w[p] = cast<T>(layer.w[p]);
        w.b[p] = cast<T>(layer.b[p]);
        if (layer.lora[p]) w.lora[p] = LoraW<T>{cast<T>(layer.lora[p]->down), cast<T>(layer.lora[p]->up),
                                                static_cast<T>(layer.lora[p]->scale)};
      }
      w.w1 = cast<T>(layer.mlp_w1);
      w.b1 = cast<T>(layer.mlp_b1);
      w.w2 = cast<T>(layer.mlp_w2);
      w.b2 = cast<T>(layer.mlp_b2);
      layers_.push_back(std::move(w));
    }
    lnf_g_ = cast<T>(model.final_ln_g());
    lnf_b_ = cast<T>(model.final_ln_b());
    hw1_ = cast<T>(model.head().w1);
    hb1_ = cast<T>(model.head().b1);
    hw2_ = cast<T>(model.head().w2);
    hb2_ = cast<T>(model.head().b2);

    build_positional();
    build_adapter();
  }

  const MatR<T>& forward(std::span<const Image* const> images, AttentionTrace<T>* trace) {
    batch_ = static_cast<Index>(images.size());
    if (batch_ == 0) throw ParameterError("forward: empty batch");
    patchify(images);
    const Index rows = batch_ * tokens_;

    // Embedding.
    MatR<T> x(rows, dim_);
    const Index np = cfg_.patch_tokens();
    {
      MatR<T> emb = patches_ * patch_w_;
      emb.rowwise() += patch_b_.row(0);
      for (Index b = 0; b < batch_; ++b) {
        if (cls_offset_) x.row(b * tokens_) = cls_.row(0);
        x.block(b * tokens_ + cls_offset_, 0, np, dim_) = emb.block(b * np, 0, np, dim_);
        if (ape_.size() > 0) x.block(b * tokens_, 0, tokens_, dim_) += ape_;
      }
    }

    caches_.assign(layers_.size(), LayerCache<T>{});
    for (std::size_t l = 0; l < layers_.size(); ++l) layer_forward(static_cast<int>(l), x);

    // Readout.
    layer_norm<T>(x, lnf_g_, lnf_b_, hf_, xhatf_, rstdf_);
    pooled_.resize(batch_, dim_);
    for (Index b = 0; b < batch_; ++b) {
      if (cfg_.pooling == Pooling::ClassToken) {
        pooled_.row(b) = hf_.row(b * tokens_);
      } else {
        pooled_.row(b) = hf_.block(b * tokens_, 0, tokens_, dim_).colwise().sum() / T(tokens_);
      }
    }
    z1_ = pooled_ * hw1_;
    z1_.rowwise() += hb1_.row(0);
    a1_ = z1_.unaryExpr([](T u) { return gelu(u); });
    logits_ = a1_ * hw2_;
    logits_.rowwise() += hb2_.row(0);

    if (trace) {
      trace->probs.clear();
      trace->scores.clear();
      for (auto& c : caches_) trace->probs.push_back(c.probs);
      trace->scores = scores_;
    }
    return logits_;
  }

  void backward(const MatR<T>& dlogits, VitModel& model) {
    const bool head = model.trainable(ParamGroup::Head);
    const bool backbone = model.trainable(ParamGroup::Backbone);
    const bool encoder = model.trainable(ParamGroup::Encoder);
    const bool lora = model.trainable(ParamGroup::Lora);
    const bool adapter = model.trainable(ParamGroup::Opro) || model.trainable(ParamGroup::Asym) ||
                         model.trainable(ParamGroup::OproBd) || model.trainable(ParamGroup::Apb);
    ClassifierHead& hd = model.head();
    if (head) {
      accumulate<T>(hd.w2, a1_.transpose() * dlogits);
      accumulate<T>(hd.b2, dlogits.colwise().sum());
    }
    if (!(backbone || encoder || lora || adapter) && !head) return;
    MatR<T> dz1 = (dlogits * hw2_.transpose()).cwiseProduct(z1_.unaryExpr([](T u) { return gelu_grad(u); }));
    if (head) {
      accumulate<T>(hd.w1, pooled_.transpose() * dz1);
      accumulate<T>(hd.b1, dz1.colwise().sum());
    }
    if (!(backbone || encoder || lora || adapter)) return;

    const MatR<T> dpooled = dz1 * hw1_.transpose();
    MatR<T> dhf = MatR<T>::Zero(batch_ * tokens_, dim_);
    for (Index b = 0; b < batch_; ++b) {
      if (cfg_.pooling == Pooling::ClassToken) {
        dhf.row(b * tokens_) = dpooled.row(b);
      } else {
        for (Index i = 0; i < tokens_; ++i) dhf.row(b * tokens_ + i) = dpooled.row(b) / T(tokens_);
      }
    }
    MatR<T> dg = MatR<T>::Zero(1, dim_), db = MatR<T>::Zero(1, dim_);
    MatR<T> dx = layer_norm_backward<T>(dhf, xhatf_, rstdf_, lnf_g_, backbone ? &dg : nullptr,
                                        backbone ? &db : nullptr);
    if (backbone) {
      accumulate<T>(model.final_ln_g(), dg);
      accumulate<T>(model.final_ln_b(), db);
    }

    init_adapter_grads();
    init_positional_grads();
    for (int l = static_cast<int>(layers_.size()) - 1; l >= 0; --l) layer_backward(l, dx, model);
    flush_adapter_grads(model);
    flush_positional_grads(model);

    // Embedding.
    const Index np = cfg_.patch_tokens();
    if (backbone) {
      MatR<T> demb(batch_ * np, dim_);
      MatR<T> dcls = MatR<T>::Zero(1, dim_);
      for (Index b = 0; b < batch_; ++b) {
        demb.block(b * np, 0, np, dim_) = dx.block(b * tokens_ + cls_offset_, 0, np, dim_);
        if (cls_offset_) dcls += dx.row(b * tokens_);
      }
      accumulate<T>(model.patch_w(), patches_.transpose() * demb);
      accumulate<T>(model.patch_b(), demb.colwise().sum());
      if (cls_offset_) accumulate<T>(*model.cls_token(), dcls);
    }
    if (encoder && ape_.size() > 0) {
      MatR<T> dape = MatR<T>::Zero(tokens_, dim_);
      for (Index b = 0; b < batch_; ++b) dape += dx.block(b * tokens_, 0, tokens_, dim_);
      accumulate<T>(*model.ape_table(), dape);
    }
  }

 private:
  void patchify(std::span<const Image* const> images) {
    const int size = cfg_.image_size;
    const int ps = cfg_.patch_size;
    const int g = cfg_.grid_side();
    const Index np = cfg_.patch_tokens();
    patches_.resize(batch_ * np, cfg_.patch_area());
    for (Index b = 0; b < batch_; ++b) {
      const Image& img = *images[b];
      if (static_cast<int>(img.size()) != size * size) {
        throw ShapeError("image has " + std::to_string(img.size()) + " pixels, expected " +
                         std::to_string(size * size));
      }
      for (int pr = 0; pr < g; ++pr) {
        for (int pc = 0; pc < g; ++pc) {
          const Index row = b * np + pr * g + pc;
          for (int y = 0; y < ps; ++y) {
            for (int x = 0; x < ps; ++x) {
              const std::uint8_t v = img[(pr * ps + y) * size + pc * ps + x];
              patches_(row, y * ps + x) = T(255 - v) / T(255);
            }
          }
        }
      }
    }
  }

  // ----- positional encoding at the attention level -----

  void build_positional() {
    const auto& coords = model_.coords();
    const Index blocks = dh_ / 2;
    switch (cfg_.encoder) {
      case EncoderKind::Rope:
      case EncoderKind::Comrope: {
        cos_.resize(tokens_, blocks);
        sin_.resize(tokens_, blocks);
        for (Index i = 0; i < tokens_; ++i) {
          for (Index k = 0; k < blocks; ++k) {
            double a = 0.0;
            if (cfg_.encoder == EncoderKind::Rope) {
              a = model_.frequencies().angle(k, coords[i]);
            } else {
              const Mat& r = model_.comrope_rates()->value;
              a = r(k, 0) * coords[i].x + r(k, 1) * coords[i].y;
            }
            cos_(i, k) = static_cast<T>(std::cos(a));
            sin_(i, k) = static_cast<T>(std::sin(a));
          }
        }
        break;
      }
      case EncoderKind::Liere:
        for (const Mat& r : model_.liere_rotations()) liere_t_.push_back(r.transpose().cast<T>());
        break;
      case EncoderKind::Ape:
        break;
    }
  }

  // Views a (rows x dim) matrix as (rows*heads x dh); row j is token j/heads % tokens.
  Eigen::Map<MatR<T>> heads_view(MatR<T>& m) const { return Eigen::Map<MatR<T>>(m.data(), m.rows() * heads_, dh_); }
  Eigen::Map<const MatR<T>> heads_view(const MatR<T>& m) const {
    return Eigen::Map<const MatR<T>>(m.data(), m.rows() * heads_, dh_);
  }
  Index token_of(Index head_row) const { return (head_row / heads_) % tokens_; }

  static void rotate_row(Eigen::Map<MatR<T>>& out, const Eigen::Map<const MatR<T>>& in, Index row,
                         const MatR<T>& cs, const MatR<T>& sn, Index idx, bool inverse) {
    for (Index k = 0; k < cs.cols(); ++k) {
      const T c = cs(idx, k);
      const T s = inverse ? -sn(idx, k) : sn(idx, k);
      const T v0 = in(row, 2 * k);
      const T v1 = in(row, 2 * k + 1);
      out(row, 2 * k) = c * v0 - s * v1;
      out(row, 2 * k + 1) = s * v0 + c * v1;
    }
  }

  MatR<T> positional_forward(const MatR<T>& raw) const {
    if (cfg_.encoder == EncoderKind::Ape) return raw;
    MatR<T> out(raw.rows(), raw.cols());
    auto in = heads_view(raw);
    auto o = heads_view(out);
    for (Index j = 0; j < in.rows(); ++j) {
      const Index i = token_of(j);
      if (cfg_.encoder == EncoderKind::Liere) {
        o.row(j).noalias() = in.row(j) * liere_t_[i];
      } else {
        rotate_row(o, in, j, cos_, sin_, i, false);
      }
    }
    return out;
  }

  // dpos is the gradient w.r.t. the encoded rows `pos`; `raw` is the input.
  MatR<T> positional_backward(const MatR<T>& dpos, const MatR<T>& pos, const MatR<T>& raw, bool encoder_grads) {
    if (cfg_.encoder == EncoderKind::Ape) return dpos;
    MatR<T> out(dpos.rows(), dpos.cols());
    auto din = heads_view(dpos);
    auto o = heads_view(out);
    auto y = heads_view(pos);
    auto x = heads_view(raw);
    for (Index j = 0; j < din.rows(); ++j) {
      const Index i = token_of(j);
      if (cfg_.encoder == EncoderKind::Liere) {
        // y = R x (column form) → dx = Rᵀ dy, dR += dy xᵀ.
        o.row(j).noalias() = din.row(j) * liere_t_[i].transpose();
        if (encoder_grads) liere_grad_[i].noalias() += din.row(j).transpose() * x.row(j);
      } else {
        rotate_row(o, din, j, cos_, sin_, i, true);
        if (encoder_grads && cfg_.encoder == EncoderKind::Comrope) {
          for (Index k = 0; k < dh_ / 2; ++k) {
            angle_grad_(i, k) += din(j, 2 * k + 1) * y(j, 2 * k) - din(j, 2 * k) * y(j, 2 * k + 1);
          }
        }
      }
    }
    return out;
  }

  void init_positional_grads() {
    encoder_grads_ = model_.trainable(ParamGroup::Encoder);
    if (!encoder_grads_) return;
    if (cfg_.encoder == EncoderKind::Liere) liere_grad_.assign(tokens_, MatR<T>::Zero(dh_, dh_));
    if (cfg_.encoder == EncoderKind::Comrope) angle_grad_ = MatR<T>::Zero(tokens_, dh_ / 2);
  }

  void flush_positional_grads(VitModel& model) {
    if (!encoder_grads_) return;
    const auto& coords = model.coords();
    if (cfg_.encoder == EncoderKind::Liere) {
      Mat dax = Mat::Zero(dh_, dh_), day = Mat::Zero(dh_, dh_);
      for (Index i = 0; i < tokens_; ++i) {
        const Mat g = liere_grad_[i].template cast<double>();
        const Mat dm = exp_backward(model.liere_generators()[i], g);
        dax += coords[i].x * dm;
        day += coords[i].y * dm;
      }
      model.liere_wx()->grad += dax - dax.transpose();
      model.liere_wy()->grad += day - day.transpose();
    }
    if (cfg_.encoder == EncoderKind::Comrope) {
      Mat drates = Mat::Zero(dh_ / 2, 2);
      for (Index i = 0; i < tokens_; ++i) {
        for (Index k = 0; k < dh_ / 2; ++k) {
          drates(k, 0) += coords[i].x * static_cast<double>(angle_grad_(i, k));
          drates(k, 1) += coords[i].y * static_cast<double>(angle_grad_(i, k));
        }
      }
      model.comrope_rates()->grad += drates;
    }
  }

  // ----- panel adapters -----

  void build_adapter() {
    const int panels = map_.panel_count;
    auto check_panels = [&](int have) {
      if (panels > have) {
        throw IndexError("panel map uses " + std::to_string(panels) + " panels, adapters cover " +
                         std::to_string(have));
      }
    };
    if (model_.has_opro()) {
      adapter_ = Adapter::Opro;
      const OproBank& bank = model_.opro_bank();
      check_panels(bank.panels());
      u_t_.resize(layers_.size());
      for (int l = 0; l < bank.layers(); ++l) {
        for (int p = 0; p < bank.panels(); ++p) u_t_[l].push_back(bank.op(l, p).data().transpose().cast<T>());
      }
    } else if (model_.has_asym()) {
      adapter_ = Adapter::Asym;
      const AsymOproBank& bank = model_.asym_bank();
      check_panels(bank.query_ops.panels());
      u_t_.resize(layers_.size());
      v_t_.resize(layers_.size());
      for (int l = 0; l < bank.query_ops.layers(); ++l) {
        for (int p = 0; p < bank.query_ops.panels(); ++p) {
          u_t_[l].push_back(bank.query_ops.op(l, p).data().transpose().cast<T>());
          v_t_[l].push_back(bank.key_ops.op(l, p).data().transpose().cast<T>());
        }
      }
    } else if (model_.has_bd()) {
      adapter_ = Adapter::Bd;
      check_panels(static_cast<int>(model_.bd_phases()[0].size()));
      for (const auto& layer : model_.bd_phases()) {
        MatR<T> cs(layer.size(), dh_ / 2), sn(layer.size(), dh_ / 2);
        for (std::size_t p = 0; p < layer.size(); ++p) {
          for (Index k = 0; k < dh_ / 2; ++k) {
            cs(p, k) = static_cast<T>(std::cos(layer[p].value(k, 0)));
            sn(p, k) = static_cast<T>(std::sin(layer[p].value(k, 0)));
          }
        }
        bd_cos_.push_back(std::move(cs));
        bd_sin_.push_back(std::move(sn));
      }
    } else if (model_.has_apb()) {
      adapter_ = Adapter::Apb;
      check_panels(static_cast<int>(model_.apb_query()[0].size()));
      for (std::size_t l = 0; l < model_.apb_query().size(); ++l) {
        MatR<T> bq(model_.apb_query()[l].size(), dh_), bk(model_.apb_key()[l].size(), dh_);
        for (std::size_t p = 0; p < model_.apb_query()[l].size(); ++p) {
          bq.row(p) = model_.apb_query()[l][p].value.transpose().cast<T>();
          bk.row(p) = model_.apb_key()[l][p].value.transpose().cast<T>();
        }
        apb_q_.push_back(std::move(bq));
        apb_k_.push_back(std::move(bk));
      }
    }
  }

  // which: 0 for queries, 1 for keys.
  MatR<T> adapter_forward(int layer, const MatR<T>& pos, int which) const {
    if (adapter_ == Adapter::None) return pos;
    MatR<T> out = pos;
    auto in = heads_view(pos);
    auto o = heads_view(out);
    for (Index j = 0; j < in.rows(); ++j) {
      const int p = map_.assignment[token_of(j)];
      if (p == PanelMap::kExempt) continue;
      switch (adapter_) {
        case Adapter::Opro:
          o.row(j).noalias() = in.row(j) * u_t_[layer][p];
          break;
        case Adapter::Asym:
          o.row(j).noalias() = in.row(j) * (which == 0 ? u_t_ : v_t_)[layer][p];
          break;
        case Adapter::Bd:
          rotate_row(o, in, j, bd_cos_[layer], bd_sin_[layer], p, false);
          break;
        case Adapter::Apb:
          o.row(j) += (which == 0 ? apb_q_ : apb_k_)[layer].row(p);
          break;
        case Adapter::None:
          break;
      }
    }
    return out;
  }

  void init_adapter_grads() {
    const int layers = static_cast<int>(layers_.size());
    const int panels = map_.panel_count;
    adapter_grads_ = false;
    switch (adapter_) {
      case Adapter::Opro:
        adapter_grads_ = model_.trainable(ParamGroup::Opro);
        break;
      case Adapter::Asym:
        adapter_grads_ = model_.trainable(ParamGroup::Asym);
        break;
      case Adapter::Bd:
        adapter_grads_ = model_.trainable(ParamGroup::OproBd);
        break;
      case Adapter::Apb:
        adapter_grads_ = model_.trainable(ParamGroup::Apb);
        break;
      case Adapter::None:
        break;
    }
    if (!adapter_grads_) return;
    const Index width = adapter_ == Adapter::Bd ? dh_ / 2 : dh_;
    const Index height = (adapter_ == Adapter::Opro || adapter_ == Adapter::Asym) ? dh_ : 1;
    grad_u_.assign(layers, std::vector<MatR<T>>(panels, MatR<T>::Zero(height, width)));
    grad_v_.assign(layers, std::vector<MatR<T>>(panels, MatR<T>::Zero(height, width)));
  }

  MatR<T> adapter_backward(int layer, const MatR<T>& dhat, const MatR<T>& pos, const MatR<T>& hat, int which) {
    if (adapter_ == Adapter::None) return dhat;
    MatR<T> out = dhat;
    auto din = heads_view(dhat);
    auto o = heads_view(out);
    auto x = heads_view(pos);
    auto y = heads_view(hat);
    for (Index j = 0; j < din.rows(); ++j) {
      const int p = map_.assignment[token_of(j)];
      if (p == PanelMap::kExempt) continue;
      switch (adapter_) {
        case Adapter::Opro:
        case Adapter::Asym: {
          const MatR<T>& ut = (adapter_ == Adapter::Asym && which == 1 ? v_t_ : u_t_)[layer][p];
          // ŷ = U x̃ (column form): dx̃ = Uᵀ dŷ, dU += dŷ x̃ᵀ.
          o.row(j).noalias() = din.row(j) * ut.transpose();
          if (adapter_grads_) {
            auto& g = (adapter_ == Adapter::Asym && which == 1 ? grad_v_ : grad_u_)[layer][p];
            g.noalias() += din.row(j).transpose() * x.row(j);
          }
          break;
        }
        case Adapter::Bd:
          rotate_row(o, din, j, bd_cos_[layer], bd_sin_[layer], p, true);
          if (adapter_grads_) {
            for (Index k = 0; k < dh_ / 2; ++k) {
              grad_u_[layer][p](0, k) += din(j, 2 * k + 1) * y(j, 2 * k) - din(j, 2 * k) * y(j, 2 * k + 1);
            }
          }
          break;
        case Adapter::Apb:
          if (adapter_grads_) (which == 0 ? grad_u_ : grad_v_)[layer][p] += din.row(j);
          break;
        case Adapter::None:
          break;
      }
    }
    return out;
  }

  void flush_adapter_grads(VitModel& model) {
    if (!adapter_grads_) return;
    const int layers = static_cast<int>(layers_.size());
    const int panels = map_.panel_count;
    for (int l = 0; l < layers; ++l) {
      for (int p = 0; p < panels; ++p) {
        switch (adapter_) {
          case Adapter::Opro: {
            auto& t = model.opro_tensors()[l][p];
            const GradientBundle g = operator_backward(LowRankGenerator{t[0].value, t[1].value},
                                                       grad_u_[l][p].template cast<double>());
            t[0].grad += g.grad_left;
            t[1].grad += g.grad_right;
            break;
          }
          case Adapter::Asym: {
            auto& tu = model.asym_u_tensors()[l][p];
            auto& tv = model.asym_v_tensors()[l][p];
            const GradientBundle gu = operator_backward(LowRankGenerator{tu[0].value, tu[1].value},
                                                        grad_u_[l][p].template cast<double>());
            const GradientBundle gv = operator_backward(LowRankGenerator{tv[0].value, tv[1].value},
                                                        grad_v_[l][p].template cast<double>());
            tu[0].grad += gu.grad_left;
            tu[1].grad += gu.grad_right;
            tv[0].grad += gv.grad_left;
            tv[1].grad += gv.grad_right;
            break;
          }
          case Adapter::Bd:
            model.bd_phases()[l][p].grad += grad_u_[l][p].transpose().template cast<double>();
            break;
          case Adapter::Apb:
            model.apb_query()[l][p].grad += grad_u_[l][p].transpose().template cast<double>();
            model.apb_key()[l][p].grad += grad_v_[l][p].transpose().template cast<double>();
            break;
          case Adapter::None:
            break;
        }
      }
    }
  }

  // ----- transformer block -----

  MatR<T> project(const LayerW<T>& w, int p, const MatR<T>& in, MatR<T>& mid) const {
    MatR<T> out = in * w.w[p];
    out.rowwise() += w.b[p].row(0);
    if (w.lora[p]) {
      mid = in * w.lora[p]->down;
      out.noalias() += w.lora[p]->scale * (mid * w.lora[p]->up);
    }
    return out;
  }

  void layer_forward(int l, MatR<T>& x) {
    const LayerW<T>& w = layers_[l];
    LayerCache<T>& c = caches_[l];
    layer_norm<T>(x, w.ln1_g, w.ln1_b, c.h1, c.xhat1, c.rstd1);
    c.q_raw = project(w, kQuery, c.h1, c.lora_mid[kQuery]);
    c.k_raw = project(w, kKey, c.h1, c.lora_mid[kKey]);
    c.v = project(w, kValue, c.h1, c.lora_mid[kValue]);
    c.q_pos = positional_forward(c.q_raw);
    c.k_pos = positional_forward(c.k_raw);
    c.q_hat = adapter_forward(l, c.q_pos, 0);
    c.k_hat = adapter_forward(l, c.k_pos, 1);

    const T scale = T(1) / std::sqrt(T(dh_));
    c.probs.resize(batch_ * heads_ * tokens_, tokens_);
    c.attn.resize(batch_ * tokens_, dim_);
    if (scores_.size() != layers_.size()) scores_.assign(layers_.size(), MatR<T>());
    scores_[l].resize(batch_ * heads_ * tokens_, tokens_);
    for (Index b = 0; b < batch_; ++b) {
      for (Index h = 0; h < heads_; ++h) {
        const auto qb = c.q_hat.block(b * tokens_, h * dh_, tokens_, dh_);
        const auto kb = c.k_hat.block(b * tokens_, h * dh_, tokens_, dh_);
        const auto vb = c.v.block(b * tokens_, h * dh_, tokens_, dh_);
        auto pb = c.probs.block((b * heads_ + h) * tokens_, 0, tokens_, tokens_);
        pb.noalias() = (qb * kb.transpose()) * scale;
        scores_[l].block((b * heads_ + h) * tokens_, 0, tokens_, tokens_) = pb;
        for (Index r = 0; r < tokens_; ++r) {
          const T m = pb.row(r).maxCoeff();
          pb.row(r) = (pb.row(r).array() - m).exp();
          pb.row(r) /= pb.row(r).sum();
        }
        c.attn.block(b * tokens_, h * dh_, tokens_, dh_).noalias() = pb * vb;
      }
    }
    MatR<T> out = project(w, kOutput, c.attn, c.lora_mid[kOutput]);
    x += out;

    layer_norm<T>(x, w.ln2_g, w.ln2_b, c.h2, c.xhat2, c.rstd2);
    c.u = c.h2 * w.w1;
    c.u.rowwise() += w.b1.row(0);
    c.act = c.u.unaryExpr([](T u) { return gelu(u); });
    MatR<T> m = c.act * w.w2;
    m.rowwise() += w.b2.row(0);
    x += m;
  }

  // Backward of one projection; returns d(in) contribution.
  MatR<T> project_backward(int l, int p, const MatR<T>& dout, const MatR<T>& in, VitModel& model, bool backbone,
                           bool lora) {
    const LayerW<T>& w = layers_[l];
    AttentionLayer& layer = model.layers()[l];
    if (backbone) {
      accumulate<T>(layer.w[p], in.transpose() * dout);
      accumulate<T>(layer.b[p], dout.colwise().sum());
    }
    MatR<T> din = dout * w.w[p].transpose();
    if (w.lora[p]) {
      const LoraW<T>& lw = *w.lora[p];
      const MatR<T>& mid = caches_[l].lora_mid[p];
      const MatR<T> dmid = lw.scale * (dout * lw.up.transpose());
      if (lora) {
        accumulate<T>(layer.lora[p]->up, lw.scale * (mid.transpose() * dout));
        accumulate<T>(layer.lora[p]->down, in.transpose() * dmid);
      }
      din.noalias() += dmid * lw.down.transpose();
    }
    return din;
  }

  void layer_backward(int l, MatR<T>& dx, VitModel& model) {
    const bool backbone = model.trainable(ParamGroup::Backbone);
    const bool lora = model.trainable(ParamGroup::Lora);
    const LayerW<T>& w = layers_[l];
    LayerCache<T>& c = caches_[l];
    AttentionLayer& layer = model.layers()[l];

    // MLP branch: x_out = x_mid + GELU(h2 W1 + b1) W2 + b2.
    if (backbone) {
      accumulate<T>(layer.mlp_w2, c.act.transpose() * dx);
      accumulate<T>(layer.mlp_b2, dx.colwise().sum());
    }
    MatR<T> du = (dx * w.w2.transpose()).cwiseProduct(c.u.unaryExpr([](T u) { return gelu_grad(u); }));
    if (backbone) {
      accumulate<T>(layer.mlp_w1, c.h2.transpose() * du);
      accumulate<T>(layer.mlp_b1, du.colwise().sum());
    }
    MatR<T> dh2 = du * w.w1.transpose();
    {
      MatR<T> dg = MatR<T>::Zero(1, dim_), db = MatR<T>::Zero(1, dim_);
      dx += layer_norm_backward<T>(dh2, c.xhat2, c.rstd2, w.ln2_g, backbone ? &dg : nullptr, backbone ? &db : nullptr);
      if (backbone) {
        accumulate<T>(layer.ln2_g, dg);
        accumulate<T>(layer.ln2_b, db);
      }
    }

    // Attention branch: x_mid = x_in + Proj_o(attn).
    const MatR<T> dattn = project_backward(l, kOutput, dx, c.attn, model, backbone, lora);
    const T scale = T(1) / std::sqrt(T(dh_));
    MatR<T> dq_hat(batch_ * tokens_, dim_), dk_hat(batch_ * tokens_, dim_), dv(batch_ * tokens_, dim_);
    for (Index b = 0; b < batch_; ++b) {
      for (Index h = 0; h < heads_; ++h) {
        const auto qb = c.q_hat.block(b * tokens_, h * dh_, tokens_, dh_);
        const auto kb = c.k_hat.block(b * tokens_, h * dh_, tokens_, dh_);
        const auto vb = c.v.block(b * tokens_, h * dh_, tokens_, dh_);
        const auto pb = c.probs.block((b * heads_ + h) * tokens_, 0, tokens_, tokens_);
        const auto dob = dattn.block(b * tokens_, h * dh_, tokens_, dh_);
        MatR<T> dp = dob * vb.transpose();
        dv.block(b * tokens_, h * dh_, tokens_, dh_).noalias() = pb.transpose() * dob;
        for (Index r = 0; r < tokens_; ++r) {
          const T dot = dp.row(r).dot(pb.row(r));
          dp.row(r) = pb.row(r).cwiseProduct((dp.row(r).array() - dot).matrix()) * scale;
        }
        dq_hat.block(b * tokens_, h * dh_, tokens_, dh_).noalias() = dp * kb;
        dk_hat.block(b * tokens_, h * dh_, tokens_, dh_).noalias() = dp.transpose() * qb;
      }
    }
    const MatR<T> dq_pos = adapter_backward(l, dq_hat, c.q_pos, c.q_hat, 0);
    const MatR<T> dk_pos = adapter_backward(l, dk_hat, c.k_pos, c.k_hat, 1);
    const MatR<T> dq_raw = positional_backward(dq_pos, c.q_pos, c.q_raw, encoder_grads_);
    const MatR<T> dk_raw = positional_backward(dk_pos, c.k_pos, c.k_raw, encoder_grads_);

    MatR<T> dh1 = project_backward(l, kQuery, dq_raw, c.h1, model, backbone, lora);
    dh1 += project_backward(l, kKey, dk_raw, c.h1, model, backbone, lora);
    dh1 += project_backward(l, kValue, dv, c.h1, model, backbone, lora);
    {
      MatR<T> dg = MatR<T>::Zero(1, dim_), db = MatR<T>::Zero(1, dim_);
      dx += layer_norm_backward<T>(dh1, c.xhat1, c.rstd1, w.ln1_g, backbone ? &dg : nullptr, backbone ? &db : nullptr);
      if (backbone) {
        accumulate<T>(layer.ln1_g, dg);
        accumulate<T>(layer.ln1_b, db);
      }
    }
  }

  const VitModel& model_;
  const VitConfig& cfg_;
  const PanelMap& map_;
  Index tokens_ = 0, dim_ = 0, heads_ = 0, dh_ = 0, cls_offset_ = 0, batch_ = 0;

  MatR<T> patch_w_, patch_b_, cls_, ape_;
  std::vector<LayerW<T>> layers_;
  MatR<T> lnf_g_, lnf_b_, hw1_, hb1_, hw2_, hb2_;

  MatR<T> cos_, sin_;
  std::vector<MatR<T>> liere_t_;
  bool encoder_grads_ = false;
  std::vector<MatR<T>> liere_grad_;
  MatR<T> angle_grad_;

  Adapter adapter_ = Adapter::None;
  std::vector<std::vector<MatR<T>>> u_t_, v_t_;
  std::vector<MatR<T>> bd_cos_, bd_sin_, apb_q_, apb_k_;
  bool adapter_grads_ = false;
  std::vector<std::vector<MatR<T>>> grad_u_, grad_v_;

  MatR<T> patches_;
  std::vector<LayerCache<T>> caches_;
  std::vector<MatR<T>> scores_;
  MatR<T> hf_, xhatf_;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstdf_;
  MatR<T> pooled_, z1_, a1_, logits_;
};

}  // namespace

template <typename T>
Logits<T> forward(const VitModel& model, std::span<const Image* const> images, const PanelMap& map,
                  AttentionTrace<T>* trace) {
  Engine<T> engine(model, map);
  return engine.forward(images, trace);
}

template <typename T>
LossResult cross_entropy(const Logits<T>& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows()) throw ShapeError("label count does not match batch");
  LossResult out;
  out.count = static_cast<int>(labels.size());
  double total = 0.0;
  for (Index b = 0; b < logits.rows(); ++b) {
    const int y = labels[b];
    if (y < 0 || y >= logits.cols()) throw ParameterError("label " + std::to_string(y) + " out of range");
    const double m = static_cast<double>(logits.row(b).maxCoeff());
    double z = 0.0;
    for (Index k = 0; k < logits.cols(); ++k) z += std::exp(static_cast<double>(logits(b, k)) - m);
    total += std::log(z) + m - static_cast<double>(logits(b, y));
    Index arg = 0;
    logits.row(b).maxCoeff(&arg);
    if (arg == y) ++out.correct;
  }
  out.loss = total / static_cast<double>(logits.rows());
  return out;
}

template <typename T>
LossResult loss_and_grads(VitModel& model, std::span<const Image* const> images, std::span<const int> labels,
                          const PanelMap& map) {
  if (images.size() != labels.size()) throw ShapeError("image and label counts differ");
  Engine<T> engine(model, map);
  const Logits<T>& logits = engine.forward(images, nullptr);
  LossResult res = cross_entropy<T>(logits, labels);
  if (!std::isfinite(res.loss)) {
    std::ostringstream msg;
    msg << "non-finite loss " << res.loss << " (max |logit| " << logits.cwiseAbs().maxCoeff() << ", batch "
        << labels.size() << ")";
    throw NumericError(msg.str());
  }
  // d(mean CE)/d logits = (softmax - onehot) / B.
  MatR<T> dlogits(logits.rows(), logits.cols());
  const T inv_b = T(1) / T(logits.rows());
  for (Index b = 0; b < logits.rows(); ++b) {
    const T m = logits.row(b).maxCoeff();
    RowV<T> e = (logits.row(b).array() - m).exp();
    e /= e.sum();
    e(labels[b]) -= T(1);
    dlogits.row(b) = e * inv_b;
  }
  engine.backward(dlogits, model);
  return res;
}

template Logits<float> forward<float>(const VitModel&, std::span<const Image* const>, const PanelMap&,
                                      AttentionTrace<float>*);
template Logits<double> forward<double>(const VitModel&, std::span<const Image* const>, const PanelMap&,
                                        AttentionTrace<double>*);
template LossResult cross_entropy<float>(const Logits<float>&, std::span<const int>);
template LossResult cross_entropy<double>(const Logits<double>&, std::span<const int>);
template LossResult loss_and_grads<float>(VitModel&, std::span<const Image* const>, std::span<const int>,
                                          const PanelMap&);
template LossResult loss_and_grads<double>(VitModel&, std::span<const Image* const>, std::span<const int>,
                                           const PanelMap&);

}  // namespace opro
