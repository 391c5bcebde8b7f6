#include "opro/accounting.hpp"

#include "opro/errors.hpp"

namespace opro {

std::uint64_t opro_param_count(std::uint64_t head_dim, std::uint64_t rank, std::uint64_t panels,
                               std::uint64_t layers) {
  return 2 * head_dim * rank * panels * layers;
}

std::uint64_t lora_param_count(std::uint64_t model_dim, std::uint64_t rank, std::uint64_t projections,
                               std::uint64_t layers) {
  return 2 * model_dim * rank * projections * layers;
}

std::map<std::string, std::uint64_t> count_params(const VitConfig& m, const AdapterConfig& a) {
  m.validate();
  const std::uint64_t d = m.model_dim;
  const std::uint64_t dh = m.head_dim();
  const std::uint64_t layers = m.layer_count;
  const std::uint64_t hidden = d * m.mlp_ratio;
  const std::uint64_t tokens = m.token_count();
  const std::uint64_t panels = a.panel_count;

  std::uint64_t backbone = m.patch_area() * d + d;
  if (m.pooling == Pooling::ClassToken) backbone += d;
  const std::uint64_t per_layer = 2 * d + 4 * (d * d + d) + 2 * d + d * hidden + hidden + hidden * d + d;
  backbone += layers * per_layer + 2 * d;

  std::uint64_t encoder = 0;
  switch (m.encoder) {
    case EncoderKind::Ape: encoder = tokens * d; break;
    case EncoderKind::Liere: encoder = 2 * dh * dh; break;
    case EncoderKind::Comrope: encoder = dh; break;
    case EncoderKind::Rope: break;
  }
  const std::uint64_t head = d * d + d + d * m.class_count + m.class_count;

  std::map<std::string, std::uint64_t> out = {{"backbone", backbone}, {"encoder", encoder}, {"head", head},
                                              {"lora", 0}, {"opro", 0}, {"opro-bd", 0}, {"apb", 0}, {"asym", 0}};
  if (uses_lora(a.regime)) out["lora"] = lora_param_count(d, a.lora_rank, 4, layers);
  switch (a.regime) {
    case Regime::LoraOpro: out["opro"] = opro_param_count(dh, a.opro_rank, panels, layers); break;
    case Regime::LoraAsym: out["asym"] = 2 * opro_param_count(dh, a.opro_rank, panels, layers); break;
    case Regime::LoraOproBd: out["opro-bd"] = dh / 2 * panels * layers; break;
    case Regime::LoraApb: out["apb"] = 2 * dh * panels * layers; break;
    default: break;
  }
  return out;
}

CostReport flops_delta(const CostInputs& in) {
  if (in.panels == 0 || in.heads == 0 || in.head_dim == 0 || in.tokens == 0 || in.layers == 0 || in.steps == 0) {
    throw ParameterError("cost inputs must all be positive integers");
  }
  CostReport r;
  r.inputs = in;
  if (r.inputs.operators == 0) r.inputs.operators = in.panels * in.layers;
  const double dh = static_cast<double>(in.head_dim);
  r.delta_flops = 2.0 * static_cast<double>(in.panels) * static_cast<double>(in.heads) * dh * dh *
                  static_cast<double>(in.tokens) * static_cast<double>(in.layers) * static_cast<double>(in.steps);
  r.exp_flops = static_cast<double>(r.inputs.operators) * 2.0 * dh * dh * dh * static_cast<double>(kMatmulsPerExp);
  return r;
}

}  // namespace opro
