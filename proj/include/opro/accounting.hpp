#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "opro/vit.hpp"

namespace opro {

/// Exponential cost model: series terms plus squarings at the 128-dim scale.
inline constexpr std::uint64_t kMatmulsPerExp = 14;

/// 2 · d_h · ρ · P · layers (one L and one R per panel per layer).
std::uint64_t opro_param_count(std::uint64_t head_dim, std::uint64_t rank, std::uint64_t panels, std::uint64_t layers);
/// 2 · model_dim · r · projections · layers.
std::uint64_t lora_param_count(std::uint64_t model_dim, std::uint64_t rank, std::uint64_t projections,
                               std::uint64_t layers);

/// Per-group parameter counts of a model with the given adapters, derived
/// from the configuration alone.
std::map<std::string, std::uint64_t> count_params(const VitConfig& model, const AdapterConfig& adapters);

struct CostInputs {
  std::uint64_t panels = 0;
  std::uint64_t heads = 0;
  std::uint64_t head_dim = 0;
  std::uint64_t tokens = 0;
  std::uint64_t layers = 0;
  std::uint64_t steps = 0;
  std::uint64_t operators = 0;  // exponentials per refresh; 0 means panels · layers
};

struct CostReport {
  double delta_flops = 0.0;
  double exp_flops = 0.0;
  CostInputs inputs;
};

/// delta_flops = 2 · panels · heads · d_h² · tokens · layers · steps;
/// exp_flops = operators · 2 · d_h³ · kMatmulsPerExp. ParameterError on zero inputs.
CostReport flops_delta(const CostInputs& in);

}  // namespace opro
