#include "opro/panel_ops.hpp"

#include <cmath>
#include <string>

#include "opro/errors.hpp"
#include "opro/rng.hpp"

namespace opro {

void PanelMap::validate() const {
  if (panel_count <= 0) throw IndexError("panel map needs at least one panel");
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    const int p = assignment[i];
    if (p == kExempt) continue;
    if (p < 0 || p >= panel_count) {
      throw IndexError("token " + std::to_string(i) + " has panel id " + std::to_string(p) + " outside [0, " +
                       std::to_string(panel_count) + ")");
    }
  }
}

std::vector<std::vector<Index>> PanelMap::members() const {
  validate();
  std::vector<std::vector<Index>> out(panel_count);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] != kExempt) out[assignment[i]].push_back(static_cast<Index>(i));
  }
  return out;
}

PanelMap PanelMap::tiled(int grid_side, int n, bool leading_exempt) {
  if (grid_side <= 0 || n <= 0) throw ParameterError("tiled panel map needs positive grid side and panel count");
  PanelMap map;
  map.panel_count = n * n;
  if (leading_exempt) map.assignment.push_back(kExempt);
  for (int r = 0; r < grid_side; ++r) {
    const int pr = static_cast<int>(std::floor((r + 0.5) * n / grid_side));
    for (int c = 0; c < grid_side; ++c) {
      const int pc = static_cast<int>(std::floor((c + 0.5) * n / grid_side));
      map.assignment.push_back(pr * n + pc);
    }
  }
  return map;
}

OproBank::OproBank(int layers, int panels, Index dim, Index rank, double sigma, std::uint64_t seed)
    : dim_(dim), rank_(rank) {
  if (layers < 0 || panels < 0) throw ParameterError("OPRO bank needs non-negative layer and panel counts");
  gens_.resize(layers);
  for (int l = 0; l < layers; ++l) {
    gens_[l].reserve(panels);
    for (int p = 0; p < panels; ++p) {
      gens_[l].push_back(init_zero_interference(
          dim, rank, sigma, derive_seed(seed, {static_cast<std::uint64_t>(l), static_cast<std::uint64_t>(p)})));
    }
  }
  refresh_cache();
}

void OproBank::check(int layer, int panel) const {
  if (layer < 0 || layer >= layers() || panel < 0 || panel >= panels()) {
    throw IndexError("OPRO bank has no slot (layer " + std::to_string(layer) + ", panel " + std::to_string(panel) + ")");
  }
}

const LowRankGenerator& OproBank::generator(int layer, int panel) const {
  check(layer, panel);
  return gens_[layer][panel];
}

LowRankGenerator& OproBank::generator_mut(int layer, int panel) {
  check(layer, panel);
  fresh_ = false;
  return gens_[layer][panel];
}

void OproBank::set_generator(int layer, int panel, LowRankGenerator gen) {
  check(layer, panel);
  gen.validate();
  if (gen.dim() != dim_) throw ShapeError("generator dim does not match bank");
  gens_[layer][panel] = std::move(gen);
  fresh_ = false;
}

const OrthogonalOperator& OproBank::op(int layer, int panel) const {
  check(layer, panel);
  if (!fresh_) throw InvariantError("OPRO operator cache is stale; call refresh_cache() after updating generators");
  return cache_[layer][panel];
}

void OproBank::refresh_cache() {
  cache_.assign(gens_.size(), {});
  for (std::size_t l = 0; l < gens_.size(); ++l) {
    cache_[l].reserve(gens_[l].size());
    for (const auto& g : gens_[l]) cache_[l].push_back(operator_from(g));
  }
  fresh_ = true;
}

BlockDiagOproBank BlockDiagOproBank::zeros(int layers, int panels, Index dim) {
  if (dim % 2 != 0) throw ConfigError("OPRO-BD needs an even head dimension");
  BlockDiagOproBank bank;
  bank.phases.assign(layers, std::vector<Vec>(panels, Vec::Zero(dim / 2)));
  return bank;
}

Mat BlockDiagOproBank::op_matrix(int layer, int panel) const {
  const Vec& phi = phases.at(layer).at(panel);
  Mat m = Mat::Zero(2 * phi.size(), 2 * phi.size());
  for (Index k = 0; k < phi.size(); ++k) {
    const double c = std::cos(phi(k));
    const double s = std::sin(phi(k));
    m(2 * k, 2 * k) = c;
    m(2 * k, 2 * k + 1) = -s;
    m(2 * k + 1, 2 * k) = s;
    m(2 * k + 1, 2 * k + 1) = c;
  }
  return m;
}

AdditiveBiasBank AdditiveBiasBank::zeros(int layers, int panels, Index dim) {
  AdditiveBiasBank bank;
  bank.query_bias.assign(layers, std::vector<Vec>(panels, Vec::Zero(dim)));
  bank.key_bias.assign(layers, std::vector<Vec>(panels, Vec::Zero(dim)));
  return bank;
}

AsymOproBank AsymOproBank::zero_init(int layers, int panels, Index dim, Index rank, double sigma, std::uint64_t seed) {
  return AsymOproBank{OproBank(layers, panels, dim, rank, sigma, derive_seed(seed, {0})),
                      OproBank(layers, panels, dim, rank, sigma, derive_seed(seed, {1}))};
}

namespace {

void check_tokens(const Mat& q, const Mat& k, const PanelMap& map, Index dim) {
  if (q.rows() != map.size() || k.rows() != map.size()) {
    throw ShapeError("panel map covers " + std::to_string(map.size()) + " tokens, got " + std::to_string(q.rows()) +
                     " queries / " + std::to_string(k.rows()) + " keys");
  }
  if (q.cols() != dim || k.cols() != dim) {
    throw ShapeError("token vectors have dim " + std::to_string(q.cols()) + ", operators act on " + std::to_string(dim));
  }
  map.validate();
}

void check_panels(const PanelMap& map, int bank_panels) {
  if (map.panel_count > bank_panels) {
    throw IndexError("panel map uses " + std::to_string(map.panel_count) + " panels, bank holds " +
                     std::to_string(bank_panels));
  }
}

// Row form of v ↦ M v for the rows assigned to each panel.
template <class OpFor>
Mat apply_per_panel(const Mat& x, const PanelMap& map, OpFor&& op_for) {
  Mat out = x;
  for (Index i = 0; i < map.size(); ++i) {
    const int p = map.assignment[i];
    if (p == PanelMap::kExempt) continue;
    out.row(i) = x.row(i) * op_for(p).transpose();
  }
  return out;
}

void rotate_rows_by_phase(Mat& x, Index row, const Vec& phi) {
  for (Index k = 0; k < phi.size(); ++k) {
    const double c = std::cos(phi(k));
    const double s = std::sin(phi(k));
    const double v0 = x(row, 2 * k);
    const double v1 = x(row, 2 * k + 1);
    x(row, 2 * k) = c * v0 - s * v1;
    x(row, 2 * k + 1) = s * v0 + c * v1;
  }
}

}  // namespace

QueryKey modulate(const Mat& q_tilde, const Mat& k_tilde, const PanelMap& map, const OproBank& bank, int layer) {
  check_tokens(q_tilde, k_tilde, map, bank.dim());
  check_panels(map, bank.panels());
  auto op_for = [&](int p) -> const Mat& { return bank.op(layer, p).data(); };
  return {apply_per_panel(q_tilde, map, op_for), apply_per_panel(k_tilde, map, op_for)};
}

OrthogonalOperator relative_operator(const OproBank& bank, int layer, int p_i, int p_j) {
  const Mat& ui = bank.op(layer, p_i).data();
  const Mat& uj = bank.op(layer, p_j).data();
  if (p_i == p_j) return OrthogonalOperator::identity(bank.dim());
  return OrthogonalOperator::from(ui.transpose() * uj);
}

QueryKey bd_modulate(const Mat& q_tilde, const Mat& k_tilde, const PanelMap& map, const BlockDiagOproBank& bank,
                     int layer) {
  if (q_tilde.cols() % 2 != 0) throw ConfigError("OPRO-BD needs an even head dimension");
  check_tokens(q_tilde, k_tilde, map, bank.dim());
  check_panels(map, bank.panels());
  if (layer < 0 || layer >= static_cast<int>(bank.phases.size())) throw IndexError("OPRO-BD layer out of range");
  QueryKey out{q_tilde, k_tilde};
  for (Index i = 0; i < map.size(); ++i) {
    const int p = map.assignment[i];
    if (p == PanelMap::kExempt) continue;
    rotate_rows_by_phase(out.first, i, bank.phases[layer][p]);
    rotate_rows_by_phase(out.second, i, bank.phases[layer][p]);
  }
  return out;
}

QueryKey apb_modulate(const Mat& q_tilde, const Mat& k_tilde, const PanelMap& map, const AdditiveBiasBank& bank,
                      int layer) {
  if (layer < 0 || layer >= static_cast<int>(bank.query_bias.size())) throw IndexError("APB layer out of range");
  const Index dim = bank.query_bias[layer].empty() ? 0 : bank.query_bias[layer][0].size();
  check_tokens(q_tilde, k_tilde, map, dim);
  check_panels(map, bank.panels());
  QueryKey out{q_tilde, k_tilde};
  for (Index i = 0; i < map.size(); ++i) {
    const int p = map.assignment[i];
    if (p == PanelMap::kExempt) continue;
    out.first.row(i) += bank.query_bias[layer][p].transpose();
    out.second.row(i) += bank.key_bias[layer][p].transpose();
  }
  return out;
}

QueryKey asym_modulate(const Mat& q_tilde, const Mat& k_tilde, const PanelMap& map, const AsymOproBank& bank,
                       int layer) {
  check_tokens(q_tilde, k_tilde, map, bank.query_ops.dim());
  check_panels(map, std::min(bank.query_ops.panels(), bank.key_ops.panels()));
  auto u_for = [&](int p) -> const Mat& { return bank.query_ops.op(layer, p).data(); };
  auto v_for = [&](int p) -> const Mat& { return bank.key_ops.op(layer, p).data(); };
  return {apply_per_panel(q_tilde, map, u_for), apply_per_panel(k_tilde, map, v_for)};
}

}  // namespace opro
