#pragma once

// Shared fixtures for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "opro/vit.hpp"

namespace opro::testing {

inline VitConfig tiny_config(EncoderKind enc = EncoderKind::Rope, Pooling pool = Pooling::Mean) {
  VitConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.model_dim = 32;
  cfg.head_count = 4;
  cfg.layer_count = 2;
  cfg.mlp_ratio = 2;
  cfg.class_count = 8;
  cfg.encoder = enc;
  cfg.pooling = pool;
  cfg.init_std = 0.2;
  return cfg;
}

inline std::vector<Image> random_images(const VitConfig& cfg, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> px(0, 255);
  std::vector<Image> out(count, Image(cfg.image_size * cfg.image_size));
  for (auto& img : out) {
    for (auto& v : img) v = static_cast<std::uint8_t>(px(rng));
  }
  return out;
}

inline std::vector<const Image*> pointers(const std::vector<Image>& images) {
  std::vector<const Image*> out;
  for (const auto& img : images) out.push_back(&img);
  return out;
}

/// Overwrite every tensor of `group` with N(0, std²) noise.
inline void randomize_group(VitModel& model, ParamGroup group, double std, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, std);
  for (auto& r : model.mutable_params()) {
    if (r.group != group) continue;
    for (Index i = 0; i < r.tensor->value.size(); ++i) r.tensor->value.data()[i] = n(rng);
  }
  model.refresh();
}

struct FdStats {
  int checked = 0;
  int failed = 0;
  double worst = 0.0;
};

/// Analytic gradient computed in precision T against central finite
/// differences of the double-precision loss, on up to `samples` coordinates.
/// A coordinate passes when |a - n| <= rel * max(|a|, |n|) + abs_floor.
template <typename T>
FdStats fd_check(VitModel& model, const std::vector<Image>& images, const std::vector<int>& labels,
                 const PanelMap& map, ParamGroup group, int samples, double eps, double rel, double abs_floor,
                 std::uint64_t seed) {
  const auto ptrs = pointers(images);
  model.zero_grads();
  loss_and_grads<T>(model, ptrs, labels, map);

  struct Coord {
    Tensor* t;
    Index i;
  };
  std::vector<Coord> coords;
  for (auto& r : model.mutable_params()) {
    if (r.group != group) continue;
    for (Index i = 0; i < r.tensor->value.size(); ++i) coords.push_back({r.tensor, i});
  }
  model.refresh();
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  if (static_cast<int>(coords.size()) > samples) coords.resize(samples);

  auto loss_at = [&]() {
    model.refresh();
    return cross_entropy<double>(forward<double>(model, ptrs, map), labels).loss;
  };
  FdStats st;
  for (const Coord& c : coords) {
    double& v = c.t->value.data()[c.i];
    const double orig = v;
    v = orig + eps;
    const double lp = loss_at();
    v = orig - eps;
    const double lm = loss_at();
    v = orig;
    const double numeric = (lp - lm) / (2 * eps);
    const double analytic = c.t->grad.data()[c.i];
    const double err = std::abs(analytic - numeric);
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    ++st.checked;
    if (err > rel * scale + abs_floor) ++st.failed;
    if (scale > abs_floor) st.worst = std::max(st.worst, err / scale);
  }
  model.refresh();
  return st;
}

}  // namespace opro::testing
