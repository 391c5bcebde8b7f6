#include "opro/optim.hpp"

#include <cmath>

#include "opro/errors.hpp"

namespace opro {

std::string_view to_string(ScheduleKind k) { return k == ScheduleKind::Constant ? "constant" : "warmup-cosine"; }

ScheduleKind parse_schedule(std::string_view text) {
  if (text == "constant") return ScheduleKind::Constant;
  if (text == "warmup-cosine") return ScheduleKind::WarmupCosine;
  throw ConfigError("unknown learning-rate schedule '" + std::string(text) + "' (expected constant|warmup-cosine)");
}

double LrSchedule::at(int step) const {
  if (kind == ScheduleKind::Constant) return base;
  if (step < warmup_steps) return base * (step + 1) / static_cast<double>(warmup_steps);
  const int span = std::max(1, total_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
  return floor + 0.5 * (base - floor) * (1.0 + std::cos(M_PI * progress));
}

double Adam::step(VitModel& model, double lr) {
  std::vector<ParamRef> params;
  for (auto& r : model.mutable_params()) {
    if (model.trainable(r.group)) params.push_back(r);
  }
  double sq = 0.0;
  for (const auto& r : params) sq += r.tensor->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) {
    model.refresh();
    throw NumericError("non-finite gradient norm at optimizer step " + std::to_string(t_ + 1));
  }
  const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (auto& r : params) {
    Tensor& t = *r.tensor;
    auto [it, fresh] = state_.try_emplace(r.name);
    AdamMoments& s = it->second;
    if (fresh || s.m.rows() != t.value.rows() || s.m.cols() != t.value.cols()) {
      s.m = Mat::Zero(t.value.rows(), t.value.cols());
      s.v = Mat::Zero(t.value.rows(), t.value.cols());
    }
    const Mat g = t.grad * clip;
    s.m = cfg_.beta1 * s.m + (1.0 - cfg_.beta1) * g;
    s.v = cfg_.beta2 * s.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    if (cfg_.weight_decay > 0.0 && r.group != ParamGroup::Encoder && t.value.rows() > 1 && t.value.cols() > 1) {
      t.value *= (1.0 - lr * cfg_.weight_decay);
    }
    t.value.array() -= lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + cfg_.eps);
  }
  model.refresh();
  return norm;
}

}  // namespace opro
