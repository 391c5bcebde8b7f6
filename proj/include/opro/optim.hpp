#pragma once

#include <map>
#include <string>
#include <string_view>

#include "opro/vit.hpp"

namespace opro {

enum class ScheduleKind { Constant, WarmupCosine };

std::string_view to_string(ScheduleKind k);
ScheduleKind parse_schedule(std::string_view text);

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::Constant;
  double base = 1e-3;
  int warmup_steps = 0;
  int total_steps = 1;
  double floor = 0.0;

  /// Learning rate for 0-based `step`.
  double at(int step) const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; weight matrices only, positional encoders excluded
  double clip_norm = 0.0;     // global gradient-norm clip, 0 disables
};

struct AdamMoments {
  Mat m;
  Mat v;
};

/// Adam over the trainable tensors of a model. State is keyed by parameter name.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// One update with learning rate `lr`; refreshes the model afterwards.
  /// Returns the pre-clip global gradient norm.
  double step(VitModel& model, double lr);

  int steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  const std::map<std::string, AdamMoments>& moments() const { return state_; }
  void restore(int steps, std::map<std::string, AdamMoments> state) {
    t_ = steps;
    state_ = std::move(state);
  }

 private:
  AdamConfig cfg_;
  int t_ = 0;
  std::map<std::string, AdamMoments> state_;
};

}  // namespace opro
