#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "opro/optim.hpp"
#include "opro/vit.hpp"

namespace opro {

enum class Precision { Float, Double };

struct OptimConfig {
  double lr = 1e-3;
  ScheduleKind schedule = ScheduleKind::WarmupCosine;
  double warmup_fraction = 0.05;
  AdamConfig adam{0.9, 0.999, 1e-8, 0.05, 1.0};
};

/// Everything that determines a training run.
struct RunConfig {
  VitConfig model;
  AdapterConfig adapter;
  OptimConfig optim;
  int grid = 1;  // 1 for Stage 1, n for an n×n Stage-2 canvas
  int batch_size = 32;
  int steps = 4000;
  int eval_every = 250;
  int log_every = 50;
  int eval_limit = 1000;  // validation samples used per evaluation
  std::uint64_t seed = 0;
  Precision precision = Precision::Float;
  bool deterministic = false;
  std::filesystem::path train_data;
  std::filesystem::path val_data;
  std::filesystem::path stage1_checkpoint;
  std::filesystem::path out_dir;

  /// Desk-scale Stage-1 defaults (full training, warmup + cosine).
  static RunConfig stage1_defaults();
  /// Desk-scale Stage-2 defaults (frozen backbone, constant learning rate).
  static RunConfig stage2_defaults(Regime regime, int grid);

  /// ConfigError on inconsistent fields.
  void validate() const;
  LrSchedule schedule() const;
};

nlohmann::json to_json(const VitConfig& c);
nlohmann::json to_json(const AdapterConfig& c);
nlohmann::json to_json(const RunConfig& c);
/// Fields absent from `j` keep the values already in `out`. ConfigError on bad values.
void from_json(const nlohmann::json& j, VitConfig& out);
void from_json(const nlohmann::json& j, AdapterConfig& out);
void from_json(const nlohmann::json& j, RunConfig& out);

/// Reads a JSON run config on top of `base`. FileError if unreadable.
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base);

/// FNV-1a over the canonical JSON text, as 16 hex digits.
std::string hash_json(const nlohmann::json& j);

}  // namespace opro
