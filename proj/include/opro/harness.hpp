#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>

#include "opro/bench.hpp"
#include "opro/config.hpp"
#include "opro/vit.hpp"

namespace opro {

struct MetricsRecord {
  int step = 0;
  std::string split;  // "train" or "val"
  double loss = 0.0;
  double accuracy = 0.0;
  double wall_seconds = 0.0;
  std::map<std::string, std::size_t> params;  // trainable parameter counts by group

  nlohmann::json to_json() const;
};

struct TrainResult {
  double best_val_accuracy = 0.0;
  int best_step = 0;
  double final_val_accuracy = 0.0;
  double initial_val_accuracy = 0.0;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path summary;
};

/// Called with every metrics record as it is produced.
using MetricsSink = std::function<void(const MetricsRecord&)>;

/// Stage 1: train backbone, encoder and head from scratch. Writes
/// metrics.jsonl, best.ckpt, last.ckpt and summary.json to cfg.out_dir.
/// On a non-finite loss the run aborts with NumericError; last.ckpt then
/// holds the last evaluated state.
TrainResult train_stage1(const RunConfig& cfg, const MetricsSink& sink = {});

/// Stage 2: attach the regime's adapters to a Stage-1 checkpoint and train
/// only them (plus the head). ConfigError when the checkpoint is not a
/// Stage-1 backbone or its image size does not match the data; InvariantError
/// if a frozen group changed.
TrainResult finetune_stage2(const RunConfig& cfg, const MetricsSink& sink = {});

/// Top-1 accuracy and mean loss of a checkpoint over a dataset (read-only).
/// ParameterError on an empty dataset.
MetricsRecord evaluate(const VitModel& model, const Dataset& data, int grid, Precision precision = Precision::Float,
                       int batch_size = 64);
MetricsRecord evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                                  int grid, Precision precision = Precision::Float);

}  // namespace opro
