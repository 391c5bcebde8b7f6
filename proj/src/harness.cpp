#include "opro/harness.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

#include "opro/checkpoint.hpp"
#include "opro/errors.hpp"
#include "opro/rng.hpp"

namespace opro {

nlohmann::json MetricsRecord::to_json() const {
  return {{"step", step},         {"split", split},         {"loss", loss},
          {"accuracy", accuracy}, {"wall", wall_seconds},   {"params", params}};
}

namespace {

enum SeedTag : std::uint64_t { kSeedModel = 1, kSeedAdapters, kSeedShuffle };

const std::array<ParamGroup, 8> kGroups = {ParamGroup::Backbone, ParamGroup::Encoder, ParamGroup::Head,
                                           ParamGroup::Lora,     ParamGroup::Opro,    ParamGroup::OproBd,
                                           ParamGroup::Apb,      ParamGroup::Asym};

std::map<std::string, std::size_t> trainable_counts(const VitModel& model) {
  std::map<std::string, std::size_t> out;
  for (ParamGroup g : kGroups) {
    if (model.trainable(g) && model.param_count(g) > 0) out[std::string(to_string(g))] = model.param_count(g);
  }
  return out;
}

std::map<std::string, std::size_t> all_counts(const VitModel& model) {
  std::map<std::string, std::size_t> out;
  for (ParamGroup g : kGroups) out[std::string(to_string(g))] = model.param_count(g);
  return out;
}

LossResult train_step(VitModel& model, std::span<const Image* const> images, std::span<const int> labels,
                      const PanelMap& map, Precision p) {
  return p == Precision::Float ? loss_and_grads<float>(model, images, labels, map)
                               : loss_and_grads<double>(model, images, labels, map);
}

Dataset load_checked(const std::filesystem::path& dir, const VitConfig& model, std::optional<std::size_t> limit,
                     const char* what) {
  if (dir.empty()) throw ConfigError(std::string(what) + " dataset path is not set");
  Dataset ds = load_dataset(dir, limit);
  if (ds.size != model.image_size) {
    throw ConfigError(std::string(what) + " images are " + std::to_string(ds.size) + "px but the model expects " +
                      std::to_string(model.image_size) + "px");
  }
  return ds;
}

class Trainer {
 public:
  Trainer(const RunConfig& cfg, VitModel& model, const PanelMap& map, const Dataset& train, const Dataset& val,
          const MetricsSink& sink)
      : cfg_(cfg), model_(model), map_(map), train_(train), val_(val), sink_(sink), adam_(cfg.optim.adam) {
    std::filesystem::create_directories(cfg.out_dir);
    metrics_.open(cfg.out_dir / "metrics.jsonl");
    if (!metrics_) throw FileError("cannot write " + (cfg.out_dir / "metrics.jsonl").string());
    start_ = std::chrono::steady_clock::now();
  }

  TrainResult run() {
    TrainResult res;
    res.best_checkpoint = cfg_.out_dir / "best.ckpt";
    const LrSchedule sched = cfg_.schedule();
    const int bs = std::min<int>(cfg_.batch_size, static_cast<int>(train_.images.size()));

    res.initial_val_accuracy = eval(0, res);
    double loss_sum = 0.0;
    int correct = 0, seen = 0, window = 0;
    for (int step = 0; step < cfg_.steps; ++step) {
      std::vector<const Image*> imgs;
      std::vector<int> labels;
      for (int b = 0; b < bs; ++b) {
        const std::size_t idx = next_index();
        imgs.push_back(&train_.images[idx]);
        labels.push_back(train_.labels[idx]);
      }
      model_.zero_grads();
      LossResult r;
      try {
        r = train_step(model_, imgs, labels, map_, cfg_.precision);
        adam_.step(model_, sched.at(step));
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at step " + std::to_string(step + 1) + "; last good state in " +
                           (cfg_.out_dir / "last.ckpt").string());
      }
      if (step == 0) res.initial_train_loss = r.loss;
      loss_sum += r.loss;
      correct += r.correct;
      seen += r.count;
      ++window;
      if ((step + 1) % cfg_.log_every == 0 || step + 1 == cfg_.steps) {
        MetricsRecord m = record(step + 1, "train");
        m.loss = loss_sum / window;
        m.accuracy = static_cast<double>(correct) / seen;
        res.final_train_loss = m.loss;
        emit(m);
        loss_sum = 0.0;
        correct = seen = window = 0;
      }
      if ((step + 1) % cfg_.eval_every == 0 || step + 1 == cfg_.steps) res.final_val_accuracy = eval(step + 1, res);
    }
    if (cfg_.steps == 0) res.final_val_accuracy = res.initial_val_accuracy;
    return res;
  }

  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::size_t next_index() {
    if (cursor_ >= order_.size()) {
      order_.resize(train_.images.size());
      std::iota(order_.begin(), order_.end(), std::size_t{0});
      std::mt19937_64 rng(derive_seed(cfg_.seed, {kSeedShuffle, static_cast<std::uint64_t>(epoch_)}));
      std::shuffle(order_.begin(), order_.end(), rng);
      ++epoch_;
      cursor_ = 0;
    }
    return order_[cursor_++];
  }

  std::string rng_state() const {
    return nlohmann::json{{"epoch", epoch_}, {"cursor", cursor_}, {"seed", cfg_.seed}}.dump();
  }

  MetricsRecord record(int step, const char* split) const {
    MetricsRecord m;
    m.step = step;
    m.split = split;
    m.wall_seconds = elapsed();
    m.params = trainable_counts(model_);
    return m;
  }

  void emit(const MetricsRecord& m) {
    metrics_ << m.to_json().dump() << '\n';
    metrics_.flush();
    if (sink_) sink_(m);
  }

  double eval(int step, TrainResult& res) {
    MetricsRecord m = evaluate(model_, val_, cfg_.grid, cfg_.precision);
    MetricsRecord out = record(step, "val");
    out.loss = m.loss;
    out.accuracy = m.accuracy;
    emit(out);
    const nlohmann::json extra = {{"step", step}, {"val_accuracy", m.accuracy}, {"config", to_json(cfg_)}};
    save_checkpoint(cfg_.out_dir / "last.ckpt", model_, &adam_, rng_state(), extra);
    if (step == 0 || m.accuracy > res.best_val_accuracy) {
      res.best_val_accuracy = m.accuracy;
      res.best_step = step;
      save_checkpoint(res.best_checkpoint, model_, &adam_, rng_state(), extra);
    }
    return m.accuracy;
  }

  const RunConfig& cfg_;
  VitModel& model_;
  const PanelMap& map_;
  const Dataset& train_;
  const Dataset& val_;
  const MetricsSink& sink_;
  Adam adam_;
  std::ofstream metrics_;
  std::chrono::steady_clock::time_point start_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int epoch_ = 0;
};

void write_summary(const RunConfig& cfg, const VitModel& model, const TrainResult& res, int stage, double wall,
                   const nlohmann::json& more, TrainResult& out) {
  nlohmann::json config = to_json(cfg);
  config["model"] = to_json(model.config());
  nlohmann::json s = {{"stage", stage},
                      {"config", config},
                      {"config_hash", hash_json(config)},
                      {"seed", cfg.seed},
                      {"encoder", std::string(to_string(model.config().encoder))},
                      {"regime", std::string(to_string(model.regime()))},
                      {"grid", cfg.grid},
                      {"best_val_accuracy", res.best_val_accuracy},
                      {"best_step", res.best_step},
                      {"final_val_accuracy", res.final_val_accuracy},
                      {"initial_val_accuracy", res.initial_val_accuracy},
                      {"initial_train_loss", res.initial_train_loss},
                      {"final_train_loss", res.final_train_loss},
                      {"params", all_counts(model)},
                      {"trainable_params", trainable_counts(model)},
                      {"metrics", "metrics.jsonl"},
                      {"wall_seconds", wall}};
  if (more.is_object()) s.update(more);
  out.summary = cfg.out_dir / "summary.json";
  std::ofstream f(out.summary);
  if (!f) throw FileError("cannot write " + out.summary.string());
  f << s.dump(2) << '\n';
}

}  // namespace

TrainResult train_stage1(const RunConfig& cfg, const MetricsSink& sink) {
  cfg.validate();
  if (cfg.adapter.regime != Regime::Full) throw ConfigError("Stage 1 trains the full model; adapter regime must be full");
  if (cfg.grid != 1) throw ConfigError("Stage 1 uses single-panel images (grid 1)");
  const Dataset train = load_checked(cfg.train_data, cfg.model, std::nullopt, "training");
  const Dataset val = load_checked(cfg.val_data, cfg.model, static_cast<std::size_t>(cfg.eval_limit), "validation");

  VitModel model(cfg.model, derive_seed(cfg.seed, {kSeedModel}));
  model.set_trainable(Regime::Full);
  const PanelMap map = panel_map_for(cfg.model, 1);
  Trainer trainer(cfg, model, map, train, val, sink);
  TrainResult res = trainer.run();
  write_summary(cfg, model, res, 1, trainer.elapsed(), {}, res);
  return res;
}

TrainResult finetune_stage2(const RunConfig& cfg, const MetricsSink& sink) {
  cfg.validate();
  if (cfg.adapter.regime == Regime::Full) throw ConfigError("Stage 2 needs an adapter regime, not full");
  if (cfg.grid < 2) throw ConfigError("Stage 2 needs a grid of at least 2x2");
  if (cfg.stage1_checkpoint.empty()) throw ConfigError("Stage 2 needs a Stage-1 checkpoint");
  const CheckpointData ckpt = read_checkpoint(cfg.stage1_checkpoint);
  if (ckpt.adapters.regime != Regime::Full) {
    throw ConfigError("checkpoint " + cfg.stage1_checkpoint.string() + " holds a " +
                      std::string(to_string(ckpt.adapters.regime)) + " model, not a Stage-1 backbone");
  }
  VitModel model = restore_model(ckpt);
  const Dataset train = load_checked(cfg.train_data, model.config(), std::nullopt, "training");
  const Dataset val = load_checked(cfg.val_data, model.config(), static_cast<std::size_t>(cfg.eval_limit), "validation");
  for (const auto& rec : train.records) {
    if (rec.grid != cfg.grid) {
      throw ConfigError("training data is a " + std::to_string(rec.grid) + "x" + std::to_string(rec.grid) +
                        " set but the run expects grid " + std::to_string(cfg.grid));
    }
  }

  model.attach_adapters(cfg.adapter, derive_seed(cfg.seed, {kSeedAdapters}));
  std::map<std::string, std::uint64_t> frozen;
  for (ParamGroup g : kGroups) {
    if (!model.trainable(g)) frozen[std::string(to_string(g))] = model.group_hash(g);
  }

  const PanelMap map = panel_map_for(model.config(), cfg.grid);
  RunConfig run = cfg;
  run.model = model.config();
  Trainer trainer(run, model, map, train, val, sink);
  TrainResult res = trainer.run();

  for (ParamGroup g : kGroups) {
    const auto it = frozen.find(std::string(to_string(g)));
    if (it != frozen.end() && model.group_hash(g) != it->second) {
      throw InvariantError("frozen parameter group " + it->first + " changed during fine-tuning");
    }
  }
  nlohmann::json hashes = nlohmann::json::object();
  for (const auto& [name, h] : frozen) hashes[name] = h;
  write_summary(run, model, res, 2, trainer.elapsed(),
                {{"stage1_checkpoint", cfg.stage1_checkpoint.string()}, {"frozen_hashes", hashes},
                 {"frozen_unchanged", true}},
                res);
  return res;
}

MetricsRecord evaluate(const VitModel& model, const Dataset& data, int grid, Precision precision, int batch_size) {
  if (data.images.empty()) throw ParameterError("cannot evaluate on an empty dataset");
  if (batch_size <= 0) throw ParameterError("batch size must be positive");
  const PanelMap map = panel_map_for(model.config(), grid);
  MetricsRecord m;
  m.split = "val";
  double loss = 0.0;
  int correct = 0;
  const std::size_t n = data.images.size();
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    std::vector<const Image*> imgs;
    for (std::size_t i = start; i < end; ++i) imgs.push_back(&data.images[i]);
    const std::span<const int> labels(data.labels.data() + start, end - start);
    const LossResult r = precision == Precision::Float ? cross_entropy<float>(forward<float>(model, imgs, map), labels)
                                                       : cross_entropy<double>(forward<double>(model, imgs, map), labels);
    loss += r.loss * static_cast<double>(end - start);
    correct += r.correct;
  }
  m.loss = loss / static_cast<double>(n);
  m.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return m;
}

MetricsRecord evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                                  int grid, Precision precision) {
  const VitModel model = restore_model(read_checkpoint(checkpoint));
  const Dataset data = load_checked(data_dir, model.config(), std::nullopt, "evaluation");
  const int panels = grid * grid;
  if (model.regime() != Regime::Full && model.adapters().panel_count != panels) {
    throw ConfigError("checkpoint adapters cover " + std::to_string(model.adapters().panel_count) +
                      " panels, grid " + std::to_string(grid) + " needs " + std::to_string(panels));
  }
  return evaluate(model, data, grid, precision);
}

}  // namespace opro
