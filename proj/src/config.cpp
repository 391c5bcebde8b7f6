#include "opro/config.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "opro/errors.hpp"

namespace opro {

RunConfig RunConfig::stage1_defaults() {
  RunConfig c;
  c.adapter.regime = Regime::Full;
  // 0.02 is tuned for width 768; at width 64 it leaves attention near uniform for thousands of steps.
  c.model.init_std = 0.07;
  c.optim.lr = 1e-3;
  c.optim.schedule = ScheduleKind::WarmupCosine;
  c.steps = 6000;
  c.grid = 1;
  return c;
}

RunConfig RunConfig::stage2_defaults(Regime regime, int grid) {
  RunConfig c;
  c.adapter.regime = regime;
  c.adapter.panel_count = grid * grid;
  c.optim.lr = 5e-4;
  c.optim.schedule = ScheduleKind::Constant;
  c.optim.warmup_fraction = 0.0;
  c.steps = 1500;
  c.grid = grid;
  return c;
}

void RunConfig::validate() const {
  model.validate();
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (eval_every <= 0 || log_every <= 0) throw ConfigError("eval_every and log_every must be positive");
  if (eval_limit <= 0) throw ConfigError("eval_limit must be positive");
  if (grid < 1 || grid > 4) throw ConfigError("grid must be in [1, 4]");
  if (!(optim.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (optim.warmup_fraction < 0.0 || optim.warmup_fraction >= 1.0) throw ConfigError("warmup_fraction must be in [0, 1)");
  if (adapter.regime != Regime::Full && adapter.panel_count != grid * grid) {
    throw ConfigError("adapter panel_count " + std::to_string(adapter.panel_count) + " does not match a " +
                      std::to_string(grid) + "x" + std::to_string(grid) + " grid");
  }
  if (adapter.opro_sigma < 0.0) throw ConfigError("opro sigma must be non-negative");
}

LrSchedule RunConfig::schedule() const {
  LrSchedule s;
  s.kind = optim.schedule;
  s.base = optim.lr;
  s.total_steps = std::max(1, steps);
  s.warmup_steps = static_cast<int>(optim.warmup_fraction * steps);
  return s;
}

nlohmann::json to_json(const VitConfig& c) {
  return {{"image_size", c.image_size},       {"patch_size", c.patch_size},
          {"model_dim", c.model_dim},         {"head_count", c.head_count},
          {"layer_count", c.layer_count},     {"mlp_ratio", c.mlp_ratio},
          {"class_count", c.class_count},     {"encoder", std::string(to_string(c.encoder))},
          {"pooling", std::string(to_string(c.pooling))}, {"rope_base", c.rope_base},
          {"liere_init_scale", c.liere_init_scale}, {"init_std", c.init_std}};
}

nlohmann::json to_json(const AdapterConfig& c) {
  return {{"regime", std::string(to_string(c.regime))},
          {"panel_count", c.panel_count},
          {"lora_rank", c.lora_rank},
          {"lora_alpha", c.lora_alpha},
          {"opro_rank", c.opro_rank},
          {"opro_sigma", c.opro_sigma}};
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"model", to_json(c.model)},
          {"adapter", to_json(c.adapter)},
          {"optim",
           {{"lr", c.optim.lr},
            {"schedule", std::string(to_string(c.optim.schedule))},
            {"warmup_fraction", c.optim.warmup_fraction},
            {"beta1", c.optim.adam.beta1},
            {"beta2", c.optim.adam.beta2},
            {"eps", c.optim.adam.eps},
            {"weight_decay", c.optim.adam.weight_decay},
            {"clip_norm", c.optim.adam.clip_norm}}},
          {"grid", c.grid},
          {"batch_size", c.batch_size},
          {"steps", c.steps},
          {"eval_every", c.eval_every},
          {"log_every", c.log_every},
          {"eval_limit", c.eval_limit},
          {"seed", c.seed},
          {"precision", c.precision == Precision::Float ? "float" : "double"},
          {"deterministic", c.deterministic},
          {"train_data", c.train_data.string()},
          {"val_data", c.val_data.string()},
          {"stage1_checkpoint", c.stage1_checkpoint.string()},
          {"out_dir", c.out_dir.string()}};
}

namespace {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

void take_path(const nlohmann::json& j, const char* key, std::filesystem::path& out) {
  std::string s = out.string();
  take(j, key, s);
  out = s;
}

}  // namespace

void from_json(const nlohmann::json& j, VitConfig& c) {
  take(j, "image_size", c.image_size);
  take(j, "patch_size", c.patch_size);
  take(j, "model_dim", c.model_dim);
  take(j, "head_count", c.head_count);
  take(j, "layer_count", c.layer_count);
  take(j, "mlp_ratio", c.mlp_ratio);
  take(j, "class_count", c.class_count);
  std::string enc(to_string(c.encoder));
  take(j, "encoder", enc);
  c.encoder = parse_encoder(enc);
  std::string pool(to_string(c.pooling));
  take(j, "pooling", pool);
  c.pooling = parse_pooling(pool);
  take(j, "rope_base", c.rope_base);
  take(j, "liere_init_scale", c.liere_init_scale);
  take(j, "init_std", c.init_std);
}

void from_json(const nlohmann::json& j, AdapterConfig& c) {
  std::string regime(to_string(c.regime));
  take(j, "regime", regime);
  try {
    c.regime = parse_regime(regime);
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  take(j, "panel_count", c.panel_count);
  take(j, "lora_rank", c.lora_rank);
  take(j, "lora_alpha", c.lora_alpha);
  take(j, "opro_rank", c.opro_rank);
  take(j, "opro_sigma", c.opro_sigma);
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  if (j.contains("model")) from_json(j.at("model"), c.model);
  if (j.contains("adapter")) from_json(j.at("adapter"), c.adapter);
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    take(o, "lr", c.optim.lr);
    std::string sched(to_string(c.optim.schedule));
    take(o, "schedule", sched);
    c.optim.schedule = parse_schedule(sched);
    take(o, "warmup_fraction", c.optim.warmup_fraction);
    take(o, "beta1", c.optim.adam.beta1);
    take(o, "beta2", c.optim.adam.beta2);
    take(o, "eps", c.optim.adam.eps);
    take(o, "weight_decay", c.optim.adam.weight_decay);
    take(o, "clip_norm", c.optim.adam.clip_norm);
  }
  take(j, "grid", c.grid);
  take(j, "batch_size", c.batch_size);
  take(j, "steps", c.steps);
  take(j, "eval_every", c.eval_every);
  take(j, "log_every", c.log_every);
  take(j, "eval_limit", c.eval_limit);
  take(j, "seed", c.seed);
  std::string prec = c.precision == Precision::Float ? "float" : "double";
  take(j, "precision", prec);
  if (prec == "float") c.precision = Precision::Float;
  else if (prec == "double") c.precision = Precision::Double;
  else throw ConfigError("precision must be float or double");
  take(j, "deterministic", c.deterministic);
  take_path(j, "train_data", c.train_data);
  take_path(j, "val_data", c.val_data);
  take_path(j, "stage1_checkpoint", c.stage1_checkpoint);
  take_path(j, "out_dir", c.out_dir);
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw FileError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  from_json(j, base);
  return base;
}

std::string hash_json(const nlohmann::json& j) {
  const std::string text = j.dump();
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

}  // namespace opro
