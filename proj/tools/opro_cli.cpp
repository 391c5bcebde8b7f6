#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "opro/accounting.hpp"
#include "opro/bench.hpp"
#include "opro/checkpoint.hpp"
#include "opro/config.hpp"
#include "opro/errors.hpp"
#include "opro/harness.hpp"
#include "opro/report.hpp"

namespace {

using opro::RunConfig;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> encoder;
  std::optional<std::string> adapter;
  std::optional<int> lora_rank;
  std::optional<int> opro_rank;
  std::optional<int> grid;
  std::string out;
  bool deterministic = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON run config");
  app->add_option("--seed", c.seed, "Base seed");
  app->add_option("--encoder", c.encoder, "ape | rope | liere | comrope");
  app->add_option("--adapter", c.adapter, "none | lora | lora+opro | lora+opro-bd | lora+apb | lora+asym");
  app->add_option("--lora-rank", c.lora_rank, "LoRA rank r");
  app->add_option("--opro-rank", c.opro_rank, "OPRO rank rho");
  app->add_option("--grid", c.grid, "Canvas grid side n");
  app->add_option("--out", c.out, "Output directory");
  app->add_flag("--deterministic", c.deterministic, "Single-threaded, fixed reduction order");
}

RunConfig resolve(RunConfig cfg, const Common& c) {
  if (!c.config.empty()) cfg = opro::load_run_config(c.config, cfg);
  if (c.seed) cfg.seed = *c.seed;
  if (c.encoder) cfg.model.encoder = opro::parse_encoder(*c.encoder);
  if (c.adapter) {
    try {
      cfg.adapter.regime = opro::parse_regime(*c.adapter);
    } catch (const opro::ParameterError& e) {
      throw opro::ConfigError(e.what());
    }
  }
  if (c.lora_rank) cfg.adapter.lora_rank = *c.lora_rank;
  if (c.opro_rank) cfg.adapter.opro_rank = *c.opro_rank;
  if (c.grid) {
    cfg.grid = *c.grid;
    cfg.adapter.panel_count = *c.grid * *c.grid;
  }
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.deterministic = cfg.deterministic || c.deterministic;
  if (cfg.deterministic) Eigen::setNbThreads(1);
  return cfg;
}

void stream(const opro::MetricsRecord& r) { std::cout << r.to_json().dump() << '\n' << std::flush; }

void print_result(const opro::TrainResult& r) {
  std::cout << nlohmann::json{{"best_val_accuracy", r.best_val_accuracy},
                              {"best_step", r.best_step},
                              {"final_val_accuracy", r.final_val_accuracy},
                              {"best_checkpoint", r.best_checkpoint.string()},
                              {"summary", r.summary.string()}}
                   .dump()
            << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OPRO adapters, panel benchmark and training harness"};
  app.require_subcommand(1);

  // gen-data
  Common gen_common;
  opro::DatasetSpec gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a benchmark dataset");
  add_common(gen_cmd, gen_common);
  gen_cmd->add_option("--stage", gen.stage, "1 or 2")->required();
  gen_cmd->add_option("--count", gen.count, "Number of samples")->required();
  gen_cmd->add_option("--size", gen.size, "Canvas side in pixels")->capture_default_str();
  gen_cmd->add_option("--min-distractors", gen.sampler.distractors_min)->capture_default_str();
  gen_cmd->add_option("--max-distractors", gen.sampler.distractors_max)->capture_default_str();
  gen_cmd->add_option("--anchor-fraction", gen.sampler.anchor_fraction, "Stage 1: share of panels with one arrow at 0")
      ->capture_default_str();

  // train-stage1
  Common s1_common;
  std::string s1_train, s1_val;
  std::optional<int> s1_steps, s1_batch, s1_eval_every;
  std::optional<std::string> s1_pooling;
  auto* s1_cmd = app.add_subcommand("train-stage1", "Pretrain backbone, encoder and head on single panels");
  add_common(s1_cmd, s1_common);
  s1_cmd->add_option("--train", s1_train, "Training dataset directory");
  s1_cmd->add_option("--val", s1_val, "Validation dataset directory");
  s1_cmd->add_option("--steps", s1_steps);
  s1_cmd->add_option("--batch-size", s1_batch);
  s1_cmd->add_option("--eval-every", s1_eval_every);
  s1_cmd->add_option("--pooling", s1_pooling, "mean | cls");

  // finetune-stage2
  Common s2_common;
  std::string s2_train, s2_val, s2_ckpt;
  std::optional<int> s2_steps, s2_batch, s2_eval_every;
  auto* s2_cmd = app.add_subcommand("finetune-stage2", "Train an adapter regime on a frozen Stage-1 checkpoint");
  add_common(s2_cmd, s2_common);
  s2_cmd->add_option("--checkpoint", s2_ckpt, "Stage-1 checkpoint");
  s2_cmd->add_option("--train", s2_train, "Training dataset directory");
  s2_cmd->add_option("--val", s2_val, "Validation dataset directory");
  s2_cmd->add_option("--steps", s2_steps);
  s2_cmd->add_option("--batch-size", s2_batch);
  s2_cmd->add_option("--eval-every", s2_eval_every);

  // eval
  Common ev_common;
  std::string ev_ckpt, ev_data;
  bool ev_double = false;
  auto* ev_cmd = app.add_subcommand("eval", "Top-1 accuracy and mean loss of a checkpoint");
  add_common(ev_cmd, ev_common);
  ev_cmd->add_option("--checkpoint", ev_ckpt)->required();
  ev_cmd->add_option("--data", ev_data)->required();
  ev_cmd->add_flag("--double", ev_double, "Evaluate in double precision");

  // count-params
  Common cp_common;
  std::optional<int> cp_head_dim, cp_panels, cp_layers;
  auto* cp_cmd = app.add_subcommand("count-params", "Parameter counts by group");
  add_common(cp_cmd, cp_common);
  cp_cmd->add_option("--head-dim", cp_head_dim, "Count only OPRO for this head dim");
  cp_cmd->add_option("--panels", cp_panels);
  cp_cmd->add_option("--layers", cp_layers);

  // flops
  Common fl_common;
  opro::CostInputs fl;
  auto* fl_cmd = app.add_subcommand("flops", "Added attention FLOPs and exponential cost");
  add_common(fl_cmd, fl_common);
  fl_cmd->add_option("--panels", fl.panels)->required();
  fl_cmd->add_option("--heads", fl.heads)->required();
  fl_cmd->add_option("--head-dim", fl.head_dim)->required();
  fl_cmd->add_option("--tokens", fl.tokens)->required();
  fl_cmd->add_option("--layers", fl.layers)->required();
  fl_cmd->add_option("--steps", fl.steps)->required();
  fl_cmd->add_option("--operators", fl.operators, "Exponentials per refresh (default panels x layers)");

  // report
  Common rp_common;
  auto* rp_cmd = app.add_subcommand("report", "Aggregate run summaries under --out");
  add_common(rp_cmd, rp_common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen_cmd) {
      gen.seed = gen_common.seed.value_or(0);
      gen.grid = gen.stage == 1 ? 1 : gen_common.grid.value_or(2);
      if (gen_common.out.empty()) throw opro::ConfigError("gen-data needs --out");
      const auto records = opro::generate_dataset(gen, gen_common.out);
      std::cout << nlohmann::json{{"count", records.size()},
                                  {"out", gen_common.out},
                                  {"config_hash", opro::config_hash(gen)}}
                       .dump()
                << '\n';
    } else if (*s1_cmd) {
      RunConfig cfg = resolve(RunConfig::stage1_defaults(), s1_common);
      if (!s1_train.empty()) cfg.train_data = s1_train;
      if (!s1_val.empty()) cfg.val_data = s1_val;
      if (s1_steps) cfg.steps = *s1_steps;
      if (s1_batch) cfg.batch_size = *s1_batch;
      if (s1_eval_every) cfg.eval_every = *s1_eval_every;
      if (s1_pooling) cfg.model.pooling = opro::parse_pooling(*s1_pooling);
      print_result(opro::train_stage1(cfg, stream));
    } else if (*s2_cmd) {
      RunConfig base = RunConfig::stage2_defaults(opro::Regime::LoraOpro, s2_common.grid.value_or(2));
      RunConfig cfg = resolve(base, s2_common);
      if (!s2_ckpt.empty()) cfg.stage1_checkpoint = s2_ckpt;
      if (!s2_train.empty()) cfg.train_data = s2_train;
      if (!s2_val.empty()) cfg.val_data = s2_val;
      if (s2_steps) cfg.steps = *s2_steps;
      if (s2_batch) cfg.batch_size = *s2_batch;
      if (s2_eval_every) cfg.eval_every = *s2_eval_every;
      print_result(opro::finetune_stage2(cfg, stream));
    } else if (*ev_cmd) {
      const auto rec = opro::evaluate_checkpoint(ev_ckpt, ev_data, ev_common.grid.value_or(1),
                                                 ev_double ? opro::Precision::Double : opro::Precision::Float);
      std::cout << rec.to_json().dump() << '\n';
    } else if (*cp_cmd) {
      if (cp_head_dim) {
        if (!cp_panels || !cp_layers) throw opro::ConfigError("--head-dim needs --panels and --layers");
        const int rank = cp_common.opro_rank.value_or(8);
        std::cout << nlohmann::json{{"opro", opro::opro_param_count(*cp_head_dim, rank, *cp_panels, *cp_layers)}}.dump()
                  << '\n';
      } else {
        RunConfig cfg = resolve(RunConfig::stage2_defaults(opro::Regime::LoraOpro, cp_common.grid.value_or(2)), cp_common);
        cfg.model.validate();
        std::cout << nlohmann::json(opro::count_params(cfg.model, cfg.adapter)).dump() << '\n';
      }
    } else if (*fl_cmd) {
      const auto r = opro::flops_delta(fl);
      std::cout << nlohmann::json{{"delta_flops", r.delta_flops},
                                  {"exp_flops", r.exp_flops},
                                  {"operators", r.inputs.operators}}
                       .dump()
                << '\n';
    } else if (*rp_cmd) {
      if (rp_common.out.empty()) throw opro::ConfigError("report needs --out pointing at a run directory");
      const auto rep = opro::write_report(rp_common.out);
      std::cout << opro::summary_csv(rep);
    }
  } catch (const opro::Error& e) {
    std::cerr << "opro: error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "opro: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
