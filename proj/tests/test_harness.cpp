#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "opro/accounting.hpp"
#include "opro/bench.hpp"
#include "opro/checkpoint.hpp"
#include "opro/config.hpp"
#include "opro/errors.hpp"
#include "opro/harness.hpp"
#include "opro/report.hpp"
#include "support.hpp"

using namespace opro;
using namespace opro::testing;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("opro_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

VitConfig small_vit() {
  VitConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.model_dim = 32;
  c.head_count = 4;
  c.layer_count = 2;
  c.mlp_ratio = 2;
  return c;
}

// Shared datasets, generated once per process.
struct Data {
  fs::path s1_train, s1_val, s2_train, s2_val, s2_big;
  Data() {
    const fs::path root = scratch("data");
    DatasetSpec s;
    s.size = 32;
    s.stage = 1;
    s.count = 512;
    s.seed = 1;
    generate_dataset(s, s1_train = root / "s1_train");
    s.count = 1000;
    s.seed = 2;
    generate_dataset(s, s1_val = root / "s1_val");
    s.stage = 2;
    s.grid = 2;
    s.count = 128;
    s.seed = 3;
    generate_dataset(s, s2_train = root / "s2_train");
    s.count = 64;
    s.seed = 4;
    generate_dataset(s, s2_val = root / "s2_val");
    s.size = 64;
    s.count = 8;
    generate_dataset(s, s2_big = root / "s2_big");
  }
};

const Data& data() {
  static const Data d;
  return d;
}

RunConfig stage1_config(const std::string& out, int steps = 200) {
  RunConfig cfg = RunConfig::stage1_defaults();
  cfg.model = small_vit();
  cfg.steps = steps;
  cfg.batch_size = 16;
  cfg.eval_every = 100;
  cfg.log_every = 25;
  cfg.eval_limit = 200;
  cfg.seed = 5;
  cfg.deterministic = true;
  cfg.optim.lr = 2e-3;
  cfg.train_data = data().s1_train;
  cfg.val_data = data().s1_val;
  cfg.out_dir = scratch(out);
  return cfg;
}

// One Stage-1 backbone shared by the Stage-2 tests.
const fs::path& stage1_checkpoint() {
  static const fs::path ckpt = [] {
    RunConfig cfg = stage1_config("s1_shared", 60);
    return train_stage1(cfg).best_checkpoint;
  }();
  return ckpt;
}

RunConfig stage2_config(Regime regime, const std::string& out, std::uint64_t seed = 0) {
  RunConfig cfg = RunConfig::stage2_defaults(regime, 2);
  cfg.steps = 20;
  cfg.batch_size = 8;
  cfg.eval_every = 10;
  cfg.log_every = 10;
  cfg.seed = seed;
  cfg.adapter.lora_rank = 2;
  cfg.adapter.lora_alpha = 4;
  cfg.adapter.opro_rank = 2;
  cfg.stage1_checkpoint = stage1_checkpoint();
  cfg.train_data = data().s2_train;
  cfg.val_data = data().s2_val;
  cfg.out_dir = scratch(out);
  return cfg;
}

std::vector<nlohmann::json> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  std::vector<nlohmann::json> out;
  for (std::string line; std::getline(in, line);) out.push_back(nlohmann::json::parse(line));
  return out;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

const std::array<ParamGroup, 8> kAllGroups = {ParamGroup::Backbone, ParamGroup::Encoder, ParamGroup::Head,
                                              ParamGroup::Lora,     ParamGroup::Opro,    ParamGroup::OproBd,
                                              ParamGroup::Apb,      ParamGroup::Asym};

}  // namespace

TEST_CASE("published parameter counts") {
  CHECK(opro_param_count(64, 8, 9, 12) == 110592);
  CHECK(opro_param_count(128, 32, 2, 57) == 933888);
  CHECK(opro_param_count(64, 0, 9, 12) == 0);
  CHECK(lora_param_count(768, 8, 4, 12) == 2 * 768 * 8 * 4 * 12);
}

TEST_CASE("count_params agrees with enumerating the model") {
  for (EncoderKind enc : {EncoderKind::Ape, EncoderKind::Rope, EncoderKind::Liere, EncoderKind::Comrope}) {
    for (Pooling pool : {Pooling::Mean, Pooling::ClassToken}) {
      for (Regime regime : {Regime::Full, Regime::LinearProbe, Regime::Lora, Regime::LoraOpro, Regime::LoraOproBd,
                            Regime::LoraApb, Regime::LoraAsym}) {
        VitConfig cfg = tiny_config(enc, pool);
        VitModel model(cfg, 1);
        AdapterConfig a;
        a.regime = regime;
        a.panel_count = 4;
        a.lora_rank = 3;
        a.opro_rank = 2;
        if (regime != Regime::Full) model.attach_adapters(a, 2);
        const auto counts = count_params(cfg, regime == Regime::Full ? AdapterConfig{} : a);
        for (ParamGroup g : kAllGroups) {
          CAPTURE(to_string(g));
          CAPTURE(to_string(regime));
          CAPTURE(to_string(enc));
          const auto it = counts.find(std::string(to_string(g)));
          const std::uint64_t expect = it == counts.end() ? 0 : it->second;
          std::size_t direct = 0;
          for (const auto& v : model.param_views()) {
            if (v.group == g) direct += static_cast<std::size_t>(v.tensor->value.size());
          }
          CHECK(direct == expect);
          CHECK(model.param_count(g) == expect);
        }
      }
    }
  }
}

TEST_CASE("FLOPs accounting") {
  const CostInputs in{2, 24, 128, 4096, 57, 28, 0};
  const CostReport r = flops_delta(in);
  CHECK(std::abs(r.delta_flops / 1.03e13 - 1.0) <= 0.01);
  CHECK(r.inputs.operators == 114);
  CHECK(std::abs(r.exp_flops / 6.7e9 - 1.0) <= 0.01);
  CHECK(kMatmulsPerExp == 14);

  for (int field = 0; field < 6; ++field) {
    CostInputs d = in;
    std::uint64_t* f[] = {&d.panels, &d.heads, &d.head_dim, &d.tokens, &d.layers, &d.steps};
    *f[field] *= 2;
    d.operators = 114;
    const double factor = field == 2 ? 4.0 : 2.0;  // d_h enters squared
    CHECK(flops_delta(d).delta_flops == factor * r.delta_flops);
  }
  CostInputs bad = in;
  bad.tokens = 0;
  CHECK_THROWS_AS(flops_delta(bad), ParameterError);
}

TEST_CASE("learning-rate schedules") {
  LrSchedule c{ScheduleKind::Constant, 5e-4, 0, 100, 0.0};
  CHECK(c.at(0) == 5e-4);
  CHECK(c.at(99) == 5e-4);
  LrSchedule w{ScheduleKind::WarmupCosine, 1e-3, 10, 110, 0.0};
  CHECK(w.at(0) == doctest::Approx(1e-4));
  CHECK(w.at(9) == doctest::Approx(1e-3));
  CHECK(w.at(10) == doctest::Approx(1e-3));
  CHECK(w.at(60) == doctest::Approx(5e-4));
  CHECK(w.at(110) == doctest::Approx(0.0));
  for (int s = 10; s < 110; ++s) CHECK(w.at(s + 1) <= w.at(s));
  CHECK(parse_schedule("constant") == ScheduleKind::Constant);
  CHECK(parse_schedule(to_string(ScheduleKind::WarmupCosine)) == ScheduleKind::WarmupCosine);
  CHECK_THROWS_AS(parse_schedule("step"), ConfigError);
}

TEST_CASE("Adam update, decoupled weight decay and clipping") {
  VitModel model(tiny_config(), 3);
  AdapterConfig a;
  a.regime = Regime::Lora;
  a.panel_count = 1;
  a.lora_rank = 2;
  model.attach_adapters(a, 4);
  const std::uint64_t backbone = model.group_hash(ParamGroup::Backbone);

  // First step: m̂/√v̂ = sign(g), so every touched entry moves by lr.
  model.zero_grads();
  for (auto& r : model.mutable_params()) {
    if (model.trainable(r.group)) r.tensor->grad.setConstant(r.group == ParamGroup::Head ? -3.0 : 0.5);
  }
  model.refresh();
  std::map<std::string, Mat> before;
  for (const auto& v : model.trainable_views()) before[v.name] = v.tensor->value;
  Adam adam(AdamConfig{0.9, 0.999, 1e-8, 0.0, 0.0});
  adam.step(model, 0.01);
  for (const auto& v : model.trainable_views()) {
    const double expect = v.group == ParamGroup::Head ? 0.01 : -0.01;
    CHECK(((v.tensor->value - before[v.name]).array() - expect).abs().maxCoeff() < 1e-9);
  }
  CHECK(model.group_hash(ParamGroup::Backbone) == backbone);
  CHECK(adam.steps_taken() == 1);

  // Zero gradients with weight decay: matrices shrink, vectors do not move.
  model.zero_grads();
  for (const auto& v : model.trainable_views()) before[v.name] = v.tensor->value;
  Adam decay(AdamConfig{0.9, 0.999, 1e-8, 0.1, 0.0});
  decay.step(model, 0.01);
  for (const auto& v : model.trainable_views()) {
    const Mat& b = before[v.name];
    if (b.rows() > 1 && b.cols() > 1) {
      CHECK((v.tensor->value - b * (1.0 - 0.001)).cwiseAbs().maxCoeff() < 1e-15);
    } else {
      CHECK(v.tensor->value == b);
    }
  }

  // Clipping returns the pre-clip norm and scales gradients down.
  model.zero_grads();
  double sq = 0.0;
  for (auto& r : model.mutable_params()) {
    if (!model.trainable(r.group)) continue;
    r.tensor->grad.setConstant(2.0);
    sq += 4.0 * static_cast<double>(r.tensor->grad.size());
  }
  model.refresh();
  Adam clip(AdamConfig{0.9, 0.999, 1e-8, 0.0, 1.0});
  CHECK(clip.step(model, 0.01) == doctest::Approx(std::sqrt(sq)));
  for (const auto& [name, mom] : clip.moments()) {
    CHECK(std::abs(mom.m(0, 0) - 0.1 * 2.0 / std::sqrt(sq)) < 1e-12);
  }

  model.zero_grads();
  for (auto& r : model.mutable_params()) {
    if (r.group == ParamGroup::Head) r.tensor->grad(0, 0) = std::nan("");
  }
  model.refresh();
  CHECK_THROWS_AS(clip.step(model, 0.01), NumericError);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  for (Regime regime : {Regime::Full, Regime::LoraOpro, Regime::LoraAsym, Regime::LoraOproBd, Regime::LoraApb}) {
    VitConfig cfg = tiny_config(EncoderKind::Liere, Pooling::ClassToken);
    VitModel model(cfg, 8);
    AdapterConfig a;
    a.regime = regime;
    a.panel_count = 4;
    a.opro_rank = 2;
    a.lora_rank = 2;
    if (regime != Regime::Full) model.attach_adapters(a, 9);
    for (ParamGroup g : kAllGroups) randomize_group(model, g, 0.3, 10 + static_cast<int>(g));

    const auto imgs = random_images(cfg, 4, 1);
    const std::vector<int> labels{0, 1, 2, 3};
    const PanelMap map = panel_map_for(cfg, regime == Regime::Full ? 1 : 2);
    Adam adam(AdamConfig{0.9, 0.999, 1e-8, 0.05, 1.0});
    for (int s = 0; s < 2; ++s) {
      model.zero_grads();
      loss_and_grads<double>(model, pointers(imgs), labels, map);
      adam.step(model, 1e-3);
    }
    const fs::path dir = scratch("ckpt");
    fs::create_directories(dir);
    save_checkpoint(dir / "m.ckpt", model, &adam, "state", {{"note", 1}});
    const CheckpointData d = read_checkpoint(dir / "m.ckpt");
    CHECK(d.adam_steps == 2);
    CHECK(d.rng_state == "state");
    CHECK(d.extra["note"] == 1);
    CHECK(d.adapters.regime == regime);
    CHECK(d.model.encoder == cfg.encoder);
    CHECK(d.adam.size() == adam.moments().size());
    for (const auto& [name, mom] : adam.moments()) {
      CHECK(d.adam.at(name).m == mom.m);
      CHECK(d.adam.at(name).v == mom.v);
    }
    const VitModel back = restore_model(d);
    for (ParamGroup g : kAllGroups) {
      CHECK(back.group_hash(g) == model.group_hash(g));
      CHECK(back.trainable(g) == model.trainable(g));
    }
    const auto la = forward<double>(model, pointers(imgs), map);
    const auto lb = forward<double>(back, pointers(imgs), map);
    CHECK(la == lb);

    // Corruption is detected.
    std::string bytes;
    {
      std::ifstream in(dir / "m.ckpt", std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 9);
    CHECK_THROWS_AS(read_checkpoint(dir / "short.ckpt"), FileError);
    std::ofstream(dir / "junk.ckpt", std::ios::binary) << "not a checkpoint";
    CHECK_THROWS_AS(read_checkpoint(dir / "junk.ckpt"), FileError);
    CHECK_THROWS_AS(read_checkpoint(dir / "missing.ckpt"), FileError);
    fs::remove_all(dir);
  }
}

TEST_CASE("run config JSON round trip and validation") {
  RunConfig c = RunConfig::stage2_defaults(Regime::LoraOproBd, 3);
  c.model.encoder = EncoderKind::Comrope;
  c.seed = 77;
  c.out_dir = "x/y";
  RunConfig back;
  from_json(to_json(c), back);
  CHECK(to_json(back) == to_json(c));
  CHECK(hash_json(to_json(back)) == hash_json(to_json(c)));
  CHECK_NOTHROW(c.validate());

  RunConfig bad = c;
  bad.adapter.panel_count = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.model.model_dim = 30;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  RunConfig t;
  CHECK_THROWS_AS(from_json(nlohmann::json{{"steps", "many"}}, t), ConfigError);
  CHECK_THROWS_AS(from_json(nlohmann::json{{"adapter", {{"regime", "lora+magic"}}}}, t), ConfigError);
  CHECK_THROWS_AS(from_json(nlohmann::json{{"model", {{"encoder", "alibi"}}}}, t), ConfigError);
  CHECK_THROWS_AS(from_json(nlohmann::json::array(), t), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/run.json", t), FileError);
}

TEST_CASE("evaluation") {
  const Dataset val = load_dataset(data().s1_val);
  VitModel model(small_vit(), 12);
  const MetricsRecord a = evaluate(model, val, 1);
  const MetricsRecord b = evaluate(model, val, 1);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.loss == b.loss);
  // Untrained: chance level.
  CHECK(std::abs(a.accuracy - 0.125) <= 0.03);
  CHECK(a.accuracy >= 0.0);
  CHECK(a.accuracy <= 1.0);

  Dataset empty;
  empty.size = 32;
  CHECK_THROWS_AS(evaluate(model, empty, 1), ParameterError);

  // Perfect logits score 1.
  Logits<double> perfect = Logits<double>::Zero(8, 8);
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) {
    perfect(i, (5 * i) % 8) = 30.0;
    labels.push_back((5 * i) % 8);
  }
  const LossResult r = cross_entropy<double>(perfect, labels);
  CHECK(r.correct == 8);
  CHECK(r.loss < 1e-10);
}

TEST_CASE("Stage-1 smoke run") {
  RunConfig cfg = stage1_config("s1_smoke");
  std::vector<MetricsRecord> seen;
  const TrainResult r = train_stage1(cfg, [&](const MetricsRecord& m) { seen.push_back(m); });
  CHECK(r.final_train_loss < r.initial_train_loss);
  CHECK(fs::exists(cfg.out_dir / "best.ckpt"));
  CHECK(fs::exists(cfg.out_dir / "last.ckpt"));

  const auto lines = read_jsonl(cfg.out_dir / "metrics.jsonl");
  CHECK(lines.size() == seen.size());
  int vals = 0;
  for (const auto& l : lines) {
    CHECK(l["accuracy"].get<double>() >= 0.0);
    CHECK(l["accuracy"].get<double>() <= 1.0);
    CHECK(l.contains("wall"));
    CHECK(l["params"].contains("backbone"));
    if (l["split"] == "val") ++vals;
  }
  CHECK(vals == 3);  // steps 0, 100, 200

  const auto s = read_json(r.summary);
  for (const char* key : {"config_hash", "seed", "encoder", "regime", "best_val_accuracy", "final_val_accuracy",
                          "params", "trainable_params", "metrics"}) {
    CAPTURE(key);
    CHECK(s.contains(key));
  }
  CHECK(s["regime"] == "full");
  CHECK(s["seed"] == 5);

  // Best checkpoint reproduces its recorded validation accuracy.
  const CheckpointData best = read_checkpoint(r.best_checkpoint);
  const MetricsRecord again = evaluate(restore_model(best), load_dataset(cfg.val_data, 200), 1);
  CHECK(again.accuracy == best.extra["val_accuracy"].get<double>());
  CHECK(again.accuracy == r.best_val_accuracy);

  // Shuffled labels: a trained model is at chance.
  Dataset shuffled = load_dataset(data().s1_val);
  std::mt19937_64 rng(3);
  std::shuffle(shuffled.labels.begin(), shuffled.labels.end(), rng);
  CHECK(std::abs(evaluate(restore_model(best), shuffled, 1).accuracy - 0.125) <= 0.03);
}

TEST_CASE("deterministic runs repeat exactly") {
  RunConfig a = stage1_config("det_a", 30);
  RunConfig b = stage1_config("det_b", 30);
  const TrainResult ra = train_stage1(a), rb = train_stage1(b);
  CHECK(ra.final_train_loss == rb.final_train_loss);
  CHECK(ra.final_val_accuracy == rb.final_val_accuracy);
  CHECK(read_json(ra.summary)["config_hash"] != "");
}

TEST_CASE("Stage-1 configuration errors") {
  RunConfig cfg = stage1_config("s1_err", 1);
  cfg.adapter.regime = Regime::Lora;
  CHECK_THROWS_AS(train_stage1(cfg), ConfigError);
  cfg = stage1_config("s1_err", 1);
  cfg.train_data = "/nonexistent/data";
  CHECK_THROWS_AS(train_stage1(cfg), FileError);
  cfg = stage1_config("s1_err", 1);
  cfg.train_data.clear();
  CHECK_THROWS_AS(train_stage1(cfg), ConfigError);
  cfg = stage1_config("s1_err", 1);
  cfg.model.image_size = 64;
  CHECK_THROWS_AS(train_stage1(cfg), ConfigError);
}

TEST_CASE("Stage-2 freezing contract and identical step-0 metrics") {
  std::optional<double> step0_acc, step0_loss;
  for (Regime regime : {Regime::LinearProbe, Regime::Lora, Regime::LoraOpro, Regime::LoraOproBd, Regime::LoraApb,
                        Regime::LoraAsym}) {
    CAPTURE(to_string(regime));
    RunConfig cfg = stage2_config(regime, "s2_" + std::to_string(static_cast<int>(regime)));
    const TrainResult r = finetune_stage2(cfg);
    const auto s = read_json(r.summary);
    CHECK(s["frozen_unchanged"] == true);
    CHECK(s["frozen_hashes"].contains("backbone"));
    CHECK(s["regime"] == std::string(to_string(regime)));

    const auto lines = read_jsonl(cfg.out_dir / "metrics.jsonl");
    const auto first_val = std::find_if(lines.begin(), lines.end(), [](const auto& l) { return l["split"] == "val"; });
    REQUIRE(first_val != lines.end());
    CHECK((*first_val)["step"] == 0);
    if (!step0_acc) {
      step0_acc = (*first_val)["accuracy"].get<double>();
      step0_loss = (*first_val)["loss"].get<double>();
    } else {
      CHECK((*first_val)["accuracy"].get<double>() == *step0_acc);
      CHECK(std::abs((*first_val)["loss"].get<double>() - *step0_loss) <= 1e-6);
    }

    // Frozen groups are bit-identical to the Stage-1 backbone; trained ones moved.
    const VitModel before = restore_model(read_checkpoint(stage1_checkpoint()));
    const VitModel after = restore_model(read_checkpoint(cfg.out_dir / "last.ckpt"));
    CHECK(after.group_hash(ParamGroup::Backbone) == before.group_hash(ParamGroup::Backbone));
    CHECK(after.group_hash(ParamGroup::Encoder) == before.group_hash(ParamGroup::Encoder));
    CHECK(after.group_hash(ParamGroup::Head) != before.group_hash(ParamGroup::Head));
    const auto trainable = s["trainable_params"];
    CHECK(trainable.contains("head"));
    CHECK_FALSE(trainable.contains("backbone"));
    CHECK(trainable.contains("lora") == (regime != Regime::LinearProbe));
  }
}

TEST_CASE("Stage-2 configuration errors") {
  RunConfig cfg = stage2_config(Regime::LoraOpro, "s2_err");
  cfg.stage1_checkpoint = stage2_config(Regime::Lora, "s2_1").out_dir / "missing.ckpt";
  CHECK_THROWS_AS(finetune_stage2(cfg), FileError);

  // A Stage-2 checkpoint is not a backbone.
  RunConfig first = stage2_config(Regime::Lora, "s2_src");
  finetune_stage2(first);
  cfg = stage2_config(Regime::LoraOpro, "s2_err");
  cfg.stage1_checkpoint = first.out_dir / "best.ckpt";
  CHECK_THROWS_AS(finetune_stage2(cfg), ConfigError);

  cfg = stage2_config(Regime::LoraOpro, "s2_err");
  cfg.train_data = data().s2_big;
  CHECK_THROWS_AS(finetune_stage2(cfg), ConfigError);

  cfg = stage2_config(Regime::LoraOpro, "s2_err");
  cfg.train_data = data().s1_train;  // grid 1 data
  CHECK_THROWS_AS(finetune_stage2(cfg), ConfigError);

  cfg = stage2_config(Regime::Full, "s2_err");
  CHECK_THROWS_AS(finetune_stage2(cfg), ConfigError);

  cfg = stage2_config(Regime::LoraOpro, "s2_err");
  cfg.adapter.panel_count = 9;
  CHECK_THROWS_AS(finetune_stage2(cfg), ConfigError);

  CHECK_THROWS_AS(evaluate_checkpoint(first.out_dir / "best.ckpt", data().s2_val, 3), ConfigError);
  CHECK_NOTHROW(evaluate_checkpoint(first.out_dir / "best.ckpt", data().s2_val, 2));
}

TEST_CASE("reports aggregate runs") {
  const fs::path root = scratch("report");
  auto fake = [&](const std::string& regime, std::uint64_t seed, double best) {
    const fs::path dir = root / (regime + "_s" + std::to_string(seed));
    fs::create_directories(dir);
    std::ofstream(dir / "metrics.jsonl") << "{}\n";
    std::ofstream(dir / "summary.json") << nlohmann::json{{"stage", 2},
                                                           {"encoder", "rope"},
                                                           {"regime", regime},
                                                           {"grid", 2},
                                                           {"seed", seed},
                                                           {"best_val_accuracy", best},
                                                           {"final_val_accuracy", best - 0.01},
                                                           {"config_hash", "abc"},
                                                           {"trainable_params", {{"head", 10}, {"lora", 5}}},
                                                           {"metrics", "metrics.jsonl"}}
                                                  .dump();
  };
  CHECK_THROWS_AS(build_report(root), FileError);
  fake("lora", 0, 0.40);
  {
    const Report one = build_report(root);
    REQUIRE(one.runs.size() == 1);
    REQUIRE(one.groups.size() == 1);
    CHECK(one.groups[0].runs == 1);
    CHECK(one.groups[0].std == 0.0);
    CHECK(one.runs[0].trainable == 15);
    CHECK(one.runs[0].config_hash == "abc");
  }
  fake("lora", 1, 0.44);
  fake("lora", 2, 0.42);
  fake("lora+opro", 0, 0.43);
  fake("lora+opro", 1, 0.41);
  fake("lora+opro", 2, 0.48);
  const Report rep = write_report(root);
  CHECK(rep.runs.size() == 6);
  REQUIRE(rep.groups.size() == 2);
  const GroupRow& lora = rep.groups[0].regime == "lora" ? rep.groups[0] : rep.groups[1];
  const GroupRow& opro = rep.groups[0].regime == "lora" ? rep.groups[1] : rep.groups[0];
  CHECK(lora.mean == doctest::Approx(42.0));
  CHECK(lora.std == doctest::Approx(2.0));
  CHECK(opro.mean == doctest::Approx(44.0));
  CHECK(opro.std == doctest::Approx(std::sqrt(13.0)));
  CHECK(opro.has_delta);
  CHECK(opro.delta == opro.mean - lora.mean);
  REQUIRE(opro.seed_deltas.size() == 3);
  CHECK(opro.seed_deltas[0] == doctest::Approx(3.0));
  CHECK(opro.seed_deltas[1] == doctest::Approx(-3.0));
  CHECK(opro.seed_deltas[2] == doctest::Approx(6.0));
  CHECK(lora.delta == 0.0);
  CHECK(fs::exists(root / "runs.csv"));
  CHECK(fs::exists(root / "summary.csv"));
  CHECK(read_json(root / "report.json")["groups"].size() == 2);
  std::ifstream csv(root / "summary.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header.find("mean_acc") != std::string::npos);
  CHECK(header.find("std_acc") != std::string::npos);
  CHECK(header.find("delta_vs_lora") != std::string::npos);

  fs::remove(root / "lora_s1" / "metrics.jsonl");
  CHECK_THROWS_AS(build_report(root), FileError);
  CHECK_THROWS_AS(build_report(root / "nowhere"), FileError);
  fs::remove_all(root);
}
