#include "opro/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <tuple>

#include "opro/errors.hpp"

namespace opro {

namespace {

std::string fmt(double v) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3) << v;
  return out.str();
}

RunRow parse_summary(const std::filesystem::path& root, const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw FileError("cannot read " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FileError(file.string() + ": " + e.what());
  }
  const auto metrics = file.parent_path() / j.value("metrics", std::string("metrics.jsonl"));
  if (!std::filesystem::exists(metrics)) throw FileError("missing metrics log " + metrics.string());
  RunRow r;
  r.run = std::filesystem::relative(file.parent_path(), root).generic_string();
  try {
    r.stage = j.at("stage").get<int>();
    r.encoder = j.at("encoder").get<std::string>();
    r.regime = j.at("regime").get<std::string>();
    r.grid = j.at("grid").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.best_acc = 100.0 * j.at("best_val_accuracy").get<double>();
    r.final_acc = 100.0 * j.at("final_val_accuracy").get<double>();
    r.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& [k, v] : j.at("trainable_params").items()) r.trainable += v.get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FileError(file.string() + ": " + e.what());
  }
  return r;
}

}  // namespace

Report build_report(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw FileError("run directory " + root.string() + " does not exist");
  Report rep;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() == "summary.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FileError("no run summaries found under " + root.string());
  for (const auto& f : files) rep.runs.push_back(parse_summary(root, f));

  using Key = std::tuple<int, std::string, int, std::string>;
  std::map<Key, std::vector<const RunRow*>> by;
  for (const RunRow& r : rep.runs) by[{r.stage, r.encoder, r.grid, r.regime}].push_back(&r);
  for (auto& [key, rows] : by) {
    std::sort(rows.begin(), rows.end(), [](const RunRow* a, const RunRow* b) { return a->seed < b->seed; });
    GroupRow g;
    std::tie(g.stage, g.encoder, g.grid, g.regime) = key;
    g.runs = static_cast<int>(rows.size());
    double sum = 0.0, fsum = 0.0;
    for (const RunRow* r : rows) {
      g.seeds.push_back(r->seed);
      sum += r->best_acc;
      fsum += r->final_acc;
      g.trainable = r->trainable;
    }
    g.mean = sum / g.runs;
    g.final_mean = fsum / g.runs;
    double sq = 0.0;
    for (const RunRow* r : rows) sq += (r->best_acc - g.mean) * (r->best_acc - g.mean);
    g.std = g.runs > 1 ? std::sqrt(sq / (g.runs - 1)) : 0.0;
    rep.groups.push_back(g);
  }
  for (GroupRow& g : rep.groups) {
    if (g.stage != 2) continue;
    const auto base = by.find({g.stage, g.encoder, g.grid, "lora"});
    if (base == by.end()) continue;
    double lora_mean = 0.0;
    for (const RunRow* r : base->second) lora_mean += r->best_acc;
    lora_mean /= static_cast<double>(base->second.size());
    g.has_delta = true;
    g.delta = g.mean - lora_mean;
    for (const RunRow* r : by[{g.stage, g.encoder, g.grid, g.regime}]) {
      for (const RunRow* b : base->second) {
        if (b->seed == r->seed) g.seed_deltas.push_back(r->best_acc - b->best_acc);
      }
    }
  }
  return rep;
}

nlohmann::json Report::to_json() const {
  nlohmann::json out = {{"runs", nlohmann::json::array()}, {"groups", nlohmann::json::array()}};
  for (const RunRow& r : runs) {
    out["runs"].push_back({{"run", r.run},
                           {"stage", r.stage},
                           {"encoder", r.encoder},
                           {"regime", r.regime},
                           {"grid", r.grid},
                           {"seed", r.seed},
                           {"best_acc", r.best_acc},
                           {"final_acc", r.final_acc},
                           {"trainable_params", r.trainable},
                           {"config_hash", r.config_hash}});
  }
  for (const GroupRow& g : groups) {
    nlohmann::json j = {{"stage", g.stage},  {"encoder", g.encoder},       {"regime", g.regime},
                        {"grid", g.grid},    {"runs", g.runs},             {"seeds", g.seeds},
                        {"mean", g.mean},    {"std", g.std},               {"final_mean", g.final_mean},
                        {"trainable_params", g.trainable}};
    if (g.has_delta) {
      j["delta_vs_lora"] = g.delta;
      j["seed_deltas"] = g.seed_deltas;
    }
    out["groups"].push_back(j);
  }
  return out;
}

std::string runs_csv(const Report& r) {
  std::ostringstream out;
  out << "run,stage,encoder,regime,grid,seed,best_acc,final_acc,trainable_params,config_hash\n";
  for (const RunRow& x : r.runs) {
    out << x.run << ',' << x.stage << ',' << x.encoder << ',' << x.regime << ',' << x.grid << ',' << x.seed << ','
        << fmt(x.best_acc) << ',' << fmt(x.final_acc) << ',' << x.trainable << ',' << x.config_hash << '\n';
  }
  return out.str();
}

std::string summary_csv(const Report& r) {
  std::ostringstream out;
  out << "stage,encoder,grid,regime,runs,seeds,mean_acc,std_acc,final_mean_acc,trainable_params,delta_vs_lora,"
         "seed_deltas\n";
  for (const GroupRow& g : r.groups) {
    std::string seeds, deltas;
    for (std::size_t i = 0; i < g.seeds.size(); ++i) seeds += (i ? ";" : "") + std::to_string(g.seeds[i]);
    for (std::size_t i = 0; i < g.seed_deltas.size(); ++i) deltas += (i ? ";" : "") + fmt(g.seed_deltas[i]);
    out << g.stage << ',' << g.encoder << ',' << g.grid << ',' << g.regime << ',' << g.runs << ',' << seeds << ','
        << fmt(g.mean) << ',' << fmt(g.std) << ',' << fmt(g.final_mean) << ',' << g.trainable << ','
        << (g.has_delta ? fmt(g.delta) : std::string()) << ',' << deltas << '\n';
  }
  return out.str();
}

Report write_report(const std::filesystem::path& root) {
  Report rep = build_report(root);
  auto put = [&](const char* name, const std::string& text) {
    std::ofstream f(root / name);
    if (!f) throw FileError("cannot write " + (root / name).string());
    f << text;
  };
  put("runs.csv", runs_csv(rep));
  put("summary.csv", summary_csv(rep));
  put("report.json", rep.to_json().dump(2) + "\n");
  return rep;
}

}  // namespace opro
