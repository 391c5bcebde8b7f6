#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace opro {

struct RunRow {
  std::string run;  // directory relative to the report root
  int stage = 0;
  std::string encoder;
  std::string regime;
  int grid = 1;
  std::uint64_t seed = 0;
  double best_acc = 0.0;   // percent
  double final_acc = 0.0;  // percent
  std::uint64_t trainable = 0;
  std::string config_hash;
};

struct GroupRow {
  int stage = 0;
  std::string encoder;
  std::string regime;
  int grid = 1;
  int runs = 0;
  std::vector<std::uint64_t> seeds;
  double mean = 0.0;  // percent, best-checkpoint accuracy
  double std = 0.0;   // sample standard deviation, 0 for a single run
  double final_mean = 0.0;
  std::uint64_t trainable = 0;
  bool has_delta = false;
  double delta = 0.0;                // mean minus the lora mean of the same encoder and grid
  std::vector<double> seed_deltas;   // paired by seed, in `seeds` order where a lora run exists
};

struct Report {
  std::vector<RunRow> runs;
  std::vector<GroupRow> groups;
  nlohmann::json to_json() const;
};

/// Collect every summary.json below `root`. FileError when none exist or a
/// summary's metrics log is missing.
Report build_report(const std::filesystem::path& root);

/// Writes runs.csv, summary.csv and report.json into `root`.
Report write_report(const std::filesystem::path& root);

std::string runs_csv(const Report& r);
std::string summary_csv(const Report& r);

}  // namespace opro
