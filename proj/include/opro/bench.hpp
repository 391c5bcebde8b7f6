#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace opro {

// Panel-local pixel frame: x to the right, y down, origin at the top-left
// corner. Orientations are degrees counterclockwise from +x as seen on screen.

struct ArrowSpec {
  double cx = 0.0;
  double cy = 0.0;
  int orientation = 0;  // multiple of 45 in [0, 360)
  double scale = 1.0;   // multiplier on the nominal arrow length

  static constexpr double kNominalLength = 0.4;  // fraction of the panel side
  double length(double panel_size) const { return scale * kNominalLength * panel_size; }
};

struct GlyphSpec {
  int glyph = 0;  // index into the built-in glyph set
  double cx = 0.0;
  double cy = 0.0;
  double scale = 1.0;

  static constexpr double kNominalSize = 0.16;  // glyph box side as a fraction of the panel side
  double box(double panel_size) const { return scale * kNominalSize * panel_size; }
};

struct PanelSpec {
  int size = 0;  // panel side in pixels
  std::vector<ArrowSpec> arrows;
  std::vector<GlyphSpec> distractors;

  /// ParameterError when an arrow leaves the panel, orientations are not
  /// multiples of 45 or the arrows overlap.
  void validate() const;
};

struct RowRule {
  enum class Kind { Rotation, MirrorA, MirrorB };
  Kind kind = Kind::Rotation;
  int k = 0;  // rotation step in units of 45 degrees

  static RowRule rotation(int k) { return RowRule{Kind::Rotation, ((k % 8) + 8) % 8}; }
  static RowRule mirror_a() { return RowRule{Kind::MirrorA, 0}; }
  static RowRule mirror_b() { return RowRule{Kind::MirrorB, 0}; }

  bool operator==(const RowRule&) const = default;
};

std::string to_string(const RowRule& rule);
RowRule parse_rule(std::string_view text);
/// The 8 rotations plus MirrorA and MirrorB for n >= 3; rotations only for n = 2.
std::vector<RowRule> admissible_rules(int grid);

/// ((a1 + a2) mod 360) / 45. ParameterError unless both are multiples of 45 in [0, 360).
int stage1_label(int a1, int a2);

/// Label of a panel's arrow pair.
int panel_label(const PanelSpec& panel);

/// Panel `step_index` of a row from panel `step_index - 1`. Rotations advance
/// orientations by 45k and rotate arrow centres about the panel centre;
/// MirrorA reflects on every step; MirrorB reflects on odd steps only, so
/// the row alternates between the first panel and its reflection in pairs.
/// Distractors are carried over unchanged.
PanelSpec apply_rule(const PanelSpec& prev, const RowRule& rule, int step_index);

/// Reflection about the vertical midline: θ → (180 − θ) mod 360, x → size − x.
PanelSpec mirror_panel(const PanelSpec& panel);
/// Rotation by 45k about the panel centre.
PanelSpec rotate_panel(const PanelSpec& panel, int k);

struct SamplerConfig {
  double scale_min = 0.6;
  double scale_max = 1.0;
  int distractors_min = 3;
  int distractors_max = 6;
  int max_attempts = 100;
  // Stage 1 only: probability that the first arrow is pinned to 0 degrees, so the
  // label equals the other arrow's orientation. Labels stay uniform.
  double anchor_fraction = 0.0;
};

/// Two non-overlapping arrows that stay inside the panel under any rotation
/// about its centre, plus a fresh set of distractor letters.
PanelSpec sample_panel(int size, std::uint64_t seed, const SamplerConfig& cfg = {});
/// Replace the distractors of `panel` with a fresh, non-overlapping set.
void resample_distractors(PanelSpec& panel, std::uint64_t seed, const SamplerConfig& cfg = {});

struct Stage1Sample {
  PanelSpec panel;
  int label = 0;
};

struct Stage2Episode {
  int grid = 2;
  RowRule rule;
  std::vector<PanelSpec> panels;  // row-major n×n; the query cell holds no arrows or letters
  std::array<int, 2> query_cell{};
  PanelSpec answer;  // the completion hidden from the rendered image
  int label = 0;

  const PanelSpec& at(int row, int col) const { return panels[row * grid + col]; }
};

Stage1Sample make_stage1_sample(int size, std::uint64_t seed, const SamplerConfig& cfg = {});
/// ParameterError unless grid ∈ {2,3,4} and size is divisible by grid.
/// Episodes whose context admits rules with different answers are resampled.
Stage2Episode make_stage2_episode(int grid, int size, std::uint64_t seed, const SamplerConfig& cfg = {});

/// Rules consistent with every fully visible transition of the episode.
std::vector<RowRule> consistent_rules(const Stage2Episode& ep);

// ----- rendering -----

using Raster = std::vector<std::uint8_t>;  // row-major, 255 = background

constexpr int kGlyphCount = 8;
char glyph_letter(int glyph);

/// Anti-aliased rendering of a panel. ParameterError if the spec leaves the canvas.
Raster render_panel(const PanelSpec& spec);
/// The n×n canvas of an episode with the query cell blank.
Raster render_episode(const Stage2Episode& ep);

void write_pgm(const std::filesystem::path& path, const Raster& pixels, int width, int height);
/// FileError when the file is missing or not an 8-bit binary PGM.
Raster read_pgm(const std::filesystem::path& path, int* width = nullptr, int* height = nullptr);

// ----- datasets -----

struct ManifestRecord {
  std::string image;  // path relative to the dataset directory
  int label = 0;
  int stage = 1;
  int grid = 1;
  std::string rule;  // empty for Stage 1
  std::uint64_t seed = 0;
};

struct DatasetSpec {
  int stage = 1;
  int grid = 1;
  int count = 0;
  std::uint64_t seed = 0;
  int size = 64;
  SamplerConfig sampler;
};

std::string config_hash(const DatasetSpec& spec);

/// Render `spec.count` samples into `dir` with `manifest.jsonl`.
std::vector<ManifestRecord> generate_dataset(const DatasetSpec& spec, const std::filesystem::path& dir);

struct Dataset {
  std::vector<std::vector<std::uint8_t>> images;
  std::vector<int> labels;
  std::vector<ManifestRecord> records;
  int size = 0;
};

/// FileError on a missing manifest or image, ParameterError on bad labels.
Dataset load_dataset(const std::filesystem::path& dir, std::optional<std::size_t> limit = std::nullopt);

}  // namespace opro
