#include "opro/bench.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include <json.hpp>

#include "opro/config.hpp"
#include "opro/errors.hpp"
#include "opro/rng.hpp"

namespace opro {

namespace {

constexpr double kHalfSqrt2 = 0.70710678118654752440;

// cos/sin of 45k degrees, exact at multiples of 90.
std::pair<double, double> eighth_turn(int k) {
  static constexpr double c[8] = {1, kHalfSqrt2, 0, -kHalfSqrt2, -1, -kHalfSqrt2, 0, kHalfSqrt2};
  static constexpr double s[8] = {0, kHalfSqrt2, 1, kHalfSqrt2, 0, -kHalfSqrt2, -1, -kHalfSqrt2};
  k = ((k % 8) + 8) % 8;
  return {c[k], s[k]};
}

double stroke_margin(double size) { return std::max(1.25, 0.03 * size); }

double glyph_radius(const GlyphSpec& g, double size) { return 0.5 * std::sqrt(2.0) * g.box(size); }

bool overlaps(double ax, double ay, double ar, double bx, double by, double br, double gap) {
  return std::hypot(ax - bx, ay - by) < ar + br + gap;
}

}  // namespace

void PanelSpec::validate() const {
  if (size <= 0) throw ParameterError("panel size must be positive");
  for (const ArrowSpec& a : arrows) {
    if (a.orientation < 0 || a.orientation >= 360 || a.orientation % 45 != 0) {
      throw ParameterError("arrow orientation " + std::to_string(a.orientation) + " is not a multiple of 45 in [0, 360)");
    }
    if (!(a.scale > 0.0) || !std::isfinite(a.cx) || !std::isfinite(a.cy)) {
      throw ParameterError("arrow needs a positive scale and a finite centre");
    }
    const double r = 0.5 * a.length(size);
    if (a.cx - r < 0 || a.cy - r < 0 || a.cx + r > size || a.cy + r > size) {
      throw ParameterError("arrow extends outside the panel");
    }
  }
  for (std::size_t i = 0; i < arrows.size(); ++i) {
    for (std::size_t j = i + 1; j < arrows.size(); ++j) {
      if (overlaps(arrows[i].cx, arrows[i].cy, 0.5 * arrows[i].length(size), arrows[j].cx, arrows[j].cy,
                   0.5 * arrows[j].length(size), 0.0)) {
        throw ParameterError("arrows overlap");
      }
    }
  }
  for (const GlyphSpec& g : distractors) {
    if (g.glyph < 0 || g.glyph >= kGlyphCount) throw ParameterError("unknown glyph id " + std::to_string(g.glyph));
    const double h = 0.5 * g.box(size);
    if (g.cx - h < 0 || g.cy - h < 0 || g.cx + h > size || g.cy + h > size) {
      throw ParameterError("distractor glyph extends outside the panel");
    }
  }
}

std::string to_string(const RowRule& rule) {
  switch (rule.kind) {
    case RowRule::Kind::Rotation: return "rot" + std::to_string(rule.k);
    case RowRule::Kind::MirrorA: return "mirror-a";
    case RowRule::Kind::MirrorB: return "mirror-b";
  }
  return "?";
}

RowRule parse_rule(std::string_view text) {
  if (text == "mirror-a") return RowRule::mirror_a();
  if (text == "mirror-b") return RowRule::mirror_b();
  if (text.size() == 4 && text.substr(0, 3) == "rot" && text[3] >= '0' && text[3] <= '7') {
    return RowRule::rotation(text[3] - '0');
  }
  throw ParameterError("unknown row rule '" + std::string(text) + "'");
}

std::vector<RowRule> admissible_rules(int grid) {
  if (grid < 2 || grid > 4) throw ParameterError("grid size must be 2, 3 or 4");
  std::vector<RowRule> out;
  for (int k = 0; k < 8; ++k) out.push_back(RowRule::rotation(k));
  if (grid >= 3) {
    out.push_back(RowRule::mirror_a());
    out.push_back(RowRule::mirror_b());
  }
  return out;
}

int stage1_label(int a1, int a2) {
  for (int a : {a1, a2}) {
    if (a < 0 || a >= 360 || a % 45 != 0) {
      throw ParameterError("orientation " + std::to_string(a) + " is not a multiple of 45 in [0, 360)");
    }
  }
  return ((a1 + a2) % 360) / 45;
}

int panel_label(const PanelSpec& panel) {
  if (panel.arrows.size() != 2) throw ParameterError("a labelled panel holds exactly two arrows");
  return stage1_label(panel.arrows[0].orientation, panel.arrows[1].orientation);
}

PanelSpec mirror_panel(const PanelSpec& panel) {
  PanelSpec out = panel;
  for (ArrowSpec& a : out.arrows) {
    a.orientation = ((180 - a.orientation) % 360 + 360) % 360;
    a.cx = panel.size - a.cx;
  }
  return out;
}

PanelSpec rotate_panel(const PanelSpec& panel, int k) {
  const auto [c, s] = eighth_turn(k);
  const double mid = 0.5 * panel.size;
  PanelSpec out = panel;
  for (ArrowSpec& a : out.arrows) {
    a.orientation = ((a.orientation + 45 * k) % 360 + 360) % 360;
    // Counterclockwise on screen, where y grows downward.
    const double dx = a.cx - mid;
    const double dy = a.cy - mid;
    a.cx = mid + c * dx + s * dy;
    a.cy = mid - s * dx + c * dy;
  }
  return out;
}

PanelSpec apply_rule(const PanelSpec& prev, const RowRule& rule, int step_index) {
  switch (rule.kind) {
    case RowRule::Kind::Rotation:
      return rotate_panel(prev, rule.k);
    case RowRule::Kind::MirrorA:
      return mirror_panel(prev);
    case RowRule::Kind::MirrorB:
      return step_index % 2 == 1 ? mirror_panel(prev) : prev;
  }
  return prev;
}

void resample_distractors(PanelSpec& panel, std::uint64_t seed, const SamplerConfig& cfg) {
  const double size = panel.size;
  const double gap = stroke_margin(size);
  for (int round = 0; round < 1000; ++round) {
    std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(round)}));
    std::uniform_int_distribution<int> count_d(cfg.distractors_min, cfg.distractors_max);
    std::uniform_int_distribution<int> glyph_d(0, kGlyphCount - 1);
    std::uniform_real_distribution<double> scale_d(0.8, 1.2);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const int count = count_d(rng);
    std::vector<GlyphSpec> placed;
    bool ok = true;
    for (int i = 0; i < count && ok; ++i) {
      GlyphSpec g;
      g.glyph = glyph_d(rng);
      g.scale = scale_d(rng);
      const double half = 0.5 * g.box(size);
      const double radius = glyph_radius(g, size);
      ok = false;
      for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        g.cx = half + unit(rng) * (size - 2 * half);
        g.cy = half + unit(rng) * (size - 2 * half);
        bool clear = true;
        for (const ArrowSpec& a : panel.arrows) {
          clear = clear && !overlaps(g.cx, g.cy, radius, a.cx, a.cy, 0.5 * a.length(size), gap);
        }
        for (const GlyphSpec& o : placed) {
          clear = clear && !overlaps(g.cx, g.cy, radius, o.cx, o.cy, glyph_radius(o, size), gap);
        }
        if (clear) {
          ok = true;
          break;
        }
      }
      if (ok) placed.push_back(g);
    }
    if (ok) {
      panel.distractors = std::move(placed);
      return;
    }
  }
  throw InvariantError("could not place distractor letters in a " + std::to_string(panel.size) + "px panel");
}

PanelSpec sample_panel(int size, std::uint64_t seed, const SamplerConfig& cfg) {
  if (size <= 0) throw ParameterError("panel size must be positive");
  const double gap = stroke_margin(size);
  const double mid = 0.5 * size;
  for (std::uint64_t sub = 0;; ++sub) {
    std::mt19937_64 rng(derive_seed(seed, {sub}));
    std::uniform_int_distribution<int> orient_d(0, 7);
    std::uniform_real_distribution<double> scale_d(cfg.scale_min, cfg.scale_max);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    PanelSpec panel;
    panel.size = size;
    bool ok = true;
    for (int i = 0; i < 2 && ok; ++i) {
      ArrowSpec a;
      a.orientation = 45 * orient_d(rng);
      a.scale = scale_d(rng);
      const double r = 0.5 * a.length(size);
      // Centres stay within this radius so every rotation about the panel centre keeps the arrow inside.
      const double reach = mid - r - gap;
      ok = false;
      if (reach <= 0) break;
      for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        const double dx = unit(rng) * reach;
        const double dy = unit(rng) * reach;
        if (std::hypot(dx, dy) > reach) continue;
        a.cx = mid + dx;
        a.cy = mid + dy;
        bool clear = true;
        for (const ArrowSpec& o : panel.arrows) {
          clear = clear && !overlaps(a.cx, a.cy, r, o.cx, o.cy, 0.5 * o.length(size), gap);
        }
        if (clear) {
          ok = true;
          break;
        }
      }
      if (ok) panel.arrows.push_back(a);
    }
    if (!ok) {
      if (sub > 1000) throw InvariantError("could not place two arrows in a " + std::to_string(size) + "px panel");
      continue;
    }
    resample_distractors(panel, derive_seed(seed, {sub, 0xD15u}), cfg);
    return panel;
  }
}

Stage1Sample make_stage1_sample(int size, std::uint64_t seed, const SamplerConfig& cfg) {
  if (!(cfg.anchor_fraction >= 0.0 && cfg.anchor_fraction <= 1.0)) {
    throw ParameterError("anchor_fraction must be in [0, 1]");
  }
  Stage1Sample s;
  s.panel = sample_panel(size, seed, cfg);
  if (cfg.anchor_fraction > 0.0) {
    std::mt19937_64 rng(derive_seed(seed, {0xA7C4u}));
    if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.anchor_fraction) s.panel.arrows[0].orientation = 0;
  }
  s.label = panel_label(s.panel);
  return s;
}

namespace {

bool same_arrows(const PanelSpec& a, const PanelSpec& b) {
  if (a.arrows.size() != b.arrows.size()) return false;
  for (std::size_t i = 0; i < a.arrows.size(); ++i) {
    const ArrowSpec& x = a.arrows[i];
    const ArrowSpec& y = b.arrows[i];
    if (x.orientation != y.orientation || std::abs(x.cx - y.cx) > 1e-6 || std::abs(x.cy - y.cy) > 1e-6 ||
        std::abs(x.scale - y.scale) > 1e-12) {
      return false;
    }
  }
  return true;
}

}  // namespace

std::vector<RowRule> consistent_rules(const Stage2Episode& ep) {
  std::vector<RowRule> out;
  const int n = ep.grid;
  for (const RowRule& rule : admissible_rules(n)) {
    bool ok = true;
    for (int r = 0; r < n && ok; ++r) {
      for (int c = 1; c < n && ok; ++c) {
        if (r == ep.query_cell[0] && c == ep.query_cell[1]) continue;
        ok = same_arrows(apply_rule(ep.at(r, c - 1), rule, c), ep.at(r, c));
      }
    }
    if (ok) out.push_back(rule);
  }
  return out;
}

Stage2Episode make_stage2_episode(int grid, int size, std::uint64_t seed, const SamplerConfig& cfg) {
  if (grid < 2 || grid > 4) throw ParameterError("grid size must be 2, 3 or 4, got " + std::to_string(grid));
  if (size <= 0 || size % grid != 0) {
    throw ParameterError("canvas size " + std::to_string(size) + " does not split into " + std::to_string(grid) +
                         " equal panels");
  }
  const int ps = size / grid;
  const std::vector<RowRule> rules = admissible_rules(grid);
  for (std::uint64_t attempt = 0;; ++attempt) {
    const std::uint64_t s = derive_seed(seed, {attempt});
    Stage2Episode ep;
    ep.grid = grid;
    ep.rule = rules[mix_seed(s) % rules.size()];
    ep.query_cell = {grid - 1, grid - 1};
    for (int r = 0; r < grid; ++r) {
      PanelSpec prev = sample_panel(ps, derive_seed(s, {static_cast<std::uint64_t>(r), 0}), cfg);
      ep.panels.push_back(prev);
      for (int c = 1; c < grid; ++c) {
        PanelSpec next = apply_rule(prev, ep.rule, c);
        resample_distractors(next, derive_seed(s, {static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(c)}),
                             cfg);
        ep.panels.push_back(next);
        prev = next;
      }
    }
    const int q = ep.query_cell[0] * grid + ep.query_cell[1];
    ep.answer = ep.panels[q];
    ep.label = panel_label(ep.answer);
    ep.panels[q] = PanelSpec{ps, {}, {}};

    bool unique = true;
    for (const RowRule& rule : consistent_rules(ep)) {
      const PanelSpec pred = apply_rule(ep.at(ep.query_cell[0], ep.query_cell[1] - 1), rule, ep.query_cell[1]);
      unique = unique && panel_label(pred) == ep.label;
    }
    if (unique) return ep;
    if (attempt > 1000) throw InvariantError("could not draw an unambiguous episode");
  }
}

// ----- datasets -----

std::string config_hash(const DatasetSpec& spec) {
  nlohmann::json j = {{"stage", spec.stage},
                      {"grid", spec.grid},
                      {"count", spec.count},
                      {"seed", spec.seed},
                      {"size", spec.size},
                      {"scale", {spec.sampler.scale_min, spec.sampler.scale_max}},
                      {"distractors", {spec.sampler.distractors_min, spec.sampler.distractors_max}},
                      {"max_attempts", spec.sampler.max_attempts}};
  if (spec.sampler.anchor_fraction > 0.0) j["anchor_fraction"] = spec.sampler.anchor_fraction;
  return hash_json(j);
}

std::vector<ManifestRecord> generate_dataset(const DatasetSpec& spec, const std::filesystem::path& dir) {
  if (spec.count < 1) throw ParameterError("dataset count must be at least 1");
  if (spec.stage != 1 && spec.stage != 2) throw ParameterError("stage must be 1 or 2");
  if (spec.stage == 2 && (spec.grid < 2 || spec.grid > 4)) throw ParameterError("grid size must be 2, 3 or 4");
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw FileError("cannot create " + (dir / "images").string() + ": " + ec.message());

  const std::string hash = config_hash(spec);
  std::vector<ManifestRecord> records;
  std::ofstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw FileError("cannot write " + (dir / "manifest.jsonl").string());
  for (int i = 0; i < spec.count; ++i) {
    ManifestRecord rec;
    rec.stage = spec.stage;
    rec.grid = spec.stage == 1 ? 1 : spec.grid;
    rec.seed = derive_seed(spec.seed, {static_cast<std::uint64_t>(spec.stage), static_cast<std::uint64_t>(i)});
    std::ostringstream name;
    name << "images/" << std::setw(6) << std::setfill('0') << i << ".pgm";
    rec.image = name.str();
    Raster raster;
    if (spec.stage == 1) {
      const Stage1Sample s = make_stage1_sample(spec.size, rec.seed, spec.sampler);
      rec.label = s.label;
      raster = render_panel(s.panel);
    } else {
      const Stage2Episode ep = make_stage2_episode(spec.grid, spec.size, rec.seed, spec.sampler);
      rec.label = ep.label;
      rec.rule = to_string(ep.rule);
      raster = render_episode(ep);
    }
    write_pgm(dir / rec.image, raster, spec.size, spec.size);
    nlohmann::json line = {{"image", rec.image}, {"label", rec.label}, {"stage", rec.stage}, {"grid", rec.grid},
                           {"rule", rec.rule},   {"seed", rec.seed},   {"config_hash", hash}};
    manifest << line.dump() << '\n';
    records.push_back(std::move(rec));
  }
  return records;
}

Dataset load_dataset(const std::filesystem::path& dir, std::optional<std::size_t> limit) {
  const auto path = dir / "manifest.jsonl";
  std::ifstream in(path);
  if (!in) throw FileError("missing dataset manifest " + path.string());
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (limit && ds.records.size() >= *limit) break;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FileError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    ManifestRecord rec;
    rec.image = j.at("image").get<std::string>();
    rec.label = j.at("label").get<int>();
    rec.stage = j.value("stage", 1);
    rec.grid = j.value("grid", 1);
    rec.rule = j.value("rule", std::string());
    rec.seed = j.value("seed", std::uint64_t{0});
    if (rec.label < 0 || rec.label >= 8) {
      throw ParameterError(path.string() + ":" + std::to_string(lineno) + ": label out of range");
    }
    int w = 0, h = 0;
    Raster px = read_pgm(dir / rec.image, &w, &h);
    if (w != h) throw FileError(rec.image + " is not square");
    if (ds.size == 0) ds.size = w;
    if (w != ds.size) throw FileError(rec.image + " has size " + std::to_string(w) + ", expected " + std::to_string(ds.size));
    ds.images.push_back(std::move(px));
    ds.labels.push_back(rec.label);
    ds.records.push_back(std::move(rec));
  }
  if (ds.records.empty()) throw ParameterError("dataset " + dir.string() + " is empty");
  return ds;
}

}  // namespace opro
