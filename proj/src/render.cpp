#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "opro/bench.hpp"
#include "opro/errors.hpp"

namespace opro {

namespace {

struct Point {
  double x, y;
};

struct Segment {
  Point a, b;
};

// Letter strokes in a unit box centred at the origin, y up.
struct Glyph {
  char letter;
  std::vector<std::vector<Point>> strokes;
};

const std::vector<Glyph>& glyph_table() {
  static const std::vector<Glyph> table = {
      {'A', {{{-0.4, -0.5}, {0.0, 0.5}, {0.4, -0.5}}, {{-0.22, -0.05}, {0.22, -0.05}}}},
      {'E', {{{0.4, 0.5}, {-0.4, 0.5}, {-0.4, -0.5}, {0.4, -0.5}}, {{-0.4, 0.0}, {0.25, 0.0}}}},
      {'F', {{{0.4, 0.5}, {-0.4, 0.5}, {-0.4, -0.5}}, {{-0.4, 0.0}, {0.25, 0.0}}}},
      {'H', {{{-0.4, 0.5}, {-0.4, -0.5}}, {{0.4, 0.5}, {0.4, -0.5}}, {{-0.4, 0.0}, {0.4, 0.0}}}},
      {'L', {{{-0.4, 0.5}, {-0.4, -0.5}, {0.4, -0.5}}}},
      {'N', {{{-0.4, -0.5}, {-0.4, 0.5}, {0.4, -0.5}, {0.4, 0.5}}}},
      {'T', {{{-0.45, 0.5}, {0.45, 0.5}}, {{0.0, 0.5}, {0.0, -0.5}}}},
      {'Z', {{{-0.4, 0.5}, {0.4, 0.5}, {-0.4, -0.5}, {0.4, -0.5}}}},
  };
  return table;
}

double stroke_width(int size) { return std::max(1.25, 0.03 * size); }

double segment_distance(Point p, const Segment& s) {
  const double vx = s.b.x - s.a.x;
  const double vy = s.b.y - s.a.y;
  const double wx = p.x - s.a.x;
  const double wy = p.y - s.a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? (wx * vx + wy * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(wx - t * vx, wy - t * vy);
}

void arrow_segments(const ArrowSpec& a, int size, std::vector<Segment>& out) {
  const double len = a.length(size);
  const double th = a.orientation * M_PI / 180.0;
  // Screen direction: counterclockwise with y pointing down.
  const double dx = std::cos(th);
  const double dy = -std::sin(th);
  const Point tail{a.cx - 0.5 * len * dx, a.cy - 0.5 * len * dy};
  const Point tip{a.cx + 0.5 * len * dx, a.cy + 0.5 * len * dy};
  out.push_back({tail, tip});
  const double head = 0.3 * len;
  for (double sign : {1.0, -1.0}) {
    const double phi = th + sign * 150.0 * M_PI / 180.0;
    out.push_back({tip, {tip.x + head * std::cos(phi), tip.y - head * std::sin(phi)}});
  }
}

void glyph_segments(const GlyphSpec& g, int size, std::vector<Segment>& out) {
  const double box = g.box(size);
  for (const auto& stroke : glyph_table()[g.glyph].strokes) {
    for (std::size_t i = 1; i < stroke.size(); ++i) {
      out.push_back({{g.cx + box * stroke[i - 1].x, g.cy - box * stroke[i - 1].y},
                     {g.cx + box * stroke[i].x, g.cy - box * stroke[i].y}});
    }
  }
}

void rasterize(const std::vector<Segment>& segs, int size, double width, std::vector<double>& coverage) {
  const double half = 0.5 * width;
  for (const Segment& s : segs) {
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.x, s.b.x) - half - 1)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(s.a.x, s.b.x) + half + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(s.a.y, s.b.y) - half - 1)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(s.a.y, s.b.y) + half + 1)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double d = segment_distance({x + 0.5, y + 0.5}, s);
        const double c = std::clamp(half + 0.5 - d, 0.0, 1.0);
        double& cov = coverage[static_cast<std::size_t>(y) * size + x];
        cov = std::max(cov, c);
      }
    }
  }
}

}  // namespace

char glyph_letter(int glyph) {
  if (glyph < 0 || glyph >= kGlyphCount) throw ParameterError("unknown glyph id " + std::to_string(glyph));
  return glyph_table()[glyph].letter;
}

Raster render_panel(const PanelSpec& spec) {
  spec.validate();
  std::vector<Segment> segs;
  for (const ArrowSpec& a : spec.arrows) arrow_segments(a, spec.size, segs);
  for (const GlyphSpec& g : spec.distractors) glyph_segments(g, spec.size, segs);
  std::vector<double> coverage(static_cast<std::size_t>(spec.size) * spec.size, 0.0);
  rasterize(segs, spec.size, stroke_width(spec.size), coverage);
  Raster out(coverage.size());
  for (std::size_t i = 0; i < coverage.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - coverage[i])));
  }
  return out;
}

Raster render_episode(const Stage2Episode& ep) {
  const int n = ep.grid;
  if (ep.panels.size() != static_cast<std::size_t>(n * n)) throw ParameterError("episode needs n*n panels");
  const int ps = ep.panels.front().size;
  const int size = ps * n;
  Raster canvas(static_cast<std::size_t>(size) * size, 255);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const PanelSpec& p = ep.at(r, c);
      if (p.size != ps) throw ParameterError("episode panels differ in size");
      const Raster tile = render_panel(p);
      for (int y = 0; y < ps; ++y) {
        std::copy_n(tile.begin() + static_cast<std::ptrdiff_t>(y) * ps, ps,
                    canvas.begin() + static_cast<std::ptrdiff_t>(r * ps + y) * size + c * ps);
      }
    }
  }
  return canvas;
}

void write_pgm(const std::filesystem::path& path, const Raster& pixels, int width, int height) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) throw ShapeError("raster size does not match header");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw FileError("short write to " + path.string());
}

Raster read_pgm(const std::filesystem::path& path, int* width, int* height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open image " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w <= 0 || h <= 0 || maxval != 255) throw FileError(path.string() + " is not an 8-bit binary PGM");
  in.get();
  Raster px(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (in.gcount() != static_cast<std::streamsize>(px.size())) throw FileError(path.string() + " is truncated");
  if (width) *width = w;
  if (height) *height = h;
  return px;
}

}  // namespace opro
