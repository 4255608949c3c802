#pragma once

// Procedural stand-in for the Omniglot distribution: same directory layout,
// 105x105 black-on-white scans, one subdirectory per character, one file per
// drawer. Each character is a few random cubic strokes; each drawer perturbs
// the control points, applies a small affine jitter and uses its own pen
// width. Used by tests, benchmarks and machines without the real dataset.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <tuple>
#include <vector>

#include "vce/image_io.hpp"
#include "vce/rng.hpp"

namespace vce::data {

struct SyntheticSpec {
  std::size_t background_alphabets = 3;
  std::size_t evaluation_alphabets = 2;
  std::size_t characters_per_alphabet = 20;
  std::size_t drawers = 20;
  std::size_t canvas = 105;
  std::uint64_t seed = 0;
  // Reproduce the real per-split class totals (964 background, 659
  // evaluation) instead of a fixed count per alphabet.
  bool canonical_counts = false;
  io::ImageFormat format = io::ImageFormat::png;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

using Stroke = std::array<Point, 4>;

struct GlyphPrototype {
  std::vector<Stroke> strokes;
};

// Alphabet "style": how many strokes and how curly they are.
struct AlphabetStyle {
  std::size_t min_strokes = 2;
  std::size_t max_strokes = 3;
  double curl = 0.3;
};

inline AlphabetStyle random_style(Rng& rng) {
  AlphabetStyle s;
  s.min_strokes = 2;
  s.max_strokes = 2 + rng.index(3);
  s.curl = rng.uniform(0.1, 0.6);
  return s;
}

inline GlyphPrototype random_prototype(const AlphabetStyle& style, double canvas, Rng& rng) {
  GlyphPrototype g;
  const std::size_t n = style.min_strokes + rng.index(style.max_strokes - style.min_strokes + 1);
  const double lo = 0.15 * canvas, hi = 0.85 * canvas;
  for (std::size_t i = 0; i < n; ++i) {
    Stroke s;
    s[0] = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
    s[3] = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
    for (int k : {1, 2}) {
      const double t = k / 3.0;
      const Point on{s[0].x + t * (s[3].x - s[0].x), s[0].y + t * (s[3].y - s[0].y)};
      const double spread = style.curl * canvas * 0.5;
      s[static_cast<std::size_t>(k)] = {std::clamp(on.x + rng.uniform(-spread, spread), lo, hi),
                                        std::clamp(on.y + rng.uniform(-spread, spread), lo, hi)};
    }
    g.strokes.push_back(s);
  }
  return g;
}

inline Point bezier(const Stroke& s, double t) {
  const double u = 1.0 - t;
  const double a = u * u * u, b = 3 * u * u * t, c = 3 * u * t * t, d = t * t * t;
  return {a * s[0].x + b * s[1].x + c * s[2].x + d * s[3].x, a * s[0].y + b * s[1].y + c * s[2].y + d * s[3].y};
}

// Stamps a disc of radius r along every stroke onto a white canvas.
inline io::GrayImage rasterize(const std::vector<Stroke>& strokes, std::size_t canvas, double r) {
  io::GrayImage img{canvas, canvas, std::vector<std::uint8_t>(canvas * canvas, 255)};
  const auto stamp = [&](Point p) {
    const auto x0 = static_cast<long>(std::floor(p.x - r)), x1 = static_cast<long>(std::ceil(p.x + r));
    const auto y0 = static_cast<long>(std::floor(p.y - r)), y1 = static_cast<long>(std::ceil(p.y + r));
    for (long y = std::max(0L, y0); y <= std::min<long>(static_cast<long>(canvas) - 1, y1); ++y) {
      for (long x = std::max(0L, x0); x <= std::min<long>(static_cast<long>(canvas) - 1, x1); ++x) {
        const double dx = static_cast<double>(x) + 0.5 - p.x, dy = static_cast<double>(y) + 0.5 - p.y;
        if (dx * dx + dy * dy <= r * r) img.pixels[static_cast<std::size_t>(y) * canvas + static_cast<std::size_t>(x)] = 0;
      }
    }
  };
  for (const auto& s : strokes) {
    double len = 0.0;
    for (std::size_t i = 0; i < 3; ++i) len += std::hypot(s[i + 1].x - s[i].x, s[i + 1].y - s[i].y);
    const auto steps = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(len / 0.5)));
    for (std::size_t i = 0; i <= steps; ++i) stamp(bezier(s, static_cast<double>(i) / static_cast<double>(steps)));
  }
  return img;
}

// One drawer's rendition of a prototype.
inline io::GrayImage draw_glyph(const GlyphPrototype& proto, std::size_t canvas, Rng& rng) {
  const double c = static_cast<double>(canvas);
  const double jitter = 0.02 * c;
  const double angle = rng.normal() * 6.0 * std::numbers::pi / 180.0;
  const double scale = rng.uniform(0.9, 1.1);
  const Point shift{rng.normal() * 0.03 * c, rng.normal() * 0.03 * c};
  const double radius = rng.uniform(0.03, 0.05) * c;
  const double ca = std::cos(angle), sa = std::sin(angle), mid = c / 2.0;
  std::vector<Stroke> strokes = proto.strokes;
  for (auto& s : strokes) {
    for (auto& p : s) {
      const double x = p.x + rng.normal() * jitter - mid, y = p.y + rng.normal() * jitter - mid;
      p = {mid + shift.x + scale * (ca * x - sa * y), mid + shift.y + scale * (sa * x + ca * y)};
    }
  }
  return rasterize(strokes, canvas, radius);
}

// Class counts per alphabet adding up to `total` over `alphabets`.
inline std::vector<std::size_t> spread_counts(std::size_t total, std::size_t alphabets) {
  std::vector<std::size_t> out(alphabets, alphabets ? total / alphabets : 0);
  for (std::size_t i = 0; i < (alphabets ? total % alphabets : 0); ++i) ++out[i];
  return out;
}

// Writes root/images_{background,evaluation}/Synthetic_NN/characterMM/IIII_DD.ext.
// Returns the number of image files written.
inline std::size_t write_synthetic_omniglot(const std::filesystem::path& root, const SyntheticSpec& spec) {
  if (spec.drawers < 2) throw ConfigError("synthetic data needs at least 2 drawers per character");
  if (spec.background_alphabets + spec.evaluation_alphabets == 0) throw ConfigError("synthetic data needs alphabets");
  if (spec.canvas < 8) throw ConfigError("synthetic canvas too small");
  Rng rng(spec.seed);
  const char* ext = spec.format == io::ImageFormat::png ? ".png" : ".pgm";
  std::size_t written = 0, image_id = 0, alphabet_no = 0;
  for (const auto& [dir, n_alpha, total] :
       {std::tuple{"images_background", spec.background_alphabets, std::size_t{964}},
        std::tuple{"images_evaluation", spec.evaluation_alphabets, std::size_t{659}}}) {
    const auto counts = spec.canonical_counts ? spread_counts(total, n_alpha)
                                              : std::vector<std::size_t>(n_alpha, spec.characters_per_alphabet);
    for (std::size_t a = 0; a < n_alpha; ++a) {
      char name[64];
      std::snprintf(name, sizeof name, "Synthetic_%02zu", ++alphabet_no);
      const AlphabetStyle style = random_style(rng);
      for (std::size_t ch = 0; ch < counts[a]; ++ch) {
        char cname[32];
        std::snprintf(cname, sizeof cname, "character%02zu", ch + 1);
        const auto cdir = root / dir / name / cname;
        std::filesystem::create_directories(cdir);
        const GlyphPrototype proto = random_prototype(style, static_cast<double>(spec.canvas), rng);
        ++image_id;
        for (std::size_t d = 0; d < spec.drawers; ++d) {
          char fname[48];
          std::snprintf(fname, sizeof fname, "%04zu_%02zu%s", image_id, d + 1, ext);
          io::write_image(cdir / fname, draw_glyph(proto, spec.canvas, rng), spec.format);
          ++written;
        }
      }
    }
  }
  return written;
}

}  // namespace vce::data
