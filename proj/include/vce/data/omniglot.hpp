#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "vce/binary_io.hpp"
#include "vce/errors.hpp"
#include "vce/image_io.hpp"
#include "vce/rng.hpp"

namespace vce::data {

namespace fs = std::filesystem;

inline constexpr std::size_t kGlyphSize = 28;
inline constexpr std::size_t kGlyphPixels = kGlyphSize * kGlyphSize;

struct ClassId {
  std::string alphabet;
  std::string character;
  friend auto operator<=>(const ClassId&, const ClassId&) = default;
};

// 28x28 glyph, stroke-high: strokes near 1, background near 0.
struct GlyphImage {
  std::vector<float> pixels = std::vector<float>(kGlyphPixels, 0.0f);
  std::size_t class_index = 0;
  int drawer_id = 0;
};

struct CharacterClass {
  ClassId id;
  std::vector<GlyphImage> exemplars;
};

struct Dataset {
  std::vector<CharacterClass> classes;

  std::vector<std::string> alphabets() const {
    std::set<std::string> s;
    for (const auto& c : classes) s.insert(c.id.alphabet);
    return {s.begin(), s.end()};
  }

  std::size_t exemplar_count() const {
    std::size_t n = 0;
    for (const auto& c : classes) n += c.exemplars.size();
    return n;
  }

  // Classes belonging to the named alphabets, re-indexed from zero.
  Dataset restrict_to(const std::vector<std::string>& keep) const {
    std::set<std::string> wanted(keep.begin(), keep.end());
    Dataset out;
    for (const auto& c : classes) {
      if (!wanted.count(c.id.alphabet)) continue;
      out.classes.push_back(c);
      for (auto& e : out.classes.back().exemplars) e.class_index = out.classes.size() - 1;
    }
    return out;
  }
};

// ------------------------------------------------------------- preprocessing

inline float byte_to_unit(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

inline std::uint8_t unit_to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Box-filter (area-average) resampling. Every output pixel averages the
// source area it covers, with fractional weights at the boundaries; an
// equal-size resample is the identity.
inline std::vector<float> area_resample(std::span<const float> src, std::size_t w, std::size_t h, std::size_t out_w,
                                        std::size_t out_h) {
  if (src.size() != w * h || w == 0 || h == 0 || out_w == 0 || out_h == 0) {
    throw ShapeError("area_resample: bad dimensions");
  }
  auto weights = [](std::size_t in, std::size_t out) {
    std::vector<std::vector<std::pair<std::size_t, double>>> wt(out);
    const double step = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double lo = static_cast<double>(o) * step, hi = lo + step;
      for (auto i = static_cast<std::size_t>(std::floor(lo)); i < in && static_cast<double>(i) < hi; ++i) {
        const double overlap = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
        if (overlap > 0.0) wt[o].emplace_back(i, overlap / step);
      }
    }
    return wt;
  };
  const auto wy = weights(h, out_h);
  const auto wx = weights(w, out_w);
  std::vector<double> rows(out_h * w, 0.0);
  for (std::size_t o = 0; o < out_h; ++o) {
    for (auto [r, f] : wy[o]) {
      for (std::size_t c = 0; c < w; ++c) rows[o * w + c] += f * src[r * w + c];
    }
  }
  std::vector<float> out(out_w * out_h);
  for (std::size_t o = 0; o < out_h; ++o) {
    for (std::size_t oc = 0; oc < out_w; ++oc) {
      double acc = 0.0;
      for (auto [c, f] : wx[oc]) acc += f * rows[o * w + c];
      out[o * out_w + oc] = static_cast<float>(acc);
    }
  }
  return out;
}

// Resize an already stroke-high raster to 28x28 and clamp to [0, 1].
// Idempotent on 28x28 inputs in [0, 1].
inline std::vector<float> normalize_glyph(std::span<const float> stroke_high, std::size_t w, std::size_t h) {
  auto out = area_resample(stroke_high, w, h, kGlyphSize, kGlyphSize);
  for (auto& v : out) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

// Raw scan (dark ink on light paper) -> 28x28 stroke-high glyph.
inline GlyphImage preprocess(const io::GrayImage& raw) {
  if (raw.width == 0 || raw.height == 0 || raw.pixels.size() != raw.width * raw.height) {
    throw DecodeError("preprocess: empty or inconsistent image");
  }
  std::vector<float> inv(raw.pixels.size());
  for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = 1.0f - byte_to_unit(raw.pixels[i]);
  GlyphImage g;
  g.pixels = normalize_glyph(inv, raw.width, raw.height);
  return g;
}

// Round-trips pixels through the 8-bit cache representation.
inline void quantize(GlyphImage& g) {
  for (auto& v : g.pixels) v = byte_to_unit(unit_to_byte(v));
}

// ----------------------------------------------------------------- ingestion

inline bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".pgm";
}

// Omniglot names drawings "<image id>_<drawer>.png".
inline int drawer_from_filename(const fs::path& p, int fallback) {
  const auto stem = p.stem().string();
  const auto us = stem.rfind('_');
  if (us == std::string::npos) return fallback;
  try {
    return std::stoi(stem.substr(us + 1));
  } catch (...) {
    return fallback;
  }
}

// Loads every character directory under `root`. The alphabet of a character
// is its parent directory relative to root, so the standard distribution
// yields names like "images_background/Latin".
inline Dataset ingest(const fs::path& root) {
  std::error_code ec;
  if (!fs::exists(root, ec)) throw IngestError("Omniglot root does not exist: " + root.string());
  if (!fs::is_directory(root, ec)) throw IngestError("Omniglot root is not a directory: " + root.string());

  std::map<fs::path, std::vector<fs::path>> by_character;
  for (auto it = fs::recursive_directory_iterator(root, ec); !ec && it != fs::recursive_directory_iterator();
       it.increment(ec)) {
    if (it->is_regular_file() && is_image_file(it->path())) by_character[it->path().parent_path()].push_back(it->path());
  }
  if (ec) throw IngestError("cannot walk " + root.string() + ": " + ec.message());
  if (by_character.empty()) throw IngestError("no image files found under " + root.string());

  Dataset ds;
  std::vector<std::string> bad;
  for (auto& [dir, files] : by_character) {
    std::sort(files.begin(), files.end());
    CharacterClass cls;
    const auto rel = fs::relative(dir, root);
    cls.id.character = rel.filename().generic_string();
    cls.id.alphabet = rel.has_parent_path() ? rel.parent_path().generic_string() : std::string(".");
    for (std::size_t i = 0; i < files.size(); ++i) {
      try {
        GlyphImage g = preprocess(io::read_image(files[i]));
        quantize(g);
        g.class_index = ds.classes.size();
        g.drawer_id = drawer_from_filename(files[i], static_cast<int>(i + 1));
        cls.exemplars.push_back(std::move(g));
      } catch (const std::exception& e) {
        bad.push_back(files[i].string() + " (" + e.what() + ")");
      }
    }
    if (bad.empty() && cls.exemplars.size() < 2) bad.push_back(dir.string() + " (fewer than 2 exemplars)");
    ds.classes.push_back(std::move(cls));
  }
  if (!bad.empty()) {
    std::string msg = "ingestion failed for " + std::to_string(bad.size()) + " path(s):";
    for (const auto& b : bad) msg += "\n  " + b;
    throw IngestError(msg);
  }
  std::stable_sort(ds.classes.begin(), ds.classes.end(),
                   [](const CharacterClass& a, const CharacterClass& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < ds.classes.size(); ++i) {
    for (auto& e : ds.classes[i].exemplars) e.class_index = i;
  }
  return ds;
}

// --------------------------------------------------------------------- cache
//
// "VCED" | version u16 | class count u32 | per class: alphabet length u16,
// alphabet bytes, character length u16, character bytes, exemplar count u16,
// exemplars as 784 u8 each (stroke-high). All integers little-endian.

inline constexpr std::uint16_t kCacheVersion = 1;

inline std::vector<std::uint8_t> encode_cache(const Dataset& ds) {
  io::ByteWriter w;
  w.tag("VCED");
  w.u16(kCacheVersion);
  w.u32(static_cast<std::uint32_t>(ds.classes.size()));
  for (const auto& c : ds.classes) {
    for (const auto* s : {&c.id.alphabet, &c.id.character}) {
      if (s->size() > 0xFFFF) throw IoError("class name too long for cache");
      w.u16(static_cast<std::uint16_t>(s->size()));
      w.bytes(s->data(), s->size());
    }
    w.u16(static_cast<std::uint16_t>(c.exemplars.size()));
    for (const auto& e : c.exemplars) {
      for (float v : e.pixels) w.u8(unit_to_byte(v));
    }
  }
  return w.take();
}

inline Dataset decode_cache(std::span<const std::uint8_t> bytes) {
  io::ByteReader<IoError> r(bytes, "data cache");
  if (r.tag() != "VCED") throw IoError("data cache: bad magic");
  if (const auto v = r.u16(); v != kCacheVersion) throw IoError("data cache: unsupported version " + std::to_string(v));
  Dataset ds;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    CharacterClass c;
    c.id.alphabet = r.raw(r.u16());
    c.id.character = r.raw(r.u16());
    const std::uint16_t count = r.u16();
    std::vector<std::uint8_t> px(kGlyphPixels);
    for (std::uint16_t k = 0; k < count; ++k) {
      r.read_into(px.data(), px.size());
      GlyphImage g;
      for (std::size_t p = 0; p < kGlyphPixels; ++p) g.pixels[p] = byte_to_unit(px[p]);
      g.class_index = i;
      g.drawer_id = k + 1;
      c.exemplars.push_back(std::move(g));
    }
    ds.classes.push_back(std::move(c));
  }
  if (!r.at_end()) throw IoError("data cache: trailing bytes");
  return ds;
}

inline void write_cache(const fs::path& path, const Dataset& ds) { io::write_file_bytes(path, encode_cache(ds)); }

inline Dataset read_cache(const fs::path& path) { return decode_cache(io::read_file_bytes(path)); }

// --------------------------------------------------------------------- split

inline constexpr const char* kBackgroundDir = "images_background";
inline constexpr const char* kEvaluationDir = "images_evaluation";

struct DatasetSplit {
  std::vector<std::string> train_alphabets;
  std::vector<std::string> test_alphabets;
  std::vector<std::size_t> train_classes;
  std::vector<std::size_t> test_classes;
  std::uint64_t seed = 0;
  bool canonical = false;
};

inline bool starts_with_dir(const std::string& name, const std::string& dir) {
  return name.size() > dir.size() && name.compare(0, dir.size(), dir) == 0 && name[dir.size()] == '/';
}

// Background/evaluation directories decide the split when present;
// otherwise alphabets are shuffled with `seed` and 60% (the 30-of-50
// proportion) go to training, at least one on each side.
inline DatasetSplit split(const Dataset& ds, std::uint64_t seed) {
  auto alphabets = ds.alphabets();
  if (alphabets.size() < 2) throw SplitError("need at least 2 alphabets to split, found " + std::to_string(alphabets.size()));
  DatasetSplit s;
  s.seed = seed;
  const bool canonical = std::all_of(alphabets.begin(), alphabets.end(), [](const std::string& a) {
    return starts_with_dir(a, kBackgroundDir) || starts_with_dir(a, kEvaluationDir);
  });
  bool both = false;
  if (canonical) {
    for (const auto& a : alphabets) (starts_with_dir(a, kBackgroundDir) ? s.train_alphabets : s.test_alphabets).push_back(a);
    both = !s.train_alphabets.empty() && !s.test_alphabets.empty();
  }
  if (both) {
    s.canonical = true;
  } else {
    s.train_alphabets.clear();
    s.test_alphabets.clear();
    Rng rng(seed);
    std::shuffle(alphabets.begin(), alphabets.end(), rng.engine());
    const std::size_t n = alphabets.size();
    const auto n_train = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(0.6 * static_cast<double>(n))), 1, n - 1);
    s.train_alphabets.assign(alphabets.begin(), alphabets.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.test_alphabets.assign(alphabets.begin() + static_cast<std::ptrdiff_t>(n_train), alphabets.end());
    std::sort(s.train_alphabets.begin(), s.train_alphabets.end());
    std::sort(s.test_alphabets.begin(), s.test_alphabets.end());
  }
  const std::set<std::string> train(s.train_alphabets.begin(), s.train_alphabets.end());
  for (std::size_t i = 0; i < ds.classes.size(); ++i) {
    (train.count(ds.classes[i].id.alphabet) ? s.train_classes : s.test_classes).push_back(i);
  }
  return s;
}

// ------------------------------------------------------------------ episodes

struct Episode {
  GlyphImage condition;
  std::vector<GlyphImage> support;
  std::size_t class_index = 0;
  std::size_t condition_exemplar = 0;
  std::vector<std::size_t> support_exemplars;
};

// Condition chosen uniformly within the class; support drawn without
// replacement from the remaining exemplars.
inline Episode sample_episode_from_class(const Dataset& ds, std::size_t class_index, std::size_t support_size, Rng& rng) {
  const auto& cls = ds.classes.at(class_index);
  if (support_size < 1) throw SamplingError("support size must be at least 1");
  if (support_size + 1 > cls.exemplars.size()) {
    throw SamplingError("support size " + std::to_string(support_size) + " needs " + std::to_string(support_size + 1) +
                        " exemplars, class has " + std::to_string(cls.exemplars.size()));
  }
  Episode ep;
  ep.class_index = class_index;
  std::vector<std::size_t> idx(cls.exemplars.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t c = rng.index(idx.size());
  ep.condition_exemplar = idx[c];
  std::swap(idx[c], idx.back());
  idx.pop_back();
  for (std::size_t i = 0; i < support_size; ++i) {
    const std::size_t j = i + rng.index(idx.size() - i);
    std::swap(idx[i], idx[j]);
    ep.support_exemplars.push_back(idx[i]);
  }
  ep.condition = cls.exemplars[ep.condition_exemplar];
  for (auto e : ep.support_exemplars) ep.support.push_back(cls.exemplars[e]);
  return ep;
}

// One class uniformly from `classes`, then an episode within it.
inline Episode sample_episode(const Dataset& ds, std::span<const std::size_t> classes, std::size_t support_size, Rng& rng) {
  if (classes.empty()) throw SamplingError("cannot sample an episode from an empty split");
  return sample_episode_from_class(ds, classes[rng.index(classes.size())], support_size, rng);
}

// Empty string when the episode is well formed, otherwise the violation.
inline std::string episode_violation(const Episode& ep) {
  if (ep.support.empty()) return "empty support";
  if (ep.support.size() != ep.support_exemplars.size()) return "support bookkeeping mismatch";
  if (ep.condition.class_index != ep.class_index) return "condition from another class";
  std::set<std::size_t> seen;
  for (std::size_t i = 0; i < ep.support.size(); ++i) {
    if (ep.support[i].class_index != ep.class_index) return "support image from another class";
    if (ep.support_exemplars[i] == ep.condition_exemplar) return "condition repeated in support";
    if (!seen.insert(ep.support_exemplars[i]).second) return "support drawn with replacement";
  }
  return {};
}

}  // namespace vce::data
