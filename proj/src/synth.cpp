// Procedural glyph dataset. Every class owns one glyph; a separate clutter
// vocabulary supplies distractors so no image shows another class's glyph.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "dcap/episodes.hpp"
#include "dcap/errors.hpp"

namespace dcap {

std::string_view to_string(GlyphStyle s) { return s == GlyphStyle::strokes ? "strokes" : "blocks"; }

GlyphStyle parse_glyph_style(std::string_view s) {
  if (s == "strokes") return GlyphStyle::strokes;
  if (s == "blocks") return GlyphStyle::blocks;
  throw ConfigError("unknown glyph style '" + std::string(s) + "' (expected strokes or blocks)");
}

void SynthSpec::validate() const {
  if (train_classes == 0 || val_classes == 0 || test_classes == 0) throw ConfigError("synth: every split needs classes");
  if (images_per_class == 0) throw ConfigError("synth: images_per_class must be positive");
  if (extent % 16 != 0) throw ConfigError("synth: extent must be divisible by 16");
  if (extent < 32) throw ConfigError("synth: extent " + std::to_string(extent) + " is too small for glyphs (minimum 32)");
  if (channels != 1 && channels != 3) throw ConfigError("synth: channels must be 1 or 3");
  double total = 0;
  for (double w : regime_weights) {
    if (!(w >= 0)) throw ConfigError("synth: regime weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("synth: regime weights must sum to 1");
  if (!(noise >= 0 && noise <= 1)) throw ConfigError("synth: noise must lie in [0, 1]");
}

namespace {

constexpr std::size_t kClutterGlyphs = 16;
constexpr std::size_t kCells = 4;

struct Glyph {
  GlyphStyle style = GlyphStyle::strokes;
  std::vector<std::array<double, 4>> segments;  // unit coordinates
  std::array<bool, kCells * kCells> cells{};
};

double segment_distance(double px, double py, const std::array<double, 4>& s) {
  const double vx = s[2] - s[0], vy = s[3] - s[1];
  const double wx = px - s[0], wy = py - s[1];
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? (wx * vx + wy * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = wx - t * vx, dy = wy - t * vy;
  return std::sqrt(dx * dx + dy * dy);
}

/// Coverage of the glyph at unit coordinates (u, v) when drawn `size` pixels wide.
double glyph_value(const Glyph& g, double u, double v, double size) {
  if (g.style == GlyphStyle::strokes) {
    double d = 1e9;
    for (const auto& s : g.segments) d = std::min(d, segment_distance(u, v, s));
    const double half = std::max(1.0, 0.06 * size);
    return std::clamp(half + 0.5 - d * size, 0.0, 1.0);
  }
  // blocks: 3x3 supersampling over one pixel footprint
  double acc = 0;
  const double step = 1.0 / size;
  for (int sy = -1; sy <= 1; ++sy) {
    for (int sx = -1; sx <= 1; ++sx) {
      const double uu = u + sx * step / 3.0, vv = v + sy * step / 3.0;
      const double gu = (uu - 0.05) / 0.9 * kCells, gv = (vv - 0.05) / 0.9 * kCells;
      if (gu < 0 || gv < 0 || gu >= kCells || gv >= kCells) continue;
      const auto cx = static_cast<std::size_t>(gu), cy = static_cast<std::size_t>(gv);
      const double fx = gu - static_cast<double>(cx), fy = gv - static_cast<double>(cy);
      if (g.cells[cy * kCells + cx] && fx > 0.08 && fx < 0.92 && fy > 0.08 && fy < 0.92) acc += 1.0;
    }
  }
  return acc / 9.0;
}

std::vector<float> raster(const Glyph& g, std::size_t n) {
  std::vector<float> m(n * n);
  const double size = static_cast<double>(n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      m[y * n + x] = static_cast<float>(glyph_value(g, (x + 0.5) / size, (y + 0.5) / size, size));
  return m;
}

double overlap(const std::vector<float>& a, const std::vector<float>& b) {
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] > 0.5f, ib = b[i] > 0.5f;
    inter += (ia && ib) ? 1.0 : 0.0;
    uni += (ia || ib) ? 1.0 : 0.0;
  }
  return uni > 0 ? inter / uni : 1.0;
}

Glyph random_glyph(GlyphStyle style, CounterRng& rng) {
  Glyph g;
  g.style = style;
  if (style == GlyphStyle::strokes) {
    const std::size_t strokes = 3 + rng.below(2);
    while (g.segments.size() < strokes) {
      const std::size_t a = rng.below(16), b = rng.below(16);
      const double ax = 0.1 + 0.8 * static_cast<double>(a % 4) / 3.0, ay = 0.1 + 0.8 * static_cast<double>(a / 4) / 3.0;
      const double bx = 0.1 + 0.8 * static_cast<double>(b % 4) / 3.0, by = 0.1 + 0.8 * static_cast<double>(b / 4) / 3.0;
      if (std::hypot(ax - bx, ay - by) < 0.3) continue;
      g.segments.push_back({ax, ay, bx, by});
    }
  } else {
    const std::size_t filled = 5 + rng.below(4);
    for (std::size_t k : rng.sample_without_replacement(kCells * kCells, filled)) g.cells[k] = true;
  }
  return g;
}

/// Class glyphs first, then the clutter vocabulary; each new glyph must
/// differ clearly from all earlier ones.
std::vector<Glyph> vocabulary(const SynthSpec& spec) {
  const std::size_t classes = spec.train_classes + spec.val_classes + spec.test_classes;
  const std::size_t total = classes + kClutterGlyphs;
  CounterRng rng = CounterRng(spec.seed).child(0);
  std::vector<Glyph> out;
  std::vector<std::vector<float>> masks;
  double limit = 0.45;
  std::size_t tries = 0;
  while (out.size() < total) {
    Glyph g = random_glyph(spec.style, rng);
    std::vector<float> m = raster(g, 24);
    bool ok = true;
    for (const auto& prev : masks)
      if (overlap(prev, m) > limit) {
        ok = false;
        break;
      }
    if (ok) {
      out.push_back(std::move(g));
      masks.push_back(std::move(m));
      tries = 0;
    } else if (++tries > 500) {
      limit += 0.05;  // very large vocabularies: relax the distinctness bound
      tries = 0;
    }
  }
  return out;
}

struct Placement {
  const Glyph* glyph;
  double cx, cy, size, angle, intensity;
};

void draw(std::vector<double>& canvas, std::size_t extent, const Placement& p) {
  const double reach = p.size * 0.75;
  const double c = std::cos(-p.angle), s = std::sin(-p.angle);
  const auto lo_x = static_cast<long>(std::max(0.0, std::floor(p.cx - reach)));
  const auto hi_x = static_cast<long>(std::min<double>(static_cast<double>(extent) - 1, std::ceil(p.cx + reach)));
  const auto lo_y = static_cast<long>(std::max(0.0, std::floor(p.cy - reach)));
  const auto hi_y = static_cast<long>(std::min<double>(static_cast<double>(extent) - 1, std::ceil(p.cy + reach)));
  for (long y = lo_y; y <= hi_y; ++y) {
    for (long x = lo_x; x <= hi_x; ++x) {
      const double dx = x + 0.5 - p.cx, dy = y + 0.5 - p.cy;
      const double u = (c * dx - s * dy) / p.size + 0.5, v = (s * dx + c * dy) / p.size + 0.5;
      if (u < -0.05 || u > 1.05 || v < -0.05 || v > 1.05) continue;
      const double m = glyph_value(*p.glyph, u, v, p.size);
      if (m <= 0) continue;
      double& px = canvas[static_cast<std::size_t>(y) * extent + static_cast<std::size_t>(x)];
      px = px * (1 - m) + p.intensity * m;
    }
  }
}

Regime pick_regime(const SynthSpec& spec, CounterRng& rng) {
  const double u = rng.uniform();
  if (u < spec.regime_weights[0]) return Regime::salient_centered;
  if (u < spec.regime_weights[0] + spec.regime_weights[1]) return Regime::small_clean;
  // guard against rounding in the weights: never pick a zero-weight regime
  if (spec.regime_weights[2] > 0) return Regime::small_distractors;
  return spec.regime_weights[1] > 0 ? Regime::small_clean : Regime::salient_centered;
}

}  // namespace

std::vector<float> synth_glyph(const SynthSpec& spec, std::size_t glyph, std::size_t size) {
  spec.validate();
  const std::vector<Glyph> vocab = vocabulary(spec);
  if (glyph >= vocab.size() - kClutterGlyphs) throw std::out_of_range("synth_glyph: glyph index " + std::to_string(glyph));
  return raster(vocab[glyph], size);
}

Dataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  const std::vector<Glyph> vocab = vocabulary(spec);
  const std::size_t classes = spec.train_classes + spec.val_classes + spec.test_classes;
  const std::size_t e = spec.extent;
  const double ext = static_cast<double>(e);
  Dataset ds(spec.channels, e);
  const CounterRng image_root = CounterRng(spec.seed).child(1);

  const std::array<std::pair<Split, std::size_t>, 3> layout{
      {{Split::meta_train, spec.train_classes}, {Split::meta_val, spec.val_classes}, {Split::meta_test, spec.test_classes}}};
  std::size_t glyph_index = 0, image_index = 0;
  std::vector<std::uint8_t> pixels(ds.image_bytes());
  for (const auto& [split, count] : layout) {
    for (std::size_t k = 0; k < count; ++k, ++glyph_index) {
      char name[32];
      std::snprintf(name, sizeof name, "class_%03zu", glyph_index);
      const std::size_t cls = ds.add_class(name, split);
      for (std::size_t i = 0; i < spec.images_per_class; ++i, ++image_index) {
        CounterRng rng = image_root.child(image_index);
        ImageMeta meta;
        meta.regime = pick_regime(spec, rng);
        std::vector<double> canvas(e * e, rng.uniform(0.0, 0.25));
        Placement target{&vocab[glyph_index], 0, 0, 0, rng.uniform(-0.2, 0.2), rng.uniform(0.7, 1.0)};
        if (meta.regime == Regime::salient_centered) {
          target.size = ext * rng.uniform(0.55, 0.7);
          target.cx = ext / 2 + rng.uniform(-3, 3);
          target.cy = ext / 2 + rng.uniform(-3, 3);
        } else {
          target.size = ext * rng.uniform(0.28, 0.36);
          const double margin = target.size * 0.6;
          target.cx = rng.uniform(margin, ext - margin);
          target.cy = rng.uniform(margin, ext - margin);
        }
        std::vector<Placement> clutter;
        if (meta.regime == Regime::small_distractors) {
          const std::size_t want = 1 + rng.below(3);
          for (std::size_t attempt = 0; clutter.size() < want && attempt < 64; ++attempt) {
            Placement d{&vocab[classes + rng.below(kClutterGlyphs)], 0, 0, ext * rng.uniform(0.2, 0.3),
                        rng.uniform(-0.4, 0.4), rng.uniform(0.5, 0.9)};
            const double margin = d.size * 0.6;
            d.cx = rng.uniform(margin, ext - margin);
            d.cy = rng.uniform(margin, ext - margin);
            bool clear = std::hypot(d.cx - target.cx, d.cy - target.cy) > 0.55 * (d.size + target.size);
            for (const Placement& o : clutter) clear = clear && std::hypot(d.cx - o.cx, d.cy - o.cy) > 0.55 * (d.size + o.size);
            if (clear) clutter.push_back(d);
          }
          if (clutter.empty()) {
            // crowded canvas: accept one overlapping distractor rather than none
            Placement d{&vocab[classes + rng.below(kClutterGlyphs)], ext * 0.25, ext * 0.25, ext * 0.22, 0.0, 0.7};
            if (target.cx < ext / 2) d.cx = ext * 0.75;
            if (target.cy < ext / 2) d.cy = ext * 0.75;
            clutter.push_back(d);
          }
        }
        for (const Placement& d : clutter) draw(canvas, e, d);
        draw(canvas, e, target);
        meta.center_x = target.cx;
        meta.center_y = target.cy;
        meta.glyph_size = target.size;
        meta.distractors = clutter.size();

        for (std::size_t c = 0; c < spec.channels; ++c) {
          // colour images tint each channel slightly differently
          const double gain = spec.channels == 1 ? 1.0 : 0.85 + 0.15 * rng.uniform();
          for (std::size_t p = 0; p < e * e; ++p) {
            double v = canvas[p] * gain;
            if (spec.noise > 0) v += spec.noise * rng.normal();
            pixels[c * e * e + p] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
          }
        }
        ds.add_image(cls, pixels, &meta);
      }
    }
  }
  return ds;
}

}  // namespace dcap
