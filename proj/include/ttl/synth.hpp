#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "ttl/data.hpp"
#include "ttl/kv.hpp"

// Synthetic stand-ins for the three training stages: a generic shapes task,
// a multi-label chest-like task and a three-class chest-like target task.
// Chest-like images are a bright body ellipse with two dark lungs on a black
// background; pathologies are patterns stamped inside the lungs.
namespace ttl {

enum class PatternKind { blobs, rings, stripes_h, stripes_v, squares, filled_squares, crosses, diagonals, haze,
                         dark_spots, dots, bars, checker };

/// Generative parameters of one pathology pattern (sizes in pixels at 32x32,
/// scaled with the image).
struct PatternParams {
  PatternKind kind = PatternKind::blobs;
  int count_lo = 1, count_hi = 1;
  double size_lo = 1.0, size_hi = 2.0;  // blob sigma, ring radius, square half-size, stripe period
  double intensity = 0.35;
};

/// Shared pathology: bright gaussian blobs. Used by stage-2 label 1 and stage-3 class 1.
inline PatternParams shared_pathology() { return {PatternKind::blobs, 3, 5, 1.2, 2.0, 0.4}; }

/// Target pathology: thin rings. Used only by stage-3 class 2.
inline PatternParams target_pathology() { return {PatternKind::rings, 2, 3, 2.6, 3.6, 0.4}; }

/// The other stage-2 findings (labels 2..14).
inline std::vector<PatternParams> other_findings() {
  return {
      {PatternKind::rings, 1, 2, 4.5, 6.0, 0.35},     // large rings
      {PatternKind::dots, 8, 14, 0.5, 0.7, 0.45},     // fine dots
      {PatternKind::stripes_h, 1, 1, 3.0, 4.0, 0.2},  // horizontal texture
      {PatternKind::stripes_v, 1, 1, 3.0, 4.0, 0.2},  // vertical texture
      {PatternKind::squares, 2, 3, 2.0, 3.0, 0.35},   // square outlines
      {PatternKind::filled_squares, 1, 2, 1.5, 2.5, 0.35},
      {PatternKind::crosses, 2, 3, 2.0, 3.0, 0.35},
      {PatternKind::diagonals, 1, 2, 4.0, 6.0, 0.3},
      {PatternKind::haze, 1, 1, 4.0, 6.0, 0.18},
      {PatternKind::dark_spots, 2, 4, 1.2, 2.0, -0.2},
      {PatternKind::rings, 2, 4, 1.2, 1.8, 0.35},     // small rings
      {PatternKind::bars, 1, 2, 3.0, 5.0, 0.3},
      {PatternKind::checker, 1, 1, 2.0, 2.0, 0.15},
  };
}

enum class Corner { top_left, top_right, bottom_left, bottom_right };

inline Corner parse_corner(const std::string& s) {
  if (s == "top_left") return Corner::top_left;
  if (s == "top_right") return Corner::top_right;
  if (s == "bottom_left") return Corner::bottom_left;
  if (s == "bottom_right") return Corner::bottom_right;
  throw ConfigError("unknown corner '" + s + "'");
}

inline std::string to_string(Corner c) {
  switch (c) {
    case Corner::top_left: return "top_left";
    case Corner::top_right: return "top_right";
    case Corner::bottom_left: return "bottom_left";
    default: return "bottom_right";
  }
}

/// A bright letter-like mark stamped into one corner of one class's images.
struct BiasGlyph {
  std::size_t cls = 2;
  Corner corner = Corner::top_left;
  std::size_t size = 5;
  double apply_prob = 0.5;

  Rect rect(std::size_t image_size) const {
    const std::size_t m = 1;
    const std::size_t far = image_size - m - size;
    switch (corner) {
      case Corner::top_left: return {m, m, size, size};
      case Corner::top_right: return {far, m, size, size};
      case Corner::bottom_left: return {m, far, size, size};
      default: return {far, far, size, size};
    }
  }
};

struct SynthSpec {
  int stage = 3;
  std::size_t image_size = 32;
  std::vector<std::size_t> class_counts{200, 260, 120};  // stages 1 and 3
  std::size_t num_samples = 800;                         // stage 2
  bool clear_label = true;     // stage 2: label 0 means "no findings"; without it the labels start at the shared finding
  double clear_fraction = 0.3; // stage 2: share of finding-free images
  double shared_fraction = 0.3;  // stage 2: chance that an image with findings carries the shared finding
  double pair_prob = 0.3;      // chance that a patient group holds two images
  std::optional<BiasGlyph> bias_glyph;

  std::size_t num_labels() const { return other_findings().size() + 1 + (clear_label ? 1 : 0); }
  std::size_t shared_label() const { return clear_label ? 1 : 0; }

  void validate() const {
    if (stage < 1 || stage > 3) throw ConfigError("synth: stage must be 1, 2 or 3");
    if (image_size < 16) throw ConfigError("synth: image_size must be >= 16");
    if (stage == 2) {
      if (num_samples < 1) throw ConfigError("synth: num_samples must be >= 1");
    } else {
      const std::size_t want = stage == 1 ? 10 : 3;
      if (class_counts.size() != want) {
        throw ConfigError("synth: stage " + std::to_string(stage) + " needs " + std::to_string(want) + " class counts");
      }
      for (std::size_t c : class_counts) {
        if (c < 1) throw ConfigError("synth: class counts must be >= 1");
      }
    }
    if (!(pair_prob >= 0.0 && pair_prob <= 1.0)) throw ConfigError("synth: pair_prob must lie in [0,1]");
    if (!(clear_fraction >= 0.0 && clear_fraction < 1.0)) throw ConfigError("synth: clear_fraction must lie in [0,1)");
    if (bias_glyph) {
      if (stage == 2) throw ConfigError("synth: bias glyphs need a multiclass stage");
      if (bias_glyph->cls >= class_counts.size()) throw ConfigError("synth: bias glyph class out of range");
      if (bias_glyph->size < 3 || 2 * (bias_glyph->size + 1) > image_size / 2) {
        throw ConfigError("synth: bias glyph does not fit in a corner");
      }
      if (!(bias_glyph->apply_prob >= 0.0 && bias_glyph->apply_prob <= 1.0)) {
        throw ConfigError("synth: glyph apply_prob must lie in [0,1]");
      }
    }
  }
};

/// Reads a key=value synth spec; unknown keys are rejected.
inline SynthSpec parse_synth_spec(const std::string& text) {
  SynthSpec s;
  const auto kv = parse_key_values(text);
  auto num = [](const std::string& k, const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(k);
      return d;
    } catch (const std::logic_error&) {
      throw ConfigError("synth spec: bad number for " + k + ": '" + v + "'");
    }
  };
  std::optional<BiasGlyph> glyph;
  auto g = [&]() -> BiasGlyph& {
    if (!glyph) glyph.emplace();
    return *glyph;
  };
  for (const auto& [k, v] : kv) {
    if (k == "stage") s.stage = static_cast<int>(num(k, v));
    else if (k == "image_size") s.image_size = static_cast<std::size_t>(num(k, v));
    else if (k == "num_samples") s.num_samples = static_cast<std::size_t>(num(k, v));
    else if (k == "clear_label") s.clear_label = v == "1" || v == "true";
    else if (k == "clear_fraction") s.clear_fraction = num(k, v);
    else if (k == "shared_fraction") s.shared_fraction = num(k, v);
    else if (k == "pair_prob") s.pair_prob = num(k, v);
    else if (k == "class_counts") {
      s.class_counts.clear();
      std::stringstream ss(v);
      std::string item;
      while (std::getline(ss, item, ',')) s.class_counts.push_back(static_cast<std::size_t>(num(k, item)));
    } else if (k == "glyph_class") g().cls = static_cast<std::size_t>(num(k, v));
    else if (k == "glyph_corner") g().corner = parse_corner(v);
    else if (k == "glyph_size") g().size = static_cast<std::size_t>(num(k, v));
    else if (k == "glyph_prob") g().apply_prob = num(k, v);
    else throw ConfigError("synth spec: unknown key '" + k + "'");
  }
  s.bias_glyph = glyph;
  s.validate();
  return s;
}

namespace detail {

struct Anatomy {
  double cx, cy, rx, ry;  // body ellipse
  double lung_dx, lung_rx, lung_ry;
  double body_level, lung_level;
};

inline Anatomy draw_anatomy(std::size_t n, Rng& rng) {
  const double s = static_cast<double>(n);
  Anatomy a;
  a.cx = (s - 1) / 2 + rng.uniform(-0.03, 0.03) * s;
  a.cy = (s - 1) / 2 + rng.uniform(-0.03, 0.03) * s;
  const double k = rng.uniform(0.95, 1.03);
  a.rx = 0.34 * s * k;
  a.ry = 0.42 * s * k;
  a.lung_dx = 0.16 * s * k;
  a.lung_rx = 0.11 * s * k;
  a.lung_ry = 0.26 * s * k;
  a.body_level = rng.uniform(0.55, 0.65);
  a.lung_level = rng.uniform(0.2, 0.28);
  return a;
}

inline bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
  const double u = (x - cx) / rx, v = (y - cy) / ry;
  return u * u + v * v <= 1.0;
}

inline bool in_body(const Anatomy& a, double x, double y) { return in_ellipse(x, y, a.cx, a.cy, a.rx, a.ry); }

inline bool in_lung(const Anatomy& a, double x, double y) {
  return in_ellipse(x, y, a.cx - a.lung_dx, a.cy, a.lung_rx, a.lung_ry) ||
         in_ellipse(x, y, a.cx + a.lung_dx, a.cy, a.lung_rx, a.lung_ry);
}

/// Uniform point inside one of the lungs (shrunk by `margin`).
inline std::pair<double, double> lung_point(const Anatomy& a, Rng& rng, double margin) {
  const double side = rng.bernoulli(0.5) ? -1.0 : 1.0;
  const double rx = std::max(a.lung_rx - margin, 1.0), ry = std::max(a.lung_ry - margin, 1.0);
  for (;;) {
    const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
    if (u * u + v * v <= 1.0) return {a.cx + side * a.lung_dx + u * rx, a.cy + v * ry};
  }
}

inline double ring_profile(double d, double r, double width) {
  const double t = (d - r) / width;
  return std::exp(-0.5 * t * t);
}

/// Adds one pattern into the structure layer.
inline void stamp_pattern(Tensor& layer, const Anatomy& a, const PatternParams& p, Rng& rng) {
  const std::size_t n = layer.dim(1);
  const double scale = static_cast<double>(n) / 32.0;
  const int count = static_cast<int>(rng.integer(p.count_lo, p.count_hi));
  auto for_pixels = [&](auto&& f) {
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) f(static_cast<double>(x), static_cast<double>(y), layer.at(0, y, x));
  };
  for (int i = 0; i < count; ++i) {
    const double size = rng.uniform(p.size_lo, p.size_hi) * scale;
    switch (p.kind) {
      case PatternKind::blobs:
      case PatternKind::dots:
      case PatternKind::dark_spots:
      case PatternKind::haze: {
        const auto [px, py] = lung_point(a, rng, p.kind == PatternKind::haze ? 0.0 : size);
        for_pixels([&](double x, double y, double& v) {
          const double d2 = (x - px) * (x - px) + (y - py) * (y - py);
          v += p.intensity * std::exp(-0.5 * d2 / (size * size));
        });
        break;
      }
      case PatternKind::rings: {
        const auto [px, py] = lung_point(a, rng, size * 0.5);
        const double width = 0.45 * scale;
        for_pixels([&](double x, double y, double& v) {
          v += p.intensity * ring_profile(std::hypot(x - px, y - py), size, width);
        });
        break;
      }
      case PatternKind::stripes_h:
      case PatternKind::stripes_v:
      case PatternKind::checker: {
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double w = 2.0 * std::numbers::pi / size;
        for_pixels([&](double x, double y, double& v) {
          if (!in_lung(a, x, y)) return;
          double s;
          if (p.kind == PatternKind::stripes_h) s = std::sin(w * y + phase);
          else if (p.kind == PatternKind::stripes_v) s = std::sin(w * x + phase);
          else s = std::sin(w * x + phase) * std::sin(w * y);
          v += p.intensity * (0.5 + 0.5 * s);
        });
        break;
      }
      case PatternKind::squares:
      case PatternKind::filled_squares: {
        const auto [px, py] = lung_point(a, rng, size);
        const bool filled = p.kind == PatternKind::filled_squares;
        for_pixels([&](double x, double y, double& v) {
          const double d = std::max(std::abs(x - px), std::abs(y - py));
          if (filled ? d <= size : std::abs(d - size) <= 0.5 * scale) v += p.intensity;
        });
        break;
      }
      case PatternKind::crosses: {
        const auto [px, py] = lung_point(a, rng, size);
        for_pixels([&](double x, double y, double& v) {
          const double ax = std::abs(x - px), ay = std::abs(y - py);
          if ((ax <= 0.5 * scale && ay <= size) || (ay <= 0.5 * scale && ax <= size)) v += p.intensity;
        });
        break;
      }
      case PatternKind::diagonals:
      case PatternKind::bars: {
        const auto [px, py] = lung_point(a, rng, 0.0);
        const double angle = p.kind == PatternKind::bars ? 0.0 : (rng.bernoulli(0.5) ? 0.785 : -0.785);
        const double c = std::cos(angle), s = std::sin(angle);
        for_pixels([&](double x, double y, double& v) {
          const double along = (x - px) * c + (y - py) * s;
          const double across = -(x - px) * s + (y - py) * c;
          if (std::abs(across) <= 0.6 * scale && std::abs(along) <= size) v += p.intensity;
        });
        break;
      }
    }
  }
}

inline void stamp_glyph(Tensor& img, const Rect& r) {
  // an "L" with a dot beside it
  for (std::size_t y = 0; y < r.h; ++y) img.at(0, r.y + y, r.x) = 1.0;
  for (std::size_t x = 0; x < r.w - 2; ++x) img.at(0, r.y + r.h - 1, r.x + x) = 1.0;
  img.at(0, r.y + 1, r.x + r.w - 1) = 1.0;
  img.at(0, r.y + 1, r.x + r.w - 2) = 1.0;
  img.at(0, r.y + 2, r.x + r.w - 1) = 1.0;
  img.at(0, r.y + 2, r.x + r.w - 2) = 1.0;
}

}  // namespace detail

/// One chest-like image plus the structure layer that was added to it.
struct ChestImage {
  Tensor pixels;     // [1,N,N]
  Tensor structure;  // [1,N,N], zero when no finding is present
};

inline ChestImage render_chest(std::size_t n, const detail::Anatomy& a, const std::vector<PatternParams>& findings,
                               Rng& rng) {
  ChestImage out{Tensor({1, n, n}), Tensor({1, n, n})};
  for (const auto& p : findings) detail::stamp_pattern(out.structure, a, p, rng);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      if (!detail::in_body(a, fx, fy)) {
        out.structure.at(0, y, x) = 0.0;
        continue;
      }
      double v = detail::in_lung(a, fx, fy) ? a.lung_level : a.body_level;
      v += rng.normal(0.0, 0.03) + out.structure.at(0, y, x);
      out.pixels.at(0, y, x) = std::clamp(v, 0.0, 1.0);
    }
  return out;
}

/// Generic shapes (stage 1): ten classes on a noisy gray background.
inline Tensor render_shape(std::size_t n, std::size_t cls, Rng& rng) {
  Tensor img({1, n, n});
  const double s = static_cast<double>(n);
  const double bg = rng.uniform(0.2, 0.5), fg = bg + rng.uniform(0.3, 0.45);
  const double cx = s / 2 + rng.uniform(-0.15, 0.15) * s, cy = s / 2 + rng.uniform(-0.15, 0.15) * s;
  const double r = rng.uniform(0.18, 0.28) * s;
  const double t = 0.06 * s;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double d = std::hypot(dx, dy), m = std::max(std::abs(dx), std::abs(dy));
      bool on = false;
      switch (cls) {
        case 0: on = d <= r; break;
        case 1: on = std::abs(d - r) <= t; break;
        case 2: on = m <= r * 0.85; break;
        case 3: on = std::abs(m - r * 0.85) <= t; break;
        case 4: on = (std::abs(dx) <= t && std::abs(dy) <= r) || (std::abs(dy) <= t && std::abs(dx) <= r); break;
        case 5: on = static_cast<long long>(std::floor(static_cast<double>(y) / (0.12 * s))) % 2 == 0; break;
        case 6: on = static_cast<long long>(std::floor(static_cast<double>(x) / (0.12 * s))) % 2 == 0; break;
        case 7: on = static_cast<long long>(std::floor((static_cast<double>(x + y)) / (0.17 * s))) % 2 == 0; break;
        case 8: on = std::fmod(std::abs(dx) + 0.5 * t, 0.25 * s) <= t && std::fmod(std::abs(dy) + 0.5 * t, 0.25 * s) <= t && m <= r * 1.2; break;
        default: on = dy <= r * 0.8 && dy >= -r * 0.8 && std::abs(dx) <= (dy + r * 0.8) * 0.6; break;
      }
      img.at(0, y, x) = std::clamp((on ? fg : bg) + rng.normal(0.0, 0.04), 0.0, 1.0);
    }
  return img;
}

/// Deterministic dataset for a spec and seed. Group ids are offset by stage so
/// that datasets of different stages never share a patient.
inline std::vector<ImageSample> generate_dataset(const SynthSpec& spec, std::uint64_t seed,
                                                 std::vector<Tensor>* structures = nullptr) {
  spec.validate();
  const std::size_t n = spec.image_size;
  std::vector<ImageSample> out;
  std::size_t group = static_cast<std::size_t>(spec.stage) * 1000000;
  auto keep_structure = [&](const Tensor& s) {
    if (structures) structures->push_back(s);
  };

  if (spec.stage == 2) {
    Rng rng(derive_seed(seed, "synth-stage2"));
    const auto others = other_findings();
    std::size_t made = 0;
    while (made < spec.num_samples) {
      const std::size_t members = (spec.num_samples - made >= 2 && rng.bernoulli(spec.pair_prob)) ? 2 : 1;
      const auto anatomy = detail::draw_anatomy(n, rng);
      for (std::size_t m = 0; m < members; ++m) {
        ImageSample s;
        s.labels.assign(spec.num_labels(), 0);
        std::vector<PatternParams> findings;
        if (!rng.bernoulli(spec.clear_fraction)) {
          if (rng.bernoulli(spec.shared_fraction)) {
            s.labels[spec.shared_label()] = 1;
            findings.push_back(shared_pathology());
          }
          const std::size_t extra = findings.empty() ? 1 + rng.below(2) : rng.below(2);
          for (std::size_t e = 0; e < extra; ++e) {
            const std::size_t k = rng.below(others.size());
            if (s.labels[spec.shared_label() + 1 + k]) continue;
            s.labels[spec.shared_label() + 1 + k] = 1;
            findings.push_back(others[k]);
          }
        }
        if (findings.empty() && spec.clear_label) s.labels[0] = 1;
        ChestImage img = render_chest(n, anatomy, findings, rng);
        s.pixels = std::move(img.pixels);
        keep_structure(img.structure);
        s.group = group;
        s.source = "stage2";
        out.push_back(std::move(s));
      }
      made += members;
      ++group;
    }
    return out;
  }

  for (std::size_t cls = 0; cls < spec.class_counts.size(); ++cls) {
    Rng rng(derive_seed(seed, spec.stage == 1 ? "synth-stage1" : "synth-stage3", cls));
    Rng glyph_rng(derive_seed(seed, "synth-glyph", cls));
    std::size_t made = 0;
    while (made < spec.class_counts[cls]) {
      const std::size_t members = (spec.class_counts[cls] - made >= 2 && rng.bernoulli(spec.pair_prob)) ? 2 : 1;
      const auto anatomy = detail::draw_anatomy(n, rng);
      for (std::size_t m = 0; m < members; ++m) {
        ImageSample s;
        s.label = cls;
        s.group = group;
        if (spec.stage == 1) {
          s.pixels = render_shape(n, cls, rng);
          s.source = "stage1";
          keep_structure(Tensor({1, n, n}));
        } else {
          std::vector<PatternParams> findings;
          if (cls == 1) findings.push_back(shared_pathology());
          if (cls == 2) findings.push_back(target_pathology());
          ChestImage img = render_chest(n, anatomy, findings, rng);
          s.pixels = std::move(img.pixels);
          keep_structure(img.structure);
          s.source = "stage3";
        }
        if (spec.bias_glyph && spec.bias_glyph->cls == cls && glyph_rng.bernoulli(spec.bias_glyph->apply_prob)) {
          detail::stamp_glyph(s.pixels, spec.bias_glyph->rect(n));
          s.source += "+glyph";
        }
        out.push_back(std::move(s));
      }
      made += members;
      ++group;
    }
  }
  return out;
}

}  // namespace ttl
