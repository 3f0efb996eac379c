#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ttl/rng.hpp"
#include "ttl/tensor.hpp"
#include "ttl/train.hpp"

namespace ttl {

/// Grayscale image in [0,1] with either a class label or a binary label vector.
struct ImageSample {
  Tensor pixels;                     // [1,H,W]
  std::size_t label = 0;             // multiclass datasets
  std::vector<std::uint8_t> labels;  // multi-label datasets; empty otherwise
  std::size_t group = 0;             // patient group for leakage-free splits
  std::string source;

  bool multi_label() const { return !labels.empty(); }
  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
};

struct Rect {
  std::size_t x = 0, y = 0, w = 0, h = 0;

  friend bool operator==(const Rect&, const Rect&) = default;
};

inline void check_rect(const Rect& r, std::size_t width, std::size_t height, const char* what) {
  if (r.w == 0 || r.h == 0) throw ConfigError(std::string(what) + ": rectangle has zero area");
  if (r.x + r.w > width || r.y + r.h > height) {
    throw ConfigError(std::string(what) + ": rectangle " + std::to_string(r.w) + "x" + std::to_string(r.h) + "+" +
                      std::to_string(r.x) + "+" + std::to_string(r.y) + " exceeds a " + std::to_string(width) + "x" +
                      std::to_string(height) + " image");
  }
}

// ---------------------------------------------------------------------------
// netpbm IO

namespace detail {

struct PnmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

inline PnmHeader parse_pnm_header(const std::vector<unsigned char>& bytes) {
  PnmHeader h;
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw FormatError(std::string("bad PGM header: expected ") + what + " at byte " +
                                        std::to_string(start));
    return v;
  };
  if (bytes.size() < 2) throw FormatError("bad PGM header: file shorter than the magic number");
  h.magic = std::string(bytes.begin(), bytes.begin() + 2);
  pos = 2;
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw FormatError("bad PGM header: expected whitespace after maxval at byte " + std::to_string(pos));
  }
  h.data_offset = pos + 1;
  return h;
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::string& header,
                        const std::vector<unsigned char>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << header;
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

inline unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

inline ImageSample decode_pgm(const std::vector<unsigned char>& bytes) {
  const auto h = detail::parse_pnm_header(bytes);
  if (h.magic != "P5") {
    throw FormatError("not a binary PGM: magic '" + h.magic + "' at byte 0 (expected P5)");
  }
  if (h.width == 0 || h.height == 0) throw FormatError("bad PGM header: zero image dimension");
  if (h.maxval != 255) throw FormatError("unsupported PGM maxval " + std::to_string(h.maxval) + " (expected 255)");
  const std::size_t need = h.width * h.height;
  if (bytes.size() - h.data_offset < need) {
    throw FormatError("PGM truncated at byte " + std::to_string(bytes.size()) + ": pixel data needs " +
                      std::to_string(need) + " bytes from offset " + std::to_string(h.data_offset));
  }
  ImageSample s;
  s.pixels = Tensor({1, h.height, h.width});
  for (std::size_t i = 0; i < need; ++i) s.pixels[i] = bytes[h.data_offset + i] / 255.0;
  return s;
}

inline ImageSample load_pgm(const std::filesystem::path& path) {
  try {
    return decode_pgm(detail::read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void save_pgm(const ImageSample& sample, const std::filesystem::path& path) {
  const std::size_t h = sample.height(), w = sample.width();
  std::vector<unsigned char> data(h * w);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = detail::to_byte(sample.pixels[i]);
  detail::write_bytes(path, "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n", data);
}

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<unsigned char> rgb;  // row-major, 3 bytes per pixel
};

inline void save_ppm(const RgbImage& img, const std::filesystem::path& path) {
  detail::write_bytes(path, "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n",
                      img.rgb);
}

inline RgbImage load_ppm(const std::filesystem::path& path) {
  const auto bytes = detail::read_bytes(path);
  const auto h = detail::parse_pnm_header(bytes);
  if (h.magic != "P6") throw FormatError(path.string() + ": not a binary PPM (magic '" + h.magic + "')");
  RgbImage img{h.width, h.height, {}};
  const std::size_t need = 3 * h.width * h.height;
  if (bytes.size() - h.data_offset < need) throw FormatError(path.string() + ": PPM truncated");
  img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset),
                 bytes.begin() + static_cast<std::ptrdiff_t>(h.data_offset + need));
  return img;
}

// ---------------------------------------------------------------------------
// preprocessing

namespace detail {

/// Bilinear sample of one channel at continuous pixel coordinates; outside
/// the image reads as zero.
inline double bilinear_zero(const double* plane, std::size_t h, std::size_t w, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const long long y0 = static_cast<long long>(fy), x0 = static_cast<long long>(fx);
  const double dy = y - fy, dx = x - fx;
  auto at = [&](long long yy, long long xx) {
    if (yy < 0 || xx < 0 || yy >= static_cast<long long>(h) || xx >= static_cast<long long>(w)) return 0.0;
    return plane[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)];
  };
  double v = 0.0;
  if ((1 - dy) * (1 - dx) != 0.0) v += (1 - dy) * (1 - dx) * at(y0, x0);
  if ((1 - dy) * dx != 0.0) v += (1 - dy) * dx * at(y0, x0 + 1);
  if (dy * (1 - dx) != 0.0) v += dy * (1 - dx) * at(y0 + 1, x0);
  if (dy * dx != 0.0) v += dy * dx * at(y0 + 1, x0 + 1);
  return v;
}

}  // namespace detail

/// Bilinear resize with half-pixel centres and edge clamping.
inline Tensor resize_bilinear(const Tensor& img, std::size_t out_size) {
  if (out_size < 1) throw ConfigError("resize: output size must be >= 1");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out({c, out_size, out_size});
  const double sy = static_cast<double>(h) / static_cast<double>(out_size);
  const double sx = static_cast<double>(w) / static_cast<double>(out_size);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = img.data().data() + ch * h * w;
    for (std::size_t oy = 0; oy < out_size; ++oy) {
      const double y = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
      const std::size_t y0 = static_cast<std::size_t>(y), y1 = std::min(y0 + 1, h - 1);
      const double dy = y - static_cast<double>(y0);
      for (std::size_t ox = 0; ox < out_size; ++ox) {
        const double x = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
        const std::size_t x0 = static_cast<std::size_t>(x), x1 = std::min(x0 + 1, w - 1);
        const double dx = x - static_cast<double>(x0);
        const double top = plane[y0 * w + x0] * (1 - dx) + plane[y0 * w + x1] * dx;
        const double bot = plane[y1 * w + x0] * (1 - dx) + plane[y1 * w + x1] * dx;
        out[(ch * out_size + oy) * out_size + ox] = top * (1 - dy) + bot * dy;
      }
    }
  }
  return out;
}

inline ImageSample resize_bilinear(const ImageSample& s, std::size_t out_size) {
  ImageSample out = s;
  out.pixels = resize_bilinear(s.pixels, out_size);
  return out;
}

/// Replicates a single-channel image to `channels` channels.
inline Tensor replicate_channels(const Tensor& img, std::size_t channels) {
  if (img.dim(0) != 1) throw ShapeError("replicate_channels expects one input channel, got " + shape_str(img.shape()));
  const std::size_t hw = img.dim(1) * img.dim(2);
  Tensor out({channels, img.dim(1), img.dim(2)});
  for (std::size_t c = 0; c < channels; ++c) std::copy_n(img.data().data(), hw, out.data().data() + c * hw);
  return out;
}

inline Tensor to_3channel(const ImageSample& s) { return replicate_channels(s.pixels, 3); }

inline Tensor normalize(const Tensor& t, const std::vector<double>& mean, const std::vector<double>& stddev) {
  const std::size_t c = t.dim(0), hw = t.dim(1) * t.dim(2);
  if (mean.size() != c || stddev.size() != c) {
    throw ShapeError("normalize: need " + std::to_string(c) + " mean/std values");
  }
  Tensor out = t;
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (!(stddev[ch] > 0.0)) throw ConfigError("normalize: std must be > 0");
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = (t[ch * hw + i] - mean[ch]) / stddev[ch];
  }
  return out;
}

/// Turns a stored image into a model input.
struct Preprocess {
  std::size_t size = 32;
  std::size_t channels = 1;
  double mean = 0.5;
  double stddev = 0.25;

  Tensor operator()(const Tensor& pixels) const {
    Tensor t = pixels.dim(1) == size && pixels.dim(2) == size ? pixels : resize_bilinear(pixels, size);
    if (channels != 1) t = replicate_channels(t, channels);
    return normalize(t, std::vector<double>(channels, mean), std::vector<double>(channels, stddev));
  }
};

inline Example to_example(const ImageSample& s, const Preprocess& prep) {
  Example e;
  e.input = prep(s.pixels);
  e.label = s.label;
  if (s.multi_label()) {
    e.targets = Tensor({s.labels.size()});
    for (std::size_t i = 0; i < s.labels.size(); ++i) e.targets[i] = s.labels[i];
  }
  return e;
}

inline std::vector<Example> to_examples(const std::vector<ImageSample>& set, const Preprocess& prep) {
  std::vector<Example> out;
  out.reserve(set.size());
  for (const auto& s : set) out.push_back(to_example(s, prep));
  return out;
}

// ---------------------------------------------------------------------------
// augmentation

struct AugmentConfig {
  double rotation_max_deg = 40.0;
  std::size_t translate_max_px = 28;  // at the reference size, scaled to the image
  std::size_t reference_size = 224;
  double hflip_prob = 0.5;
  std::vector<std::size_t> per_class_factor;

  void validate() const {
    if (!(rotation_max_deg >= 0.0)) throw ConfigError("augment: rotation_max_deg must be >= 0");
    if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) throw ConfigError("augment: hflip_prob must lie in [0,1]");
    if (reference_size < 1) throw ConfigError("augment: reference_size must be >= 1");
    for (std::size_t f : per_class_factor) {
      if (f < 1) throw ConfigError("augment: per-class factors must be >= 1");
    }
  }

  std::size_t translate_for(std::size_t image_size) const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(translate_max_px) *
                                                 static_cast<double>(image_size) /
                                                 static_cast<double>(reference_size)));
  }
};

inline Tensor hflip(const Tensor& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = img[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

/// Rotation about the image centre by `degrees` followed by an integer
/// translation; bilinear resampling with zero fill.
inline Tensor rotate_translate(const Tensor& img, double degrees, long long tx, long long ty) {
  if (degrees == 0.0 && tx == 0 && ty == 0) return img;
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  Tensor out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = img.data().data() + ch * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) - cx - static_cast<double>(tx);
        const double dy = static_cast<double>(y) - cy - static_cast<double>(ty);
        const double sx = cs * dx + sn * dy + cx;
        const double sy = -sn * dx + cs * dy + cy;
        out[(ch * h + y) * w + x] = detail::bilinear_zero(plane, h, w, sy, sx);
      }
  }
  return out;
}

/// Random rotation, translation and horizontal flip; labels and group are untouched.
inline ImageSample augment(const ImageSample& s, const AugmentConfig& cfg, Rng& rng) {
  const double r = cfg.rotation_max_deg;
  const double angle = r > 0.0 ? rng.uniform(-r, r) : 0.0;
  const long long t = static_cast<long long>(cfg.translate_for(s.width()));
  const long long tx = t > 0 ? rng.integer(-t, t) : 0;
  const long long ty = t > 0 ? rng.integer(-t, t) : 0;
  const bool flip = cfg.hflip_prob > 0.0 && rng.bernoulli(cfg.hflip_prob);
  ImageSample out = s;
  out.pixels = rotate_translate(s.pixels, angle, tx, ty);
  if (flip) out.pixels = hflip(out.pixels);
  return out;
}

// ---------------------------------------------------------------------------
// per-epoch class balancing

struct BalancePlan {
  std::vector<std::size_t> slots;     // n_c * f_c per class
  std::size_t per_class = 0;          // m = min over classes
  std::vector<std::size_t> leave_out; // slots_c - m
};

inline BalancePlan balance_plan(const std::vector<std::size_t>& class_counts, const std::vector<std::size_t>& factors) {
  if (class_counts.empty()) throw ConfigError("balance: no classes");
  if (factors.size() != class_counts.size()) {
    throw ConfigError("balance: " + std::to_string(factors.size()) + " augmentation factors for " +
                      std::to_string(class_counts.size()) + " classes");
  }
  BalancePlan p;
  for (std::size_t c = 0; c < class_counts.size(); ++c) {
    if (class_counts[c] == 0) throw ConfigError("balance: class " + std::to_string(c) + " is empty");
    if (factors[c] < 1) throw ConfigError("balance: factor of class " + std::to_string(c) + " must be >= 1");
    p.slots.push_back(class_counts[c] * factors[c]);
  }
  p.per_class = *std::min_element(p.slots.begin(), p.slots.end());
  for (std::size_t s : p.slots) p.leave_out.push_back(s - p.per_class);
  return p;
}

/// One augmented copy of a training image: replica 0 is the original image,
/// replicas >= 1 are fresh random augmentations.
struct Slot {
  std::size_t cls;
  std::size_t sample;  // index within its class
  std::size_t replica;
  friend auto operator<=>(const Slot&, const Slot&) = default;
};

/// The slots used in one epoch: exactly m per class, leave-out re-drawn per
/// epoch, order shuffled. Deterministic in (seed, epoch_index).
inline std::vector<Slot> select_epoch_slots(const std::vector<std::size_t>& class_counts,
                                            const std::vector<std::size_t>& factors, std::uint64_t seed,
                                            std::size_t epoch_index) {
  const BalancePlan plan = balance_plan(class_counts, factors);
  std::vector<Slot> out;
  out.reserve(plan.per_class * class_counts.size());
  for (std::size_t c = 0; c < class_counts.size(); ++c) {
    Rng rng(derive_seed(seed, "leave-out", epoch_index * class_counts.size() + c));
    std::vector<std::size_t> ids(plan.slots[c]);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    // partial Fisher-Yates: the first m entries are a uniform m-subset
    for (std::size_t i = 0; i < plan.per_class; ++i) std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
    std::sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(plan.per_class));
    for (std::size_t i = 0; i < plan.per_class; ++i) {
      out.push_back({c, ids[i] / factors[c], ids[i] % factors[c]});
    }
  }
  Rng order(derive_seed(seed, "epoch-order", epoch_index));
  order.shuffle(out);
  return out;
}

/// Class-balanced augmented epoch for a multiclass training set.
inline std::vector<ImageSample> epoch_stream(const std::vector<ImageSample>& train_set, const AugmentConfig& cfg,
                                             std::uint64_t seed, std::size_t epoch_index) {
  cfg.validate();
  std::vector<std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    const std::size_t c = train_set[i].label;
    if (c >= by_class.size()) by_class.resize(c + 1);
    by_class[c].push_back(i);
  }
  if (cfg.per_class_factor.size() != by_class.size()) {
    throw ConfigError("epoch_stream: " + std::to_string(cfg.per_class_factor.size()) +
                      " augmentation factors for " + std::to_string(by_class.size()) + " classes");
  }
  std::vector<std::size_t> counts;
  for (const auto& v : by_class) counts.push_back(v.size());
  std::vector<ImageSample> out;
  for (const Slot& s : select_epoch_slots(counts, cfg.per_class_factor, seed, epoch_index)) {
    const ImageSample& src = train_set[by_class[s.cls][s.sample]];
    if (s.replica == 0) {
      out.push_back(src);
    } else {
      Rng rng(derive_seed(derive_seed(seed, "augment", epoch_index), "slot",
                          (by_class[s.cls][s.sample] << 16) ^ s.replica));
      out.push_back(augment(src, cfg, rng));
    }
  }
  return out;
}

/// Every sample once per epoch with a fresh augmentation, order shuffled;
/// used for the unbalanced multi-label and generic stages.
inline std::vector<ImageSample> augmented_pass(const std::vector<ImageSample>& set, const AugmentConfig& cfg,
                                               std::uint64_t seed, std::size_t epoch_index) {
  cfg.validate();
  std::vector<std::size_t> order(set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "pass-order", epoch_index));
  rng.shuffle(order);
  std::vector<ImageSample> out;
  out.reserve(set.size());
  for (std::size_t i : order) {
    Rng arng(derive_seed(derive_seed(seed, "pass-augment", epoch_index), "sample", i));
    out.push_back(augment(set[i], cfg, arng));
  }
  return out;
}

inline TrainStream make_stream(std::vector<ImageSample> set, AugmentConfig cfg, Preprocess prep, std::uint64_t seed,
                               bool balanced) {
  return [set = std::move(set), cfg = std::move(cfg), prep, seed, balanced](std::size_t epoch) {
    return to_examples(balanced ? epoch_stream(set, cfg, seed, epoch) : augmented_pass(set, cfg, seed, epoch), prep);
  };
}

// ---------------------------------------------------------------------------
// splits

struct SplitSpec {
  std::size_t test_per_class = 50;
  double train_fraction_of_rest = 0.9;
  std::uint64_t seed = 0;
};

struct Splits {
  std::vector<ImageSample> train, val, test;
};

namespace detail {

/// Greedily takes whole groups (in the given order) until exactly `target`
/// samples are taken; returns false when no exact fill was found.
inline bool exact_fill(const std::vector<std::vector<std::size_t>>& groups, std::size_t target,
                       std::vector<bool>& taken) {
  std::size_t need = target;
  for (std::size_t g = 0; g < groups.size() && need > 0; ++g) {
    if (!taken[g] && groups[g].size() <= need) {
      taken[g] = true;
      need -= groups[g].size();
    }
  }
  return need == 0;
}

}  // namespace detail

/// Group-disjoint split: exactly test_per_class test samples per class, the
/// rest divided by train_fraction_of_rest within every class (rounded down to
/// whole groups when needed).
inline Splits split(const std::vector<ImageSample>& dataset, const SplitSpec& spec) {
  if (!(spec.train_fraction_of_rest > 0.0 && spec.train_fraction_of_rest < 1.0)) {
    throw ConfigError("split: train fraction must lie in (0,1)");
  }
  std::map<std::size_t, std::vector<std::size_t>> groups;  // group -> sample indices
  std::map<std::size_t, std::size_t> group_class;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset[i];
    if (s.multi_label()) throw ConfigError("split: per-class split needs a multiclass dataset");
    auto [it, fresh] = group_class.emplace(s.group, s.label);
    if (!fresh && it->second != s.label) {
      throw ConfigError("split: patient group " + std::to_string(s.group) + " spans several classes");
    }
    groups[s.group].push_back(i);
  }
  std::map<std::size_t, std::vector<std::vector<std::size_t>>> per_class;
  for (auto& [g, members] : groups) per_class[group_class[g]].push_back(members);

  Splits out;
  for (auto& [cls, cgroups] : per_class) {
    Rng rng(derive_seed(spec.seed, "split", cls));
    rng.shuffle(cgroups);
    std::size_t total = 0;
    for (const auto& g : cgroups) total += g.size();
    if (total <= spec.test_per_class) {
      throw ConfigError("split: class " + std::to_string(cls) + " has " + std::to_string(total) +
                        " samples, not enough for " + std::to_string(spec.test_per_class) + " test samples");
    }
    std::vector<bool> test(cgroups.size(), false);
    if (!detail::exact_fill(cgroups, spec.test_per_class, test)) {
      throw ConfigError("split: no group-disjoint test split of exactly " + std::to_string(spec.test_per_class) +
                        " samples for class " + std::to_string(cls));
    }
    const std::size_t rest = total - spec.test_per_class;
    const auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction_of_rest * static_cast<double>(rest)));
    // when whole groups cannot hit n_train exactly, train takes the largest fill below it
    std::vector<bool> train = test;
    detail::exact_fill(cgroups, n_train, train);
    for (std::size_t g = 0; g < cgroups.size(); ++g) {
      auto& dst = test[g] ? out.test : (train[g] ? out.train : out.val);
      for (std::size_t i : cgroups[g]) dst.push_back(dataset[i]);
    }
  }
  return out;
}

/// Group-disjoint train/validation split by fraction (multi-label datasets).
inline std::pair<std::vector<ImageSample>, std::vector<ImageSample>> split_fraction(
    const std::vector<ImageSample>& dataset, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("split: train fraction must lie in (0,1)");
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < dataset.size(); ++i) groups[dataset[i].group].push_back(i);
  std::vector<std::vector<std::size_t>> list;
  for (auto& [g, m] : groups) list.push_back(m);
  Rng rng(derive_seed(seed, "split-fraction"));
  rng.shuffle(list);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(dataset.size())));
  std::vector<bool> train(list.size(), false);
  detail::exact_fill(list, n_train, train);
  std::pair<std::vector<ImageSample>, std::vector<ImageSample>> out;
  for (std::size_t g = 0; g < list.size(); ++g)
    for (std::size_t i : list[g]) (train[g] ? out.first : out.second).push_back(dataset[i]);
  if (out.first.empty() || out.second.empty()) throw ConfigError("split: dataset too small for a validation split");
  return out;
}

// ---------------------------------------------------------------------------
// editing

inline ImageSample mask_rectangle(const ImageSample& s, const Rect& r) {
  check_rect(r, s.width(), s.height(), "mask_rectangle");
  ImageSample out = s;
  for (std::size_t c = 0; c < s.pixels.dim(0); ++c)
    for (std::size_t y = r.y; y < r.y + r.h; ++y)
      for (std::size_t x = r.x; x < r.x + r.w; ++x) out.pixels.at(c, y, x) = 0.0;
  return out;
}

inline ImageSample paste_patch(const ImageSample& dst, const ImageSample& src, const Rect& src_region,
                               std::size_t dst_x, std::size_t dst_y) {
  check_rect(src_region, src.width(), src.height(), "paste_patch source");
  check_rect({dst_x, dst_y, src_region.w, src_region.h}, dst.width(), dst.height(), "paste_patch destination");
  ImageSample out = dst;
  for (std::size_t y = 0; y < src_region.h; ++y)
    for (std::size_t x = 0; x < src_region.w; ++x)
      out.pixels.at(0, dst_y + y, dst_x + x) = src.pixels.at(0, src_region.y + y, src_region.x + x);
  return out;
}

// ---------------------------------------------------------------------------
// on-disk datasets: P5 images plus a TSV manifest
//   path <TAB> label-spec <TAB> group <TAB> source

inline std::string label_spec(const ImageSample& s) {
  if (!s.multi_label()) return std::to_string(s.label);
  std::string out;
  for (std::size_t i = 0; i < s.labels.size(); ++i) {
    if (i) out += ',';
    out += s.labels[i] ? '1' : '0';
  }
  return out;
}

inline void parse_label_spec(const std::string& text, ImageSample& s) {
  if (text.find(',') == std::string::npos) {
    if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
      throw FormatError("bad label '" + text + "'");
    }
    s.label = std::stoull(text);
    s.labels.clear();
    return;
  }
  std::stringstream ss(text);
  std::string bit;
  s.labels.clear();
  while (std::getline(ss, bit, ',')) {
    if (bit != "0" && bit != "1") throw FormatError("bad multi-label entry '" + bit + "' in '" + text + "'");
    s.labels.push_back(bit == "1");
  }
}

/// Writes images as img_NNNNN.pgm and the manifest into `dir`.
inline void write_dataset(const std::filesystem::path& dir, const std::vector<ImageSample>& samples,
                          const std::string& manifest = "manifest.tsv") {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory '" + dir.string() + "': " + ec.message());
  std::ofstream out(dir / manifest);
  if (!out) throw Error("cannot write manifest in '" + dir.string() + "'");
  const std::string stem = std::filesystem::path(manifest).stem().string();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_%05zu.pgm", stem == "manifest" ? "img" : stem.c_str(), i);
    save_pgm(samples[i], dir / name);
    out << name << '\t' << label_spec(samples[i]) << '\t' << samples[i].group << '\t' << samples[i].source << '\n';
  }
  if (!out) throw Error("failed writing manifest in '" + dir.string() + "'");
}

inline std::vector<ImageSample> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw Error("cannot open manifest '" + manifest.string() + "'");
  std::vector<ImageSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) f.push_back(field);
    if (f.size() < 3) {
      throw FormatError(manifest.string() + ":" + std::to_string(line_no) + ": expected path, label, group[, source]");
    }
    try {
      ImageSample s = load_pgm(manifest.parent_path() / f[0]);
      parse_label_spec(f[1], s);
      s.group = std::stoull(f[2]);
      if (f.size() > 3) s.source = f[3];
      out.push_back(std::move(s));
    } catch (const std::logic_error&) {
      throw FormatError(manifest.string() + ":" + std::to_string(line_no) + ": bad group id '" + f[2] + "'");
    } catch (const Error& e) {
      throw FormatError(manifest.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ttl
