#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ttl/kv.hpp"
#include "ttl/lrp.hpp"
#include "ttl/pipeline.hpp"

// Experiment configuration shared by the CLI and the acceptance run: one flat
// key = value namespace covering the synthetic data, the network and the
// schedules, plus the benchmark and bias-experiment drivers.
namespace ttl {

struct DataConfig {
  std::size_t image_size = 32;
  std::size_t stage1_per_class = 60;
  std::size_t stage2_samples = 800;
  std::size_t prebuilt_samples = 800;
  std::vector<std::size_t> target_counts{200, 260, 120};
  double pair_prob = 0.3;
  std::size_t test_per_class = 50;
  double train_fraction = 0.9;        // target: train share of the non-test remainder
  double stage_train_fraction = 0.9;  // stages 1 and 2: train share, the rest validates
  std::optional<BiasGlyph> glyph;     // stage-3 shortcut glyph
  BiasGlyph glyph_style;              // corner and probability kept while no glyph is set
};

/// Toy-scale defaults: a 32 px, 3-block network and shortened schedules with
/// boosted fine-tuning rates so that all phases move within a few epochs.
inline PipelineConfig toy_pipeline_config() {
  PipelineConfig p;
  p.body.input_size = 32;
  p.body.stem_channels = 8;
  p.body.num_blocks = 3;
  p.body.layers_per_block = 2;
  p.body.growth_rate = 6;
  p.prep.size = 32;
  p.stage1_epochs = 20;
  p.stage1_lr = 0.02;
  p.intermediate.scale = 0.1;
  p.intermediate.lr_scale = 10.0;
  p.target.scale = 0.25;
  p.target.finetune_lr_scale = 100.0;
  p.target_aug.per_class_factor = {1, 1, 2};
  return p;
}

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<Variant> variants{Variant::A, Variant::B, Variant::C, Variant::D, Variant::E};
  DataConfig data;
  PipelineConfig pipeline = toy_pipeline_config();

  void validate() const {
    if (seeds.empty()) throw ConfigError("experiment: at least one seed is required");
    if (variants.empty()) throw ConfigError("experiment: at least one variant is required");
    if (data.target_counts.size() != 3) throw ConfigError("experiment: target_counts needs 3 entries");
    pipeline.body.validate();
  }
};

struct Setting {
  std::string key;
  std::string help;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

namespace detail {

inline double parse_number(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::logic_error&) {
  }
  throw ConfigError("bad number for " + key + ": '" + v + "'");
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  const double d = parse_number(key, v);
  if (d < 0.0 || d != std::floor(d)) throw ConfigError(key + " must be a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(d);
}

inline bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(' '), e = item.find_last_not_of(' ');
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& v, F&& fmt) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

inline std::string num(double d) { return format_real(d); }
inline std::string cnt(std::size_t n) { return std::to_string(n); }

inline const BiasGlyph& glyph_view(const ExperimentConfig& c) { return c.data.glyph ? *c.data.glyph : c.data.glyph_style; }

// Corner and probability alone never switch the glyph on, so a written config reloads unchanged.
template <class Fn>
void edit_glyph(ExperimentConfig& c, Fn&& fn) {
  fn(c.data.glyph_style);
  if (c.data.glyph) fn(*c.data.glyph);
}

}  // namespace detail

/// Every configurable key with its help text; `get` renders the current value.
inline const std::vector<Setting>& experiment_settings() {
  using namespace detail;
  using C = ExperimentConfig;
  using S = const std::string&;
  static const std::vector<Setting> all = {
      {"seeds", "root seeds, comma separated",
       [](const C& c) { return join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }); },
       [](C& c, S v) {
         c.seeds.clear();
         for (const auto& s : split_list(v)) c.seeds.push_back(parse_count("seeds", s));
       }},
      {"variants", "pipelines to run (A-E)",
       [](const C& c) { return join(c.variants, [](Variant x) { return to_string(x); }); },
       [](C& c, S v) {
         c.variants.clear();
         for (const auto& s : split_list(v)) c.variants.push_back(parse_variant(s));
       }},
      {"image_size", "stored image side in pixels", [](const C& c) { return cnt(c.data.image_size); },
       [](C& c, S v) { c.data.image_size = parse_count("image_size", v); }},
      {"stage1_per_class", "stage-1 images per shape class", [](const C& c) { return cnt(c.data.stage1_per_class); },
       [](C& c, S v) { c.data.stage1_per_class = parse_count("stage1_per_class", v); }},
      {"stage2_samples", "15-label intermediate images", [](const C& c) { return cnt(c.data.stage2_samples); },
       [](C& c, S v) { c.data.stage2_samples = parse_count("stage2_samples", v); }},
      {"prebuilt_samples", "14-label images for the provided intermediate model",
       [](const C& c) { return cnt(c.data.prebuilt_samples); },
       [](C& c, S v) { c.data.prebuilt_samples = parse_count("prebuilt_samples", v); }},
      {"target_counts", "target images per class (clear, shared, target)",
       [](const C& c) { return join(c.data.target_counts, cnt); },
       [](C& c, S v) {
         c.data.target_counts.clear();
         for (const auto& s : split_list(v)) c.data.target_counts.push_back(parse_count("target_counts", s));
       }},
      {"pair_prob", "chance that a patient group holds two images", [](const C& c) { return num(c.data.pair_prob); },
       [](C& c, S v) { c.data.pair_prob = parse_number("pair_prob", v); }},
      {"test_per_class", "target test images per class", [](const C& c) { return cnt(c.data.test_per_class); },
       [](C& c, S v) { c.data.test_per_class = parse_count("test_per_class", v); }},
      {"train_fraction", "target train share of the non-test images",
       [](const C& c) { return num(c.data.train_fraction); },
       [](C& c, S v) { c.data.train_fraction = parse_number("train_fraction", v); }},
      {"stage_train_fraction", "stage-1/2 train share", [](const C& c) { return num(c.data.stage_train_fraction); },
       [](C& c, S v) { c.data.stage_train_fraction = parse_number("stage_train_fraction", v); }},
      {"glyph_class", "class that carries the shortcut glyph (unset: no glyph)",
       [](const C& c) { return c.data.glyph ? cnt(c.data.glyph->cls) : std::string("none"); },
       [](C& c, S v) {
         if (v == "none") c.data.glyph.reset();
         else {
           BiasGlyph g = glyph_view(c);
           g.cls = parse_count("glyph_class", v);
           c.data.glyph = g;
         }
       }},
      {"glyph_corner", "top_left, top_right, bottom_left or bottom_right",
       [](const C& c) { return to_string(glyph_view(c).corner); },
       [](C& c, S v) {
         const Corner k = parse_corner(v);
         edit_glyph(c, [&](BiasGlyph& g) { g.corner = k; });
       }},
      {"glyph_prob", "share of biased-class images that get the glyph",
       [](const C& c) { return num(glyph_view(c).apply_prob); },
       [](C& c, S v) {
         const double p = parse_number("glyph_prob", v);
         edit_glyph(c, [&](BiasGlyph& g) { g.apply_prob = p; });
       }},
      {"input_size", "network input side (images are resized)", [](const C& c) { return cnt(c.pipeline.body.input_size); },
       [](C& c, S v) { c.pipeline.body.input_size = c.pipeline.prep.size = parse_count("input_size", v); }},
      {"input_channels", "network input channels (grey replicated)",
       [](const C& c) { return cnt(c.pipeline.body.input_channels); },
       [](C& c, S v) { c.pipeline.body.input_channels = c.pipeline.prep.channels = parse_count("input_channels", v); }},
      {"stem_channels", "stem conv output channels", [](const C& c) { return cnt(c.pipeline.body.stem_channels); },
       [](C& c, S v) { c.pipeline.body.stem_channels = parse_count("stem_channels", v); }},
      {"num_blocks", "dense blocks", [](const C& c) { return cnt(c.pipeline.body.num_blocks); },
       [](C& c, S v) { c.pipeline.body.num_blocks = parse_count("num_blocks", v); }},
      {"layers_per_block", "layers per dense block", [](const C& c) { return cnt(c.pipeline.body.layers_per_block); },
       [](C& c, S v) { c.pipeline.body.layers_per_block = parse_count("layers_per_block", v); }},
      {"growth_rate", "channels added per dense layer", [](const C& c) { return cnt(c.pipeline.body.growth_rate); },
       [](C& c, S v) { c.pipeline.body.growth_rate = parse_count("growth_rate", v); }},
      {"compression", "transition channel factor", [](const C& c) { return num(c.pipeline.body.compression); },
       [](C& c, S v) { c.pipeline.body.compression = parse_number("compression", v); }},
      {"prep_mean", "input normalisation mean", [](const C& c) { return num(c.pipeline.prep.mean); },
       [](C& c, S v) { c.pipeline.prep.mean = parse_number("prep_mean", v); }},
      {"prep_std", "input normalisation std", [](const C& c) { return num(c.pipeline.prep.stddev); },
       [](C& c, S v) { c.pipeline.prep.stddev = parse_number("prep_std", v); }},
      {"rotation_max_deg", "augmentation rotation bound (all stages)",
       [](const C& c) { return num(c.pipeline.target_aug.rotation_max_deg); },
       [](C& c, S v) {
         const double d = parse_number("rotation_max_deg", v);
         c.pipeline.stage1_aug.rotation_max_deg = c.pipeline.stage2_aug.rotation_max_deg =
             c.pipeline.target_aug.rotation_max_deg = d;
       }},
      {"translate_max_px", "augmentation shift bound at 224 px (all stages)",
       [](const C& c) { return cnt(c.pipeline.target_aug.translate_max_px); },
       [](C& c, S v) {
         const std::size_t n = parse_count("translate_max_px", v);
         c.pipeline.stage1_aug.translate_max_px = c.pipeline.stage2_aug.translate_max_px =
             c.pipeline.target_aug.translate_max_px = n;
       }},
      {"hflip_prob", "augmentation flip probability (all stages)",
       [](const C& c) { return num(c.pipeline.target_aug.hflip_prob); },
       [](C& c, S v) {
         const double p = parse_number("hflip_prob", v);
         c.pipeline.stage1_aug.hflip_prob = c.pipeline.stage2_aug.hflip_prob = c.pipeline.target_aug.hflip_prob = p;
       }},
      {"target_factors", "per-class augmentation factors of the target stage",
       [](const C& c) { return join(c.pipeline.target_aug.per_class_factor, cnt); },
       [](C& c, S v) {
         auto& f = c.pipeline.target_aug.per_class_factor;
         f.clear();
         for (const auto& s : split_list(v)) f.push_back(parse_count("target_factors", s));
       }},
      {"stage1_epochs", "stage-1 epochs before scaling", [](const C& c) { return cnt(c.pipeline.stage1_epochs); },
       [](C& c, S v) { c.pipeline.stage1_epochs = parse_count("stage1_epochs", v); }},
      {"stage1_scale", "stage-1 epoch multiplier", [](const C& c) { return num(c.pipeline.stage1_scale); },
       [](C& c, S v) { c.pipeline.stage1_scale = parse_number("stage1_scale", v); }},
      {"stage1_lr", "stage-1 learning rate", [](const C& c) { return num(c.pipeline.stage1_lr); },
       [](C& c, S v) { c.pipeline.stage1_lr = parse_number("stage1_lr", v); }},
      {"intermediate_scale", "intermediate epoch multiplier (20 + 90 at 1.0)",
       [](const C& c) { return num(c.pipeline.intermediate.scale); },
       [](C& c, S v) { c.pipeline.intermediate.scale = parse_number("intermediate_scale", v); }},
      {"intermediate_lr_scale", "intermediate learning-rate multiplier",
       [](const C& c) { return num(c.pipeline.intermediate.lr_scale); },
       [](C& c, S v) { c.pipeline.intermediate.lr_scale = parse_number("intermediate_lr_scale", v); }},
      {"target_scale", "target epoch multiplier (10/48/48/48 at 1.0)",
       [](const C& c) { return num(c.pipeline.target.scale); },
       [](C& c, S v) { c.pipeline.target.scale = parse_number("target_scale", v); }},
      {"finetune_lr_scale", "multiplier on target phases 2-4 learning rates",
       [](const C& c) { return num(c.pipeline.target.finetune_lr_scale); },
       [](C& c, S v) { c.pipeline.target.finetune_lr_scale = parse_number("finetune_lr_scale", v); }},
      {"phase2_weight_decay", "weight decay 0.01 in target phase 2",
       [](const C& c) { return std::string(c.pipeline.target.phase2_weight_decay ? "1" : "0"); },
       [](C& c, S v) { c.pipeline.target.phase2_weight_decay = parse_flag("phase2_weight_decay", v); }},
  };
  return all;
}

inline void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& s : experiment_settings()) {
    if (s.key == key) {
      s.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline void apply_settings(ExperimentConfig& cfg, const std::string& text) {
  for (const auto& [k, v] : parse_key_values(text)) apply_setting(cfg, k, v);
}

/// `key = value` lines for every setting, in help order.
inline std::string describe_config(const ExperimentConfig& cfg) {
  std::string s;
  for (const auto& x : experiment_settings()) s += x.key + " = " + x.get(cfg) + '\n';
  return s;
}

// ---------------------------------------------------------------------------
// synthetic data

/// Data seed of one stage, shared by `gen` and the in-memory benchmark.
inline std::uint64_t dataset_seed(std::uint64_t root, int stage, bool clear_label = true) {
  if (stage == 1) return derive_seed(root, "data1");
  if (stage == 2) return derive_seed(root, clear_label ? "data2" : "data2b");
  return derive_seed(root, "data3");
}

inline SynthSpec stage_spec(const DataConfig& d, int stage, bool clear_label = true) {
  SynthSpec s;
  s.stage = stage;
  s.image_size = d.image_size;
  s.pair_prob = d.pair_prob;
  if (stage == 1) s.class_counts.assign(10, d.stage1_per_class);
  if (stage == 2) {
    s.clear_label = clear_label;
    s.num_samples = clear_label ? d.stage2_samples : d.prebuilt_samples;
  }
  if (stage == 3) {
    s.class_counts = d.target_counts;
    s.bias_glyph = d.glyph;
  }
  return s;
}

inline LabeledSplit labeled_split(const std::vector<ImageSample>& set, double fraction, std::uint64_t seed) {
  auto [train, val] = split_fraction(set, fraction, seed);
  return {std::move(train), std::move(val)};
}

/// All four datasets of one seed; stages no configured variant needs are skipped.
inline PipelineData make_pipeline_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  bool need2 = false, need_pre = false;
  for (Variant v : cfg.variants) {
    need2 = need2 || uses_stage2(v);
    need_pre = need_pre || uses_prebuilt(v);
  }
  const DataConfig& d = cfg.data;
  PipelineData out;
  // every variant needs stage 1, the prebuilt intermediate model included
  out.stage1 = labeled_split(generate_dataset(stage_spec(d, 1), dataset_seed(seed, 1)), d.stage_train_fraction, seed);
  if (need2) {
    out.stage2 = labeled_split(generate_dataset(stage_spec(d, 2), dataset_seed(seed, 2)), d.stage_train_fraction, seed);
  }
  if (need_pre) {
    out.prebuilt = labeled_split(generate_dataset(stage_spec(d, 2, false), dataset_seed(seed, 2, false)),
                                 d.stage_train_fraction, seed);
  }
  out.target = split(generate_dataset(stage_spec(d, 3), dataset_seed(seed, 3)),
                     SplitSpec{d.test_per_class, d.train_fraction, seed});
  return out;
}

// ---------------------------------------------------------------------------
// benchmark

struct BenchRow {
  std::string variant;
  std::string seed;  // "median" for aggregate rows
  std::vector<double> ckpt;
  double seconds = 0.0;  // wall time of the cell, not written to CSV
};

using BenchCallback = std::function<void(const BenchRow&)>;

/// Runs every variant for every seed; stage models are shared within a seed.
inline std::vector<BenchRow> run_bench(const ExperimentConfig& cfg, const BenchCallback& on_cell = {},
                                       const EpochCallback& on_epoch = {}) {
  cfg.validate();
  std::vector<BenchRow> rows;
  for (std::uint64_t seed : cfg.seeds) {
    const PipelineData data = make_pipeline_data(cfg, seed);
    PipelineCache cache;
    for (Variant v : cfg.variants) {
      const auto t0 = std::chrono::steady_clock::now();
      const PipelineResult r = build_pipeline(v, cfg.pipeline, data, cache, seed, on_epoch);
      BenchRow row{to_string(v), std::to_string(seed), r.checkpoint_accuracy,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      if (on_cell) on_cell(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// One median row per variant, in first-appearance order.
inline std::vector<BenchRow> bench_medians(const std::vector<BenchRow>& rows) {
  std::vector<std::string> order;
  for (const auto& r : rows)
    if (std::find(order.begin(), order.end(), r.variant) == order.end()) order.push_back(r.variant);
  std::vector<BenchRow> out;
  for (const auto& v : order) {
    BenchRow m{v, "median", {}, 0.0};
    for (std::size_t k = 0;; ++k) {
      std::vector<double> col;
      for (const auto& r : rows)
        if (r.variant == v && k < r.ckpt.size()) col.push_back(r.ckpt[k]);
      if (col.empty()) break;
      m.ckpt.push_back(median(col));
    }
    out.push_back(std::move(m));
  }
  return out;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::size_t width = 0;
  for (const auto& r : rows) width = std::max(width, r.ckpt.size());
  std::string s = "variant,seed";
  for (std::size_t k = 0; k < width; ++k) s += ",ckpt" + std::to_string(k + 1);
  s += '\n';
  auto line = [&](const BenchRow& r) {
    s += r.variant + ',' + r.seed;
    for (double a : r.ckpt) s += ',' + format_real(a);
    s += '\n';
  };
  for (const auto& r : rows) line(r);
  for (const auto& r : bench_medians(rows)) line(r);
  return s;
}

// ---------------------------------------------------------------------------
// bias experiments

struct BiasOptions {
  Rect glyph;                     // in stored-image pixels
  std::size_t biased_class = 2;
  LrpPreset preset = preset_a_flat();
  std::size_t paste_samples = 50;
  std::uint64_t seed = 0;
};

struct ClassRegion {
  std::size_t cls = 0;
  std::string subset;  // "all" or "glyph" (images that carry the glyph)
  std::size_t images = 0;
  double mean_relevance = 0.0;
  WindowRank rank;
};

struct PasteRecord {
  std::size_t index = 0;  // position in the test set
  std::size_t label = 0;
  std::vector<double> before, after;
};

struct BiasReport {
  Metrics unedited, edited;
  std::vector<ClassRegion> regions;
  Tensor glyph_class_map;  // mean relevance over glyph-bearing biased-class images
  std::vector<PasteRecord> pastes;
  std::size_t biased_class = 0;

  double accuracy_delta() const { return edited.accuracy - unedited.accuracy; }

  /// Share of pasted samples whose biased-class probability went up.
  std::optional<double> paste_increase_fraction() const {
    if (pastes.empty()) return std::nullopt;
    std::size_t up = 0;
    for (const auto& p : pastes) up += p.after[biased_class] > p.before[biased_class];
    return static_cast<double>(up) / static_cast<double>(pastes.size());
  }
};

inline bool carries_glyph(const ImageSample& s) { return s.source.find("+glyph") != std::string::npos; }

/// Maps a stored-image rectangle onto the network input grid.
inline Rect input_rect(const Rect& r, std::size_t image_size, std::size_t input_size) {
  if (image_size == input_size) return r;
  const double f = static_cast<double>(input_size) / static_cast<double>(image_size);
  auto at = [&](std::size_t v) { return static_cast<std::size_t>(std::floor(static_cast<double>(v) * f)); };
  auto end = [&](std::size_t v) { return static_cast<std::size_t>(std::ceil(static_cast<double>(v) * f)); };
  const std::size_t x = at(r.x), y = at(r.y);
  return {x, y, std::max<std::size_t>(1, end(r.x + r.w) - x), std::max<std::size_t>(1, end(r.y + r.h) - y)};
}

/// (a) accuracy on the test set with the glyph rectangle masked versus as is,
/// (b) relevance inside the glyph rectangle per class, explained from the
///     class's own output neuron,
/// (c) class probabilities before and after pasting a glyph patch from a
///     biased-class image into images of the other classes.
inline BiasReport bias_experiment(const DenseNet& model, const std::vector<ImageSample>& test,
                                  const std::vector<ImageSample>& edited, const Preprocess& prep,
                                  const BiasOptions& opt) {
  if (test.empty() || edited.empty()) throw ConfigError("bias experiment needs non-empty test and edited sets");
  const std::size_t classes = model.config.num_outputs;
  for (const auto* set : {&test, &edited})
    for (const auto& s : *set) {
      if (s.multi_label() || s.label >= classes) {
        throw ConfigError("bias experiment: test labels do not fit a " + std::to_string(classes) + "-class head");
      }
    }
  if (opt.biased_class >= classes) throw ConfigError("bias experiment: biased class out of range");
  check_rect(opt.glyph, test.front().width(), test.front().height(), "glyph rectangle");

  BiasReport rep;
  rep.biased_class = opt.biased_class;
  rep.unedited = evaluate(model, to_examples(test, prep));
  rep.edited = evaluate(model, to_examples(edited, prep));

  const Rect in_rect = input_rect(opt.glyph, test.front().width(), prep.size);
  auto region = [&](std::size_t cls, const std::string& subset, const std::vector<const ImageSample*>& images) {
    Tensor mean({1, prep.size, prep.size});
    for (const ImageSample* s : images) {
      const RelevanceMap m = explain(model, prep(s->pixels), opt.preset, {cls, BiasMode::absorb});
      mean += m.relevance;
    }
    if (!images.empty()) mean *= 1.0 / static_cast<double>(images.size());
    ClassRegion r{cls, subset, images.size(), region_relevance(mean, in_rect).mean, rank_region(mean, in_rect)};
    return std::make_pair(r, mean);
  };
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<const ImageSample*> all, glyph;
    for (const auto& s : test) {
      if (s.label != c) continue;
      all.push_back(&s);
      if (carries_glyph(s)) glyph.push_back(&s);
    }
    if (all.empty()) continue;
    rep.regions.push_back(region(c, "all", all).first);
    if (c == opt.biased_class && !glyph.empty()) {
      auto [r, mean] = region(c, "glyph", glyph);
      rep.regions.push_back(r);
      rep.glyph_class_map = std::move(mean);
    }
  }

  const ImageSample* donor = nullptr;
  for (const auto& s : test)
    if (s.label == opt.biased_class && carries_glyph(s)) {
      donor = &s;
      break;
    }
  if (donor) {
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < test.size(); ++i)
      if (test[i].label != opt.biased_class) targets.push_back(i);
    Rng rng(derive_seed(opt.seed, "bias-paste"));
    rng.shuffle(targets);
    if (targets.size() > opt.paste_samples) targets.resize(opt.paste_samples);
    std::sort(targets.begin(), targets.end());
    for (std::size_t i : targets) {
      const ImageSample pasted = paste_patch(test[i], *donor, opt.glyph, opt.glyph.x, opt.glyph.y);
      const Tensor before = forward_probs(model, prep(test[i].pixels));
      const Tensor after = forward_probs(model, prep(pasted.pixels));
      rep.pastes.push_back({i, test[i].label, {before.data().begin(), before.data().end()},
                            {after.data().begin(), after.data().end()}});
    }
  }
  return rep;
}

inline std::string bias_accuracy_csv(const BiasReport& r) {
  return "set,accuracy\nunedited," + format_real(r.unedited.accuracy) + "\nedited," +
         format_real(r.edited.accuracy) + "\ndelta," + format_real(r.accuracy_delta()) + '\n';
}

inline std::string bias_regions_csv(const BiasReport& r) {
  std::string s = "class,subset,images,mean_relevance,share,rank,windows,top_decile\n";
  for (const auto& c : r.regions) {
    s += std::to_string(c.cls) + ',' + c.subset + ',' + std::to_string(c.images) + ',' +
         format_real(c.mean_relevance) + ',' + format_real(c.rank.share) + ',' + std::to_string(c.rank.rank) + ',' +
         std::to_string(c.rank.windows) + ',' + (c.rank.in_top_fraction(0.1) ? "1" : "0") + '\n';
  }
  return s;
}

inline std::string bias_paste_csv(const BiasReport& r) {
  const std::size_t k = r.unedited.confusion.size();
  std::string s = "index,label";
  for (std::size_t c = 0; c < k; ++c) s += ",before_p" + std::to_string(c);
  for (std::size_t c = 0; c < k; ++c) s += ",after_p" + std::to_string(c);
  s += '\n';
  for (const auto& p : r.pastes) {
    s += std::to_string(p.index) + ',' + std::to_string(p.label);
    for (double v : p.before) s += ',' + format_real(v);
    for (double v : p.after) s += ',' + format_real(v);
    s += '\n';
  }
  return s;
}

}  // namespace ttl
