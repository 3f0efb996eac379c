#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ttl/data.hpp"
#include "ttl/surgery.hpp"
#include "ttl/synth.hpp"
#include "ttl/train.hpp"

// Training pipelines A-E:
//   A  stage 1 -> new head -> target
//   B  stage 1 -> intermediate (15 sigmoid outputs) -> new head -> target
//   C  as B, keeping the "no findings" and shared-finding neurons
//   D  provided intermediate model (14 outputs) -> new head -> target
//   E  as D, keeping the shared-finding neuron
namespace ttl {

enum class Variant { A, B, C, D, E };

inline Variant parse_variant(const std::string& s) {
  if (s == "A" || s == "a") return Variant::A;
  if (s == "B" || s == "b") return Variant::B;
  if (s == "C" || s == "c") return Variant::C;
  if (s == "D" || s == "d") return Variant::D;
  if (s == "E" || s == "e") return Variant::E;
  throw ConfigError("unknown variant '" + s + "' (expected A, B, C, D or E)");
}

inline std::string to_string(Variant v) { return std::string(1, static_cast<char>('A' + static_cast<int>(v))); }

inline bool uses_stage2(Variant v) { return v == Variant::B || v == Variant::C; }
inline bool uses_prebuilt(Variant v) { return v == Variant::D || v == Variant::E; }

struct LabeledSplit {
  std::vector<ImageSample> train, val;
};

struct PipelineConfig {
  DenseNetConfig body;  // num_outputs and head_activation are set per stage
  Preprocess prep;
  AugmentConfig stage1_aug, stage2_aug, target_aug;
  double stage1_scale = 1.0;
  double stage1_lr = 0.01;
  std::size_t stage1_epochs = 30;
  IntermediateScheduleOptions intermediate;
  TargetScheduleOptions target;
  std::size_t target_classes = 3;
  HeadMap keep_from_stage2{{{0, 0}, {1, 1}}, 3};   // no findings -> clear, shared -> shared
  HeadMap keep_from_prebuilt{{{0, 1}}, 3};         // shared -> shared
};

inline std::vector<PhaseConfig> stage1_phases(const PipelineConfig& cfg) {
  PhaseConfig p;
  p.name = "stage1";
  p.epochs = scaled_epochs(static_cast<double>(cfg.stage1_epochs), cfg.stage1_scale);
  p.base_lr = cfg.stage1_lr;
  p.momentum = 0.9;
  p.weight_decay = 1e-4;
  p.batch_size = 16;
  return {p};
}

struct StageResult {
  DenseNet model;
  std::vector<TrainReport> reports;
};

/// Stage results shared across variants of one seed (B and C reuse one
/// intermediate run; A, B and C reuse one stage-1 run).
struct PipelineCache {
  std::optional<StageResult> stage1, stage2, prebuilt;
};

struct PipelineData {
  std::optional<LabeledSplit> stage1, stage2, prebuilt;
  Splits target;
};

struct PipelineResult {
  DenseNet model;
  std::vector<TrainReport> trail;
  std::vector<double> checkpoint_accuracy;  // test accuracy of the best model of each target phase
};

inline StageResult train_stage1(const PipelineConfig& cfg, const LabeledSplit& data, std::uint64_t seed,
                                const EpochCallback& on_epoch = {}) {
  DenseNetConfig c = cfg.body;
  c.num_outputs = 10;
  c.head_activation = HeadActivation::softmax;
  StageResult r{build_model(c, derive_seed(seed, "stage1-init")), {}};
  const auto stream = make_stream(data.train, cfg.stage1_aug, cfg.prep, derive_seed(seed, "stage1-stream"), false);
  r.reports = run_schedule(r.model, stream, to_examples(data.val, cfg.prep), stage1_phases(cfg),
                           derive_seed(seed, "stage1-train"), {}, on_epoch);
  r.model.provenance = "stage1 seed=" + std::to_string(seed);
  return r;
}

/// Intermediate multi-label training starting from a stage-1 model.
inline StageResult train_intermediate(const PipelineConfig& cfg, const DenseNet& stage1, const LabeledSplit& data,
                                      std::uint64_t seed, const std::string& tag, const EpochCallback& on_epoch = {}) {
  if (data.train.empty() || !data.train.front().multi_label()) {
    throw ConfigError("intermediate stage needs a multi-label dataset");
  }
  const std::size_t labels = data.train.front().labels.size();
  StageResult r{replace_head(stage1, labels, HeadActivation::sigmoid, derive_seed(seed, tag + "-head")), {}};
  const auto stream = make_stream(data.train, cfg.stage2_aug, cfg.prep, derive_seed(seed, tag + "-stream"), false);
  r.reports = run_intermediate_schedule(r.model, stream, to_examples(data.val, cfg.prep), cfg.intermediate,
                                        derive_seed(seed, tag + "-train"), {}, on_epoch);
  r.model.provenance = tag + " seed=" + std::to_string(seed);
  return r;
}

/// Runs one variant end to end. Stage models missing from the cache are
/// trained from `data` and stored; D and E require a prebuilt model in the
/// cache or a prebuilt dataset.
inline PipelineResult build_pipeline(Variant v, const PipelineConfig& cfg, const PipelineData& data,
                                     PipelineCache& cache, std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  PipelineResult out;
  auto need = [&](const auto& opt, const char* stage) -> const auto& {
    if (!opt) throw ConfigError("variant " + to_string(v) + " needs the " + stage + " dataset");
    return *opt;
  };
  if (data.target.train.empty() || data.target.val.empty() || data.target.test.empty()) {
    throw ConfigError("variant " + to_string(v) + " needs the target dataset (train, val and test)");
  }
  const DenseNet* donor = nullptr;
  if (uses_prebuilt(v)) {
    if (!cache.prebuilt) {
      const auto& s1_data = need(data.stage1, "stage-1");
      if (!cache.stage1) cache.stage1 = train_stage1(cfg, s1_data, seed, on_epoch);
      cache.prebuilt = train_intermediate(cfg, cache.stage1->model, need(data.prebuilt, "prebuilt intermediate"),
                                          seed, "prebuilt", on_epoch);
    }
    donor = &cache.prebuilt->model;
  } else {
    if (!cache.stage1) cache.stage1 = train_stage1(cfg, need(data.stage1, "stage-1"), seed, on_epoch);
    for (const auto& r : cache.stage1->reports) out.trail.push_back(r);
    donor = &cache.stage1->model;
    if (uses_stage2(v)) {
      if (!cache.stage2) {
        cache.stage2 = train_intermediate(cfg, cache.stage1->model, need(data.stage2, "stage-2"), seed, "stage2",
                                          on_epoch);
      }
      for (const auto& r : cache.stage2->reports) out.trail.push_back(r);
      donor = &cache.stage2->model;
    }
  }

  const std::uint64_t head_seed = derive_seed(seed, "target-head");
  if (v == Variant::C) {
    out.model = keep_output_neurons(*donor, cfg.keep_from_stage2, HeadActivation::softmax, head_seed);
  } else if (v == Variant::E) {
    out.model = keep_output_neurons(*donor, cfg.keep_from_prebuilt, HeadActivation::softmax, head_seed);
  } else {
    out.model = replace_head(*donor, cfg.target_classes, HeadActivation::softmax, head_seed);
  }

  const auto test = to_examples(data.target.test, cfg.prep);
  const auto stream = make_stream(data.target.train, cfg.target_aug, cfg.prep, derive_seed(seed, "target-stream"),
                                  true);
  auto reports = run_target_schedule(
      out.model, stream, to_examples(data.target.val, cfg.prep), cfg.target, derive_seed(seed, "target-train"),
      [&](std::size_t, const TrainReport& r) { out.checkpoint_accuracy.push_back(evaluate(r.best_model, test).accuracy); },
      on_epoch);
  for (auto& r : reports) out.trail.push_back(std::move(r));
  out.model.provenance = "variant " + to_string(v) + " seed=" + std::to_string(seed);
  return out;
}

}  // namespace ttl
