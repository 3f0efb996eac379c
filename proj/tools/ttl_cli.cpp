// ttl: dataset generation, pipeline training, evaluation, LRP explanations,
// bias experiments and the variant benchmark.
//
// Exit codes: 0 success, 2 usage or input error, 3 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ttl/checkpoint.hpp"
#include "ttl/experiment.hpp"

namespace fs = std::filesystem;
using namespace ttl;

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw Error("cannot create directory '" + p.parent_path().string() + "': " + ec.message());
  }
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write '" + p.string() + "'");
}

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw Error("cannot create directory '" + p.string() + "': " + ec.message());
}

// --config FILE then --set key=value pairs, later ones winning.
struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "key = value config file (see `ttl --help` for keys)");
    app->add_option("--set", sets, "override one config key, e.g. --set target_scale=0.5")->take_all();
  }

  ExperimentConfig load() const {
    ExperimentConfig cfg;
    if (!file.empty()) apply_settings(cfg, read_text(file));
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      const auto kv = parse_key_values(s.substr(0, eq) + " = " + s.substr(eq + 1));
      for (const auto& [k, v] : kv) apply_setting(cfg, k, v);
    }
    return cfg;
  }
};

Preprocess prep_for(const DenseNet& model, const ExperimentConfig& cfg) {
  Preprocess p = cfg.pipeline.prep;
  p.size = model.config.input_size;
  p.channels = model.config.input_channels;
  return p;
}

void check_labels(const std::vector<ImageSample>& set, const DenseNet& model, const std::string& what) {
  if (set.empty()) throw ConfigError(what + " is empty");
  if (model.config.head_activation != HeadActivation::softmax) {
    throw ConfigError("the model has a multi-label head; " + what + " needs a single-label classifier");
  }
  for (const auto& s : set) {
    if (s.multi_label()) throw ConfigError(what + " holds multi-label samples; eval needs class labels");
    if (s.label >= model.config.num_outputs) {
      throw ConfigError(what + " has label " + std::to_string(s.label) + " but the model has " +
                        std::to_string(model.config.num_outputs) + " outputs");
    }
  }
}

LrpPreset load_preset(const std::string& spec) {
  if (fs::is_regular_file(spec)) return parse_lrp_preset(read_text(spec));
  return named_preset(spec);
}

Rect parse_rect(const std::string& text) {
  std::vector<std::size_t> v;
  for (const auto& s : detail::split_list(text)) v.push_back(detail::parse_count("glyph rect", s));
  if (v.size() != 4) throw ConfigError("glyph rect must be x,y,w,h, got '" + text + "'");
  return {v[0], v[1], v[2], v[3]};
}

EpochCallback progress(bool quiet) {
  if (quiet) return {};
  return [](const std::string& phase, const EpochRecord& e) {
    std::fprintf(stderr, "  %-14s epoch %3zu  train %.4f  val %.4f  acc %.4f\n", phase.c_str(), e.epoch, e.train_loss,
                 e.val_loss, e.val_acc);
  };
}

std::string config_help() {
  std::string s = "\nConfig keys (key = value files, or --set key=value; defaults shown):\n";
  const ExperimentConfig def;
  for (const auto& x : experiment_settings()) {
    char line[256];
    std::snprintf(line, sizeof line, "  %-22s %-18s %s\n", x.key.c_str(), x.get(def).c_str(), x.help.c_str());
    s += line;
  }
  s += "\nExit codes: 0 success, 2 usage or input error, 3 numerical failure.\n";
  return s;
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  int stage = 3;
  std::string spec_file, out;
  std::vector<std::string> sets;
  std::uint64_t seed = 1;
  std::size_t test_per_class = 50;
  double train_fraction = 0.9;
};

int cmd_gen(const GenArgs& a) {
  std::string text = a.spec_file.empty() ? std::string() : read_text(a.spec_file);
  text += "\nstage = " + std::to_string(a.stage) + "\n";
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    text += s.substr(0, eq) + " = " + s.substr(eq + 1) + "\n";
  }
  if (a.stage == 1 && !parse_key_values(text).count("class_counts")) {
    text += "class_counts = " + std::string("60,60,60,60,60,60,60,60,60,60") + "\n";
  }
  const SynthSpec spec = parse_synth_spec(text);
  const auto data = generate_dataset(spec, dataset_seed(a.seed, spec.stage, spec.clear_label));
  const fs::path out(a.out);
  make_dir(out);
  if (spec.stage == 3) {
    const Splits s = split(data, SplitSpec{a.test_per_class, a.train_fraction, a.seed});
    const Rect glyph = spec.bias_glyph.value_or(BiasGlyph{}).rect(spec.image_size);
    std::vector<ImageSample> edited;
    for (const auto& x : s.test) edited.push_back(mask_rectangle(x, glyph));
    write_dataset(out, s.train, "train.tsv");
    write_dataset(out, s.val, "val.tsv");
    write_dataset(out, s.test, "test.tsv");
    write_dataset(out, edited, "test_edited.tsv");
    write_text(out / "glyph.txt", std::to_string(glyph.x) + ',' + std::to_string(glyph.y) + ',' +
                                      std::to_string(glyph.w) + ',' + std::to_string(glyph.h) + ' ' +
                                      std::to_string(spec.bias_glyph.value_or(BiasGlyph{}).cls) + '\n');
    std::printf("stage 3: %zu images -> train %zu, val %zu, test %zu (+%zu edited)\n", data.size(), s.train.size(),
                s.val.size(), s.test.size(), edited.size());
  } else {
    const LabeledSplit s = labeled_split(data, a.train_fraction, a.seed);
    write_dataset(out, s.train, "train.tsv");
    write_dataset(out, s.val, "val.tsv");
    std::printf("stage %d: %zu images -> train %zu, val %zu\n", spec.stage, data.size(), s.train.size(),
                s.val.size());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string variant, stage1, stage1_model, stage2, prebuilt, prebuilt_model, target, out;
  ConfigArgs config;
  std::uint64_t seed = 1;
  bool quiet = false;
};

LabeledSplit read_labeled(const fs::path& dir) { return {read_manifest(dir / "train.tsv"), read_manifest(dir / "val.tsv")}; }

void write_reports(const fs::path& dir, const std::vector<TrainReport>& reports) {
  for (const auto& r : reports) {
    write_text(dir / (r.phase + ".csv"), report_csv(r));
    save_checkpoint(r.best_model, dir / (r.phase + "_best.nkp1"));
  }
}

int cmd_train(const TrainArgs& a) {
  const Variant v = parse_variant(a.variant);
  ExperimentConfig cfg = a.config.load();
  const PipelineConfig& pc = cfg.pipeline;
  pc.body.validate();

  PipelineData data;
  PipelineCache cache;
  if (!a.stage1_model.empty()) cache.stage1 = StageResult{load_checkpoint(a.stage1_model), {}};
  else if (!a.stage1.empty()) data.stage1 = read_labeled(a.stage1);
  if (!a.stage2.empty()) data.stage2 = read_labeled(a.stage2);
  if (!a.prebuilt_model.empty()) cache.prebuilt = StageResult{load_checkpoint(a.prebuilt_model), {}};
  else if (!a.prebuilt.empty()) data.prebuilt = read_labeled(a.prebuilt);
  const fs::path target(a.target);
  data.target = {read_manifest(target / "train.tsv"), read_manifest(target / "val.tsv"),
                 read_manifest(target / "test.tsv")};

  const bool stage1_trained = !cache.stage1, prebuilt_trained = !cache.prebuilt;
  const PipelineResult r = build_pipeline(v, pc, data, cache, a.seed, progress(a.quiet));

  const fs::path out(a.out);
  make_dir(out);
  std::vector<TrainReport> main_reports;
  for (const auto& rep : r.trail)
    if (rep.phase != "stage1") main_reports.push_back(rep);
  write_reports(out, main_reports);
  if (stage1_trained && cache.stage1) write_reports(out / "stage1", cache.stage1->reports);
  if (uses_prebuilt(v) && prebuilt_trained) write_reports(out / "prebuilt", cache.prebuilt->reports);

  const auto bounds = phase_boundaries(target_phases(pc.body.num_blocks, pc.target));
  std::string ck = "checkpoint,phase,boundary_epoch,epochs_run,test_accuracy\n";
  std::size_t run = 0, k = 0;
  for (const auto& rep : r.trail) {
    if (rep.phase.rfind("phase", 0) != 0) continue;
    run += rep.epochs.size();
    ck += std::to_string(k + 1) + ',' + rep.phase + ',' + std::to_string(bounds[k]) + ',' + std::to_string(run) + ',' +
          format_real(r.checkpoint_accuracy[k]) + '\n';
    ++k;
  }
  write_text(out / "checkpoints.csv", ck);
  save_checkpoint(r.model, out / "final.nkp1");
  write_text(out / "test_metrics.csv", metrics_csv(evaluate(r.model, to_examples(data.target.test, pc.prep))));
  write_text(out / "config.txt", describe_config(cfg));

  std::printf("variant %s seed %llu: checkpoint accuracies", to_string(v).c_str(),
              static_cast<unsigned long long>(a.seed));
  for (double acc : r.checkpoint_accuracy) std::printf(" %.4f", acc);
  std::printf("\n");
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string model, manifest, out;
  ConfigArgs config;
};

int cmd_eval(const EvalArgs& a) {
  const ExperimentConfig cfg = a.config.load();
  const DenseNet model = load_checkpoint(a.model);
  const auto set = read_manifest(a.manifest);
  check_labels(set, model, "manifest '" + a.manifest + "'");
  const Metrics m = evaluate(model, to_examples(set, prep_for(model, cfg)));
  write_text(a.out, metrics_csv(m));
  std::printf("accuracy %.4f over %zu images\n", m.accuracy, set.size());
  return 0;
}

// ---------------------------------------------------------------------------
// explain

struct ExplainArgs {
  std::string model, image, preset = "preset-a-flat", out, dump_csv;
  std::optional<std::size_t> neuron;
  bool winning = false, redistribute = false;
  ConfigArgs config;
};

int cmd_explain(const ExplainArgs& a) {
  const ExperimentConfig cfg = a.config.load();
  const DenseNet model = load_checkpoint(a.model);
  const ImageSample img = load_pgm(a.image);
  const Preprocess prep = prep_for(model, cfg);
  ExplainOptions opt;
  opt.start_neuron = a.winning ? std::nullopt : a.neuron;
  opt.bias = a.redistribute ? BiasMode::redistribute : BiasMode::absorb;
  const RelevanceMap m = explain(model, prep(img.pixels), load_preset(a.preset), opt);

  const Tensor underlay = img.height() == prep.size ? img.pixels : resize_bilinear(img.pixels, prep.size);
  save_ppm(render_heatmap(m.relevance, underlay), a.out);
  if (!a.dump_csv.empty()) write_text(a.dump_csv, relevance_csv(m.relevance));

  std::printf("start neuron %zu  logit %.6g\nprobabilities", m.start_neuron, m.start_logit);
  for (std::size_t i = 0; i < m.probs.size(); ++i) std::printf(" %.4f", m.probs[i]);
  double worst = 0.0;
  std::string worst_layer = "-";
  for (const auto& l : m.layers) {
    if (std::abs(l.residual()) > worst) {
      worst = std::abs(l.residual());
      worst_layer = l.layer;
    }
  }
  const double total = m.relevance.sum();
  std::printf("\nrelevance sum %.6g (logit %.6g, residual %.3g); largest layer residual %.3g at %s\n", total,
              m.start_logit, total - m.start_logit, worst, worst_layer.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// bias

struct BiasArgs {
  std::string model, data, rect, preset = "preset-a-flat", out;
  std::optional<std::size_t> cls;
  std::size_t paste = 50;
  std::uint64_t seed = 1;
  ConfigArgs config;
};

int cmd_bias(const BiasArgs& a) {
  const ExperimentConfig cfg = a.config.load();
  const DenseNet model = load_checkpoint(a.model);
  const fs::path dir(a.data);
  BiasOptions opt;
  opt.preset = load_preset(a.preset);
  opt.paste_samples = a.paste;
  opt.seed = a.seed;
  std::string rect = a.rect;
  if (rect.empty() || !a.cls) {
    if (!fs::exists(dir / "glyph.txt") && rect.empty()) {
      throw ConfigError("no --glyph-rect given and '" + (dir / "glyph.txt").string() + "' is missing");
    }
    if (fs::exists(dir / "glyph.txt")) {
      std::istringstream in(read_text(dir / "glyph.txt"));
      std::string r;
      std::size_t c = 2;
      in >> r >> c;
      if (rect.empty()) rect = r;
      if (!a.cls) opt.biased_class = c;
    }
  }
  if (a.cls) opt.biased_class = *a.cls;
  opt.glyph = parse_rect(rect);

  const auto test = read_manifest(dir / "test.tsv");
  const auto edited = read_manifest(dir / "test_edited.tsv");
  check_labels(test, model, "test set");
  check_labels(edited, model, "edited test set");
  if (test.size() != edited.size()) throw ConfigError("test and edited test sets differ in size");

  const BiasReport rep = bias_experiment(model, test, edited, prep_for(model, cfg), opt);
  const fs::path out(a.out);
  make_dir(out);
  write_text(out / "accuracy.csv", bias_accuracy_csv(rep));
  write_text(out / "regions.csv", bias_regions_csv(rep));
  write_text(out / "paste.csv", bias_paste_csv(rep));
  if (rep.glyph_class_map.size()) {
    save_ppm(render_heatmap(rep.glyph_class_map, Tensor(rep.glyph_class_map.shape())), out / "glyph_class_map.ppm");
  }

  std::printf("accuracy unedited %.4f  edited %.4f  delta %+.2f pp\n", rep.unedited.accuracy, rep.edited.accuracy,
              100.0 * rep.accuracy_delta());
  for (const auto& r : rep.regions) {
    std::printf("class %zu %-5s n=%-4zu glyph-rect mean relevance %+.4g  share %.4f  rank %zu/%zu\n", r.cls,
                r.subset.c_str(), r.images, r.mean_relevance, r.rank.share, r.rank.rank, r.rank.windows);
  }
  if (const auto f = rep.paste_increase_fraction()) {
    std::printf("patch pasting raised p(class %zu) in %.1f%% of %zu samples\n", rep.biased_class, 100.0 * *f,
                rep.pastes.size());
  } else {
    std::printf("patch pasting skipped: no glyph-bearing image of class %zu in the test set\n", rep.biased_class);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  ConfigArgs config;
  std::string seeds, variants, out;
  bool quiet = true;
};

int cmd_bench(const BenchArgs& a) {
  ExperimentConfig cfg = a.config.load();
  if (!a.seeds.empty()) apply_setting(cfg, "seeds", a.seeds);
  if (!a.variants.empty()) apply_setting(cfg, "variants", a.variants);
  const auto rows = run_bench(
      cfg,
      [](const BenchRow& r) {
        std::printf("%s seed %-4s", r.variant.c_str(), r.seed.c_str());
        for (double v : r.ckpt) std::printf(" %.4f", v);
        std::printf("   (%.0f s)\n", r.seconds);
        std::fflush(stdout);
      },
      progress(a.quiet));
  const fs::path out(a.out);
  make_dir(out);
  write_text(out / "bench.csv", bench_csv(rows));
  write_text(out / "config.txt", describe_config(cfg));
  std::printf("\nmedian test accuracy per checkpoint\n");
  for (const auto& m : bench_medians(rows)) {
    std::printf("%s       ", m.variant.c_str());
    for (double v : m.ckpt) std::printf(" %.4f", v);
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ttl: staged transfer learning and LRP on synthetic chest images"};
  app.footer(config_help());
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic dataset (PGM images + TSV manifests)");
  g->add_option("--stage", gen.stage, "1 shapes, 2 multi-label findings, 3 target classes")
      ->check(CLI::Range(1, 3))
      ->capture_default_str();
  g->add_option("--spec", gen.spec_file, "synth spec file (stage, image_size, class_counts, glyph_* ...)");
  g->add_option("--set", gen.sets, "override one spec key, e.g. --set glyph_class=2")->take_all();
  g->add_option("--seed", gen.seed, "root seed")->capture_default_str();
  g->add_option("--test-per-class", gen.test_per_class, "stage 3: test images per class")->capture_default_str();
  g->add_option("--train-fraction", gen.train_fraction, "train share (of the non-test rest for stage 3)")
      ->capture_default_str();
  g->add_option("--out", gen.out, "output directory")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train one pipeline variant (A-E) and write checkpoints and reports");
  t->add_option("--variant", train.variant, "A, B, C, D or E")->required();
  train.config.attach(t);
  t->add_option("--seed", train.seed, "root seed")->capture_default_str();
  t->add_option("--stage1", train.stage1, "stage-1 dataset directory (train.tsv, val.tsv)");
  t->add_option("--stage1-model", train.stage1_model, "use this stage-1 checkpoint instead of training one");
  t->add_option("--stage2", train.stage2, "15-label intermediate dataset directory (variants B, C)");
  t->add_option("--prebuilt", train.prebuilt, "14-label dataset for the provided intermediate model (D, E)");
  t->add_option("--prebuilt-model", train.prebuilt_model, "provided 14-output intermediate checkpoint (D, E)");
  t->add_option("--target", train.target, "target dataset directory (train.tsv, val.tsv, test.tsv)")->required();
  t->add_option("--out", train.out, "output directory")->required();
  t->add_flag("--quiet", train.quiet, "no per-epoch progress on stderr");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "accuracy, confusion matrix and per-class precision/recall/F1");
  e->add_option("--model", ev.model, "NKP1 checkpoint")->required();
  e->add_option("--manifest", ev.manifest, "TSV manifest of the test images")->required();
  e->add_option("--out", ev.out, "metrics CSV")->required();
  ev.config.attach(e);

  ExplainArgs ex;
  auto* x = app.add_subcommand("explain", "LRP heatmap for one image");
  x->add_option("--model", ex.model, "NKP1 checkpoint")->required();
  x->add_option("--image", ex.image, "P5 input image")->required();
  auto* neuron = x->add_option("--neuron", ex.neuron, "output neuron to explain");
  x->add_flag("--winning", ex.winning, "explain the highest-scoring neuron (default)")->excludes(neuron);
  x->add_option("--preset", ex.preset, "preset-a-flat, zplus, epsilon, flat, or a preset file")
      ->capture_default_str();
  x->add_flag("--redistribute-bias", ex.redistribute, "hand bias relevance to the inputs (conservation audits)");
  x->add_option("--out", ex.out, "heatmap PPM")->required();
  x->add_option("--dump-csv", ex.dump_csv, "raw relevance CSV, one row per image row");
  ex.config.attach(x);

  BiasArgs bias;
  auto* b = app.add_subcommand("bias", "glyph bias experiments: masking, relevance in the glyph region, pasting");
  b->add_option("--model", bias.model, "NKP1 checkpoint")->required();
  b->add_option("--data", bias.data, "stage-3 directory from `ttl gen` (test.tsv, test_edited.tsv)")->required();
  b->add_option("--glyph-rect", bias.rect, "x,y,w,h in image pixels (default: DATA/glyph.txt)");
  b->add_option("--class", bias.cls, "biased class (default: DATA/glyph.txt)");
  b->add_option("--preset", bias.preset, "LRP preset name or file")->capture_default_str();
  b->add_option("--paste", bias.paste, "number of patch-pasted samples")->capture_default_str();
  b->add_option("--seed", bias.seed, "seed for choosing pasted samples")->capture_default_str();
  b->add_option("--out", bias.out, "output directory")->required();
  bias.config.attach(b);

  BenchArgs bench;
  auto* n = app.add_subcommand("bench", "all variants x seeds on in-memory synthetic data");
  bench.config.attach(n);
  n->add_option("--seeds", bench.seeds, "override the seeds key, e.g. 1,2,3");
  n->add_option("--variants", bench.variants, "override the variants key, e.g. A,C");
  n->add_option("--out", bench.out, "output directory")->required();
  bool verbose = false;
  n->add_flag("--verbose", verbose, "per-epoch progress on stderr");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& h) {
    return app.exit(h);
  } catch (const CLI::CallForAllHelp& h) {
    return app.exit(h);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(ev);
    if (*x) return cmd_explain(ex);
    if (*b) return cmd_bias(bias);
    bench.quiet = !verbose;
    return cmd_bench(bench);
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numerical failure: %s\n", err.what());
    return 3;
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  }
}
