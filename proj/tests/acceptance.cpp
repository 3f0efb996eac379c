// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--cli PATH] [--only N[,N...]] [--bench-csv FILE]
//
// Criterion 7 trains 5 variants x 5 seeds at toy scale and dominates the
// runtime (tens of minutes on one core). Criterion 9 drives the CLI binary
// given by --cli; without it criterion 9 fails.

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"
#include "ttl/experiment.hpp"

namespace fs = std::filesystem;
using namespace ttl;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

Tensor flat_view(const Tensor& t) { return Tensor({t.size()}, std::vector<double>(t.data().begin(), t.data().end())); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  Outcome o;
  const std::clock_t t0 = std::clock();
  double worst = 0.0;
  for (const auto& r : testing::run_gradient_suite(20, 20240601)) {
    o.require(r.cases >= 20, r.layer + " has only " + std::to_string(r.cases) + " cases");
    o.require(r.worst_relative_error <= 1e-4, r.layer + " rel err " + fmt("%.3g", r.worst_relative_error));
    worst = std::max(worst, r.worst_relative_error);
  }
  const double cpu = static_cast<double>(std::clock() - t0) / CLOCKS_PER_SEC;
  o.require(cpu < 120.0, "runtime " + fmt("%.1f", cpu) + " s CPU");
  if (o.pass) o.detail = "worst rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f", cpu) + " s CPU";
  return o;
}

Outcome oracle_suite() {
  Outcome o;
  double conv_worst = 0.0, lin_worst = 0.0, lrp_worst = 0.0;
  for (std::uint64_t s = 0; s < 30; ++s) {
    Rng r(s);
    const std::size_t cin = 1 + r.below(3), k = 1 + r.below(3), stride = 1 + r.below(2), pad = r.below(2);
    const Tensor x = random_normal({cin, 5 + r.below(3), 4 + r.below(3)}, r);
    const Tensor w = random_normal({2, cin, k, k}, r);
    const Tensor b = random_normal({2}, r);
    conv_worst = std::max(conv_worst, max_abs_diff(conv2d(x, w, b, {stride, pad}),
                                                   testing::conv2d_oracle(x, w, b, stride, pad)));
    const Tensor v = random_normal({7}, r), lw = random_normal({4, 7}, r), lb = random_normal({4}, r);
    lin_worst = std::max(lin_worst, max_abs_diff(linear(v, lw, lb), testing::linear_oracle(v, lw, lb)));
  }
  const LrpRule rules[] = {LrpRule::eps(0.01), LrpRule::eps(0.0), LrpRule::alpha_beta(2, 1), LrpRule::z_plus(),
                           LrpRule::flat_rule()};
  const ConvGeometry geoms[] = {{1, 1}, {1, 0}, {2, 1}};
  for (std::uint64_t seed = 0; seed < 8; ++seed)
    for (const ConvGeometry g : geoms) {
      Rng rng(seed * 31 + g.stride * 7 + g.padding);
      const Tensor x = random_uniform({1, 4, 4}, rng);
      const Tensor w = random_uniform({2, 1, 3, 3}, rng);
      const Tensor b = random_uniform({2}, rng, -0.3, 0.3);
      const std::size_t ho = conv_out_extent(4, 3, g);
      const Tensor r_out = random_uniform({2, ho, ho}, rng);
      const auto u = testing::unroll_conv(x.shape(), w, b, g.stride, g.padding);
      for (const LrpRule& rule : rules)
        for (BiasMode mode : {BiasMode::absorb, BiasMode::redistribute}) {
          const Tensor direct = lrp_conv(rule, x, w, b, g, r_out, mode);
          const Tensor oracle = lrp_linear(rule, flat_view(x), u.matrix, u.bias, flat_view(r_out), mode);
          lrp_worst = std::max(lrp_worst, max_abs_diff(flat_view(direct), oracle));
        }
    }
  o.require(conv_worst <= 1e-12, "conv2d off by " + fmt("%.3g", conv_worst));
  o.require(lin_worst <= 1e-12, "linear off by " + fmt("%.3g", lin_worst));
  o.require(lrp_worst <= 1e-10, "lrp_conv off by " + fmt("%.3g", lrp_worst));
  if (o.pass) {
    o.detail = "conv " + fmt("%.1e", conv_worst) + ", linear " + fmt("%.1e", lin_worst) + ", lrp_conv " +
               fmt("%.1e", lrp_worst);
  }
  return o;
}

DenseNetConfig small_config(std::size_t outputs = 3) {
  DenseNetConfig c;
  c.input_size = 8;
  c.stem_channels = 4;
  c.num_blocks = 2;
  c.layers_per_block = 2;
  c.growth_rate = 4;
  c.num_outputs = outputs;
  return c;
}

DenseNet perturbed_model(std::uint64_t seed) {
  DenseNet m = build_model(small_config(), seed);
  Rng rng(seed + 100);
  for_each_tensor(m, [&](const std::string&, std::size_t, TensorRole role, Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (role == TensorRole::bn_running_mean) t[i] = rng.uniform(-0.2, 0.2);
      if (role == TensorRole::bn_running_var) t[i] = rng.uniform(0.5, 1.5);
      if (role == TensorRole::bn_scale) t[i] = rng.uniform(0.5, 1.5);
      if (role == TensorRole::bn_shift) t[i] = rng.uniform(-0.1, 0.1);
      if (role == TensorRole::bias) t[i] = rng.uniform(-0.1, 0.1);
    }
  });
  return m;
}

Outcome conservation_suite() {
  Outcome o;
  double layer_worst = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Tensor x = random_uniform({2, 6, 6}, rng, 0.0, 1.0);
    const Tensor w = random_uniform({3, 2, 3, 3}, rng);
    const Tensor b = random_uniform({3}, rng);
    const Tensor r_conv = random_uniform({3, 6, 6}, rng, 0.0, 1.0);
    const Tensor lw = random_uniform({4, 72}, rng), lb = random_uniform({4}, rng);
    const Tensor r_lin = random_uniform({4}, rng, 0.0, 1.0);
    const Tensor a = random_uniform({2}, rng, 0.5, 1.5), c = random_uniform({2}, rng);
    const Tensor r_pool = random_uniform({2, 3, 3}, rng, 0.0, 1.0);
    const Tensor r_gap = random_uniform({2}, rng, 0.0, 1.0);
    for (const LrpRule& rule : {LrpRule::flat_rule(), LrpRule::z_plus()}) {
      std::vector<LayerAudit> au(5);
      lrp_conv(rule, x, w, b, {1, 1}, r_conv, BiasMode::redistribute, &au[0]);
      lrp_linear(rule, flat_view(x), lw, lb, r_lin, BiasMode::redistribute, &au[1]);
      lrp_channel_affine(rule, x, a, c, x, BiasMode::redistribute, &au[2]);
      lrp_avgpool(rule, x, 2, 2, r_pool, BiasMode::redistribute, &au[3]);
      lrp_global_avgpool(rule, x, r_gap, BiasMode::redistribute, &au[4]);
      for (const auto& l : au) layer_worst = std::max(layer_worst, rel_err(l.relevance_in, l.relevance_out));
    }
  }
  o.require(layer_worst <= 1e-9, "per-layer rel residual " + fmt("%.3g", layer_worst));

  double net_worst = 0.0;
  std::size_t nets = 0;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const DenseNet m = perturbed_model(seed);
    Rng rng(seed + 50);
    for (int i = 0; i < 5; ++i) {
      const Tensor x = random_uniform({1, 8, 8}, rng);
      const Tensor logits = forward_logits(m, x);
      for (std::size_t k = 0; k < 3; ++k) {
        if (!(logits[k] > 0.0)) continue;
        const RelevanceMap r = explain(m, x, named_preset("zplus"), {k, BiasMode::redistribute});
        net_worst = std::max(net_worst, rel_err(r.relevance.sum(), r.start_logit));
        ++nets;
      }
    }
  }
  o.require(nets >= 10, "only " + std::to_string(nets) + " whole-network cases");
  o.require(net_worst <= 1e-4, "whole-network rel residual " + fmt("%.3g", net_worst));

  std::size_t eps_layers = 0, eps_violations = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 7);
    const Tensor x = random_uniform({2, 5, 5}, rng);
    const Tensor w = random_uniform({2, 2, 3, 3}, rng);
    const Tensor r_out = random_uniform({2, 5, 5}, rng);
    LayerAudit au;
    lrp_conv(LrpRule::eps(0.1), x, w, Tensor({2}, {0.2, -0.3}), {1, 1}, r_out, BiasMode::redistribute, &au);
    ++eps_layers;
    if (!(std::abs(au.residual()) <= au.epsilon_bound * (1 + 1e-12) + 1e-15)) ++eps_violations;
    const RelevanceMap r = explain(perturbed_model(seed), random_uniform({1, 8, 8}, rng),
                                   preset_uniform("eps", LrpRule::eps(0.01)), {std::nullopt, BiasMode::redistribute});
    for (const auto& l : r.layers) {
      ++eps_layers;
      if (!(std::abs(l.residual()) <= l.epsilon_bound + 1e-9)) ++eps_violations;
    }
  }
  o.require(eps_violations == 0, std::to_string(eps_violations) + " epsilon bound violations");
  if (o.pass) {
    o.detail = "per-layer " + fmt("%.1e", layer_worst) + ", network " + fmt("%.1e", net_worst) + " over " +
               std::to_string(nets) + " maps, epsilon bound on " + std::to_string(eps_layers) + " layers";
  }
  return o;
}

bool bodies_identical(const DenseNet& a, const DenseNet& b) {
  std::vector<const Tensor*> ta, tb;
  const std::size_t head = a.config.num_blocks + 1;
  for_each_tensor(a, [&](const std::string&, std::size_t blk, TensorRole, const Tensor& t) {
    if (blk != head) ta.push_back(&t);
  });
  for_each_tensor(b, [&](const std::string&, std::size_t blk, TensorRole, const Tensor& t) {
    if (blk != head) tb.push_back(&t);
  });
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    if (ta[i]->shape() != tb[i]->shape() ||
        std::memcmp(ta[i]->data().data(), tb[i]->data().data(), ta[i]->size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

Outcome surgery_suite() {
  Outcome o;
  DenseNetConfig c = small_config(15);
  c.head_activation = HeadActivation::sigmoid;
  const DenseNet donor = build_model(c, 11);
  const HeadMap map{{{0, 0}, {1, 1}}, 3};
  const DenseNet kept = keep_output_neurons(donor, map, HeadActivation::softmax, 12);
  const DenseNet fresh = replace_head(donor, 3, HeadActivation::softmax, 13);
  std::size_t mismatches = 0;
  Rng rng(14);
  for (int i = 0; i < 100; ++i) {
    const Tensor x = random_uniform({1, 8, 8}, rng, -1.0, 1.0);
    const Tensor a = forward_logits(donor, x), b = forward_logits(kept, x);
    for (const auto& e : map.entries) mismatches += a[e.old_index] != b[e.new_index];
  }
  o.require(mismatches == 0, std::to_string(mismatches) + " mapped logits differ");
  o.require(bodies_identical(donor, kept), "keep_output_neurons changed the body");
  o.require(bodies_identical(donor, fresh), "replace_head changed the body");
  const DenseNet single = keep_output_neurons(donor, parse_head_map("1:1", 3), HeadActivation::softmax, 15);
  o.require(bodies_identical(donor, single), "single-neuron surgery changed the body");
  if (o.pass) o.detail = "200 mapped logits exact, bodies bit-identical after 3 surgeries";
  return o;
}

Outcome schedule_fidelity() {
  Outcome o;
  const auto phases = target_phases(3, TargetScheduleOptions{});
  const auto bounds = phase_boundaries(phases);
  o.require(bounds == std::vector<std::size_t>({10, 58, 106, 154}), "boundaries differ from 10/58/106/154");
  const PhaseConfig& p2 = phases[1];
  const std::size_t head = 4;
  o.require(p2.lr_for(head) == 1e-4, "head rate is not 1e-4");
  std::string rates;
  for (std::size_t b = 0; b < head; ++b) {
    o.require(p2.lr_for(b) == p2.lr_for(b + 1) / 10.0, "block " + std::to_string(b) + " breaks the /10 rule");
  }
  for (std::size_t b = 0; b <= head; ++b) rates += fmt(" %.0e", p2.lr_for(b));
  if (o.pass) o.detail = "boundaries 10/58/106/154, phase-2 rates stem..head" + rates;
  return o;
}

std::vector<ImageSample> labeled(const std::vector<std::size_t>& counts) {
  std::vector<ImageSample> out;
  std::size_t g = 0;
  for (std::size_t c = 0; c < counts.size(); ++c)
    for (std::size_t i = 0; i < counts[c]; ++i) {
      ImageSample s;
      s.pixels = Tensor({1, 8, 8}, 0.1 * static_cast<double>(c));
      s.label = c;
      s.group = g++;
      out.push_back(std::move(s));
    }
  return out;
}

Outcome balancing_suite() {
  Outcome o;
  const BalancePlan p = balance_plan({345, 1080, 288}, {24, 8, 30});
  o.require(p.slots == std::vector<std::size_t>({8280, 8640, 8640}), "full-scale slots differ");
  o.require(p.leave_out == std::vector<std::size_t>({0, 360, 360}), "leave-out differs from 0/360/360");

  AugmentConfig cfg;
  cfg.per_class_factor = {6, 3, 4};
  std::size_t unbalanced = 0;
  for (std::size_t e = 0; e < 3; ++e) {
    std::map<std::size_t, std::size_t> per;
    for (const auto& s : epoch_stream(labeled({10, 20, 15}), cfg, 7, e)) ++per[s.label];
    if (per != std::map<std::size_t, std::size_t>{{0, 60}, {1, 60}, {2, 60}}) ++unbalanced;
  }
  o.require(unbalanced == 0, std::to_string(unbalanced) + " toy epochs unbalanced");

  std::set<std::vector<Slot>> seen;
  for (std::size_t e = 0; e < 5; ++e) {
    auto slots = select_epoch_slots({345, 1080, 288}, {24, 8, 30}, 11, e);
    std::sort(slots.begin(), slots.end());
    seen.insert(std::move(slots));
  }
  o.require(seen.size() == 5, "leave-out repeated within 5 epochs");
  if (o.pass) o.detail = "8280/8640/8640 -> leave-out 360, toy epochs 60/60/60, 5 distinct leave-outs";
  return o;
}

Outcome toy_benchmark(const std::string& csv_path) {
  Outcome o;
  const ExperimentConfig cfg;
  std::printf("  running %zu variants x %zu seeds\n", cfg.variants.size(), cfg.seeds.size());
  std::fflush(stdout);
  double slowest = 0.0;
  const auto rows = run_bench(cfg, [&](const BenchRow& r) {
    slowest = std::max(slowest, r.seconds);
    std::printf("  %s seed %s:", r.variant.c_str(), r.seed.c_str());
    for (double a : r.ckpt) std::printf(" %.4f", a);
    std::printf("  (%.0f s)\n", r.seconds);
    std::fflush(stdout);
  });
  if (!csv_path.empty()) std::ofstream(csv_path) << bench_csv(rows);

  std::map<std::string, std::vector<double>> med;
  for (const auto& m : bench_medians(rows)) med[m.variant] = m.ckpt;
  double best_final = 0.0;
  std::string best;
  for (const auto& [v, ck] : med)
    if (ck.back() > best_final) best_final = ck.back(), best = v;
  o.require(best_final >= 0.95, "best median final accuracy " + fmt("%.4f", best_final));
  o.require(slowest < 900.0, "slowest cell " + fmt("%.0f", slowest) + " s");

  const double a = med["A"][0], b = med["B"][0], c = med["C"][0];
  o.require(c >= b && b >= a, "median ckpt1 C " + fmt("%.4f", c) + ", B " + fmt("%.4f", b) + ", A " + fmt("%.4f", a));
  std::size_t c_beats_a = 0;
  for (const auto& ra : rows) {
    if (ra.variant != "A") continue;
    for (const auto& rc : rows)
      if (rc.variant == "C" && rc.seed == ra.seed && rc.ckpt[0] > ra.ckpt[0]) ++c_beats_a;
  }
  o.require(c_beats_a >= 4, "C > A at ckpt1 in " + std::to_string(c_beats_a) + " of 5 seeds");
  if (o.pass) {
    o.detail = "best " + best + " " + fmt("%.4f", best_final) + ", ckpt1 medians C " + fmt("%.4f", c) + " >= B " +
               fmt("%.4f", b) + " >= A " + fmt("%.4f", a) + ", C > A in " + std::to_string(c_beats_a) +
               "/5, slowest cell " + fmt("%.0f", slowest) + " s";
  } else {
    o.detail += " (best " + best + " " + fmt("%.4f", best_final) + ", C > A in " + std::to_string(c_beats_a) + "/5)";
  }
  return o;
}

Outcome bias_reproduction() {
  Outcome o;
  ExperimentConfig cfg;
  cfg.data.glyph = BiasGlyph{};
  cfg.variants = {Variant::A};
  const std::uint64_t seed = 1;
  const PipelineData data = make_pipeline_data(cfg, seed);
  PipelineCache cache;
  const PipelineResult r = build_pipeline(Variant::A, cfg.pipeline, data, cache, seed);

  const Rect rect = cfg.data.glyph->rect(cfg.data.image_size);
  std::vector<ImageSample> edited;
  for (const auto& s : data.target.test) edited.push_back(mask_rectangle(s, rect));
  BiasOptions opt;
  opt.glyph = rect;
  opt.biased_class = cfg.data.glyph->cls;
  opt.seed = seed;
  const BiasReport rep = bias_experiment(r.model, data.target.test, edited, cfg.pipeline.prep, opt);

  const ClassRegion* glyph = nullptr;
  for (const auto& c : rep.regions)
    if (c.cls == opt.biased_class && c.subset == "glyph") glyph = &c;
  o.require(glyph != nullptr, "no glyph-bearing test image of the biased class");
  if (glyph) {
    o.require(glyph->mean_relevance > 0.0, "glyph-region mean relevance " + fmt("%.4g", glyph->mean_relevance));
    o.require(glyph->rank.in_top_fraction(0.1), "glyph rect ranks " + std::to_string(glyph->rank.rank) + "/" +
                                                    std::to_string(glyph->rank.windows));
  }
  const double delta = rep.accuracy_delta();
  o.require(std::abs(delta) <= 0.05, "edited-vs-unedited delta " + fmt("%+.2f", 100 * delta) + " pp");
  const std::string summary =
      glyph ? "glyph mean relevance " + fmt("%.4g", glyph->mean_relevance) + ", rank " +
                  std::to_string(glyph->rank.rank) + "/" + std::to_string(glyph->rank.windows) + ", delta " +
                  fmt("%+.2f", 100 * delta) + " pp (test acc " + fmt("%.4f", rep.unedited.accuracy) + ")"
            : std::string();
  o.detail = o.pass ? summary : o.detail + " [" + summary + "]";
  return o;
}

// ---------------------------------------------------------------------------
// criterion 9: rerun the CLI and compare every emitted file

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_all(e.path());
  return out;
}

Outcome determinism(const std::string& cli) {
  Outcome o;
  if (cli.empty()) {
    o.require(false, "no --cli binary given");
    return o;
  }
  const fs::path base = fs::temp_directory_path() / "ttl-acceptance-determinism";
  fs::remove_all(base);
  const std::string tiny =
      " --set input_size=16 --set stem_channels=4 --set num_blocks=2 --set layers_per_block=1 --set growth_rate=4"
      " --set stage1_epochs=2 --set intermediate_scale=0.02 --set target_scale=0.02 --set target_factors=1,1,1";
  const std::vector<std::string> cmds = {
      "gen --stage 1 --set class_counts=6,6,6,6,6,6,6,6,6,6 --seed 3 --out s1",
      "gen --stage 2 --set num_samples=40 --seed 3 --out s2",
      "gen --stage 2 --set num_samples=40 --set clear_label=0 --seed 3 --out s2b",
      "gen --stage 3 --set class_counts=20,20,20 --set glyph_class=2 --test-per-class 5 --seed 3 --out s3",
      "train --variant C --quiet --seed 3 --stage1 s1 --stage2 s2 --target s3 --out runC" + tiny,
      "train --variant E --quiet --seed 3 --stage1 s1 --prebuilt s2b --target s3 --out runE" + tiny,
      "eval --model runC/final.nkp1 --manifest s3/test.tsv --out eval.csv",
      "explain --model runC/final.nkp1 --image s3/test_00000.pgm --winning --out heat.ppm --dump-csv heat.csv",
      "bias --model runC/final.nkp1 --data s3 --paste 5 --out bias",
      "bench --seeds 3 --variants A,C --out bench --set stage1_per_class=6 --set stage2_samples=40"
      " --set prebuilt_samples=40 --set target_counts=20,20,20 --set test_per_class=5" + tiny,
  };
  std::vector<std::map<std::string, std::string>> runs;
  for (const char* tag : {"run1", "run2"}) {
    const fs::path dir = base / tag;
    fs::create_directories(dir);
    for (const auto& c : cmds) {
      const std::string line = "cd '" + dir.string() + "' && '" + cli + "' " + c + " > /dev/null 2>&1";
      const int rc = std::system(line.c_str());
      if (rc != 0) o.require(false, std::string(tag) + ": `" + c.substr(0, c.find(' ')) + "` exited with " +
                                        std::to_string(rc));
    }
    runs.push_back(snapshot(dir));
  }
  std::size_t differing = 0;
  std::string first;
  for (const auto& [name, bytes] : runs[0]) {
    const auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != bytes) {
      if (!differing++) first = name;
    }
  }
  o.require(runs[0].size() == runs[1].size(), "runs emitted different file sets");
  o.require(differing == 0, std::to_string(differing) + " files differ (first: " + first + ")");
  o.require(runs[0].size() > 50, "only " + std::to_string(runs[0].size()) + " files emitted");
  if (o.pass) {
    o.detail = std::to_string(runs[0].size()) + " files from " + std::to_string(cmds.size()) +
               " commands byte-identical across reruns";
  }
  fs::remove_all(base);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::string cli, bench_csv_path = "acceptance_bench.csv";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--cli" && i + 1 < argc) cli = argv[++i];
    else if (a == "--bench-csv" && i + 1 < argc) bench_csv_path = argv[++i];
    else if (a == "--only" && i + 1 < argc) {
      for (const auto& s : detail::split_list(argv[++i])) only.insert(std::stoi(s));
    } else {
      std::fprintf(stderr, "usage: acceptance [--cli PATH] [--only N,...] [--bench-csv FILE]\n");
      return 2;
    }
  }

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suite", gradient_suite},
      {2, "oracle suite", oracle_suite},
      {3, "conservation suite", conservation_suite},
      {4, "surgery suite", surgery_suite},
      {5, "schedule fidelity", schedule_fidelity},
      {6, "balancing suite", balancing_suite},
      {7, "toy benchmark", [&] { return toy_benchmark(bench_csv_path); }},
      {8, "bias reproduction", bias_reproduction},
      {9, "determinism", [&] { return determinism(cli); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.require(false, std::string("threw: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %d (%s): %s [%.0f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
