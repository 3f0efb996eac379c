// Re-heads a 15-label sigmoid network as a 3-class softmax classifier, checks
// that the kept logits survive the surgery, then explains one synthetic image.
#include <cstdio>

#include "ttl/data.hpp"
#include "ttl/densenet.hpp"
#include "ttl/lrp.hpp"
#include "ttl/surgery.hpp"
#include "ttl/synth.hpp"

int main() {
  using namespace ttl;
  DenseNetConfig cfg;
  cfg.input_size = 32;
  cfg.stem_channels = 8;
  cfg.layers_per_block = 2;
  cfg.growth_rate = 6;
  cfg.num_outputs = 15;
  cfg.head_activation = HeadActivation::sigmoid;
  const DenseNet donor = build_model(cfg, 7);

  // Donor label 0 ("no findings") becomes class 0; label 1 becomes class 1.
  const HeadMap map = parse_head_map("0:0,1:1", 3);
  const DenseNet model = keep_output_neurons(donor, map, HeadActivation::softmax, 11);

  SynthSpec spec;
  spec.class_counts = {2, 2, 2};
  const auto images = generate_dataset(spec, 3);
  const Tensor x = Preprocess{}(images.front().pixels);

  const Tensor before = forward_logits(donor, x), after = forward_logits(model, x);
  for (const auto& e : map.entries) {
    std::printf("logit %zu -> %zu: %.12f vs %.12f\n", e.old_index, e.new_index, before[e.old_index], after[e.new_index]);
  }

  ExplainOptions opt;
  opt.start_neuron = 0;
  const RelevanceMap r = explain(model, x, named_preset("preset-a-flat"), opt);
  double total = 0.0;
  for (std::size_t i = 0; i < r.relevance.size(); ++i) total += r.relevance[i];
  std::printf("start logit %.6f, relevance sum %.6f\n", r.start_logit, total);
  save_ppm(render_heatmap(r.relevance, images.front().pixels), "heatmap.ppm");
  std::puts("wrote heatmap.ppm");
}
