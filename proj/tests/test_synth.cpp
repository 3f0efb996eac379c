#include <gtest/gtest.h>

#include "ttl/synth.hpp"

using namespace ttl;

namespace {

struct Moments {
  double m1 = 0.0, m2 = 0.0;
};

Moments moments(const std::vector<const Tensor*>& images) {
  Moments m;
  double n = 0.0;
  for (const Tensor* t : images)
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double v = (*t)[i];
      m.m1 += v;
      m.m2 += v * v;
      n += 1.0;
    }
  m.m1 /= n;
  m.m2 /= n;
  return m;
}

}  // namespace

TEST(Synth, ClearClassHasNoStructure) {
  SynthSpec spec;
  spec.class_counts = {40, 10, 10};
  std::vector<Tensor> structures;
  const auto set = generate_dataset(spec, 3, &structures);
  ASSERT_EQ(structures.size(), set.size());
  double clear = 0.0, other = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    double e = 0.0;
    for (std::size_t k = 0; k < structures[i].size(); ++k) e += structures[i][k] * structures[i][k];
    (set[i].label == 0 ? clear : other) += e;
  }
  EXPECT_EQ(clear, 0.0);
  EXPECT_GT(other, 0.0);
}

TEST(Synth, SharedFindingMatchesAcrossStages) {
  SynthSpec s2;
  s2.stage = 2;
  s2.num_samples = 6000;
  const auto stage2 = generate_dataset(s2, 21);
  std::vector<const Tensor*> a;
  for (const auto& s : stage2) {
    std::size_t positives = 0;
    for (auto l : s.labels) positives += l;
    if (positives == 1 && s.labels[s2.shared_label()]) a.push_back(&s.pixels);
    if (a.size() == 500) break;
  }
  ASSERT_EQ(a.size(), 500u);

  SynthSpec s3;
  s3.class_counts = {1, 500, 1};
  const auto stage3 = generate_dataset(s3, 21);
  std::vector<const Tensor*> b;
  for (const auto& s : stage3)
    if (s.label == 1) b.push_back(&s.pixels);

  const Moments ma = moments(a), mb = moments(b);
  EXPECT_NEAR(ma.m1 / mb.m1, 1.0, 0.02);
  EXPECT_NEAR(ma.m2 / mb.m2, 1.0, 0.02);
}

TEST(Synth, MultiLabelVectorsAreBinary) {
  SynthSpec s;
  s.stage = 2;
  s.num_samples = 400;
  const auto set = generate_dataset(s, 5);
  ASSERT_EQ(set.size(), 400u);
  std::size_t multi = 0;
  for (const auto& x : set) {
    ASSERT_EQ(x.labels.size(), 15u);
    std::size_t pos = 0;
    for (auto l : x.labels) {
      EXPECT_TRUE(l == 0 || l == 1);
      pos += l;
    }
    EXPECT_GE(pos, 1u);
    EXPECT_EQ(x.labels[0] == 1, pos == 1 && x.labels[0] == 1);
    if (pos > 1) ++multi;
  }
  EXPECT_GT(multi, 0u);

  s.clear_label = false;
  EXPECT_EQ(generate_dataset(s, 5).front().labels.size(), 14u);
}

TEST(Synth, SameSeedSameData) {
  SynthSpec s;
  s.class_counts = {5, 5, 5};
  const auto a = generate_dataset(s, 9), b = generate_dataset(s, 9), c = generate_dataset(s, 10);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(max_abs_diff(a[i].pixels, b[i].pixels), 0.0);
    EXPECT_EQ(a[i].group, b[i].group);
  }
  EXPECT_GT(max_abs_diff(a[0].pixels, c[0].pixels), 0.0);
}

TEST(Synth, StagesNeverShareGroups) {
  SynthSpec s1;
  s1.stage = 1;
  s1.class_counts.assign(10, 2);
  SynthSpec s3;
  s3.class_counts = {2, 2, 2};
  for (const auto& x : generate_dataset(s1, 1)) EXPECT_LT(x.group, 2000000u);
  for (const auto& x : generate_dataset(s3, 1)) EXPECT_GE(x.group, 3000000u);
}

TEST(Synth, GlyphOnlyInBiasedClassAtItsCorner) {
  SynthSpec s;
  s.class_counts = {100, 100, 200};
  s.bias_glyph = BiasGlyph{};
  s.bias_glyph->corner = Corner::bottom_right;
  const Rect r = s.bias_glyph->rect(s.image_size);
  EXPECT_EQ(r, (Rect{26, 26, 5, 5}));
  std::size_t with = 0;
  for (const auto& x : generate_dataset(s, 4)) {
    double mass = 0.0;
    for (std::size_t y = r.y; y < r.y + r.h; ++y)
      for (std::size_t xx = r.x; xx < r.x + r.w; ++xx) mass += x.pixels.at(0, y, xx);
    const bool glyph = x.source.find("+glyph") != std::string::npos;
    EXPECT_EQ(glyph, mass > 0.0);
    if (glyph) {
      EXPECT_EQ(x.label, 2u);
      EXPECT_DOUBLE_EQ(mass, 11.0);  // 7 pixels of "L" plus a 2x2 dot
      ++with;
    }
  }
  EXPECT_NEAR(static_cast<double>(with) / 200.0, 0.5, 0.1);
}

TEST(Synth, SpecTextAndValidation) {
  const SynthSpec s = parse_synth_spec("stage = 3\nclass_counts = 4,5,6\nglyph_class = 1\nglyph_corner = top_right\n");
  EXPECT_EQ(s.class_counts, (std::vector<std::size_t>{4, 5, 6}));
  ASSERT_TRUE(s.bias_glyph);
  EXPECT_EQ(s.bias_glyph->cls, 1u);
  EXPECT_EQ(s.bias_glyph->corner, Corner::top_right);
  EXPECT_THROW(parse_synth_spec("colour = red\n"), ConfigError);
  SynthSpec bad;
  bad.class_counts = {1, 2};
  EXPECT_THROW(generate_dataset(bad, 1), ConfigError);
  bad = SynthSpec{};
  bad.image_size = 8;
  EXPECT_THROW(generate_dataset(bad, 1), ConfigError);
}
