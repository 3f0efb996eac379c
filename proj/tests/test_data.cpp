#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "ttl/data.hpp"

using namespace ttl;
namespace fs = std::filesystem;

namespace {

std::vector<unsigned char> bytes_of(const std::string& header, std::vector<unsigned char> pixels) {
  std::vector<unsigned char> b(header.begin(), header.end());
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

ImageSample gray(std::size_t h, std::size_t w, double v) {
  ImageSample s;
  s.pixels = Tensor({1, h, w});
  s.pixels.fill(v);
  return s;
}

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("ttl_test_data_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<ImageSample> labeled(const std::vector<std::size_t>& counts) {
  std::vector<ImageSample> out;
  std::size_t id = 0;
  for (std::size_t c = 0; c < counts.size(); ++c)
    for (std::size_t i = 0; i < counts[c]; ++i) {
      ImageSample s = gray(4, 4, 0.1 * static_cast<double>(c));
      s.label = c;
      s.group = id++;
      out.push_back(s);
    }
  return out;
}

}  // namespace

TEST(Pgm, DecodesEightBitValues) {
  const auto s = decode_pgm(bytes_of("P5\n2 2\n255\n", {0, 255, 128, 64}));
  ASSERT_EQ(s.pixels.shape(), (Shape{1, 2, 2}));
  EXPECT_DOUBLE_EQ(s.pixels[0], 0.0);
  EXPECT_DOUBLE_EQ(s.pixels[1], 1.0);
  EXPECT_NEAR(s.pixels[2], 0.50196, 1e-5);
  EXPECT_NEAR(s.pixels[3], 0.25098, 1e-5);
}

TEST(Pgm, HeaderCommentsAreSkipped) {
  const auto s = decode_pgm(bytes_of("P5\n# made by hand\n1 1\n255\n", {51}));
  EXPECT_DOUBLE_EQ(s.pixels[0], 0.2);
}

TEST(Pgm, RoundTripIsExact) {
  const fs::path d = temp_dir("pgm");
  const auto s = decode_pgm(bytes_of("P5\n3 2\n255\n", {0, 1, 2, 100, 200, 255}));
  save_pgm(s, d / "a.pgm");
  const auto t = load_pgm(d / "a.pgm");
  EXPECT_EQ(max_abs_diff(s.pixels, t.pixels), 0.0);
}

TEST(Pgm, RejectsColorAndMalformedInput) {
  EXPECT_THROW(decode_pgm(bytes_of("P6\n1 1\n255\n", {1, 2, 3})), FormatError);
  EXPECT_THROW(decode_pgm(bytes_of("P5\n2 2\n255\n", {1, 2})), FormatError);
  EXPECT_THROW(decode_pgm(bytes_of("P5\n2 2\n65535\n", {})), FormatError);
  try {
    decode_pgm(bytes_of("P5\nx 2\n255\n", {}));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte 3"), std::string::npos) << e.what();
  }
}

TEST(Ppm, RoundTrip) {
  const fs::path d = temp_dir("ppm");
  RgbImage img{2, 1, {1, 2, 3, 250, 251, 252}};
  save_ppm(img, d / "a.ppm");
  const RgbImage back = load_ppm(d / "a.ppm");
  EXPECT_EQ(back.width, 2u);
  EXPECT_EQ(back.rgb, img.rgb);
}

TEST(Resize, ConstantStaysConstant) {
  const auto r = resize_bilinear(gray(7, 7, 0.3), 12);
  for (std::size_t i = 0; i < r.pixels.size(); ++i) EXPECT_NEAR(r.pixels[i], 0.3, 1e-15);
}

TEST(Resize, CheckerboardAveragesToHalf) {
  ImageSample s = gray(4, 4, 0.0);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) s.pixels.at(0, y, x) = (x + y) % 2;
  const auto r = resize_bilinear(s, 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(r.pixels[i], 0.5);
}

TEST(Normalize, IdentityAndRejection) {
  Rng rng(1);
  const Tensor t = random_uniform({3, 4, 4}, rng);
  EXPECT_EQ(max_abs_diff(normalize(t, {0, 0, 0}, {1, 1, 1}), t), 0.0);
  EXPECT_THROW(normalize(t, {0, 0, 0}, {1, 0, 1}), ConfigError);
  const Tensor three = to_3channel(gray(2, 2, 0.4));
  EXPECT_EQ(three.shape(), (Shape{3, 2, 2}));
  EXPECT_DOUBLE_EQ(three.at(2, 1, 1), 0.4);
}

TEST(Augment, ZeroRangesAreIdentity) {
  Rng init(3);
  ImageSample s;
  s.pixels = random_uniform({1, 16, 16}, init, 0.0, 1.0);
  AugmentConfig cfg;
  cfg.rotation_max_deg = 0;
  cfg.translate_max_px = 0;
  cfg.hflip_prob = 0;
  Rng rng(4);
  EXPECT_EQ(max_abs_diff(augment(s, cfg, rng).pixels, s.pixels), 0.0);
}

TEST(Augment, FlipIsAnInvolution) {
  Rng rng(5);
  const Tensor t = random_uniform({1, 5, 7}, rng);
  EXPECT_EQ(max_abs_diff(hflip(hflip(t)), t), 0.0);
  EXPECT_NE(max_abs_diff(hflip(t), t), 0.0);
}

TEST(Augment, RotationKeepsMeanOfCentredContent) {
  const std::size_t n = 32;
  Tensor disc({1, n, n});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dy = static_cast<double>(y) - 15.5, dx = static_cast<double>(x) - 15.5;
      disc.at(0, y, x) = std::exp(-(dx * dx + dy * dy) / 40.0);
    }
  const double mean0 = disc.sum();
  AugmentConfig cfg;
  cfg.translate_max_px = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    ImageSample s;
    s.pixels = disc;
    const double m = augment(s, cfg, rng).pixels.sum();
    EXPECT_NEAR(m / mean0, 1.0, 0.05) << "seed " << seed;
  }
}

TEST(Balance, FullScaleArithmetic) {
  const BalancePlan p = balance_plan({345, 1080, 288}, {24, 8, 30});
  EXPECT_EQ(p.slots, (std::vector<std::size_t>{8280, 8640, 8640}));
  EXPECT_EQ(p.per_class, 8280u);
  EXPECT_EQ(p.leave_out, (std::vector<std::size_t>{0, 360, 360}));
}

TEST(Balance, ToyEpochIsExactlyBalanced) {
  const auto set = labeled({10, 20, 15});
  AugmentConfig cfg;
  cfg.per_class_factor = {6, 3, 4};
  const BalancePlan p = balance_plan({10, 20, 15}, cfg.per_class_factor);
  EXPECT_EQ(p.per_class, 60u);
  EXPECT_EQ(p.leave_out, (std::vector<std::size_t>{0, 0, 0}));
  const auto epoch = epoch_stream(set, cfg, 7, 0);
  std::map<std::size_t, std::size_t> per;
  for (const auto& s : epoch) ++per[s.label];
  EXPECT_EQ(per, (std::map<std::size_t, std::size_t>{{0, 60}, {1, 60}, {2, 60}}));
}

TEST(Balance, LeaveOutChangesAcrossEpochs) {
  const std::vector<std::size_t> counts{345, 1080, 288}, factors{24, 8, 30};
  std::set<std::vector<Slot>> seen;
  for (std::size_t e = 0; e < 5; ++e) {
    auto slots = select_epoch_slots(counts, factors, 11, e);
    std::sort(slots.begin(), slots.end());
    EXPECT_EQ(slots.size(), 3u * 8280u);
    seen.insert(std::move(slots));
  }
  EXPECT_EQ(seen.size(), 5u);
  auto again = select_epoch_slots(counts, factors, 11, 3), first = select_epoch_slots(counts, factors, 11, 3);
  EXPECT_EQ(again, first);
}

// At toy scale all C(4,3) = 4 subsets of one class should occur with equal
// frequency, so two epochs agree with probability 1/4.
TEST(Balance, LeaveOutSubsetsAreUniform) {
  std::map<std::vector<std::size_t>, std::size_t> freq;
  const std::size_t epochs = 4000;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<std::size_t> kept;
    for (const Slot& s : select_epoch_slots({3, 4}, {1, 1}, 5, e)) {
      if (s.cls == 1) kept.push_back(s.sample);
    }
    std::sort(kept.begin(), kept.end());
    ++freq[kept];
  }
  ASSERT_EQ(freq.size(), 4u);
  for (const auto& [subset, n] : freq) EXPECT_NEAR(static_cast<double>(n) / epochs, 0.25, 0.03);
}

TEST(Balance, RejectsEmptyClassAndFactorMismatch) {
  EXPECT_THROW(balance_plan({3, 0}, {1, 1}), ConfigError);
  AugmentConfig cfg;
  cfg.per_class_factor = {1};
  EXPECT_THROW(epoch_stream(labeled({2, 2}), cfg, 1, 0), ConfigError);
}

TEST(Split, DefaultArithmetic) {
  const Splits s = split(labeled({200, 200, 200}), SplitSpec{50, 0.9, 3});
  EXPECT_EQ(s.test.size(), 150u);
  EXPECT_EQ(s.train.size(), 405u);
  EXPECT_EQ(s.val.size(), 45u);
}

TEST(Split, GroupsNeverSpanPartsAndSeedIsDeterministic) {
  auto set = labeled({200, 200, 200});
  for (std::size_t i = 0; i < set.size(); ++i) set[i].group = i / 2;  // pairs share a group within a class
  const Splits s = split(set, SplitSpec{50, 0.9, 3});
  EXPECT_EQ(s.test.size(), 150u);
  EXPECT_EQ(s.train.size() + s.val.size(), 450u);
  std::map<std::size_t, int> where;
  auto mark = [&](const std::vector<ImageSample>& part, int id) {
    for (const auto& x : part) {
      auto [it, fresh] = where.emplace(x.group, id);
      EXPECT_TRUE(fresh || it->second == id) << "group " << x.group;
    }
  };
  mark(s.train, 0);
  mark(s.val, 1);
  mark(s.test, 2);

  const Splits again = split(set, SplitSpec{50, 0.9, 3});
  ASSERT_EQ(again.test.size(), s.test.size());
  for (std::size_t i = 0; i < s.test.size(); ++i) EXPECT_EQ(again.test[i].group, s.test[i].group);
}

TEST(Split, RejectsImpossibleSplits) {
  auto set = labeled({10, 10});
  EXPECT_THROW(split(set, SplitSpec{10, 0.9, 1}), ConfigError);
  for (auto& s : set) s.group = 0;
  EXPECT_THROW(split(set, SplitSpec{2, 0.9, 1}), ConfigError);
}

TEST(Edit, MaskAndPaste) {
  Rng rng(2);
  ImageSample s;
  s.pixels = random_uniform({1, 8, 8}, rng, 0.1, 1.0);
  EXPECT_EQ(mask_rectangle(s, {0, 0, 8, 8}).pixels.sum(), 0.0);

  const auto m = mask_rectangle(s, {1, 2, 3, 4});
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < m.pixels.size(); ++i) zeros += m.pixels[i] == 0.0;
  EXPECT_DOUBLE_EQ(static_cast<double>(zeros) / 64.0, 12.0 / 64.0);

  const ImageSample dst = gray(8, 8, 0.0);
  const auto p = paste_patch(dst, s, {2, 3, 4, 2}, 1, 5);
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(p.pixels.at(0, 5 + y, 1 + x), s.pixels.at(0, 3 + y, 2 + x));
  EXPECT_THROW(mask_rectangle(s, {6, 6, 3, 3}), ConfigError);
  EXPECT_THROW(paste_patch(dst, s, {0, 0, 4, 4}, 6, 0), ConfigError);
}

TEST(Manifest, RoundTripWithMultiLabels) {
  const fs::path d = temp_dir("manifest");
  auto set = labeled({2, 1});
  set[1].labels = {1, 0, 1};
  set[2].source = "synthetic";
  write_dataset(d, set);
  const auto back = read_manifest(d / "manifest.tsv");
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[0].label, 0u);
  EXPECT_EQ(back[1].labels, (std::vector<std::uint8_t>{1, 0, 1}));
  EXPECT_EQ(back[2].label, 1u);
  EXPECT_EQ(back[2].source, "synthetic");
  EXPECT_EQ(back[2].group, 2u);
}

TEST(Manifest, ErrorsCarryLineNumbers) {
  const fs::path d = temp_dir("manifest_bad");
  write_dataset(d, labeled({1}));
  std::ofstream(d / "manifest.tsv", std::ios::app) << "missing.pgm\t0\t1\n";
  try {
    read_manifest(d / "manifest.tsv");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}
