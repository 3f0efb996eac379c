#include <gtest/gtest.h>

#include <filesystem>

#include "ttl/checkpoint.hpp"

using namespace ttl;

namespace {

DenseNetConfig tiny(std::size_t outputs = 3) {
  DenseNetConfig c;
  c.input_size = 8;
  c.stem_channels = 4;
  c.num_blocks = 2;
  c.layers_per_block = 2;
  c.growth_rate = 3;
  c.num_outputs = outputs;
  return c;
}

DenseNet trained_looking(std::uint64_t seed) {
  DenseNet m = build_model(tiny(), seed);
  Rng rng(seed + 100);
  for_each_tensor(m, [&](const std::string&, std::size_t, TensorRole role, Tensor& t) {
    if (role == TensorRole::bn_running_var) {
      for (double& v : t.data()) v = rng.uniform(0.5, 2.0);
    } else if (role != TensorRole::weight) {
      for (double& v : t.data()) v = rng.uniform(-0.5, 0.5);
    }
  });
  m.provenance = "unit test\nsecond line";
  return m;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ttl_test_" + name);
}

}  // namespace

TEST(Checkpoint, RoundTripForwardWithinTolerance) {
  const DenseNet m = trained_looking(1);
  const auto path = temp_file("roundtrip.nkp1");
  save_checkpoint(m, path);
  const DenseNet back = load_checkpoint(path);
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.provenance, "unit test second line");
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const Tensor x = random_uniform({1, 8, 8}, rng);
    EXPECT_LE(max_abs_diff(forward_logits(m, x), forward_logits(back, x)), 1e-6);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, EncodingIsDeterministicAndStartsWithMagic) {
  const auto a = encode_checkpoint(trained_looking(2)), b = encode_checkpoint(trained_looking(2));
  EXPECT_EQ(a, b);
  ASSERT_GE(a.size(), 8u);
  EXPECT_EQ(std::string(a.begin(), a.begin() + 4), "NKP1");
  EXPECT_EQ(a[4], 1);
  EXPECT_EQ(a[5], 0);
}

TEST(Checkpoint, TruncationNamesMissingBytes) {
  auto bytes = encode_checkpoint(trained_looking(3));
  bytes.resize(bytes.size() - 10);
  try {
    decode_checkpoint(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("truncated"), std::string::npos) << msg;
    EXPECT_NE(msg.find("missing 10"), std::string::npos) << msg;
  }
  EXPECT_THROW(decode_checkpoint(std::vector<char>(bytes.begin(), bytes.begin() + 6)), FormatError);
}

TEST(Checkpoint, RejectsBadMagicVersionAndTrailingBytes) {
  auto bytes = encode_checkpoint(trained_looking(4));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
}

TEST(Checkpoint, RejectsShapeTableMismatch) {
  // flip one dimension of the first tensor (stem weight, out-channel count)
  auto bytes = encode_checkpoint(trained_looking(5));
  const std::uint32_t cfg_len = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
  const std::size_t first = 12 + cfg_len + 4;
  const std::size_t name_len = static_cast<unsigned char>(bytes[first]);
  const std::size_t dim0 = first + 4 + name_len + 1;
  bytes[dim0] = static_cast<char>(bytes[dim0] + 1);
  try {
    decode_checkpoint(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
}

TEST(Checkpoint, MissingFileIsAnError) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/model.nkp1"), Error);
}

TEST(Checkpoint, FifteenOutputModelLoads) {
  DenseNetConfig c = tiny(15);
  c.head_activation = HeadActivation::sigmoid;
  const DenseNet m = build_model(c, 9);
  const DenseNet back = decode_checkpoint(encode_checkpoint(m));
  EXPECT_EQ(back.config.num_outputs, 15u);
  EXPECT_EQ(back.config.head_activation, HeadActivation::sigmoid);
}
