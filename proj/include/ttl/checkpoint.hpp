#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ttl/densenet.hpp"
#include "ttl/kv.hpp"

// NKP1 checkpoint file, all integers little-endian:
//   "NKP1" | u32 version (1) | u32 config length | config text (key=value lines)
//   | u32 tensor count | per tensor: u32 name length, name bytes, u8 rank,
//   rank x u32 dims, raw f32 data.
namespace ttl {

inline constexpr std::array<char, 4> kCheckpointMagic{'N', 'K', 'P', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void bytes(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  const std::vector<char>& buffer() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> data) : data_(std::move(data)) {}

  std::size_t offset() const { return pos_; }

  void need(std::size_t n, const std::string& what) const {
    if (data_.size() - pos_ < n) {
      throw FormatError("checkpoint truncated at offset " + std::to_string(pos_) + ": " + what + " needs " +
                        std::to_string(n) + " bytes, only " + std::to_string(data_.size() - pos_) +
                        " available (missing " + std::to_string(n - (data_.size() - pos_)) + ")");
    }
  }
  std::uint8_t u8(const std::string& what) {
    need(1, what);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  float f32_unchecked() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return std::bit_cast<float>(v);
  }
  bool at_end() const { return pos_ == data_.size(); }

 private:
  std::vector<char> data_;
  std::size_t pos_ = 0;
};

inline std::string sanitize_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace detail

inline DenseNetConfig config_from_kv(const std::map<std::string, std::string>& kv) {
  DenseNetConfig c;
  auto get_size = [&](const char* key, std::size_t& dst) {
    if (auto it = kv.find(key); it != kv.end()) {
      try {
        std::size_t used = 0;
        const long long v = std::stoll(it->second, &used);
        if (used != it->second.size() || v < 0) throw std::invalid_argument(key);
        dst = static_cast<std::size_t>(v);
      } catch (const std::logic_error&) {
        throw ConfigError(std::string("bad integer for ") + key + ": '" + it->second + "'");
      }
    }
  };
  get_size("input_channels", c.input_channels);
  get_size("input_size", c.input_size);
  get_size("stem_channels", c.stem_channels);
  get_size("num_blocks", c.num_blocks);
  get_size("layers_per_block", c.layers_per_block);
  get_size("growth_rate", c.growth_rate);
  get_size("num_outputs", c.num_outputs);
  if (auto it = kv.find("compression"); it != kv.end()) {
    try {
      c.compression = std::stod(it->second);
    } catch (const std::logic_error&) {
      throw ConfigError("bad real for compression: '" + it->second + "'");
    }
  }
  if (auto it = kv.find("head_activation"); it != kv.end()) c.head_activation = parse_head_activation(it->second);
  c.validate();
  return c;
}

inline std::vector<char> encode_checkpoint(const DenseNet& model) {
  detail::ByteWriter w;
  for (char ch : kCheckpointMagic) w.u8(static_cast<std::uint8_t>(ch));
  w.u32(kCheckpointVersion);
  std::string cfg;
  for (const auto& [k, v] : model.config.to_kv()) cfg += k + "=" + v + "\n";
  cfg += "provenance=" + detail::sanitize_line(model.provenance) + "\n";
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  std::uint32_t count = 0;
  for_each_tensor(model, [&](const std::string&, std::size_t, TensorRole, const Tensor&) { ++count; });
  w.u32(count);
  for_each_tensor(model, [&](const std::string& name, std::size_t, TensorRole, const Tensor& t) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.f32(static_cast<float>(v));
  });
  return w.buffer();
}

inline DenseNet decode_checkpoint(std::vector<char> bytes) {
  detail::ByteReader r(std::move(bytes));
  const std::string magic = r.bytes(4, "magic");
  if (magic != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end())) {
    throw FormatError("bad checkpoint magic at offset 0: expected NKP1");
  }
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at offset 4");
  }
  const std::uint32_t cfg_len = r.u32("config length");
  const std::size_t cfg_off = r.offset();
  const std::string cfg_text = r.bytes(cfg_len, "config block");
  std::map<std::string, std::string> kv;
  try {
    kv = parse_key_values(cfg_text);
  } catch (const ConfigError& e) {
    throw FormatError("bad config block at offset " + std::to_string(cfg_off) + ": " + e.what());
  }
  DenseNetConfig config;
  try {
    config = config_from_kv(kv);
  } catch (const ConfigError& e) {
    throw FormatError("bad config block at offset " + std::to_string(cfg_off) + ": " + e.what());
  }
  DenseNet model = build_model(config, 0);
  if (auto it = kv.find("provenance"); it != kv.end()) model.provenance = it->second;

  std::map<std::string, Tensor*> slots;
  for_each_tensor(model, [&](const std::string& name, std::size_t, TensorRole, Tensor& t) {
    slots[name] = &t;
  });
  const std::size_t count_off = r.offset();
  const std::uint32_t count = r.u32("tensor count");
  if (count != slots.size()) {
    throw FormatError("tensor count " + std::to_string(count) + " at offset " + std::to_string(count_off) +
                      " does not match the " + std::to_string(slots.size()) + " tensors the config implies");
  }
  std::map<std::string, bool> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t entry_off = r.offset();
    const std::uint32_t name_len = r.u32("tensor name length");
    const std::string name = r.bytes(name_len, "tensor name");
    auto it = slots.find(name);
    if (it == slots.end()) {
      throw FormatError("unknown tensor '" + name + "' at offset " + std::to_string(entry_off));
    }
    if (seen[name]) throw FormatError("duplicate tensor '" + name + "' at offset " + std::to_string(entry_off));
    seen[name] = true;
    const std::uint8_t rank = r.u8("tensor rank of '" + name + "'");
    Shape shape;
    for (std::uint8_t d = 0; d < rank; ++d) shape.push_back(r.u32("dims of '" + name + "'"));
    Tensor& dst = *it->second;
    if (shape != dst.shape()) {
      throw FormatError("shape mismatch for '" + name + "' at offset " + std::to_string(entry_off) + ": file " +
                        shape_str(shape) + ", config implies " + shape_str(dst.shape()));
    }
    r.need(4 * dst.size(), "data of tensor '" + name + "'");
    for (double& v : dst.data()) v = static_cast<double>(r.f32_unchecked());
  }
  if (!r.at_end()) {
    throw FormatError("trailing bytes after offset " + std::to_string(r.offset()));
  }
  return model;
}

inline void save_checkpoint(const DenseNet& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

inline DenseNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(std::move(bytes));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace ttl
