#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "ttl/densenet.hpp"

namespace ttl {

/// Old-to-new output neuron pairs for output-neuron keeping.
struct HeadMap {
  struct Entry {
    std::size_t old_index;
    std::size_t new_index;
    friend bool operator==(const Entry&, const Entry&) = default;
  };
  std::vector<Entry> entries;
  std::size_t new_size = 0;

  void validate(std::size_t old_size) const {
    if (new_size < 1) throw ConfigError("head map: new head size must be >= 1");
    std::set<std::size_t> olds, news;
    for (const auto& e : entries) {
      if (e.old_index >= old_size) {
        throw ConfigError("head map: old index " + std::to_string(e.old_index) + " out of range for a head of " +
                          std::to_string(old_size));
      }
      if (e.new_index >= new_size) {
        throw ConfigError("head map: new index " + std::to_string(e.new_index) + " out of range for a head of " +
                          std::to_string(new_size));
      }
      if (!olds.insert(e.old_index).second) {
        throw ConfigError("head map: old index " + std::to_string(e.old_index) + " used twice");
      }
      if (!news.insert(e.new_index).second) {
        throw ConfigError("head map: new index " + std::to_string(e.new_index) + " used twice");
      }
    }
  }

  std::string to_string() const {
    std::string s;
    for (const auto& e : entries) {
      if (!s.empty()) s += ',';
      s += std::to_string(e.old_index) + ':' + std::to_string(e.new_index);
    }
    return s;
  }
};

/// Parses "old:new,old:new" (empty text gives an empty map).
inline HeadMap parse_head_map(const std::string& text, std::size_t new_size) {
  HeadMap map;
  map.new_size = new_size;
  std::size_t pos = 0;
  auto parse_index = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("head map: bad index '" + s + "' in '" + text + "'");
    }
    return static_cast<std::size_t>(std::stoull(s));
  };
  while (pos < text.size()) {
    std::size_t end = text.find(',', pos);
    if (end == std::string::npos) end = text.size();
    const std::string pair = text.substr(pos, end - pos);
    const auto colon = pair.find(':');
    if (colon == std::string::npos) throw ConfigError("head map: expected old:new, got '" + pair + "'");
    map.entries.push_back({parse_index(pair.substr(0, colon)), parse_index(pair.substr(colon + 1))});
    pos = end + 1;
  }
  return map;
}

/// Replaces the output layer with a freshly initialized one; the body is copied untouched.
inline DenseNet replace_head(const DenseNet& model, std::size_t new_size, HeadActivation activation,
                             std::uint64_t seed) {
  if (new_size < 1) throw ConfigError("replace_head: new head size must be >= 1");
  DenseNet out = model;
  Rng rng(derive_seed(seed, "head"));
  out.head = he_linear(model.head.weight.dim(1), new_size, rng);
  out.config.num_outputs = new_size;
  out.config.head_activation = activation;
  return out;
}

/// New head whose mapped rows (weights and bias) are exact copies of the donor's rows.
inline DenseNet keep_output_neurons(const DenseNet& donor, const HeadMap& map, HeadActivation activation,
                                    std::uint64_t seed) {
  map.validate(donor.config.num_outputs);
  DenseNet out = replace_head(donor, map.new_size, activation, seed);
  const std::size_t feat = donor.head.weight.dim(1);
  if (out.head.weight.dim(1) != feat) {
    throw ShapeError("keep_output_neurons: feature dimension mismatch between donor and recipient heads");
  }
  for (const auto& e : map.entries) {
    for (std::size_t j = 0; j < feat; ++j) out.head.weight.at(e.new_index, j) = donor.head.weight.at(e.old_index, j);
    out.head.bias[e.new_index] = donor.head.bias[e.old_index];
  }
  return out;
}

/// Which block indices are frozen, and the tensors that covers.
struct FreezeMask {
  std::vector<bool> frozen;          // indexed by block index
  std::vector<std::string> tensors;  // every frozen tensor including batch-norm running statistics
  std::size_t parameter_count = 0;   // trainable scalars in frozen blocks

  bool is_frozen(std::size_t block) const { return block < frozen.size() && frozen[block]; }
  bool all_frozen() const { return std::all_of(frozen.begin(), frozen.end(), [](bool f) { return f; }); }

  /// Lowest block index that trains; frozen.size() when nothing trains.
  std::size_t lowest_trainable() const {
    for (std::size_t b = 0; b < frozen.size(); ++b) {
      if (!frozen[b]) return b;
    }
    return frozen.size();
  }
};

inline FreezeMask freeze_blocks(const DenseNet& model, const std::set<std::size_t>& frozen) {
  const std::size_t groups = model.config.num_blocks + 2;
  FreezeMask mask;
  mask.frozen.assign(groups, false);
  for (std::size_t b : frozen) {
    if (b >= groups) {
      throw ConfigError("freeze: block index " + std::to_string(b) + " out of range (model has indices 0.." +
                        std::to_string(groups - 1) + ")");
    }
    mask.frozen[b] = true;
  }
  for_each_tensor(model, [&](const std::string& name, std::size_t block, TensorRole role, const Tensor& t) {
    if (!mask.frozen[block]) return;
    mask.tensors.push_back(name);
    if (is_trainable(role)) mask.parameter_count += t.size();
  });
  return mask;
}

/// Block indices of everything except the head.
inline std::set<std::size_t> body_blocks(const DenseNet& model) {
  std::set<std::size_t> s;
  for (std::size_t b = 0; b <= model.config.num_blocks; ++b) s.insert(b);
  return s;
}

}  // namespace ttl
