#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "ttl/ops.hpp"
#include "ttl/rng.hpp"
#include "ttl/tensor.hpp"

namespace ttl {

enum class HeadActivation { softmax, sigmoid };

inline std::string to_string(HeadActivation a) { return a == HeadActivation::softmax ? "softmax" : "sigmoid"; }

inline HeadActivation parse_head_activation(const std::string& s) {
  if (s == "softmax") return HeadActivation::softmax;
  if (s == "sigmoid") return HeadActivation::sigmoid;
  throw ConfigError("unknown head activation '" + s + "' (expected softmax|sigmoid)");
}

/// Topology of the mini dense network:
///   stem 3x3 conv -> [dense block -> transition] x (num_blocks-1) -> dense block
///   -> BN -> ReLU -> global average pool -> linear head.
/// A dense-block layer is BN -> ReLU -> 3x3 conv producing growth_rate channels
/// that are concatenated onto its input. A transition is BN -> ReLU -> 1x1 conv
/// (floor(compression * C) channels) -> 2x2 average pool.
struct DenseNetConfig {
  std::size_t input_channels = 1;
  std::size_t input_size = 64;
  std::size_t stem_channels = 16;
  std::size_t num_blocks = 3;
  std::size_t layers_per_block = 4;
  std::size_t growth_rate = 12;
  double compression = 0.5;
  std::size_t num_outputs = 3;
  HeadActivation head_activation = HeadActivation::softmax;

  struct BlockShape {
    std::size_t in_channels;
    std::size_t out_channels;  // after the dense layers, before the transition
    std::size_t spatial;
    std::size_t transition_channels;  // 0 for the last block
  };

  /// Channel/spatial trace per block; throws ConfigError with the trace when
  /// the configuration shrinks a feature map below 1x1 or a pool cannot tile.
  std::vector<BlockShape> shape_trace() const {
    std::ostringstream trace;
    auto fail = [&](const std::string& why) {
      throw ConfigError("invalid DenseNet config: " + why + "; shape trace: " + trace.str());
    };
    if (input_channels < 1 || input_size < 1 || stem_channels < 1 || num_outputs < 1) {
      fail("channels, size and outputs must be >= 1");
    }
    if (num_blocks < 1 || layers_per_block < 1 || growth_rate < 1) {
      fail("num_blocks, layers_per_block and growth_rate must be >= 1");
    }
    if (!(compression > 0.0 && compression <= 1.0)) fail("compression must lie in (0,1]");
    std::vector<BlockShape> out;
    std::size_t c = stem_channels, s = input_size;
    trace << "stem " << c << 'x' << s << 'x' << s;
    for (std::size_t b = 0; b < num_blocks; ++b) {
      BlockShape bs{c, c + layers_per_block * growth_rate, s, 0};
      trace << " -> block" << b + 1 << ' ' << bs.out_channels << 'x' << s << 'x' << s;
      c = bs.out_channels;
      if (b + 1 < num_blocks) {
        bs.transition_channels = static_cast<std::size_t>(std::floor(compression * static_cast<double>(c)));
        trace << " -> transition " << bs.transition_channels << 'x' << s / 2 << 'x' << s / 2;
        if (bs.transition_channels < 1) fail("transition compresses to zero channels");
        if (s < 2 || s % 2 != 0) fail("2x2 pooling does not tile a " + std::to_string(s) + "x" + std::to_string(s) + " map");
        c = bs.transition_channels;
        s /= 2;
      }
      out.push_back(bs);
    }
    return out;
  }

  std::size_t feature_dim() const { return shape_trace().back().out_channels; }

  std::size_t head_block_index() const { return num_blocks + 1; }

  void validate() const { (void)shape_trace(); }

  std::map<std::string, std::string> to_kv() const {
    std::ostringstream comp;
    comp.precision(17);
    comp << compression;
    return {{"input_channels", std::to_string(input_channels)},
            {"input_size", std::to_string(input_size)},
            {"stem_channels", std::to_string(stem_channels)},
            {"num_blocks", std::to_string(num_blocks)},
            {"layers_per_block", std::to_string(layers_per_block)},
            {"growth_rate", std::to_string(growth_rate)},
            {"compression", comp.str()},
            {"num_outputs", std::to_string(num_outputs)},
            {"head_activation", to_string(head_activation)}};
  }

  friend bool operator==(const DenseNetConfig&, const DenseNetConfig&) = default;
};

struct Conv2d {
  Tensor weight;
  Tensor bias;
  ConvGeometry geometry;

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, geometry); }
};

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;

  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
};

struct DenseLayer {
  BatchNormParams norm;
  Conv2d conv;
};

struct Transition {
  BatchNormParams norm;
  Conv2d conv;
};

struct DenseBlock {
  std::vector<DenseLayer> layers;
  std::optional<Transition> transition;
};

/// The model graph. Plain aggregate so surgery and checkpointing can address
/// any part directly; copying yields an independent model.
struct DenseNet {
  DenseNetConfig config;
  Conv2d stem;
  std::vector<DenseBlock> blocks;
  BatchNormParams final_norm;
  Linear head;
  std::string provenance;
};

enum class TensorRole { weight, bias, bn_scale, bn_shift, bn_running_mean, bn_running_var };

inline bool is_trainable(TensorRole r) {
  return r != TensorRole::bn_running_mean && r != TensorRole::bn_running_var;
}

/// Visits every tensor in a fixed order with its name and block index
/// (stem = 0, dense block b and its transition = b, head = num_blocks + 1).
template <class Model, class Fn>
  requires std::is_same_v<std::remove_const_t<Model>, DenseNet>
void for_each_tensor(Model& model, Fn&& fn) {
  auto norm = [&](const std::string& prefix, std::size_t block, auto& bn) {
    fn(prefix + ".scale", block, TensorRole::bn_scale, bn.scale);
    fn(prefix + ".shift", block, TensorRole::bn_shift, bn.shift);
    fn(prefix + ".running_mean", block, TensorRole::bn_running_mean, bn.running_mean);
    fn(prefix + ".running_var", block, TensorRole::bn_running_var, bn.running_var);
  };
  auto conv = [&](const std::string& prefix, std::size_t block, auto& c) {
    fn(prefix + ".weight", block, TensorRole::weight, c.weight);
    fn(prefix + ".bias", block, TensorRole::bias, c.bias);
  };
  conv("stem.conv", 0, model.stem);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    auto& block = model.blocks[b];
    const std::string bp = "block" + std::to_string(b + 1);
    for (std::size_t l = 0; l < block.layers.size(); ++l) {
      const std::string lp = bp + ".layer" + std::to_string(l + 1);
      norm(lp + ".norm", b + 1, block.layers[l].norm);
      conv(lp + ".conv", b + 1, block.layers[l].conv);
    }
    if (block.transition) {
      norm(bp + ".transition.norm", b + 1, block.transition->norm);
      conv(bp + ".transition.conv", b + 1, block.transition->conv);
    }
  }
  norm("block" + std::to_string(model.blocks.size()) + ".norm", model.blocks.size(), model.final_norm);
  fn(std::string("head.weight"), model.blocks.size() + 1, TensorRole::weight, model.head.weight);
  fn(std::string("head.bias"), model.blocks.size() + 1, TensorRole::bias, model.head.bias);
}

/// Trainable parameters of one model, in visiting order, paired with block indices.
struct ParamView {
  std::string name;
  std::size_t block_index;
  Tensor* tensor;
};

inline std::vector<ParamView> trainable_params(DenseNet& model) {
  std::vector<ParamView> out;
  for_each_tensor(model, [&](const std::string& name, std::size_t block, TensorRole role, Tensor& t) {
    if (is_trainable(role)) out.push_back({name, block, &t});
  });
  return out;
}

struct ParamGroup {
  std::size_t block_index;
  std::vector<std::string> names;
};

/// Exhaustive, non-overlapping partition of the trainable parameters by block index.
inline std::vector<ParamGroup> param_groups(const DenseNet& model) {
  std::vector<ParamGroup> groups(model.config.num_blocks + 2);
  for (std::size_t i = 0; i < groups.size(); ++i) groups[i].block_index = i;
  for_each_tensor(model, [&](const std::string& name, std::size_t block, TensorRole role, const Tensor&) {
    if (is_trainable(role)) groups.at(block).names.push_back(name);
  });
  return groups;
}

namespace detail {

inline Conv2d he_conv(std::size_t cin, std::size_t cout, std::size_t k, ConvGeometry g, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  return {random_normal({cout, cin, k, k}, rng, stddev), Tensor({cout}), g};
}

}  // namespace detail

/// He-style fan-in initialization of a linear layer; shared by build_model and head surgery.
inline Linear he_linear(std::size_t in, std::size_t out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(in));
  return {random_normal({out, in}, rng, stddev), Tensor({out})};
}

inline DenseNet build_model(const DenseNetConfig& config, std::uint64_t seed) {
  const auto trace = config.shape_trace();
  Rng rng(derive_seed(seed, "init"));
  DenseNet m;
  m.config = config;
  m.stem = detail::he_conv(config.input_channels, config.stem_channels, 3, {1, 1}, rng);
  std::size_t c = config.stem_channels;
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    DenseBlock block;
    for (std::size_t l = 0; l < config.layers_per_block; ++l) {
      block.layers.push_back({BatchNormParams::identity(c), detail::he_conv(c, config.growth_rate, 3, {1, 1}, rng)});
      c += config.growth_rate;
    }
    if (c != trace[b].out_channels) {
      throw ConfigError("channel arithmetic mismatch in block " + std::to_string(b + 1));
    }
    if (b + 1 < config.num_blocks) {
      const std::size_t tc = trace[b].transition_channels;
      block.transition = Transition{BatchNormParams::identity(c), detail::he_conv(c, tc, 1, {1, 0}, rng)};
      c = tc;
    }
    m.blocks.push_back(std::move(block));
  }
  m.final_norm = BatchNormParams::identity(c);
  m.head = he_linear(c, config.num_outputs, rng);
  return m;
}

// ---------------------------------------------------------------------------
// forward / backward

struct NormTrace {
  BatchNormCache norm;
  std::vector<Tensor> activated;  // relu(bn(x)); input of the following conv
};

struct BlockTrace {
  std::vector<NormTrace> layers;
  std::optional<NormTrace> transition;
};

struct BatchTrace {
  std::vector<Tensor> inputs;
  std::vector<BlockTrace> blocks;
  NormTrace final;
  std::vector<Tensor> features;  // pooled features fed to the head
};

namespace detail {

template <class Model>
std::vector<Tensor> apply_norm_relu(Model&, std::span<const Tensor> x, auto& params, BnMode mode, NormTrace* trace) {
  std::vector<Tensor> normed;
  if constexpr (std::is_const_v<Model>) {
    BatchNormParams copy = params;  // eval mode never writes; copy keeps the const contract
    normed = batchnorm2d(x, copy, BnMode::eval, trace ? &trace->norm : nullptr);
  } else {
    normed = batchnorm2d(x, params, mode, trace ? &trace->norm : nullptr);
  }
  for (Tensor& t : normed) t = relu(t);
  if (trace) trace->activated = normed;
  return normed;
}

template <class Model>
std::vector<Tensor> forward_impl(Model& model, std::span<const Tensor> inputs, const std::vector<bool>* train_blocks,
                                 BatchTrace* trace) {
  const auto& cfg = model.config;
  const Shape expected{cfg.input_channels, cfg.input_size, cfg.input_size};
  for (const Tensor& x : inputs) {
    if (x.shape() != expected) {
      throw ShapeError("model input shape " + shape_str(x.shape()) + " does not match configured " +
                       shape_str(expected));
    }
  }
  auto mode_for = [&](std::size_t block) {
    return train_blocks && (*train_blocks)[block] ? BnMode::train : BnMode::eval;
  };
  if (trace) {
    trace->blocks.assign(model.blocks.size(), {});
    trace->inputs.assign(inputs.begin(), inputs.end());
  }
  std::vector<Tensor> x;
  x.reserve(inputs.size());
  for (const Tensor& in : inputs) x.push_back(model.stem.forward(in));
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    auto& block = model.blocks[b];
    BlockTrace* bt = trace ? &trace->blocks[b] : nullptr;
    if (bt) bt->layers.resize(block.layers.size());
    for (std::size_t l = 0; l < block.layers.size(); ++l) {
      auto& layer = block.layers[l];
      auto act = apply_norm_relu(model, x, layer.norm, mode_for(b + 1), bt ? &bt->layers[l] : nullptr);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = concat_channels(x[i], layer.conv.forward(act[i]));
    }
    if (block.transition) {
      if (bt) bt->transition.emplace();
      auto act = apply_norm_relu(model, x, block.transition->norm, mode_for(b + 1),
                                 bt ? &*bt->transition : nullptr);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] = avgpool2d(block.transition->conv.forward(act[i]), 2, 2);
    }
  }
  auto act = apply_norm_relu(model, x, model.final_norm, mode_for(model.blocks.size()),
                             trace ? &trace->final : nullptr);
  std::vector<Tensor> logits;
  logits.reserve(x.size());
  if (trace) trace->features.clear();
  for (const Tensor& a : act) {
    Tensor f = global_avgpool(a);
    logits.push_back(model.head.forward(f));
    if (trace) trace->features.push_back(std::move(f));
  }
  return logits;
}

}  // namespace detail

/// Batched training forward. Batch norm runs in train mode for blocks whose
/// entry in train_blocks is true (indexed by block index) and in eval mode
/// otherwise, so frozen blocks keep their running statistics.
inline std::vector<Tensor> forward_batch(DenseNet& model, std::span<const Tensor> inputs,
                                         const std::vector<bool>* train_blocks, BatchTrace* trace) {
  return detail::forward_impl(model, inputs, train_blocks, trace);
}

inline Tensor normalize_input_rank(const Tensor& input) {
  if (input.rank() == 4 && input.dim(0) == 1) {
    return input.reshaped({input.dim(1), input.dim(2), input.dim(3)});
  }
  return input;
}

/// Eval-mode logits for one sample ([C,H,W] or [1,C,H,W]).
inline Tensor forward_logits(const DenseNet& model, const Tensor& input) {
  const Tensor x = normalize_input_rank(input);
  return detail::forward_impl(model, std::span<const Tensor>(&x, 1), nullptr, nullptr).front();
}

inline Tensor apply_head_activation(HeadActivation act, const Tensor& logits) {
  return act == HeadActivation::softmax ? softmax(logits) : sigmoid(logits);
}

inline Tensor forward_probs(const DenseNet& model, const Tensor& input) {
  return apply_head_activation(model.config.head_activation, forward_logits(model, input));
}

/// Pre-head pooled feature vector in eval mode.
inline Tensor forward_features(const DenseNet& model, const Tensor& input) {
  const Tensor x = normalize_input_rank(input);
  BatchTrace trace;
  detail::forward_impl(model, std::span<const Tensor>(&x, 1), nullptr, &trace);
  return trace.features.front();
}

/// Zero-valued model with the same layout; used as a gradient accumulator.
inline DenseNet zeros_like(const DenseNet& model) {
  DenseNet z = model;
  for_each_tensor(z, [](const std::string&, std::size_t, TensorRole, Tensor& t) { t.fill(0.0); });
  return z;
}

/// Accumulates parameter gradients of the batch into `grads` (a zeros_like
/// model). Propagation stops below `lowest_block`: blocks with a smaller
/// index receive no gradients.
inline void backward_batch(const DenseNet& model, const BatchTrace& trace, std::span<const Tensor> grad_logits,
                           std::size_t lowest_block, DenseNet& grads) {
  const std::size_t n = grad_logits.size();
  const std::size_t nb = model.blocks.size();
  const bool need_body = lowest_block <= nb;
  std::vector<Tensor> g_x(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor gf;
    if (need_body) gf = Tensor::zeros_like(trace.features[i]);
    linear_backward_accumulate(trace.features[i], model.head.weight, grad_logits[i], need_body ? &gf : nullptr,
                               &grads.head.weight, &grads.head.bias);
    if (need_body) {
      const Shape& s = trace.final.activated[i].shape();
      g_x[i] = relu_backward(trace.final.activated[i], global_avgpool_backward(s, gf));
    }
  }
  if (!need_body) return;

  auto norm_backward = [&](const NormTrace& nt, const BatchNormParams& p, BatchNormParams& gp,
                           const std::vector<Tensor>& g_normed) {
    std::vector<Tensor> g_in(n);
    for (std::size_t i = 0; i < n; ++i) g_in[i] = Tensor::zeros_like(g_normed[i]);
    batchnorm2d_backward_accumulate(nt.norm, p, g_normed, &g_in, &gp.scale, &gp.shift);
    return g_in;
  };

  g_x = norm_backward(trace.final, model.final_norm, grads.final_norm, g_x);
  for (std::size_t bi = nb; bi-- > 0;) {
    if (bi + 1 < lowest_block) return;
    const auto& block = model.blocks[bi];
    auto& gblock = grads.blocks[bi];
    const auto& bt = trace.blocks[bi];
    std::vector<Tensor> g_feats(n);
    if (block.transition) {
      const auto& tr = *block.transition;
      std::vector<Tensor> g_normed(n);
      for (std::size_t i = 0; i < n; ++i) {
        const Tensor& act = bt.transition->activated[i];
        const Shape conv_shape{tr.conv.weight.dim(0), act.dim(1), act.dim(2)};
        const Tensor g_conv = avgpool2d_backward(conv_shape, 2, 2, g_x[i]);
        Tensor g_act = Tensor::zeros_like(act);
        conv2d_backward_accumulate(act, tr.conv.weight, tr.conv.geometry, g_conv, &g_act,
                                   &gblock.transition->conv.weight, &gblock.transition->conv.bias);
        g_normed[i] = relu_backward(act, g_act);
      }
      g_feats = norm_backward(*bt.transition, tr.norm, gblock.transition->norm, g_normed);
    } else {
      g_feats = std::move(g_x);
    }
    for (std::size_t l = block.layers.size(); l-- > 0;) {
      const auto& layer = block.layers[l];
      const auto& lt = bt.layers[l];
      const std::size_t c_in = layer.conv.weight.dim(1), k = layer.conv.weight.dim(0);
      const std::size_t sizes[] = {c_in, k};
      std::vector<Tensor> g_prev(n), g_normed(n);
      for (std::size_t i = 0; i < n; ++i) {
        auto parts = split_channels(g_feats[i], sizes);
        g_prev[i] = std::move(parts[0]);
        const Tensor& act = lt.activated[i];
        Tensor g_act = Tensor::zeros_like(act);
        conv2d_backward_accumulate(act, layer.conv.weight, layer.conv.geometry, parts[1], &g_act,
                                   &gblock.layers[l].conv.weight, &gblock.layers[l].conv.bias);
        g_normed[i] = relu_backward(act, g_act);
      }
      auto g_bn_in = norm_backward(lt, layer.norm, gblock.layers[l].norm, g_normed);
      for (std::size_t i = 0; i < n; ++i) g_feats[i] = g_prev[i] + g_bn_in[i];
    }
    g_x = std::move(g_feats);
  }
  if (lowest_block == 0) {
    for (std::size_t i = 0; i < n; ++i) {
      conv2d_backward_accumulate(trace.inputs[i], model.stem.weight, model.stem.geometry, g_x[i],
                                 nullptr, &grads.stem.weight, &grads.stem.bias);
    }
  }
}

}  // namespace ttl
