#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ttl/data.hpp"
#include "ttl/densenet.hpp"
#include "ttl/kv.hpp"

// Layer-wise relevance propagation. Every parameterized or pooling layer is a
// linear map z_k = sum_j x_j w_jk + b_k; the rules below redistribute the
// relevance of each output k over its inputs j.
namespace ttl {

struct LrpRule {
  enum class Kind { epsilon, alphabeta, flat, zplus };
  Kind kind = Kind::epsilon;
  double epsilon = 0.0;
  double alpha = 1.0, beta = 0.0;

  static LrpRule eps(double e) { return {Kind::epsilon, e, 1.0, 0.0}; }
  static LrpRule alpha_beta(double a, double b) { return {Kind::alphabeta, 0.0, a, b}; }
  static LrpRule flat_rule() { return {Kind::flat, 0.0, 1.0, 0.0}; }
  static LrpRule z_plus() { return {Kind::zplus, 0.0, 1.0, 0.0}; }

  void validate() const {
    if (kind == Kind::epsilon && !(epsilon >= 0.0)) throw ConfigError("epsilon rule: epsilon must be >= 0");
    if (kind == Kind::alphabeta) {
      if (!(beta >= 0.0)) throw ConfigError("alphabeta rule: beta must be >= 0");
      if (std::abs(alpha - beta - 1.0) > 1e-12) throw ConfigError("alphabeta rule: alpha - beta must equal 1");
    }
  }

  // zplus is alphabeta(1,0)
  double a() const { return kind == Kind::zplus ? 1.0 : alpha; }
  double b() const { return kind == Kind::zplus ? 0.0 : beta; }

  std::string to_string() const {
    std::ostringstream os;
    switch (kind) {
      case Kind::epsilon: os << "epsilon(" << epsilon << ")"; break;
      case Kind::alphabeta: os << "alphabeta(" << alpha << "," << beta << ")"; break;
      case Kind::flat: os << "flat"; break;
      case Kind::zplus: os << "zplus"; break;
    }
    return os.str();
  }
};

inline LrpRule parse_lrp_rule(const std::string& text) {
  std::string t;
  for (char c : text) {
    if (!std::isspace(static_cast<unsigned char>(c))) t += c;
  }
  if (t == "flat") return LrpRule::flat_rule();
  if (t == "zplus") return LrpRule::z_plus();
  const auto open = t.find('(');
  if (open == std::string::npos || t.back() != ')') throw ConfigError("bad LRP rule '" + text + "'");
  const std::string name = t.substr(0, open);
  std::vector<double> args;
  std::stringstream ss(t.substr(open + 1, t.size() - open - 2));
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      args.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("bad LRP rule parameter '" + item + "' in '" + text + "'");
    }
  }
  LrpRule r;
  if (name == "epsilon" && args.size() == 1) r = LrpRule::eps(args[0]);
  else if (name == "alphabeta" && args.size() == 2) r = LrpRule::alpha_beta(args[0], args[1]);
  else throw ConfigError("bad LRP rule '" + text + "'");
  r.validate();
  return r;
}

/// Rule assignment per layer category. Batch norm and pooling layers use the
/// conv rule; the stem convolution is the first layer; the head is the dense layer.
struct LrpPreset {
  std::string name = "preset-a-flat";
  LrpRule first_layer = LrpRule::flat_rule();
  LrpRule conv_layers = LrpRule::alpha_beta(1.0, 0.0);
  LrpRule dense_layers = LrpRule::eps(1e-7);
};

inline LrpPreset preset_a_flat() { return {}; }

inline LrpPreset preset_uniform(const std::string& name, const LrpRule& r) { return {name, r, r, r}; }

/// Preset file: `first_layer=flat`, `conv_layers=alphabeta(1,0)`,
/// `dense_layers=epsilon(1e-7)`, optional `name=...`. Missing categories
/// fall back to preset-a-flat.
inline LrpPreset parse_lrp_preset(const std::string& text) {
  LrpPreset p = preset_a_flat();
  p.name = "custom";
  for (const auto& [k, v] : parse_key_values(text)) {
    if (k == "name") p.name = v;
    else if (k == "first_layer") p.first_layer = parse_lrp_rule(v);
    else if (k == "conv_layers") p.conv_layers = parse_lrp_rule(v);
    else if (k == "dense_layers") p.dense_layers = parse_lrp_rule(v);
    else throw ConfigError("LRP preset: unknown layer category '" + k + "'");
  }
  return p;
}

inline LrpPreset named_preset(const std::string& name) {
  if (name == "preset-a-flat") return preset_a_flat();
  if (name == "zplus") return preset_uniform(name, LrpRule::z_plus());
  if (name == "epsilon") return preset_uniform(name, LrpRule::eps(1e-7));
  if (name == "flat") return preset_uniform(name, LrpRule::flat_rule());
  throw ConfigError("unknown LRP preset '" + name + "' (known: preset-a-flat, zplus, epsilon, flat)");
}

enum class BiasMode { absorb, redistribute };

/// Per-layer bookkeeping of one propagation step.
struct LayerAudit {
  std::string layer;
  double relevance_out = 0.0;  // sum entering the layer from above
  double relevance_in = 0.0;   // sum handed to the layer's inputs
  double epsilon_bound = 0.0;  // sum_k |R_k| eps / (|z_k| + eps) for the epsilon rule, else 0

  double residual() const { return relevance_in - relevance_out; }
};

namespace detail {

inline double sign_nonneg(double v) { return v >= 0.0 ? 1.0 : -1.0; }

/// Core redistribution for a linear map given by contribution triples.
/// `each(f)` must call f(j, k, w_jk) for every connection; `bias(k)` returns
/// b_k. Inputs are flat views of the layer input and output relevance.
template <class Each, class Bias>
Tensor lrp_generic(const Tensor& x, const Tensor& r_out, Each&& each, Bias&& bias, const LrpRule& rule,
                   BiasMode mode, LayerAudit* audit) {
  rule.validate();
  const std::size_t n_out = r_out.size();
  Tensor r_in = Tensor::zeros_like(x);
  std::vector<double> pos(n_out, 0.0), neg(n_out, 0.0), count(n_out, 0.0);
  const bool use_bias = mode == BiasMode::absorb;
  each([&](std::size_t j, std::size_t k, double w) {
    const double z = x[j] * w;
    if (z > 0.0) pos[k] += z;
    else neg[k] += z;
    count[k] += 1.0;
  });
  // per-output scale factors
  std::vector<double> s_all(n_out, 0.0), s_pos(n_out, 0.0), s_neg(n_out, 0.0), s_flat(n_out, 0.0);
  double bound = 0.0;
  for (std::size_t k = 0; k < n_out; ++k) {
    const double rk = r_out[k];
    const double bk = use_bias ? bias(k) : 0.0;
    switch (rule.kind) {
      case LrpRule::Kind::epsilon: {
        const double z = pos[k] + neg[k] + bk;
        if (z == 0.0 && rule.epsilon == 0.0) {
          throw NumericError("LRP epsilon rule: zero denominator at output " + std::to_string(k) +
                             "; use epsilon > 0");
        }
        const double den = z + rule.epsilon * sign_nonneg(z);
        s_all[k] = rk / den;
        bound += std::abs(rk) * rule.epsilon / (std::abs(z) + rule.epsilon);
        break;
      }
      case LrpRule::Kind::alphabeta:
      case LrpRule::Kind::zplus: {
        const double a = rule.a(), b = rule.b();
        const double dp = pos[k] + std::max(bk, 0.0), dn = neg[k] + std::min(bk, 0.0);
        const bool need_neg = b != 0.0;
        if (mode == BiasMode::redistribute && rk != 0.0 && count[k] > 0.0 && (dp == 0.0 || (need_neg && dn == 0.0))) {
          s_flat[k] = rk / count[k];  // nothing to split proportionally; keep the relevance
          break;
        }
        if (dp != 0.0) s_pos[k] = a * rk / dp;
        if (need_neg && dn != 0.0) s_neg[k] = -b * rk / dn;
        break;
      }
      case LrpRule::Kind::flat:
        s_flat[k] = count[k] > 0.0 ? rk / count[k] : 0.0;
        break;
    }
  }
  each([&](std::size_t j, std::size_t k, double w) {
    const double z = x[j] * w;
    double r = s_flat[k];
    if (rule.kind == LrpRule::Kind::epsilon) r += z * s_all[k];
    else if (z > 0.0) r += z * s_pos[k];
    else r += z * s_neg[k];
    r_in[j] += r;
  });
  if (audit) {
    audit->relevance_out = r_out.sum();
    audit->relevance_in = r_in.sum();
    audit->epsilon_bound = rule.kind == LrpRule::Kind::epsilon ? bound : 0.0;
  }
  return r_in;
}

}  // namespace detail

inline Tensor lrp_linear(const LrpRule& rule, const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& r_out,
                         BiasMode mode = BiasMode::absorb, LayerAudit* audit = nullptr) {
  if (w.rank() != 2 || x.size() != w.dim(1) || b.size() != w.dim(0) || r_out.size() != w.dim(0)) {
    throw ShapeError("lrp_linear: shapes do not conform (x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) +
                     ", R " + shape_str(r_out.shape()) + ")");
  }
  const std::size_t n_in = w.dim(1), n_out = w.dim(0);
  // a zero weight is an absent connection, so an unrolled conv matrix behaves like the conv
  auto each = [&](auto&& f) {
    for (std::size_t k = 0; k < n_out; ++k)
      for (std::size_t j = 0; j < n_in; ++j) {
        const double wk = w[k * n_in + j];
        if (wk != 0.0) f(j, k, wk);
      }
  };
  return detail::lrp_generic(x, r_out, each, [&](std::size_t k) { return b[k]; }, rule, mode, audit);
}

inline Tensor lrp_conv(const LrpRule& rule, const Tensor& x, const Tensor& w, const Tensor& b, ConvGeometry g,
                       const Tensor& r_out, BiasMode mode = BiasMode::absorb, LayerAudit* audit = nullptr) {
  detail::check_conv_args(x, w, b);
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t ho = conv_out_extent(h, kh, g), wo = conv_out_extent(wd, kw, g);
  if (r_out.shape() != Shape{cout, ho, wo}) {
    throw ShapeError("lrp_conv: relevance shape " + shape_str(r_out.shape()) + " does not match conv output " +
                     shape_str({cout, ho, wo}));
  }
  auto each = [&](auto&& f) {
    for (std::size_t oc = 0; oc < cout; ++oc)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const std::size_t k = (oc * ho + oy) * wo + ox;
          for (std::size_t ic = 0; ic < cin; ++ic)
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const long long iy = static_cast<long long>(oy * g.stride + ky) - static_cast<long long>(g.padding);
              if (iy < 0 || iy >= static_cast<long long>(h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long long ix = static_cast<long long>(ox * g.stride + kx) - static_cast<long long>(g.padding);
                if (ix < 0 || ix >= static_cast<long long>(wd)) continue;
                const double wv = w[((oc * cin + ic) * kh + ky) * kw + kx];
                if (wv != 0.0) f((ic * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix), k, wv);
              }
            }
        }
  };
  const std::size_t plane = ho * wo;
  return detail::lrp_generic(x, r_out, each, [&](std::size_t k) { return b[k / plane]; }, rule, mode, audit);
}

/// Per-channel affine map y = a_c x + c_c (eval-mode batch norm).
inline Tensor lrp_channel_affine(const LrpRule& rule, const Tensor& x, const Tensor& a, const Tensor& c,
                                 const Tensor& r_out, BiasMode mode = BiasMode::absorb, LayerAudit* audit = nullptr) {
  if (x.rank() != 3 || a.size() != x.dim(0) || c.size() != x.dim(0) || r_out.shape() != x.shape()) {
    throw ShapeError("lrp_channel_affine: shapes do not conform");
  }
  const std::size_t hw = x.dim(1) * x.dim(2);
  auto each = [&](auto&& f) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (a[i / hw] != 0.0) f(i, i, a[i / hw]);
    }
  };
  return detail::lrp_generic(x, r_out, each, [&](std::size_t k) { return c[k / hw]; }, rule, mode, audit);
}

/// Eval-mode batch norm as y = a x + c per channel.
inline std::pair<Tensor, Tensor> bn_affine(const BatchNormParams& p) {
  const std::size_t n = p.channels();
  Tensor a({n}), c({n});
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = p.scale[i] / std::sqrt(p.running_var[i] + p.eps);
    c[i] = p.shift[i] - a[i] * p.running_mean[i];
  }
  return {a, c};
}

/// Folds an eval-mode batch norm that follows a conv (or linear) layer into
/// that layer's weights and bias: W' = a W, b' = a b + c per output channel.
inline Conv2d lrp_bn_fold(const Conv2d& conv, const BatchNormParams& bn) {
  const auto [a, c] = bn_affine(bn);
  if (a.size() != conv.weight.dim(0)) throw ShapeError("lrp_bn_fold: batch norm channels do not match conv outputs");
  Conv2d out = conv;
  const std::size_t per = conv.weight.size() / conv.weight.dim(0);
  for (std::size_t o = 0; o < a.size(); ++o) {
    for (std::size_t i = 0; i < per; ++i) out.weight[o * per + i] *= a[o];
    out.bias[o] = a[o] * conv.bias[o] + c[o];
  }
  return out;
}

inline Linear lrp_bn_fold(const Linear& lin, const BatchNormParams& bn) {
  const auto [a, c] = bn_affine(bn);
  if (a.size() != lin.weight.dim(0)) throw ShapeError("lrp_bn_fold: batch norm channels do not match linear outputs");
  Linear out = lin;
  const std::size_t per = lin.weight.dim(1);
  for (std::size_t o = 0; o < a.size(); ++o) {
    for (std::size_t i = 0; i < per; ++i) out.weight[o * per + i] *= a[o];
    out.bias[o] = a[o] * lin.bias[o] + c[o];
  }
  return out;
}

inline Tensor lrp_avgpool(const LrpRule& rule, const Tensor& x, std::size_t k, std::size_t stride,
                          const Tensor& r_out, BiasMode mode = BiasMode::absorb, LayerAudit* audit = nullptr) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0) {
    throw ShapeError("lrp_avgpool: window does not tile the input");
  }
  const std::size_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  if (r_out.shape() != Shape{c, ho, wo}) throw ShapeError("lrp_avgpool: relevance shape mismatch");
  const double wt = 1.0 / static_cast<double>(k * k);
  auto each = [&](auto&& f) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx)
              f((ch * h + oy * stride + ky) * w + ox * stride + kx, (ch * ho + oy) * wo + ox, wt);
  };
  return detail::lrp_generic(x, r_out, each, [](std::size_t) { return 0.0; }, rule, mode, audit);
}

inline Tensor lrp_global_avgpool(const LrpRule& rule, const Tensor& x, const Tensor& r_out,
                                 BiasMode mode = BiasMode::absorb, LayerAudit* audit = nullptr) {
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (r_out.size() != c) throw ShapeError("lrp_global_avgpool: relevance shape mismatch");
  const double wt = 1.0 / static_cast<double>(hw);
  auto each = [&](auto&& f) {
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) f(ch * hw + i, ch, wt);
  };
  return detail::lrp_generic(x, r_out, each, [](std::size_t) { return 0.0; }, rule, mode, audit);
}

/// All relevance of a window goes to its maximum (first index on ties).
inline Tensor lrp_maxpool(const Tensor& x, std::size_t k, std::size_t stride, const Tensor& r_out,
                          LayerAudit* audit = nullptr) {
  Tensor r_in = maxpool2d_backward(x, k, stride, r_out);
  if (audit) {
    audit->relevance_out = r_out.sum();
    audit->relevance_in = r_in.sum();
  }
  return r_in;
}

inline Tensor lrp_relu(const Tensor& r) { return r; }

inline std::vector<Tensor> lrp_concat(std::span<const std::size_t> sizes, const Tensor& r_out) {
  return split_channels(r_out, sizes);
}

// ---------------------------------------------------------------------------
// whole-network explanation

struct ExplainOptions {
  std::optional<std::size_t> start_neuron;  // empty: winning neuron
  BiasMode bias = BiasMode::absorb;
};

struct RelevanceMap {
  Tensor relevance;        // [1,H,W], summed over input channels
  Tensor input_relevance;  // [C,H,W]
  std::size_t start_neuron = 0;
  double start_logit = 0.0;
  Tensor logits, probs;
  std::vector<LayerAudit> layers;  // in propagation order

  std::vector<double> residuals() const {
    std::vector<double> r;
    for (const auto& l : layers) r.push_back(l.residual());
    return r;
  }
};

inline RelevanceMap explain(const DenseNet& model, const Tensor& raw_input, const LrpPreset& preset,
                            const ExplainOptions& opt = {}) {
  preset.first_layer.validate();
  preset.conv_layers.validate();
  preset.dense_layers.validate();
  const Tensor input = normalize_input_rank(raw_input);
  const auto& cfg = model.config;
  if (input.shape() != Shape{cfg.input_channels, cfg.input_size, cfg.input_size}) {
    throw ShapeError("explain: input shape " + shape_str(input.shape()) + " does not match the model");
  }

  // forward pass keeping every layer input
  struct LayerCtx {
    Tensor bn_in, act;
  };
  struct BlockCtx {
    std::vector<LayerCtx> layers;
    LayerCtx transition;
    Tensor transition_conv;
  };
  std::vector<BlockCtx> ctx(model.blocks.size());
  Tensor x = model.stem.forward(input);
  auto norm_relu = [](const Tensor& t, const BatchNormParams& p) { return relu(batchnorm2d_eval(t, p)); };
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto& block = model.blocks[b];
    for (const auto& layer : block.layers) {
      LayerCtx lc{x, norm_relu(x, layer.norm)};
      x = concat_channels(x, layer.conv.forward(lc.act));
      ctx[b].layers.push_back(std::move(lc));
    }
    if (block.transition) {
      ctx[b].transition = {x, norm_relu(x, block.transition->norm)};
      ctx[b].transition_conv = block.transition->conv.forward(ctx[b].transition.act);
      x = avgpool2d(ctx[b].transition_conv, 2, 2);
    }
  }
  const LayerCtx final_ctx{x, norm_relu(x, model.final_norm)};
  const Tensor features = global_avgpool(final_ctx.act);

  RelevanceMap out;
  out.logits = model.head.forward(features);
  out.probs = apply_head_activation(cfg.head_activation, out.logits);
  out.start_neuron = opt.start_neuron ? *opt.start_neuron : argmax(out.probs);
  if (out.start_neuron >= cfg.num_outputs) {
    throw ConfigError("explain: start neuron " + std::to_string(out.start_neuron) + " out of range (head has " +
                      std::to_string(cfg.num_outputs) + " outputs)");
  }
  out.start_logit = out.logits[out.start_neuron];

  const BiasMode mode = opt.bias;
  auto audit = [&](const std::string& name) -> LayerAudit* {
    out.layers.push_back({name, 0, 0, 0});
    return &out.layers.back();
  };
  auto affine = [&](const std::string& name, const Tensor& in, const BatchNormParams& p, const Tensor& r) {
    const auto [a, c] = bn_affine(p);
    return lrp_channel_affine(preset.conv_layers, in, a, c, r, mode, audit(name));
  };

  Tensor r_logits = Tensor::zeros_like(out.logits);
  r_logits[out.start_neuron] = out.start_logit;
  Tensor r = lrp_linear(preset.dense_layers, features, model.head.weight, model.head.bias, r_logits, mode,
                        audit("head"));
  r = lrp_global_avgpool(preset.conv_layers, final_ctx.act, r, mode, audit("global_pool"));
  r = affine("block" + std::to_string(model.blocks.size()) + ".norm", final_ctx.bn_in, model.final_norm, lrp_relu(r));
  for (std::size_t b = model.blocks.size(); b-- > 0;) {
    const auto& block = model.blocks[b];
    const std::string bp = "block" + std::to_string(b + 1);
    if (block.transition) {
      r = lrp_avgpool(preset.conv_layers, ctx[b].transition_conv, 2, 2, r, mode, audit(bp + ".transition.pool"));
      r = lrp_conv(preset.conv_layers, ctx[b].transition.act, block.transition->conv.weight,
                   block.transition->conv.bias, block.transition->conv.geometry, r, mode,
                   audit(bp + ".transition.conv"));
      r = affine(bp + ".transition.norm", ctx[b].transition.bn_in, block.transition->norm, lrp_relu(r));
    }
    for (std::size_t l = block.layers.size(); l-- > 0;) {
      const auto& layer = block.layers[l];
      const std::string lp = bp + ".layer" + std::to_string(l + 1);
      const std::size_t sizes[] = {layer.conv.weight.dim(1), layer.conv.weight.dim(0)};
      auto parts = lrp_concat(sizes, r);
      Tensor r_act = lrp_conv(preset.conv_layers, ctx[b].layers[l].act, layer.conv.weight, layer.conv.bias,
                              layer.conv.geometry, parts[1], mode, audit(lp + ".conv"));
      Tensor r_norm = affine(lp + ".norm", ctx[b].layers[l].bn_in, layer.norm, lrp_relu(r_act));
      r = parts[0] + r_norm;
    }
  }
  out.input_relevance = lrp_conv(preset.first_layer, input, model.stem.weight, model.stem.bias,
                                 model.stem.geometry, r, mode, audit("stem.conv"));
  const std::size_t h = input.dim(1), w = input.dim(2);
  out.relevance = Tensor({1, h, w});
  for (std::size_t c = 0; c < input.dim(0); ++c)
    for (std::size_t i = 0; i < h * w; ++i) out.relevance[i] += out.input_relevance[c * h * w + i];
  if (!out.relevance.all_finite()) throw NumericError("explain: non-finite relevance");
  return out;
}

// ---------------------------------------------------------------------------
// rendering and region statistics

/// Red for positive, blue for negative relevance, white at zero; normalized
/// by max |R| and blended 60/40 over the grayscale underlay. An all-zero map
/// renders the underlay unchanged.
inline RgbImage render_heatmap(const Tensor& relevance, const Tensor& underlay) {
  if (relevance.rank() != 3 || underlay.rank() != 3 || relevance.dim(1) != underlay.dim(1) ||
      relevance.dim(2) != underlay.dim(2)) {
    throw ShapeError("render_heatmap: map " + shape_str(relevance.shape()) + " and underlay " +
                     shape_str(underlay.shape()) + " differ in size");
  }
  const std::size_t h = relevance.dim(1), w = relevance.dim(2);
  RgbImage img{w, h, std::vector<unsigned char>(3 * w * h)};
  const double peak = relevance.max_abs();
  for (std::size_t i = 0; i < h * w; ++i) {
    const double gray = std::clamp(underlay[i], 0.0, 1.0);
    double rgb[3] = {gray, gray, gray};
    if (peak > 0.0) {
      const double v = relevance[i] / peak;
      const double heat[3] = {v >= 0 ? 1.0 : 1.0 + v, 1.0 - std::abs(v), v <= 0 ? 1.0 : 1.0 - v};
      for (int c = 0; c < 3; ++c) rgb[c] = 0.6 * heat[c] + 0.4 * gray;
    }
    for (int c = 0; c < 3; ++c) img.rgb[3 * i + c] = detail::to_byte(rgb[c]);
  }
  return img;
}

struct RegionStats {
  double mean = 0.0;
  double share_of_total_abs = 0.0;
};

inline RegionStats region_relevance(const Tensor& relevance, const Rect& r) {
  check_rect(r, relevance.dim(2), relevance.dim(1), "region_relevance");
  const std::size_t w = relevance.dim(2);
  double sum = 0.0, abs_in = 0.0;
  for (std::size_t y = r.y; y < r.y + r.h; ++y)
    for (std::size_t x = r.x; x < r.x + r.w; ++x) {
      sum += relevance[y * w + x];
      abs_in += std::abs(relevance[y * w + x]);
    }
  const double total = relevance.abs_sum();
  return {sum / static_cast<double>(r.w * r.h), total > 0.0 ? abs_in / total : 0.0};
}

struct WindowRank {
  std::size_t rank = 0;     // 1 = largest share among all windows of the same size
  std::size_t windows = 0;  // number of window positions
  double share = 0.0;

  bool in_top_fraction(double fraction) const {
    return static_cast<double>(rank) <= std::ceil(fraction * static_cast<double>(windows));
  }
};

/// Rank of a rectangle's absolute-relevance share among all equal-size windows.
inline WindowRank rank_region(const Tensor& relevance, const Rect& r) {
  const RegionStats own = region_relevance(relevance, r);
  const std::size_t h = relevance.dim(1), w = relevance.dim(2);
  WindowRank out{1, 0, own.share_of_total_abs};
  for (std::size_t y = 0; y + r.h <= h; ++y)
    for (std::size_t x = 0; x + r.w <= w; ++x) {
      ++out.windows;
      if (Rect{x, y, r.w, r.h} == r) continue;
      if (region_relevance(relevance, {x, y, r.w, r.h}).share_of_total_abs > own.share_of_total_abs) ++out.rank;
    }
  return out;
}

/// One CSV row per image row.
inline std::string relevance_csv(const Tensor& relevance) {
  const std::size_t h = relevance.dim(1), w = relevance.dim(2);
  std::string s;
  char buf[32];
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      std::snprintf(buf, sizeof buf, "%.9g", relevance[y * w + x]);
      if (x) s += ',';
      s += buf;
    }
    s += '\n';
  }
  return s;
}

}  // namespace ttl
