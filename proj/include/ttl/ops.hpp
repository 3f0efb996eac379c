#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ttl/tensor.hpp"

// Forward and backward implementations of every layer primitive used by the
// dense network. All functions operate on a single sample ([C,H,W] or [N]);
// batches are handled by the caller as an outer loop, except batch norm which
// takes the whole batch because its training statistics span samples.
namespace ttl {

struct LayerGrad {
  Tensor input_grad;
  std::map<std::string, Tensor> param_grads;
};

struct BatchGrad {
  std::vector<Tensor> input_grads;
  std::map<std::string, Tensor> param_grads;
};

// ---------------------------------------------------------------------------
// conv2d

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, ConvGeometry g) {
  if (g.stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (kernel > in + 2 * g.padding) {
    throw ShapeError("conv2d: kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + 2 * g.padding));
  }
  return (in + 2 * g.padding - kernel) / g.stride + 1;
}

namespace detail {

// Output positions o in [0, out) whose input index o*stride + k - pad lies in [0, in).
struct IndexRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

inline IndexRange valid_outputs(std::size_t out, std::size_t in, std::size_t k, ConvGeometry g) {
  const long long s = static_cast<long long>(g.stride);
  const long long p = static_cast<long long>(g.padding);
  const long long kk = static_cast<long long>(k);
  long long lo = 0;
  if (p > kk) lo = (p - kk + s - 1) / s;
  const long long last = static_cast<long long>(in) - 1 + p - kk;
  if (last < 0) return {};
  long long hi = last / s + 1;
  hi = std::min<long long>(hi, static_cast<long long>(out));
  if (hi <= lo) return {};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Offset of input element (oy*stride + ky - pad, kx - pad) from the plane start;
// the column part may be negative, callers index it with ox*stride >= pad - kx.
inline std::ptrdiff_t row_offset(std::size_t oy, std::size_t ky, std::size_t kx, std::size_t w, ConvGeometry g) {
  const auto row = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
  return row * static_cast<std::ptrdiff_t>(w) + static_cast<std::ptrdiff_t>(kx) -
         static_cast<std::ptrdiff_t>(g.padding);
}

inline void check_conv_args(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (input.rank() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  if (weights.rank() != 4) {
    throw ShapeError("conv2d: weights must be [C_out,C_in,kH,kW], got " + shape_str(weights.shape()));
  }
  if (weights.dim(1) != input.dim(0)) {
    throw ShapeError("conv2d: weights expect C_in=" + std::to_string(weights.dim(1)) +
                     " but input has C_in=" + std::to_string(input.dim(0)));
  }
  if (bias.rank() != 1 || bias.dim(0) != weights.dim(0)) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(weights.dim(0)) + "], got " +
                     shape_str(bias.shape()));
  }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, ConvGeometry g) {
  detail::check_conv_args(input, weights, bias);
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);
  const std::size_t ho = conv_out_extent(h, kh, g), wo = conv_out_extent(w, kw, g);
  Tensor out({cout, ho, wo});
  const double* in = input.data().data();
  const double* wt = weights.data().data();
  double* o = out.data().data();
  for (std::size_t oc = 0; oc < cout; ++oc) {
    double* plane = o + oc * ho * wo;
    std::fill(plane, plane + ho * wo, bias[oc]);
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const double* iplane = in + ic * h * w;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const auto ry = detail::valid_outputs(ho, h, ky, g);
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const auto rx = detail::valid_outputs(wo, w, kx, g);
          const double wv = wt[((oc * cin + ic) * kh + ky) * kw + kx];
          if (wv == 0.0) continue;
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            const double* irow = iplane + detail::row_offset(oy, ky, kx, w, g);
            double* orow = plane + oy * wo;
            if (g.stride == 1) {
              for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += wv * irow[ox];
            } else {
              for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) orow[ox] += wv * irow[ox * g.stride];
            }
          }
        }
      }
    }
  }
  return out;
}

/// Accumulates conv gradients into the given buffers. input_grad may be null
/// when the caller does not need it (frozen lower layers).
inline void conv2d_backward_accumulate(const Tensor& input, const Tensor& weights, ConvGeometry g,
                                       const Tensor& grad_out, Tensor* input_grad, Tensor* weight_grad,
                                       Tensor* bias_grad) {
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = weights.dim(0), kh = weights.dim(2), kw = weights.dim(3);
  const std::size_t ho = conv_out_extent(h, kh, g), wo = conv_out_extent(w, kw, g);
  if (grad_out.shape() != Shape{cout, ho, wo}) {
    throw ShapeError("conv2d_backward: output_grad shape " + shape_str(grad_out.shape()) +
                     " does not match forward output " + shape_str({cout, ho, wo}));
  }
  const double* in = input.data().data();
  const double* wt = weights.data().data();
  const double* go = grad_out.data().data();
  double* gin = input_grad ? input_grad->data().data() : nullptr;
  double* gw = weight_grad ? weight_grad->data().data() : nullptr;
  for (std::size_t oc = 0; oc < cout; ++oc) {
    const double* gplane = go + oc * ho * wo;
    if (bias_grad) {
      double s = 0.0;
      for (std::size_t i = 0; i < ho * wo; ++i) s += gplane[i];
      (*bias_grad)[oc] += s;
    }
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const double* iplane = in + ic * h * w;
      double* giplane = gin ? gin + ic * h * w : nullptr;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const auto ry = detail::valid_outputs(ho, h, ky, g);
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const auto rx = detail::valid_outputs(wo, w, kx, g);
          const std::size_t widx = ((oc * cin + ic) * kh + ky) * kw + kx;
          const double wv = wt[widx];
          double acc = 0.0;
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            const std::ptrdiff_t row_off = detail::row_offset(oy, ky, kx, w, g);
            const double* irow = iplane + row_off;
            const double* grow = gplane + oy * wo;
            if (gw) {
              for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) acc += grow[ox] * irow[ox * g.stride];
            }
            if (giplane && wv != 0.0) {
              double* girow = giplane + row_off;
              for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) girow[ox * g.stride] += wv * grow[ox];
            }
          }
          if (gw) gw[widx] += acc;
        }
      }
    }
  }
}

inline LayerGrad conv2d_backward(const Tensor& input, const Tensor& weights, ConvGeometry g,
                                 const Tensor& grad_out) {
  LayerGrad out;
  out.input_grad = Tensor::zeros_like(input);
  Tensor gw = Tensor::zeros_like(weights);
  Tensor gb({weights.dim(0)});
  conv2d_backward_accumulate(input, weights, g, grad_out, &out.input_grad, &gw, &gb);
  out.param_grads.emplace("weight", std::move(gw));
  out.param_grads.emplace("bias", std::move(gb));
  return out;
}

// ---------------------------------------------------------------------------
// linear

inline Tensor linear(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (input.rank() != 1 || weights.rank() != 2 || bias.rank() != 1 || weights.dim(1) != input.dim(0) ||
      bias.dim(0) != weights.dim(0)) {
    throw ShapeError("linear: shapes do not conform: input " + shape_str(input.shape()) + ", weights " +
                     shape_str(weights.shape()) + ", bias " + shape_str(bias.shape()));
  }
  const std::size_t m = weights.dim(0), n = weights.dim(1);
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = bias[i];
    const double* row = weights.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) s += row[j] * input[j];
    out[i] = s;
  }
  return out;
}

inline void linear_backward_accumulate(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                                       Tensor* input_grad, Tensor* weight_grad, Tensor* bias_grad) {
  const std::size_t m = weights.dim(0), n = weights.dim(1);
  if (grad_out.shape() != Shape{m}) {
    throw ShapeError("linear_backward: output_grad shape " + shape_str(grad_out.shape()) +
                     " expected [" + std::to_string(m) + "]");
  }
  for (std::size_t i = 0; i < m; ++i) {
    const double g = grad_out[i];
    if (bias_grad) (*bias_grad)[i] += g;
    const double* row = weights.data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      if (weight_grad) (*weight_grad)[i * n + j] += g * input[j];
      if (input_grad) (*input_grad)[j] += g * row[j];
    }
  }
}

inline LayerGrad linear_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_out) {
  LayerGrad out;
  out.input_grad = Tensor::zeros_like(input);
  Tensor gw = Tensor::zeros_like(weights);
  Tensor gb({weights.dim(0)});
  linear_backward_accumulate(input, weights, grad_out, &out.input_grad, &gw, &gb);
  out.param_grads.emplace("weight", std::move(gw));
  out.param_grads.emplace("bias", std::move(gb));
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm2d

enum class BnMode { train, eval };

struct BatchNormParams {
  Tensor scale;
  Tensor shift;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormParams identity(std::size_t channels) {
    return {Tensor({channels}, 1.0), Tensor({channels}, 0.0), Tensor({channels}, 0.0), Tensor({channels}, 1.0)};
  }

  std::size_t channels() const { return scale.size(); }
};

struct BatchNormCache {
  BnMode mode = BnMode::eval;
  std::vector<Tensor> normalized;  // x_hat per sample
  std::vector<double> inv_std;     // per channel
};

namespace detail {

inline void check_bn(std::span<const Tensor> batch, const BatchNormParams& p) {
  if (!(p.eps > 0.0)) throw ConfigError("batchnorm2d: eps must be > 0, got " + std::to_string(p.eps));
  if (batch.empty()) throw ShapeError("batchnorm2d: empty batch");
  const std::size_t c = p.channels();
  if (p.shift.size() != c || p.running_mean.size() != c || p.running_var.size() != c) {
    throw ShapeError("batchnorm2d: per-channel parameter lengths disagree");
  }
  for (const Tensor& x : batch) {
    if (x.rank() != 3 || x.dim(0) != c) {
      throw ShapeError("batchnorm2d: expected [" + std::to_string(c) + ",H,W], got " + shape_str(x.shape()));
    }
    if (x.shape() != batch.front().shape()) throw ShapeError("batchnorm2d: ragged batch");
  }
}

}  // namespace detail

/// Batch normalization over a batch of [C,H,W] samples. Train mode normalizes
/// by batch statistics and updates the running statistics; eval mode uses the
/// running statistics and leaves params untouched.
inline std::vector<Tensor> batchnorm2d(std::span<const Tensor> batch, BatchNormParams& params, BnMode mode,
                                       BatchNormCache* cache = nullptr) {
  detail::check_bn(batch, params);
  const std::size_t c = params.channels();
  const std::size_t plane = batch.front().dim(1) * batch.front().dim(2);
  const std::size_t n = batch.size() * plane;
  std::vector<double> mean(c), inv_std(c);
  if (mode == BnMode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (const Tensor& x : batch) {
        const double* p = x.data().data() + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(n);
      double v = 0.0;
      for (const Tensor& x : batch) {
        const double* p = x.data().data() + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      const double var = v / static_cast<double>(n);
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + params.eps);
      const double unbiased = n > 1 ? var * static_cast<double>(n) / static_cast<double>(n - 1) : var;
      params.running_mean[ch] = (1.0 - params.momentum) * params.running_mean[ch] + params.momentum * mu;
      params.running_var[ch] = (1.0 - params.momentum) * params.running_var[ch] + params.momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = params.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(params.running_var[ch] + params.eps);
    }
  }
  std::vector<Tensor> out;
  out.reserve(batch.size());
  if (cache) {
    cache->mode = mode;
    cache->inv_std = inv_std;
    cache->normalized.clear();
    cache->normalized.reserve(batch.size());
  }
  for (const Tensor& x : batch) {
    Tensor y = Tensor::zeros_like(x);
    Tensor xhat;
    if (cache) xhat = Tensor::zeros_like(x);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = x.data().data() + ch * plane;
      double* q = y.data().data() + ch * plane;
      const double g = params.scale[ch], b = params.shift[ch];
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (p[i] - mean[ch]) * inv_std[ch];
        q[i] = g * xh + b;
        if (cache) xhat[ch * plane + i] = xh;
      }
    }
    out.push_back(std::move(y));
    if (cache) cache->normalized.push_back(std::move(xhat));
  }
  return out;
}

inline Tensor batchnorm2d_eval(const Tensor& input, const BatchNormParams& params) {
  BatchNormParams copy = params;
  return batchnorm2d(std::span<const Tensor>(&input, 1), copy, BnMode::eval).front();
}

inline void batchnorm2d_backward_accumulate(const BatchNormCache& cache, const BatchNormParams& params,
                                            std::span<const Tensor> grad_out, std::vector<Tensor>* input_grads,
                                            Tensor* scale_grad, Tensor* shift_grad) {
  if (grad_out.size() != cache.normalized.size()) throw ShapeError("batchnorm2d_backward: batch size mismatch");
  const std::size_t c = params.channels();
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    if (grad_out[i].shape() != cache.normalized[i].shape()) {
      throw ShapeError("batchnorm2d_backward: output_grad shape " + shape_str(grad_out[i].shape()) +
                       " vs forward " + shape_str(cache.normalized[i].shape()));
    }
  }
  const std::size_t plane = grad_out.front().dim(1) * grad_out.front().dim(2);
  const double n = static_cast<double>(grad_out.size() * plane);
  if (input_grads && input_grads->size() != grad_out.size()) {
    input_grads->assign(grad_out.size(), Tensor());
    for (std::size_t i = 0; i < grad_out.size(); ++i) (*input_grads)[i] = Tensor::zeros_like(grad_out[i]);
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t s = 0; s < grad_out.size(); ++s) {
      const double* dy = grad_out[s].data().data() + ch * plane;
      const double* xh = cache.normalized[s].data().data() + ch * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xh[i];
      }
    }
    if (scale_grad) (*scale_grad)[ch] += sum_dy_xhat;
    if (shift_grad) (*shift_grad)[ch] += sum_dy;
    if (!input_grads) continue;
    const double g = params.scale[ch] * cache.inv_std[ch];
    for (std::size_t s = 0; s < grad_out.size(); ++s) {
      const double* dy = grad_out[s].data().data() + ch * plane;
      const double* xh = cache.normalized[s].data().data() + ch * plane;
      double* dx = (*input_grads)[s].data().data() + ch * plane;
      if (cache.mode == BnMode::train) {
        for (std::size_t i = 0; i < plane; ++i) dx[i] += g * (dy[i] - sum_dy / n - xh[i] * sum_dy_xhat / n);
      } else {
        for (std::size_t i = 0; i < plane; ++i) dx[i] += g * dy[i];
      }
    }
  }
}

inline BatchGrad batchnorm2d_backward(const BatchNormCache& cache, const BatchNormParams& params,
                                      std::span<const Tensor> grad_out) {
  BatchGrad out;
  Tensor gs({params.channels()}), gb({params.channels()});
  out.input_grads.reserve(grad_out.size());
  for (const Tensor& g : grad_out) out.input_grads.push_back(Tensor::zeros_like(g));
  batchnorm2d_backward_accumulate(cache, params, grad_out, &out.input_grads, &gs, &gb);
  out.param_grads.emplace("scale", std::move(gs));
  out.param_grads.emplace("shift", std::move(gb));
  return out;
}

// ---------------------------------------------------------------------------
// elementwise and pooling

inline Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  input.require_same_shape(grad_out, "relu_backward");
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(input[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

namespace detail {

inline std::size_t pool_extent(std::size_t in, std::size_t k, std::size_t stride, const char* op) {
  if (k == 0 || stride == 0) throw ShapeError(std::string(op) + ": window and stride must be >= 1");
  if (k > in || (in - k) % stride != 0) {
    throw ShapeError(std::string(op) + ": window " + std::to_string(k) + " stride " + std::to_string(stride) +
                     " does not tile extent " + std::to_string(in));
  }
  return (in - k) / stride + 1;
}

}  // namespace detail

inline Tensor avgpool2d(const Tensor& input, std::size_t k, std::size_t stride) {
  if (input.rank() != 3) throw ShapeError("avgpool2d: input must be [C,H,W]");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t ho = detail::pool_extent(h, k, stride, "avgpool2d");
  const std::size_t wo = detail::pool_extent(w, k, stride, "avgpool2d");
  Tensor out({c, ho, wo});
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) s += input.at(ch, oy * stride + dy, ox * stride + dx);
        out.at(ch, oy, ox) = s * inv;
      }
  return out;
}

inline Tensor avgpool2d_backward(const Shape& input_shape, std::size_t k, std::size_t stride,
                                 const Tensor& grad_out) {
  Tensor g(input_shape);
  const std::size_t c = input_shape[0];
  const std::size_t ho = detail::pool_extent(input_shape[1], k, stride, "avgpool2d");
  const std::size_t wo = detail::pool_extent(input_shape[2], k, stride, "avgpool2d");
  if (grad_out.shape() != Shape{c, ho, wo}) throw ShapeError("avgpool2d_backward: output_grad shape mismatch");
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const double v = grad_out.at(ch, oy, ox) * inv;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx) g.at(ch, oy * stride + dy, ox * stride + dx) += v;
      }
  return g;
}

// Window argmax in row-major order; ties resolve to the first index.
inline std::pair<std::size_t, std::size_t> maxpool_winner(const Tensor& input, std::size_t ch, std::size_t y0,
                                                          std::size_t x0, std::size_t k) {
  std::pair<std::size_t, std::size_t> best{y0, x0};
  double m = input.at(ch, y0, x0);
  for (std::size_t dy = 0; dy < k; ++dy)
    for (std::size_t dx = 0; dx < k; ++dx) {
      const double v = input.at(ch, y0 + dy, x0 + dx);
      if (v > m) {
        m = v;
        best = {y0 + dy, x0 + dx};
      }
    }
  return best;
}

inline Tensor maxpool2d(const Tensor& input, std::size_t k, std::size_t stride) {
  if (input.rank() != 3) throw ShapeError("maxpool2d: input must be [C,H,W]");
  const std::size_t c = input.dim(0);
  const std::size_t ho = detail::pool_extent(input.dim(1), k, stride, "maxpool2d");
  const std::size_t wo = detail::pool_extent(input.dim(2), k, stride, "maxpool2d");
  Tensor out({c, ho, wo});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto [y, x] = maxpool_winner(input, ch, oy * stride, ox * stride, k);
        out.at(ch, oy, ox) = input.at(ch, y, x);
      }
  return out;
}

inline Tensor maxpool2d_backward(const Tensor& input, std::size_t k, std::size_t stride, const Tensor& grad_out) {
  const std::size_t c = input.dim(0);
  const std::size_t ho = detail::pool_extent(input.dim(1), k, stride, "maxpool2d");
  const std::size_t wo = detail::pool_extent(input.dim(2), k, stride, "maxpool2d");
  if (grad_out.shape() != Shape{c, ho, wo}) throw ShapeError("maxpool2d_backward: output_grad shape mismatch");
  Tensor g = Tensor::zeros_like(input);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto [y, x] = maxpool_winner(input, ch, oy * stride, ox * stride, k);
        g.at(ch, y, x) += grad_out.at(ch, oy, ox);
      }
  return g;
}

inline Tensor global_avgpool(const Tensor& input) {
  if (input.rank() != 3) throw ShapeError("global_avgpool: input must be [C,H,W]");
  const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
  Tensor out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += input[ch * plane + i];
    out[ch] = s / static_cast<double>(plane);
  }
  return out;
}

inline Tensor global_avgpool_backward(const Shape& input_shape, const Tensor& grad_out) {
  if (grad_out.shape() != Shape{input_shape[0]}) throw ShapeError("global_avgpool_backward: shape mismatch");
  Tensor g(input_shape);
  const std::size_t plane = input_shape[1] * input_shape[2];
  for (std::size_t ch = 0; ch < input_shape[0]; ++ch) {
    const double v = grad_out[ch] / static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) g[ch * plane + i] = v;
  }
  return g;
}

inline Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty input list");
  const std::size_t h = parts.front().dim(1), w = parts.front().dim(2);
  std::size_t c = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 3 || p.dim(1) != h || p.dim(2) != w) {
      throw ShapeError("concat_channels: inputs must share H,W; got " + shape_str(p.shape()));
    }
    c += p.dim(0);
  }
  std::vector<double> data;
  data.reserve(c * h * w);
  for (const Tensor& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor({c, h, w}, std::move(data));
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  const Tensor parts[] = {a, b};
  return concat_channels(parts);
}

inline std::vector<Tensor> split_channels(const Tensor& input, std::span<const std::size_t> sizes) {
  std::size_t total = 0;
  for (std::size_t s : sizes) total += s;
  if (input.rank() != 3 || total != input.dim(0)) {
    throw ShapeError("split_channels: sizes do not sum to channel count of " + shape_str(input.shape()));
  }
  const std::size_t plane = input.dim(1) * input.dim(2);
  std::vector<Tensor> out;
  std::size_t off = 0;
  for (std::size_t s : sizes) {
    std::vector<double> data(input.data().begin() + static_cast<std::ptrdiff_t>(off * plane),
                             input.data().begin() + static_cast<std::ptrdiff_t>((off + s) * plane));
    out.emplace_back(Shape{s, input.dim(1), input.dim(2)}, std::move(data));
    off += s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// activations and losses

inline Tensor softmax(const Tensor& logits) {
  double m = logits[0];
  for (double v : logits.data()) m = std::max(m, v);
  Tensor out = logits;
  double s = 0.0;
  for (double& v : out.data()) {
    v = std::exp(v - m);
    s += v;
  }
  for (double& v : out.data()) v /= s;
  return out;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = sigmoid(v);
  return out;
}

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;  // w.r.t. logits
};

inline double cross_entropy_loss(const Tensor& probs, std::size_t target) {
  if (target >= probs.size()) {
    throw ShapeError("cross_entropy_loss: target " + std::to_string(target) + " out of range for " +
                     std::to_string(probs.size()) + " classes");
  }
  return -std::log(std::max(probs[target], 1e-300));
}

/// Softmax followed by cross entropy, differentiated with respect to the logits.
inline LossAndGrad softmax_cross_entropy(const Tensor& logits, std::size_t target) {
  if (target >= logits.size()) {
    throw ShapeError("softmax_cross_entropy: target " + std::to_string(target) + " out of range for " +
                     std::to_string(logits.size()) + " classes");
  }
  double m = logits[0];
  for (double v : logits.data()) m = std::max(m, v);
  double s = 0.0;
  for (double v : logits.data()) s += std::exp(v - m);
  const double log_z = m + std::log(s);
  LossAndGrad out{log_z - logits[target], softmax(logits)};
  out.grad[target] -= 1.0;
  return out;
}

namespace detail {

inline void check_binary_targets(const Tensor& values, const Tensor& targets, const char* op) {
  values.require_same_shape(targets, op);
  for (double t : targets.data()) {
    if (t != 0.0 && t != 1.0) throw ShapeError(std::string(op) + ": targets must be 0 or 1");
  }
}

}  // namespace detail

inline double bce_loss(const Tensor& sigmoid_outputs, const Tensor& targets) {
  detail::check_binary_targets(sigmoid_outputs, targets, "bce_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double p = std::clamp(sigmoid_outputs[i], 1e-300, 1.0);
    const double q = std::clamp(1.0 - sigmoid_outputs[i], 1e-300, 1.0);
    s -= targets[i] * std::log(p) + (1.0 - targets[i]) * std::log(q);
  }
  return s / static_cast<double>(targets.size());
}

/// Binary cross entropy averaged over labels, computed from logits with the
/// log-sum-exp form max(z,0) - z*t + log(1 + exp(-|z|)).
inline LossAndGrad sigmoid_bce(const Tensor& logits, const Tensor& targets) {
  detail::check_binary_targets(logits, targets, "sigmoid_bce");
  const double k = static_cast<double>(logits.size());
  LossAndGrad out{0.0, Tensor::zeros_like(logits)};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    out.loss += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
    out.grad[i] = (sigmoid(z) - targets[i]) / k;
  }
  out.loss /= k;
  return out;
}

inline std::size_t argmax(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (t[i] > t[best]) best = i;
  }
  return best;
}

}  // namespace ttl
