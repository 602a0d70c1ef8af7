#include "normkit/nn.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "normkit/error.hpp"
#include "normkit/rng.hpp"

namespace normkit {

NormKind norm_kind_from_string(const std::string& name) {
  if (name == "bn") return NormKind::BatchNorm;
  if (name == "ln") return NormKind::LayerNorm;
  if (name == "in") return NormKind::InstanceNorm;
  if (name == "gn") return NormKind::GroupNorm;
  if (name == "wn") return NormKind::WeightNorm;
  if (name == "sn") return NormKind::SwitchNorm;
  throw std::invalid_argument("unknown norm kind '" + name + "' (want bn|ln|in|gn|wn|sn)");
}

std::string to_string(NormKind kind) {
  switch (kind) {
    case NormKind::BatchNorm: return "bn";
    case NormKind::LayerNorm: return "ln";
    case NormKind::InstanceNorm: return "in";
    case NormKind::GroupNorm: return "gn";
    case NormKind::WeightNorm: return "wn";
    case NormKind::SwitchNorm: return "sn";
  }
  return "?";
}

// --- functional ops ------------------------------------------------------

std::pair<Tensor, ConvCache> conv2d_forward(const Tensor& x, const Tensor& weight,
                                            const Tensor* bias, std::size_t stride,
                                            std::size_t pad) {
  if (x.empty() || weight.empty()) throw std::invalid_argument("conv2d_forward: empty tensor");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.h != ws.w) {
    throw std::invalid_argument("conv2d_forward: kernel must be square, got " + ws.str());
  }
  if (ws.c != xs.c) {
    throw std::invalid_argument("conv2d_forward: weight expects " + std::to_string(ws.c) +
                                " input channels, input has " + std::to_string(xs.c));
  }
  if (stride == 0) throw std::invalid_argument("conv2d_forward: stride must be >= 1");
  const std::size_t k = ws.h;
  if (xs.h + 2 * pad < k || xs.w + 2 * pad < k) {
    throw std::invalid_argument("conv2d_forward: kernel " + std::to_string(k) +
                                " exceeds padded input " + xs.str() + " with pad " +
                                std::to_string(pad));
  }
  if (bias != nullptr && bias->shape() != Shape{ws.n, 1, 1, 1}) {
    throw std::invalid_argument("conv2d_forward: bias must be " + Shape{ws.n, 1, 1, 1}.str() +
                                ", got " + bias->shape().str());
  }
  const std::size_t hp = xs.h + 2 * pad, wp = xs.w + 2 * pad;
  const std::size_t ho = (hp - k) / stride + 1, wo = (wp - k) / stride + 1;

  Tensor x_pad(Shape{xs.n, xs.c, hp, wp});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t i = 0; i < xs.h; ++i) {
        std::memcpy(x_pad.data() + ((n * xs.c + c) * hp + i + pad) * wp + pad,
                    x.data() + ((n * xs.c + c) * xs.h + i) * xs.w, xs.w * sizeof(double));
      }

  Tensor y(Shape{xs.n, ws.n, ho, wo});
  const double* wd = weight.data();
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.n; ++o) {
      double* ybase = y.data() + (n * ws.n + o) * ho * wo;
      if (bias != nullptr) {
        const double b = (*bias)[o];
        for (std::size_t i = 0; i < ho * wo; ++i) ybase[i] = b;
      }
      for (std::size_t c = 0; c < xs.c; ++c)
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t q = 0; q < k; ++q) {
            const double wv = wd[((o * xs.c + c) * k + p) * k + q];
            const double* xbase = x_pad.data() + (n * xs.c + c) * hp * wp;
            for (std::size_t i = 0; i < ho; ++i) {
              const double* xrow = xbase + (i * stride + p) * wp + q;
              double* yrow = ybase + i * wo;
              for (std::size_t j = 0; j < wo; ++j) yrow[j] += wv * xrow[j * stride];
            }
          }
    }

  ConvCache cache;
  cache.x_padded = std::move(x_pad);
  cache.in_shape = xs;
  cache.stride = stride;
  cache.pad = pad;
  cache.weight = weight;
  cache.has_bias = bias != nullptr;
  return {std::move(y), std::move(cache)};
}

ConvGrads conv2d_backward(const Tensor& dy, const ConvCache& cache) {
  const Shape& ws = cache.weight.shape();
  const Shape& xs = cache.in_shape;
  const std::size_t k = ws.h, stride = cache.stride, pad = cache.pad;
  const std::size_t hp = xs.h + 2 * pad, wp = xs.w + 2 * pad;
  const std::size_t ho = (hp - k) / stride + 1, wo = (wp - k) / stride + 1;
  if (dy.shape() != Shape{xs.n, ws.n, ho, wo}) {
    throw std::invalid_argument("conv2d_backward: dy shape " + dy.shape().str() +
                                " does not match forward output " +
                                Shape{xs.n, ws.n, ho, wo}.str());
  }

  ConvGrads out;
  out.dweight = Tensor(ws);
  if (cache.has_bias) out.dbias = Tensor(Shape{ws.n, 1, 1, 1});
  Tensor dx_pad(cache.x_padded.shape());
  const double* wd = cache.weight.data();
  double* dwd = out.dweight.data();

  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.n; ++o) {
      const double* dybase = dy.data() + (n * ws.n + o) * ho * wo;
      if (cache.has_bias) {
        double acc = 0.0;
        for (std::size_t i = 0; i < ho * wo; ++i) acc += dybase[i];
        out.dbias[o] += acc;
      }
      for (std::size_t c = 0; c < xs.c; ++c) {
        const double* xbase = cache.x_padded.data() + (n * xs.c + c) * hp * wp;
        double* dxbase = dx_pad.data() + (n * xs.c + c) * hp * wp;
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t q = 0; q < k; ++q) {
            const double wv = wd[((o * xs.c + c) * k + p) * k + q];
            double acc = 0.0;
            for (std::size_t i = 0; i < ho; ++i) {
              const double* dyrow = dybase + i * wo;
              const double* xrow = xbase + (i * stride + p) * wp + q;
              double* dxrow = dxbase + (i * stride + p) * wp + q;
              for (std::size_t j = 0; j < wo; ++j) {
                dxrow[j * stride] += wv * dyrow[j];
                acc += dyrow[j] * xrow[j * stride];
              }
            }
            dwd[((o * xs.c + c) * k + p) * k + q] += acc;
          }
      }
    }

  out.dx = Tensor(xs);
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t i = 0; i < xs.h; ++i) {
        std::memcpy(out.dx.data() + ((n * xs.c + c) * xs.h + i) * xs.w,
                    dx_pad.data() + ((n * xs.c + c) * hp + i + pad) * wp + pad,
                    xs.w * sizeof(double));
      }
  return out;
}

std::pair<Tensor, Tensor> relu_forward(const Tensor& x) {
  Tensor y(x.shape());
  Tensor mask(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0) {
      y[i] = x[i];
      mask[i] = 1.0;
    }
  }
  return {std::move(y), std::move(mask)};
}

Tensor relu_backward(const Tensor& dy, const Tensor& mask) {
  if (dy.shape() != mask.shape()) {
    throw std::invalid_argument("relu_backward: dy shape " + dy.shape().str() +
                                " does not match mask shape " + mask.shape().str());
  }
  Tensor dx(dy.shape());
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask[i];
  return dx;
}

std::pair<Tensor, MaxPoolCache> maxpool_forward(const Tensor& x, std::size_t window,
                                                std::size_t stride) {
  if (x.empty()) throw std::invalid_argument("maxpool_forward: empty input");
  if (window == 0 || stride == 0) {
    throw std::invalid_argument("maxpool_forward: window and stride must be >= 1");
  }
  const Shape& s = x.shape();
  if (window > s.h || window > s.w) {
    throw std::invalid_argument("maxpool_forward: window " + std::to_string(window) +
                                " larger than input " + s.str());
  }
  const std::size_t ho = (s.h - window) / stride + 1, wo = (s.w - window) / stride + 1;
  Tensor y(Shape{s.n, s.c, ho, wo});
  MaxPoolCache cache;
  cache.in_shape = s;
  cache.window = window;
  cache.stride = stride;
  cache.argmax.resize(y.size());
  std::size_t out = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const double* xbase = x.data() + (n * s.c + c) * s.h * s.w;
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j, ++out) {
          std::size_t best = (i * stride) * s.w + j * stride;
          double best_v = xbase[best];
          for (std::size_t p = 0; p < window; ++p)
            for (std::size_t q = 0; q < window; ++q) {
              const std::size_t idx = (i * stride + p) * s.w + (j * stride + q);
              if (xbase[idx] > best_v) {  // strict: ties keep the first flat index
                best_v = xbase[idx];
                best = idx;
              }
            }
          y[out] = best_v;
          cache.argmax[out] = (n * s.c + c) * s.h * s.w + best;
        }
    }
  return {std::move(y), std::move(cache)};
}

Tensor maxpool_backward(const Tensor& dy, const MaxPoolCache& cache) {
  if (dy.size() != cache.argmax.size()) {
    throw std::invalid_argument("maxpool_backward: dy size does not match forward output");
  }
  Tensor dx(cache.in_shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[cache.argmax[i]] += dy[i];
  return dx;
}

std::pair<Tensor, Shape> global_avgpool_forward(const Tensor& x) {
  if (x.empty()) throw std::invalid_argument("global_avgpool_forward: empty input");
  const Shape& s = x.shape();
  Tensor y(Shape{s.n, s.c, 1, 1});
  const double inv = 1.0 / static_cast<double>(s.h * s.w);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const double* xbase = x.data() + (n * s.c + c) * s.h * s.w;
      double acc = 0.0;
      for (std::size_t i = 0; i < s.h * s.w; ++i) acc += xbase[i];
      y[n * s.c + c] = acc * inv;
    }
  return {std::move(y), s};
}

Tensor global_avgpool_backward(const Tensor& dy, const Shape& in_shape) {
  if (dy.shape() != Shape{in_shape.n, in_shape.c, 1, 1}) {
    throw std::invalid_argument("global_avgpool_backward: dy shape " + dy.shape().str() +
                                " does not match pooled " + in_shape.str());
  }
  Tensor dx(in_shape);
  const double inv = 1.0 / static_cast<double>(in_shape.h * in_shape.w);
  for (std::size_t n = 0; n < in_shape.n; ++n)
    for (std::size_t c = 0; c < in_shape.c; ++c) {
      const double g = dy[n * in_shape.c + c] * inv;
      double* dxbase = dx.data() + (n * in_shape.c + c) * in_shape.h * in_shape.w;
      for (std::size_t i = 0; i < in_shape.h * in_shape.w; ++i) dxbase[i] = g;
    }
  return dx;
}

std::pair<Tensor, DenseCache> dense_forward(const Tensor& x, const Tensor& weight,
                                            const Tensor& bias) {
  if (x.empty() || weight.empty()) throw std::invalid_argument("dense_forward: empty tensor");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.h != 1 || xs.w != 1) {
    throw std::invalid_argument("dense_forward: input must be flattened (N,F,1,1), got " +
                                xs.str());
  }
  if (ws.c != xs.c || ws.h != 1 || ws.w != 1) {
    throw std::invalid_argument("dense_forward: weight " + ws.str() + " does not match input " +
                                xs.str());
  }
  if (bias.shape() != Shape{1, ws.n, 1, 1}) {
    throw std::invalid_argument("dense_forward: bias must be " + Shape{1, ws.n, 1, 1}.str() +
                                ", got " + bias.shape().str());
  }
  Tensor y(Shape{xs.n, ws.n, 1, 1});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t k = 0; k < ws.n; ++k) {
      double acc = bias[k];
      const double* xrow = x.data() + n * xs.c;
      const double* wrow = weight.data() + k * xs.c;
      for (std::size_t f = 0; f < xs.c; ++f) acc += wrow[f] * xrow[f];
      y[n * ws.n + k] = acc;
    }
  return {std::move(y), DenseCache{x}};
}

DenseGrads dense_backward(const Tensor& dy, const DenseCache& cache, const Tensor& weight) {
  const Shape& xs = cache.x.shape();
  const Shape& ws = weight.shape();
  if (dy.shape() != Shape{xs.n, ws.n, 1, 1}) {
    throw std::invalid_argument("dense_backward: dy shape " + dy.shape().str() +
                                " does not match output " + Shape{xs.n, ws.n, 1, 1}.str());
  }
  DenseGrads out;
  out.dx = Tensor(xs);
  out.dweight = Tensor(ws);
  out.dbias = Tensor(Shape{1, ws.n, 1, 1});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t k = 0; k < ws.n; ++k) {
      const double g = dy[n * ws.n + k];
      out.dbias[k] += g;
      const double* xrow = cache.x.data() + n * xs.c;
      const double* wrow = weight.data() + k * xs.c;
      double* dxrow = out.dx.data() + n * xs.c;
      double* dwrow = out.dweight.data() + k * xs.c;
      for (std::size_t f = 0; f < xs.c; ++f) {
        dxrow[f] += g * wrow[f];
        dwrow[f] += g * xrow[f];
      }
    }
  return out;
}

CrossEntropyResult cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.empty()) throw std::invalid_argument("cross_entropy: empty logits");
  const Shape& s = logits.shape();
  if (s.h != 1 || s.w != 1) {
    throw std::invalid_argument("cross_entropy: logits must be (N,K,1,1), got " + s.str());
  }
  if (labels.size() != s.n) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(s.n));
  }
  if (!logits.all_finite()) throw std::domain_error("cross_entropy: non-finite logits");
  for (std::size_t n = 0; n < s.n; ++n) {
    if (labels[n] >= s.c) {
      throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[n]) +
                                  " at sample " + std::to_string(n) + " out of range [0," +
                                  std::to_string(s.c) + ")");
    }
  }
  CrossEntropyResult out;
  out.dlogits = Tensor(s);
  const double inv_n = 1.0 / static_cast<double>(s.n);
  double loss = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    const double* z = logits.data() + n * s.c;
    double m = z[0];
    for (std::size_t k = 1; k < s.c; ++k) m = std::max(m, z[k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < s.c; ++k) sum += std::exp(z[k] - m);
    const double lse = std::log(sum);
    loss += lse - (z[labels[n]] - m);
    double* d = out.dlogits.data() + n * s.c;
    for (std::size_t k = 0; k < s.c; ++k) {
      d[k] = (std::exp(z[k] - m - lse) - (k == labels[n] ? 1.0 : 0.0)) * inv_n;
    }
  }
  out.loss = loss * inv_n;
  return out;
}

// --- layers --------------------------------------------------------------

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, NormMode mode) = 0;
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual void register_into(ParamRegistry& reg) { (void)reg; }
};

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  return random_normal(shape, rng, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

class ConvLayer : public Layer {
 public:
  ConvLayer(std::string name, std::size_t in_c, std::size_t out_c, std::size_t k,
            std::size_t stride, std::size_t pad, bool bias, bool weight_norm, Rng& rng)
      : name_(std::move(name)), stride_(stride), pad_(pad), weight_norm_(weight_norm) {
    const std::size_t fan_in = in_c * k * k;
    Tensor w = he_normal(Shape{out_c, in_c, k, k}, fan_in, rng);
    if (weight_norm_) {
      wn_.v = std::move(w);
      wn_.g = Tensor(Shape{out_c, 1, 1, 1});
      for (std::size_t o = 0; o < out_c; ++o) {
        double acc = 0.0;
        const double* p = wn_.v.data() + o * fan_in;
        for (std::size_t i = 0; i < fan_in; ++i) acc += p[i] * p[i];
        wn_.g[o] = std::sqrt(acc);  // initial materialized weight equals v
      }
      dv_ = Tensor(wn_.v.shape());
      dg_ = Tensor(wn_.g.shape());
    } else {
      weight_ = std::move(w);
      dweight_ = Tensor(weight_.shape());
    }
    if (bias) {
      bias_ = Tensor(Shape{out_c, 1, 1, 1});
      dbias_ = Tensor(bias_->shape());
    }
  }

  Tensor forward(const Tensor& x, NormMode mode) override {
    (void)mode;
    const Tensor w = weight_norm_ ? wn_materialize(wn_) : weight_;
    auto [y, cache] = conv2d_forward(x, w, bias_ ? &*bias_ : nullptr, stride_, pad_);
    cache_ = std::move(cache);
    return std::move(y);
  }

  Tensor backward(const Tensor& dy) override {
    ConvGrads g = conv2d_backward(dy, cache_);
    if (weight_norm_) {
      WeightNormGrads wg = wn_backward(g.dweight, wn_);
      for (std::size_t i = 0; i < dv_.size(); ++i) dv_[i] += wg.dv[i];
      for (std::size_t i = 0; i < dg_.size(); ++i) dg_[i] += wg.dg[i];
    } else {
      for (std::size_t i = 0; i < dweight_.size(); ++i) dweight_[i] += g.dweight[i];
    }
    if (bias_) {
      for (std::size_t i = 0; i < dbias_.size(); ++i) dbias_[i] += g.dbias[i];
    }
    return std::move(g.dx);
  }

  void register_into(ParamRegistry& reg) override {
    if (weight_norm_) {
      reg.add(name_ + ".v", &wn_.v, &dv_);
      reg.add(name_ + ".g", &wn_.g, &dg_);
    } else {
      reg.add(name_ + ".weight", &weight_, &dweight_);
    }
    if (bias_) reg.add(name_ + ".bias", &*bias_, &dbias_);
  }

 private:
  std::string name_;
  std::size_t stride_, pad_;
  bool weight_norm_;
  Tensor weight_, dweight_;
  WeightNormParams wn_;
  Tensor dv_, dg_;
  std::optional<Tensor> bias_;
  Tensor dbias_;
  ConvCache cache_;
};

class NormLayer : public Layer {
 public:
  NormLayer(std::string name, std::size_t channels, const NormSettings& s)
      : name_(std::move(name)), settings_(s), channels_(channels) {
    if (s.kind == NormKind::SwitchNorm) {
      sn_ = SwitchNormParams::init(channels);
      dmean_logits_ = Tensor(sn_.mean_logits.shape());
      dvar_logits_ = Tensor(sn_.var_logits.shape());
      dgamma_ = Tensor(sn_.affine.gamma.shape());
      dbeta_ = Tensor(sn_.affine.beta.shape());
    } else {
      affine_ = AffineParams::identity(channels);
      dgamma_ = Tensor(affine_.gamma.shape());
      dbeta_ = Tensor(affine_.beta.shape());
    }
    if (s.kind == NormKind::BatchNorm || s.kind == NormKind::SwitchNorm) {
      bn_state_ = BatchNormState::init(channels, s.momentum);
    }
  }

  Tensor forward(const Tensor& x, NormMode mode) override {
    switch (settings_.kind) {
      case NormKind::BatchNorm: {
        auto [y, cache] = bn_forward(x, affine_, bn_state_, settings_.eps, mode);
        cache_ = std::move(cache);
        return std::move(y);
      }
      case NormKind::LayerNorm: {
        auto [y, cache] = ln_forward(x, affine_, settings_.eps);
        cache_ = std::move(cache);
        return std::move(y);
      }
      case NormKind::InstanceNorm: {
        auto [y, cache] = in_forward(x, affine_, settings_.eps);
        cache_ = std::move(cache);
        return std::move(y);
      }
      case NormKind::GroupNorm: {
        auto [y, cache] =
            gn_forward(x, affine_, GroupNormConfig{settings_.groups, settings_.eps}, mode);
        cache_ = std::move(cache);
        return std::move(y);
      }
      case NormKind::SwitchNorm: {
        auto [y, cache] = sn_forward(x, sn_, bn_state_, settings_.eps, mode);
        sn_cache_ = std::move(cache);
        return std::move(y);
      }
      case NormKind::WeightNorm: break;
    }
    throw StateError("NormLayer: weight norm is not an activation norm");
  }

  Tensor backward(const Tensor& dy) override {
    if (settings_.kind == NormKind::SwitchNorm) {
      SwitchNormGrads g = sn_backward(dy, sn_cache_, sn_);
      accumulate(dgamma_, g.dgamma);
      accumulate(dbeta_, g.dbeta);
      accumulate(dmean_logits_, g.dmean_logits);
      accumulate(dvar_logits_, g.dvar_logits);
      return std::move(g.dx);
    }
    NormGrads g = window_grads(dy);
    accumulate(dgamma_, g.dgamma);
    accumulate(dbeta_, g.dbeta);
    return std::move(g.dx);
  }

  void register_into(ParamRegistry& reg) override {
    if (settings_.kind == NormKind::SwitchNorm) {
      reg.add(name_ + ".gamma", &sn_.affine.gamma, &dgamma_);
      reg.add(name_ + ".beta", &sn_.affine.beta, &dbeta_);
      reg.add(name_ + ".mean_logits", &sn_.mean_logits, &dmean_logits_);
      reg.add(name_ + ".var_logits", &sn_.var_logits, &dvar_logits_);
    } else {
      reg.add(name_ + ".gamma", &affine_.gamma, &dgamma_);
      reg.add(name_ + ".beta", &affine_.beta, &dbeta_);
    }
    if (settings_.kind == NormKind::BatchNorm || settings_.kind == NormKind::SwitchNorm) {
      reg.add_state(name_ + ".running_mean", &bn_state_.running_mean);
      reg.add_state(name_ + ".running_var", &bn_state_.running_var);
      reg.add_counter(name_ + ".trained_steps", &bn_state_.trained_steps);
    }
  }

 private:
  static void accumulate(Tensor& into, const Tensor& from) {
    for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
  }

  NormGrads window_grads(const Tensor& dy) {
    switch (settings_.kind) {
      case NormKind::BatchNorm: return bn_backward(dy, cache_, affine_);
      case NormKind::LayerNorm: return ln_backward(dy, cache_, affine_);
      case NormKind::InstanceNorm: return in_backward(dy, cache_, affine_);
      default: return gn_backward(dy, cache_, affine_);
    }
  }

  std::string name_;
  NormSettings settings_;
  std::size_t channels_;
  AffineParams affine_;
  Tensor dgamma_, dbeta_;
  BatchNormState bn_state_;
  SwitchNormParams sn_;
  Tensor dmean_logits_, dvar_logits_;
  NormCache cache_;
  SwitchNormCache sn_cache_;
};

class ReluLayer : public Layer {
 public:
  Tensor forward(const Tensor& x, NormMode) override {
    auto [y, mask] = relu_forward(x);
    mask_ = std::move(mask);
    return std::move(y);
  }
  Tensor backward(const Tensor& dy) override { return relu_backward(dy, mask_); }

 private:
  Tensor mask_;
};

class MaxPoolLayer : public Layer {
 public:
  MaxPoolLayer(std::size_t window, std::size_t stride) : window_(window), stride_(stride) {}
  Tensor forward(const Tensor& x, NormMode) override {
    auto [y, cache] = maxpool_forward(x, window_, stride_);
    cache_ = std::move(cache);
    return std::move(y);
  }
  Tensor backward(const Tensor& dy) override { return maxpool_backward(dy, cache_); }

 private:
  std::size_t window_, stride_;
  MaxPoolCache cache_;
};

class GapLayer : public Layer {
 public:
  Tensor forward(const Tensor& x, NormMode) override {
    auto [y, shape] = global_avgpool_forward(x);
    in_shape_ = shape;
    return std::move(y);
  }
  Tensor backward(const Tensor& dy) override { return global_avgpool_backward(dy, in_shape_); }

 private:
  Shape in_shape_;
};

class DenseLayer : public Layer {
 public:
  DenseLayer(std::string name, std::size_t in_f, std::size_t out_f, Rng& rng)
      : name_(std::move(name)),
        weight_(he_normal(Shape{out_f, in_f, 1, 1}, in_f, rng)),
        dweight_(Shape{out_f, in_f, 1, 1}),
        bias_(Shape{1, out_f, 1, 1}),
        dbias_(Shape{1, out_f, 1, 1}) {}

  Tensor forward(const Tensor& x, NormMode) override {
    auto [y, cache] = dense_forward(x, weight_, bias_);
    cache_ = std::move(cache);
    return std::move(y);
  }

  Tensor backward(const Tensor& dy) override {
    DenseGrads g = dense_backward(dy, cache_, weight_);
    for (std::size_t i = 0; i < dweight_.size(); ++i) dweight_[i] += g.dweight[i];
    for (std::size_t i = 0; i < dbias_.size(); ++i) dbias_[i] += g.dbias[i];
    return std::move(g.dx);
  }

  void register_into(ParamRegistry& reg) override {
    reg.add(name_ + ".weight", &weight_, &dweight_);
    reg.add(name_ + ".bias", &bias_, &dbias_);
  }

 private:
  std::string name_;
  Tensor weight_, dweight_;
  Tensor bias_, dbias_;
  DenseCache cache_;
};

// Basic: conv3x3 -> norm -> relu -> conv3x3 -> norm, plus skip, then relu.
// Bottleneck: conv1x1 -> norm -> relu -> conv3x3 -> norm -> relu -> conv1x1
// -> norm, plus skip, then relu. Shape changes project the skip with a
// norm-wrapped 1x1 conv. Weight norm replaces the activation norms with
// reparameterized, biased convs.
class ResidualBlock : public Layer {
 public:
  ResidualBlock(const std::string& prefix, std::size_t in_c, std::size_t out_c,
                std::size_t stride, BlockStyle style, const NormSettings& norm, Rng& rng) {
    const bool wn = norm.kind == NormKind::WeightNorm;
    const bool bias = wn;
    if (style == BlockStyle::Basic) {
      conv1_ = std::make_unique<ConvLayer>(prefix + ".conv1", in_c, out_c, 3, stride, 1, bias, wn,
                                           rng);
      if (!wn) norm1_ = std::make_unique<NormLayer>(prefix + ".norm1", out_c, norm);
      conv2_ = std::make_unique<ConvLayer>(prefix + ".conv2", out_c, out_c, 3, 1, 1, bias, wn,
                                           rng);
      if (!wn) norm2_ = std::make_unique<NormLayer>(prefix + ".norm2", out_c, norm);
    } else {
      const std::size_t mid = std::max<std::size_t>(1, out_c / 2);
      conv1_ = std::make_unique<ConvLayer>(prefix + ".conv1", in_c, mid, 1, 1, 0, bias, wn, rng);
      if (!wn) norm1_ = std::make_unique<NormLayer>(prefix + ".norm1", mid, norm);
      conv2_ = std::make_unique<ConvLayer>(prefix + ".conv2", mid, mid, 3, stride, 1, bias, wn,
                                           rng);
      if (!wn) norm2_ = std::make_unique<NormLayer>(prefix + ".norm2", mid, norm);
      conv3_ = std::make_unique<ConvLayer>(prefix + ".conv3", mid, out_c, 1, 1, 0, bias, wn, rng);
      if (!wn) norm3_ = std::make_unique<NormLayer>(prefix + ".norm3", out_c, norm);
    }
    if (stride != 1 || in_c != out_c) {
      proj_ = std::make_unique<ConvLayer>(prefix + ".proj", in_c, out_c, 1, stride, 0, bias, wn,
                                          rng);
      if (!wn) proj_norm_ = std::make_unique<NormLayer>(prefix + ".proj_norm", out_c, norm);
    }
  }

  Tensor forward(const Tensor& x, NormMode mode) override {
    Tensor skip = x;
    if (proj_) {
      skip = proj_->forward(x, mode);
      if (proj_norm_) skip = proj_norm_->forward(skip, mode);
    }
    Tensor h = conv1_->forward(x, mode);
    if (norm1_) h = norm1_->forward(h, mode);
    {
      auto [y, mask] = relu_forward(h);
      h = std::move(y);
      mask1_ = std::move(mask);
    }
    h = conv2_->forward(h, mode);
    if (norm2_) h = norm2_->forward(h, mode);
    if (conv3_) {
      auto [y, mask] = relu_forward(h);
      h = std::move(y);
      mask2_ = std::move(mask);
      h = conv3_->forward(h, mode);
      if (norm3_) h = norm3_->forward(h, mode);
    }
    Tensor out = add(h, skip);
    auto [y, mask] = relu_forward(out);
    mask_out_ = std::move(mask);
    return std::move(y);
  }

  Tensor backward(const Tensor& dy) override {
    Tensor d = relu_backward(dy, mask_out_);
    Tensor dmain = d;
    if (conv3_) {
      if (norm3_) dmain = norm3_->backward(dmain);
      dmain = conv3_->backward(dmain);
      dmain = relu_backward(dmain, mask2_);
    }
    if (norm2_) dmain = norm2_->backward(dmain);
    dmain = conv2_->backward(dmain);
    dmain = relu_backward(dmain, mask1_);
    if (norm1_) dmain = norm1_->backward(dmain);
    dmain = conv1_->backward(dmain);
    Tensor dskip = std::move(d);
    if (proj_) {
      if (proj_norm_) dskip = proj_norm_->backward(dskip);
      dskip = proj_->backward(dskip);
    }
    return add(dmain, dskip);
  }

  void register_into(ParamRegistry& reg) override {
    conv1_->register_into(reg);
    if (norm1_) norm1_->register_into(reg);
    conv2_->register_into(reg);
    if (norm2_) norm2_->register_into(reg);
    if (conv3_) conv3_->register_into(reg);
    if (norm3_) norm3_->register_into(reg);
    if (proj_) proj_->register_into(reg);
    if (proj_norm_) proj_norm_->register_into(reg);
  }

 private:
  std::unique_ptr<ConvLayer> conv1_, conv2_, conv3_, proj_;
  std::unique_ptr<NormLayer> norm1_, norm2_, norm3_, proj_norm_;
  Tensor mask1_, mask2_, mask_out_;
};

void check_gn_divisibility(const ModelConfig& cfg) {
  if (cfg.norm.kind != NormKind::GroupNorm) return;
  const std::size_t g = cfg.norm.groups;
  if (g == 0) throw std::invalid_argument("build_model: group count must be >= 1");
  auto check = [g](std::size_t width, const std::string& where) {
    if (width % g != 0) {
      throw std::invalid_argument("build_model: " + where + " width " + std::to_string(width) +
                                  " not divisible by group count " + std::to_string(g));
    }
  };
  for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
    const std::size_t width = cfg.stage_widths[s];
    check(width, "stage " + std::to_string(s));
    if (cfg.block_style == BlockStyle::Bottleneck) {
      check(std::max<std::size_t>(1, width / 2), "stage " + std::to_string(s) + " bottleneck");
    }
  }
  check(cfg.stage_widths.front(), "stem");
}

}  // namespace

// --- model -----------------------------------------------------------

void validate_model_config(const ModelConfig& cfg) {
  if (cfg.stage_widths.empty()) throw std::invalid_argument("build_model: no stage widths");
  for (std::size_t w : cfg.stage_widths) {
    if (w == 0) throw std::invalid_argument("build_model: zero stage width");
  }
  if (cfg.blocks_per_stage == 0) throw std::invalid_argument("build_model: zero blocks per stage");
  if (cfg.classes < 2) throw std::invalid_argument("build_model: need at least 2 classes");
  if (cfg.in_channels == 0) throw std::invalid_argument("build_model: zero input channels");
  if (!std::isfinite(cfg.norm.eps) || cfg.norm.eps < 0.0)
    throw std::invalid_argument("build_model: norm eps must be finite and >= 0");
  check_gn_divisibility(cfg);
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  validate_model_config(cfg_);

  Rng rng(seed);
  const bool wn = cfg_.norm.kind == NormKind::WeightNorm;
  layers_.push_back(std::make_unique<ConvLayer>("stem.conv", cfg_.in_channels,
                                                cfg_.stage_widths[0], 3, 1, 1, wn, wn, rng));
  if (!wn) {
    layers_.push_back(std::make_unique<NormLayer>("stem.norm", cfg_.stage_widths[0], cfg_.norm));
  }
  layers_.push_back(std::make_unique<ReluLayer>());
  if (cfg_.stem_pool) layers_.push_back(std::make_unique<MaxPoolLayer>(3, 2));

  std::size_t in_c = cfg_.stage_widths[0];
  for (std::size_t s = 0; s < cfg_.stage_widths.size(); ++s) {
    const std::size_t width = cfg_.stage_widths[s];
    for (std::size_t b = 0; b < cfg_.blocks_per_stage; ++b) {
      const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      layers_.push_back(std::make_unique<ResidualBlock>(prefix, in_c, width, stride,
                                                        cfg_.block_style, cfg_.norm, rng));
      in_c = width;
    }
  }
  layers_.push_back(std::make_unique<GapLayer>());
  layers_.push_back(std::make_unique<DenseLayer>("head.fc", in_c, cfg_.classes, rng));
  rebuild_registry();
}

Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;
Model::~Model() = default;

void Model::rebuild_registry() {
  registry_ = ParamRegistry{};
  for (auto& layer : layers_) layer->register_into(registry_);
}

Tensor Model::forward(const Tensor& x, NormMode mode) {
  if (x.empty()) throw std::invalid_argument("model forward: empty input");
  if (x.shape().c != cfg_.in_channels) {
    throw std::invalid_argument("model forward: input has " + std::to_string(x.shape().c) +
                                " channels, model expects " + std::to_string(cfg_.in_channels));
  }
  Tensor h = x;
  for (auto& layer : layers_) h = layer->forward(h, mode);
  has_cache_ = true;
  return h;
}

void Model::backward(const Tensor& dlogits) {
  if (!has_cache_) throw StateError("model backward called before forward");
  Tensor d = dlogits;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
  has_cache_ = false;  // caches consumed
}

void Model::zero_grads() {
  for (auto& entry : registry_.trainable) {
    std::fill(entry.grad->values().begin(), entry.grad->values().end(), 0.0);
  }
}

std::size_t Model::param_count() const {
  std::size_t total = 0;
  for (const auto& entry : registry_.trainable) total += entry.param->size();
  return total;
}

Model build_model(const ModelConfig& cfg, std::uint64_t seed) { return Model(cfg, seed); }

// --- checkpointing -----------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, end);
}

double parse_double_field(const std::string& text, const std::string& field) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw FormatError("checkpoint manifest: bad " + field + " value '" + text + "'");
  }
  return v;
}

std::size_t parse_size_field(const std::string& text, const std::string& field) {
  std::size_t v = 0;
  auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw FormatError("checkpoint manifest: bad " + field + " value '" + text + "'");
  }
  return v;
}

}  // namespace

void Model::save_checkpoint(const std::filesystem::path& dir) const {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": cannot create checkpoint directory");
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError((dir / "manifest.txt").string() + ": cannot open for writing");

  manifest << "normkit-checkpoint v1\n";
  manifest << "norm " << to_string(cfg_.norm.kind) << "\n";
  manifest << "groups " << cfg_.norm.groups << "\n";
  manifest << "eps " << format_double(cfg_.norm.eps) << "\n";
  manifest << "momentum " << format_double(cfg_.norm.momentum) << "\n";
  manifest << "widths";
  for (std::size_t i = 0; i < cfg_.stage_widths.size(); ++i) {
    manifest << (i == 0 ? " " : ",") << cfg_.stage_widths[i];
  }
  manifest << "\n";
  manifest << "blocks_per_stage " << cfg_.blocks_per_stage << "\n";
  manifest << "block_style " << (cfg_.block_style == BlockStyle::Basic ? "basic" : "bottleneck")
           << "\n";
  manifest << "classes " << cfg_.classes << "\n";
  manifest << "in_channels " << cfg_.in_channels << "\n";
  manifest << "stem_pool " << (cfg_.stem_pool ? 1 : 0) << "\n";
  for (const auto& entry : registry_.trainable) {
    manifest << "param " << entry.name << " " << entry.name << ".nkt\n";
    write_tensor(*entry.param, dir / (entry.name + ".nkt"));
  }
  for (const auto& entry : registry_.state) {
    manifest << "state " << entry.name << " " << entry.name << ".nkt\n";
    write_tensor(*entry.tensor, dir / (entry.name + ".nkt"));
  }
  for (const auto& [name, value] : registry_.counters) {
    manifest << "counter " << name << " " << *value << "\n";
  }
  if (!manifest) throw IoError((dir / "manifest.txt").string() + ": write failed");
}

Model Model::load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError((dir / "manifest.txt").string() + ": cannot open for reading");
  std::string line;
  if (!std::getline(manifest, line) || line != "normkit-checkpoint v1") {
    throw FormatError((dir / "manifest.txt").string() + ": not a normkit checkpoint manifest");
  }

  ModelConfig cfg;
  struct FileEntry {
    bool is_state;
    std::string name, file;
  };
  std::vector<FileEntry> files;
  std::vector<std::pair<std::string, std::size_t>> counters;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    std::string rest;
    if (key == "norm") {
      fields >> rest;
      cfg.norm.kind = norm_kind_from_string(rest);
    } else if (key == "groups") {
      fields >> rest;
      cfg.norm.groups = parse_size_field(rest, "groups");
    } else if (key == "eps") {
      fields >> rest;
      cfg.norm.eps = parse_double_field(rest, "eps");
    } else if (key == "momentum") {
      fields >> rest;
      cfg.norm.momentum = parse_double_field(rest, "momentum");
    } else if (key == "widths") {
      fields >> rest;
      cfg.stage_widths.clear();
      std::size_t pos = 0;
      while (pos <= rest.size()) {
        const std::size_t comma = rest.find(',', pos);
        const std::string item = rest.substr(pos, comma == std::string::npos ? comma : comma - pos);
        cfg.stage_widths.push_back(parse_size_field(item, "widths"));
        if (comma == std::string::npos) break;
        pos = comma + 1;
      }
    } else if (key == "blocks_per_stage") {
      fields >> rest;
      cfg.blocks_per_stage = parse_size_field(rest, "blocks_per_stage");
    } else if (key == "block_style") {
      fields >> rest;
      if (rest == "basic") {
        cfg.block_style = BlockStyle::Basic;
      } else if (rest == "bottleneck") {
        cfg.block_style = BlockStyle::Bottleneck;
      } else {
        throw FormatError("checkpoint manifest: unknown block_style '" + rest + "'");
      }
    } else if (key == "classes") {
      fields >> rest;
      cfg.classes = parse_size_field(rest, "classes");
    } else if (key == "in_channels") {
      fields >> rest;
      cfg.in_channels = parse_size_field(rest, "in_channels");
    } else if (key == "stem_pool") {
      fields >> rest;
      cfg.stem_pool = parse_size_field(rest, "stem_pool") != 0;
    } else if (key == "param" || key == "state") {
      FileEntry e;
      e.is_state = key == "state";
      fields >> e.name >> e.file;
      if (e.name.empty() || e.file.empty()) {
        throw FormatError("checkpoint manifest: malformed line '" + line + "'");
      }
      files.push_back(std::move(e));
    } else if (key == "counter") {
      std::string name, value;
      fields >> name >> value;
      counters.emplace_back(name, parse_size_field(value, "counter"));
    } else {
      throw FormatError("checkpoint manifest: unknown key '" + key + "'");
    }
  }

  Model model(cfg, 0);
  std::map<std::string, Tensor*> slots;
  for (auto& entry : model.registry_.trainable) slots[entry.name] = entry.param;
  for (auto& entry : model.registry_.state) slots[entry.name] = entry.tensor;
  std::size_t filled = 0;
  for (const auto& e : files) {
    auto it = slots.find(e.name);
    if (it == slots.end()) {
      throw FormatError("checkpoint manifest: tensor '" + e.name +
                        "' does not exist in the rebuilt model");
    }
    Tensor loaded = read_tensor(dir / e.file);
    if (loaded.shape() != it->second->shape()) {
      throw FormatError("checkpoint: tensor '" + e.name + "' has shape " + loaded.shape().str() +
                        ", model expects " + it->second->shape().str());
    }
    *it->second = std::move(loaded);
    ++filled;
  }
  if (filled != slots.size()) {
    throw FormatError("checkpoint: manifest lists " + std::to_string(filled) + " tensors, model has " +
                      std::to_string(slots.size()));
  }
  for (const auto& [name, value] : counters) {
    bool found = false;
    for (auto& [cname, ptr] : model.registry_.counters) {
      if (cname == name) {
        *ptr = value;
        found = true;
      }
    }
    if (!found) throw FormatError("checkpoint manifest: unknown counter '" + name + "'");
  }
  return model;
}

}  // namespace normkit
