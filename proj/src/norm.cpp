#include "normkit/norm.hpp"

#include <cmath>
#include <string>

namespace normkit {

namespace {

// Geometry of the statistic windows tiling an input. Every window-based
// layer (BN/LN/IN/GN) is this plan plus the shared kernels below, which is
// what makes GN(G=1) == LN and GN(G=C) == IN exact rather than approximate.
struct WindowPlan {
  WindowKind kind;
  std::size_t windows;  // number of windows
  std::size_t elems;    // elements per window
  std::size_t groups;   // PerSampleGroup only
  std::size_t cpg;      // channels per group, PerSampleGroup only
};

WindowPlan plan_sample_group(const Shape& s, std::size_t groups) {
  const GroupedShape g = regroup(s, groups);  // validates divisibility
  return {WindowKind::PerSampleGroup, s.n * groups, g.channels_per_group * s.h * s.w, groups,
          g.channels_per_group};
}

WindowPlan plan_per_channel(const Shape& s) {
  return {WindowKind::PerChannel, s.c, s.n * s.h * s.w, 0, 0};
}

std::size_t window_of(const WindowPlan& p, std::size_t n, std::size_t c) {
  return p.kind == WindowKind::PerChannel ? c : n * p.groups + c / p.cpg;
}

WindowPlan plan_from_cache(const NormCache& cache) {
  return cache.kind == WindowKind::PerChannel
             ? plan_per_channel(cache.input_shape)
             : plan_sample_group(cache.input_shape, cache.groups);
}

void check_input(const Tensor& x, const char* who) {
  if (x.empty()) throw std::invalid_argument(std::string(who) + ": empty input");
}

void check_eps(double eps, const char* who) {
  if (!(eps >= 0.0) || !std::isfinite(eps)) {
    throw std::invalid_argument(std::string(who) + ": eps must be finite and >= 0, got " +
                                std::to_string(eps));
  }
}

void check_affine(const AffineParams& a, std::size_t channels, const char* who) {
  const Shape want{1, channels, 1, 1};
  if (a.gamma.shape() != want || a.beta.shape() != want) {
    throw std::invalid_argument(std::string(who) + ": affine params must be " + want.str() +
                                ", got gamma " + a.gamma.shape().str() + " beta " +
                                a.beta.shape().str());
  }
  if (!a.gamma.all_finite() || !a.beta.all_finite()) {
    throw std::invalid_argument(std::string(who) + ": affine params must be finite");
  }
}

void check_finite(const Tensor& x, const char* who) {
  if (!x.all_finite()) throw std::domain_error(std::string(who) + ": non-finite input");
}

// Per-window mean and biased variance, accumulated in flat index order so
// repeated runs sum in exactly the same sequence.
void window_stats(const Tensor& x, const WindowPlan& p, std::vector<double>& mean,
                  std::vector<double>& var) {
  const Shape& s = x.shape();
  const std::size_t hw = s.h * s.w;
  const double* xd = x.data();
  mean.assign(p.windows, 0.0);
  var.assign(p.windows, 0.0);
  std::size_t flat = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      double& acc = mean[window_of(p, n, c)];
      for (std::size_t i = 0; i < hw; ++i) acc += xd[flat++];
    }
  const double inv = 1.0 / static_cast<double>(p.elems);
  for (double& m : mean) m *= inv;
  flat = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t wid = window_of(p, n, c);
      const double m = mean[wid];
      double& acc = var[wid];
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = xd[flat++] - m;
        acc += d * d;
      }
    }
  for (double& v : var) v *= inv;
}

// Normalize with the given per-window statistics and apply the affine.
std::pair<Tensor, NormCache> window_apply(const Tensor& x, const AffineParams& a,
                                          const WindowPlan& p, std::vector<double> mean,
                                          std::vector<double> sigma, bool from_running) {
  const Shape& s = x.shape();
  const std::size_t hw = s.h * s.w;
  const double* xd = x.data();
  Tensor x_hat(s);
  Tensor y(s);
  double* hd = x_hat.data();
  double* yd = y.data();
  std::size_t flat = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t wid = window_of(p, n, c);
      const double m = mean[wid];
      const double inv_sigma = 1.0 / sigma[wid];
      const double g = a.gamma[c];
      const double b = a.beta[c];
      for (std::size_t i = 0; i < hw; ++i, ++flat) {
        const double xh = (xd[flat] - m) * inv_sigma;
        hd[flat] = xh;
        yd[flat] = g * xh + b;
      }
    }
  NormCache cache;
  cache.kind = p.kind;
  cache.groups = p.kind == WindowKind::PerSampleGroup ? p.groups : 1;
  cache.input_shape = s;
  cache.x_hat = std::move(x_hat);
  cache.mean = std::move(mean);
  cache.sigma = std::move(sigma);
  cache.stats_from_running = from_running;
  return {std::move(y), std::move(cache)};
}

std::pair<Tensor, NormCache> window_forward(const Tensor& x, const AffineParams& a,
                                            const WindowPlan& p, double eps) {
  std::vector<double> mean, var;
  window_stats(x, p, mean, var);
  std::vector<double> sigma(var.size());
  for (std::size_t i = 0; i < var.size(); ++i) sigma[i] = std::sqrt(var[i] + eps);
  return window_apply(x, a, p, std::move(mean), std::move(sigma), false);
}

// Shared backward for every window-based layer. With batch statistics the
// gradient goes through mean and variance as well:
//   dx = (dxhat - mean_w(dxhat) - xhat * mean_w(dxhat * xhat)) / sigma
// With frozen (running) statistics both window terms vanish.
NormGrads window_backward(const Tensor& dy, const NormCache& cache, const AffineParams& a,
                          const char* who) {
  if (dy.shape() != cache.input_shape) {
    throw std::invalid_argument(std::string(who) + ": dy shape " + dy.shape().str() +
                                " does not match forward shape " + cache.input_shape.str());
  }
  check_affine(a, cache.input_shape.c, who);
  const WindowPlan p = plan_from_cache(cache);
  const Shape& s = cache.input_shape;
  const std::size_t hw = s.h * s.w;
  const double* dyd = dy.data();
  const double* hd = cache.x_hat.data();

  NormGrads out;
  out.dgamma = Tensor(Shape{1, s.c, 1, 1});
  out.dbeta = Tensor(Shape{1, s.c, 1, 1});
  out.dx = Tensor(s);
  std::size_t flat = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      double dg = 0.0, db = 0.0;
      for (std::size_t i = 0; i < hw; ++i, ++flat) {
        dg += dyd[flat] * hd[flat];
        db += dyd[flat];
      }
      out.dgamma[c] += dg;
      out.dbeta[c] += db;
    }

  double* dxd = out.dx.data();
  if (cache.stats_from_running) {
    flat = 0;
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t c = 0; c < s.c; ++c) {
        const double scale = a.gamma[c] / cache.sigma[window_of(p, n, c)];
        for (std::size_t i = 0; i < hw; ++i, ++flat) dxd[flat] = dyd[flat] * scale;
      }
    return out;
  }

  std::vector<double> s1(p.windows, 0.0);  // sum of dxhat
  std::vector<double> s2(p.windows, 0.0);  // sum of dxhat * xhat
  flat = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t wid = window_of(p, n, c);
      const double g = a.gamma[c];
      double a1 = 0.0, a2 = 0.0;
      for (std::size_t i = 0; i < hw; ++i, ++flat) {
        const double dxh = dyd[flat] * g;
        a1 += dxh;
        a2 += dxh * hd[flat];
      }
      s1[wid] += a1;
      s2[wid] += a2;
    }
  const double inv_m = 1.0 / static_cast<double>(p.elems);
  flat = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t wid = window_of(p, n, c);
      const double g = a.gamma[c];
      const double inv_sigma = 1.0 / cache.sigma[wid];
      const double mean_s1 = s1[wid] * inv_m;
      const double mean_s2 = s2[wid] * inv_m;
      for (std::size_t i = 0; i < hw; ++i, ++flat) {
        const double dxh = dyd[flat] * g;
        dxd[flat] = (dxh - mean_s1 - hd[flat] * mean_s2) * inv_sigma;
      }
    }
  return out;
}

}  // namespace

AffineParams AffineParams::identity(std::size_t channels) {
  return AffineParams{Tensor(Shape{1, channels, 1, 1}, 1.0), Tensor(Shape{1, channels, 1, 1})};
}

BatchNormState BatchNormState::init(std::size_t channels, double momentum) {
  if (!(momentum > 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("BatchNormState: momentum must be in (0,1), got " +
                                std::to_string(momentum));
  }
  BatchNormState st;
  st.running_mean = Tensor(Shape{1, channels, 1, 1});
  st.running_var = Tensor(Shape{1, channels, 1, 1}, 1.0);
  st.momentum = momentum;
  return st;
}

SwitchNormParams SwitchNormParams::init(std::size_t channels) {
  SwitchNormParams p;
  p.mean_logits = Tensor(Shape{1, 1, 1, 3});
  p.var_logits = Tensor(Shape{1, 1, 1, 3});
  p.affine = AffineParams::identity(channels);
  return p;
}

std::pair<Tensor, NormCache> gn_forward(const Tensor& x, const AffineParams& affine,
                                        const GroupNormConfig& cfg, NormMode mode) {
  (void)mode;  // group norm keeps no state; train and infer coincide
  check_input(x, "gn_forward");
  const WindowPlan p = plan_sample_group(x.shape(), cfg.groups);
  check_eps(cfg.eps, "gn_forward");
  check_affine(affine, x.shape().c, "gn_forward");
  check_finite(x, "gn_forward");
  return window_forward(x, affine, p, cfg.eps);
}

NormGrads gn_backward(const Tensor& dy, const NormCache& cache, const AffineParams& affine) {
  return window_backward(dy, cache, affine, "gn_backward");
}

std::pair<Tensor, NormCache> ln_forward(const Tensor& x, const AffineParams& affine, double eps) {
  check_input(x, "ln_forward");
  check_eps(eps, "ln_forward");
  check_affine(affine, x.shape().c, "ln_forward");
  check_finite(x, "ln_forward");
  return window_forward(x, affine, plan_sample_group(x.shape(), 1), eps);
}

NormGrads ln_backward(const Tensor& dy, const NormCache& cache, const AffineParams& affine) {
  return window_backward(dy, cache, affine, "ln_backward");
}

std::pair<Tensor, NormCache> in_forward(const Tensor& x, const AffineParams& affine, double eps) {
  check_input(x, "in_forward");
  check_eps(eps, "in_forward");
  check_affine(affine, x.shape().c, "in_forward");
  check_finite(x, "in_forward");
  return window_forward(x, affine, plan_sample_group(x.shape(), x.shape().c), eps);
}

NormGrads in_backward(const Tensor& dy, const NormCache& cache, const AffineParams& affine) {
  return window_backward(dy, cache, affine, "in_backward");
}

namespace {

void check_bn_state(const BatchNormState& state, std::size_t channels, const char* who) {
  const Shape want{1, channels, 1, 1};
  if (state.running_mean.shape() != want || state.running_var.shape() != want) {
    throw std::invalid_argument(std::string(who) + ": running stats must be " + want.str() +
                                ", got mean " + state.running_mean.shape().str() + " var " +
                                state.running_var.shape().str());
  }
  if (!(state.momentum > 0.0 && state.momentum < 1.0)) {
    throw std::invalid_argument(std::string(who) + ": momentum must be in (0,1), got " +
                                std::to_string(state.momentum));
  }
}

}  // namespace

std::pair<Tensor, NormCache> bn_forward(const Tensor& x, const AffineParams& affine,
                                        BatchNormState& state, double eps, NormMode mode) {
  check_input(x, "bn_forward");
  check_eps(eps, "bn_forward");
  check_affine(affine, x.shape().c, "bn_forward");
  check_bn_state(state, x.shape().c, "bn_forward");
  const WindowPlan p = plan_per_channel(x.shape());

  if (mode == NormMode::Train) {
    if (p.elems < 2) {
      throw std::invalid_argument(
          "bn_forward: train mode needs at least 2 elements per channel window, got 1");
    }
    std::vector<double> mean, var;
    window_stats(x, p, mean, var);
    std::vector<double> sigma(var.size());
    for (std::size_t i = 0; i < var.size(); ++i) sigma[i] = std::sqrt(var[i] + eps);
    const double m = state.momentum;
    for (std::size_t c = 0; c < x.shape().c; ++c) {
      state.running_mean[c] = m * state.running_mean[c] + (1.0 - m) * mean[c];
      state.running_var[c] = m * state.running_var[c] + (1.0 - m) * var[c];
    }
    state.trained_steps += 1;
    return window_apply(x, affine, p, std::move(mean), std::move(sigma), false);
  }

  std::vector<double> mean(p.windows), sigma(p.windows);
  for (std::size_t c = 0; c < p.windows; ++c) {
    mean[c] = state.running_mean[c];
    sigma[c] = std::sqrt(state.running_var[c] + eps);
  }
  auto [y, cache] = window_apply(x, affine, p, std::move(mean), std::move(sigma), true);
  cache.untrained_stats = state.trained_steps == 0;
  return {std::move(y), std::move(cache)};
}

NormGrads bn_backward(const Tensor& dy, const NormCache& cache, const AffineParams& affine) {
  return window_backward(dy, cache, affine, "bn_backward");
}

namespace {

std::vector<double> unit_norms(const Tensor& v) {
  const std::size_t units = v.shape().n;
  const std::size_t fan_in = v.size() / units;
  std::vector<double> norms(units);
  for (std::size_t o = 0; o < units; ++o) {
    double acc = 0.0;
    const double* p = v.data() + o * fan_in;
    for (std::size_t i = 0; i < fan_in; ++i) acc += p[i] * p[i];
    norms[o] = std::sqrt(acc);
    if (norms[o] == 0.0) {
      throw std::domain_error("weight norm: zero-norm direction for output unit " +
                              std::to_string(o));
    }
  }
  return norms;
}

void check_wn(const WeightNormParams& p, const char* who) {
  if (p.v.empty()) throw std::invalid_argument(std::string(who) + ": empty direction tensor");
  const Shape want{p.v.shape().n, 1, 1, 1};
  if (p.g.shape() != want) {
    throw std::invalid_argument(std::string(who) + ": g must be " + want.str() + ", got " +
                                p.g.shape().str());
  }
}

}  // namespace

Tensor wn_materialize(const WeightNormParams& params) {
  check_wn(params, "wn_materialize");
  const std::vector<double> norms = unit_norms(params.v);
  const std::size_t units = params.v.shape().n;
  const std::size_t fan_in = params.v.size() / units;
  Tensor w(params.v.shape());
  for (std::size_t o = 0; o < units; ++o) {
    const double scale = params.g[o] / norms[o];
    const double* vp = params.v.data() + o * fan_in;
    double* wp = w.data() + o * fan_in;
    for (std::size_t i = 0; i < fan_in; ++i) wp[i] = scale * vp[i];
  }
  return w;
}

WeightNormGrads wn_backward(const Tensor& dw, const WeightNormParams& params) {
  check_wn(params, "wn_backward");
  if (dw.shape() != params.v.shape()) {
    throw std::invalid_argument("wn_backward: dw shape " + dw.shape().str() +
                                " does not match v shape " + params.v.shape().str());
  }
  const std::vector<double> norms = unit_norms(params.v);
  const std::size_t units = params.v.shape().n;
  const std::size_t fan_in = params.v.size() / units;
  WeightNormGrads out;
  out.dv = Tensor(params.v.shape());
  out.dg = Tensor(params.g.shape());
  for (std::size_t o = 0; o < units; ++o) {
    const double norm = norms[o];
    const double* vp = params.v.data() + o * fan_in;
    const double* dp = dw.data() + o * fan_in;
    double* dvp = out.dv.data() + o * fan_in;
    double dot = 0.0;  // dw . v
    for (std::size_t i = 0; i < fan_in; ++i) dot += dp[i] * vp[i];
    out.dg[o] = dot / norm;
    const double scale = params.g[o] / norm;
    const double shrink = dot / (norm * norm);
    for (std::size_t i = 0; i < fan_in; ++i) dvp[i] = scale * (dp[i] - shrink * vp[i]);
  }
  return out;
}

namespace {

// Max-shifted softmax over a 3-vector.
void softmax3(const Tensor& logits, double out[3]) {
  const double m = std::max(logits[0], std::max(logits[1], logits[2]));
  double z = 0.0;
  for (int k = 0; k < 3; ++k) {
    out[k] = std::exp(logits[k] - m);
    z += out[k];
  }
  for (int k = 0; k < 3; ++k) out[k] /= z;
}

void check_sn(const SwitchNormParams& p, std::size_t channels, const char* who) {
  const Shape want{1, 1, 1, 3};
  if (p.mean_logits.shape() != want || p.var_logits.shape() != want) {
    throw std::invalid_argument(std::string(who) + ": logits must be " + want.str() +
                                ", got mean " + p.mean_logits.shape().str() + " var " +
                                p.var_logits.shape().str());
  }
  if (!p.mean_logits.all_finite() || !p.var_logits.all_finite()) {
    throw std::invalid_argument(std::string(who) + ": logits must be finite");
  }
  check_affine(p.affine, channels, who);
}

}  // namespace

std::pair<Tensor, SwitchNormCache> sn_forward(const Tensor& x, const SwitchNormParams& params,
                                              BatchNormState& state, double eps, NormMode mode) {
  check_input(x, "sn_forward");
  check_eps(eps, "sn_forward");
  const Shape& s = x.shape();
  check_sn(params, s.c, "sn_forward");
  check_bn_state(state, s.c, "sn_forward");
  if (mode == NormMode::Train && s.n * s.h * s.w < 2) {
    throw std::invalid_argument(
        "sn_forward: train mode needs at least 2 elements per channel window, got 1");
  }

  SwitchNormCache cache;
  cache.input_shape = s;
  cache.x = x;
  if (mode == NormMode::Train) {
    cache.mean_bn = reduce_mean(x, {Axis::N, Axis::H, Axis::W});
    cache.var_bn = reduce_var(x, {Axis::N, Axis::H, Axis::W}, cache.mean_bn);
  } else {
    cache.mean_bn = state.running_mean;
    cache.var_bn = state.running_var;
    cache.stats_from_running = true;
  }
  cache.mean_in = reduce_mean(x, {Axis::H, Axis::W});
  cache.var_in = reduce_var(x, {Axis::H, Axis::W}, cache.mean_in);
  cache.mean_ln = reduce_mean(x, {Axis::C, Axis::H, Axis::W});
  cache.var_ln = reduce_var(x, {Axis::C, Axis::H, Axis::W}, cache.mean_ln);
  softmax3(params.mean_logits, cache.w_mean);
  softmax3(params.var_logits, cache.w_var);

  const std::size_t hw = s.h * s.w;
  Tensor x_hat(s);
  Tensor sigma2(s);
  Tensor y(s);
  const double* xd = x.data();
  std::size_t flat = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const double mu = cache.w_mean[0] * cache.mean_bn[c] +
                        cache.w_mean[1] * cache.mean_in[n * s.c + c] +
                        cache.w_mean[2] * cache.mean_ln[n];
      const double var = cache.w_var[0] * cache.var_bn[c] +
                         cache.w_var[1] * cache.var_in[n * s.c + c] +
                         cache.w_var[2] * cache.var_ln[n];
      const double s2 = var + eps;
      const double inv_sigma = 1.0 / std::sqrt(s2);
      const double g = params.affine.gamma[c];
      const double b = params.affine.beta[c];
      for (std::size_t i = 0; i < hw; ++i, ++flat) {
        const double xh = (xd[flat] - mu) * inv_sigma;
        x_hat[flat] = xh;
        sigma2[flat] = s2;
        y[flat] = g * xh + b;
      }
    }
  cache.x_hat = std::move(x_hat);
  cache.sigma2 = std::move(sigma2);

  if (mode == NormMode::Train) {
    const double m = state.momentum;
    for (std::size_t c = 0; c < s.c; ++c) {
      state.running_mean[c] = m * state.running_mean[c] + (1.0 - m) * cache.mean_bn[c];
      state.running_var[c] = m * state.running_var[c] + (1.0 - m) * cache.var_bn[c];
    }
    state.trained_steps += 1;
  }
  return {std::move(y), std::move(cache)};
}

SwitchNormGrads sn_backward(const Tensor& dy, const SwitchNormCache& cache,
                            const SwitchNormParams& params) {
  const Shape& s = cache.input_shape;
  if (dy.shape() != s) {
    throw std::invalid_argument("sn_backward: dy shape " + dy.shape().str() +
                                " does not match forward shape " + s.str());
  }
  check_sn(params, s.c, "sn_backward");
  const std::size_t hw = s.h * s.w;
  const double* dyd = dy.data();
  const double* hd = cache.x_hat.data();
  const double* xd = cache.x.data();
  const double m_bn = static_cast<double>(s.n * hw);
  const double m_in = static_cast<double>(hw);
  const double m_ln = static_cast<double>(s.c * hw);

  SwitchNormGrads out;
  out.dx = Tensor(s);
  out.dgamma = Tensor(Shape{1, s.c, 1, 1});
  out.dbeta = Tensor(Shape{1, s.c, 1, 1});
  out.dmean_logits = Tensor(Shape{1, 1, 1, 3});
  out.dvar_logits = Tensor(Shape{1, 1, 1, 3});

  // Window-bucketed sums of the per-element adjoints
  //   Dmu_i = -dxhat_i / sigma_i       (mean path)
  //   Dv_i  = -dxhat_i * xhat_i / (2 * sigma_i^2)   (variance path)
  // bucketed once per statistic source.
  std::vector<double> smu_bn(s.c, 0.0), sv_bn(s.c, 0.0);
  std::vector<double> smu_in(s.n * s.c, 0.0), sv_in(s.n * s.c, 0.0);
  std::vector<double> smu_ln(s.n, 0.0), sv_ln(s.n, 0.0);
  std::size_t flat = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const double g = params.affine.gamma[c];
      double dg = 0.0, db = 0.0, amu = 0.0, av = 0.0;
      for (std::size_t i = 0; i < hw; ++i, ++flat) {
        const double dxh = dyd[flat] * g;
        dg += dyd[flat] * hd[flat];
        db += dyd[flat];
        const double sigma = std::sqrt(cache.sigma2[flat]);
        amu += -dxh / sigma;
        av += -dxh * hd[flat] / (2.0 * cache.sigma2[flat]);
      }
      out.dgamma[c] += dg;
      out.dbeta[c] += db;
      smu_bn[c] += amu;
      sv_bn[c] += av;
      smu_in[n * s.c + c] += amu;
      sv_in[n * s.c + c] += av;
      smu_ln[n] += amu;
      sv_ln[n] += av;
    }

  // Logit gradients: dw_k = sum_i Dmu_i * mu_k[i] (resp. variance), then the
  // softmax Jacobian dlogit_k = w_k * (dw_k - sum_l w_l dw_l).
  double dwm[3] = {0, 0, 0}, dwv[3] = {0, 0, 0};
  for (std::size_t c = 0; c < s.c; ++c) {
    dwm[0] += smu_bn[c] * cache.mean_bn[c];
    dwv[0] += sv_bn[c] * cache.var_bn[c];
  }
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      dwm[1] += smu_in[n * s.c + c] * cache.mean_in[n * s.c + c];
      dwv[1] += sv_in[n * s.c + c] * cache.var_in[n * s.c + c];
    }
  for (std::size_t n = 0; n < s.n; ++n) {
    dwm[2] += smu_ln[n] * cache.mean_ln[n];
    dwv[2] += sv_ln[n] * cache.var_ln[n];
  }
  double dot_m = 0.0, dot_v = 0.0;
  for (int k = 0; k < 3; ++k) {
    dot_m += cache.w_mean[k] * dwm[k];
    dot_v += cache.w_var[k] * dwv[k];
  }
  for (int k = 0; k < 3; ++k) {
    out.dmean_logits[k] = cache.w_mean[k] * (dwm[k] - dot_m);
    out.dvar_logits[k] = cache.w_var[k] * (dwv[k] - dot_v);
  }

  // Input gradient: direct path plus, per statistic source, the mean path
  // d mu_k / dx_j = 1/m_k and the variance path d var_k / dx_j =
  // 2 (x_j - mu_k) / m_k. On the inference path the BN source uses frozen
  // running statistics, so its x-paths are dropped.
  const bool bn_stats_live = !cache.stats_from_running;
  flat = 0;
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const double g = params.affine.gamma[c];
      const double dmu_in = cache.w_mean[1] * smu_in[n * s.c + c];
      const double dvar_in = cache.w_var[1] * sv_in[n * s.c + c];
      const double dmu_ln = cache.w_mean[2] * smu_ln[n];
      const double dvar_ln = cache.w_var[2] * sv_ln[n];
      const double dmu_bn = bn_stats_live ? cache.w_mean[0] * smu_bn[c] : 0.0;
      const double dvar_bn = bn_stats_live ? cache.w_var[0] * sv_bn[c] : 0.0;
      const double mu_bn = cache.mean_bn[c];
      const double mu_in = cache.mean_in[n * s.c + c];
      const double mu_ln = cache.mean_ln[n];
      for (std::size_t i = 0; i < hw; ++i, ++flat) {
        double dx = dyd[flat] * g / std::sqrt(cache.sigma2[flat]);
        dx += dmu_in / m_in + dvar_in * 2.0 * (xd[flat] - mu_in) / m_in;
        dx += dmu_ln / m_ln + dvar_ln * 2.0 * (xd[flat] - mu_ln) / m_ln;
        if (bn_stats_live) {
          dx += dmu_bn / m_bn + dvar_bn * 2.0 * (xd[flat] - mu_bn) / m_bn;
        }
        out.dx[flat] = dx;
      }
    }
  return out;
}

}  // namespace normkit
