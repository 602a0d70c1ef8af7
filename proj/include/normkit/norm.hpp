#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "normkit/tensor.hpp"

namespace normkit {

enum class NormMode { Train, Infer };

// Per-channel scale/shift applied after normalization, shape (1, C, 1, 1).
struct AffineParams {
  Tensor gamma;
  Tensor beta;

  static AffineParams identity(std::size_t channels);
};

struct GroupNormConfig {
  std::size_t groups = 1;
  double eps = 1e-5;
};

// Running statistics kept by batch norm across training steps, used in
// place of batch statistics at inference. Shapes (1, C, 1, 1).
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;  // running <- momentum * running + (1 - momentum) * batch
  std::size_t trained_steps = 0;

  static BatchNormState init(std::size_t channels, double momentum = 0.9);
};

// How the statistic windows tile the input.
enum class WindowKind {
  PerChannel,      // batch norm: one window per channel, spanning N, H, W
  PerSampleGroup,  // group/layer/instance norm: one window per (sample, group)
};

// Everything the backward pass needs from the matching forward call.
struct NormCache {
  WindowKind kind = WindowKind::PerSampleGroup;
  std::size_t groups = 1;  // PerSampleGroup only
  Shape input_shape;
  Tensor x_hat;                     // normalized activations, pre-affine
  std::vector<double> mean;         // one entry per window
  std::vector<double> sigma;        // sqrt(var + eps), one entry per window
  bool stats_from_running = false;  // true on the batch-norm inference path
  bool untrained_stats = false;     // inference before any training step
};

struct NormGrads {
  Tensor dx;
  Tensor dgamma;  // (1, C, 1, 1)
  Tensor dbeta;   // (1, C, 1, 1)
};

// Group norm. Statistics are computed per (sample, channel group) over the
// group's channels and all spatial positions; sigma = sqrt(var + eps) with
// eps inside the root; y = gamma * (x - mean) / sigma + beta. groups == 1
// reproduces layer norm and groups == C instance norm, bit for bit.
std::pair<Tensor, NormCache> gn_forward(const Tensor& x, const AffineParams& affine,
                                        const GroupNormConfig& cfg, NormMode mode);
NormGrads gn_backward(const Tensor& dy, const NormCache& cache, const AffineParams& affine);

// Layer norm: statistics per sample over (C, H, W).
std::pair<Tensor, NormCache> ln_forward(const Tensor& x, const AffineParams& affine, double eps);
NormGrads ln_backward(const Tensor& dy, const NormCache& cache, const AffineParams& affine);

// Instance norm: statistics per (sample, channel) over (H, W).
std::pair<Tensor, NormCache> in_forward(const Tensor& x, const AffineParams& affine, double eps);
NormGrads in_backward(const Tensor& dy, const NormCache& cache, const AffineParams& affine);

// Batch norm: statistics per channel over (N, H, W). Training normalizes
// with batch statistics and folds them into the running averages;
// inference normalizes every sample with the stored running statistics,
// so its output is independent of batch composition.
std::pair<Tensor, NormCache> bn_forward(const Tensor& x, const AffineParams& affine,
                                        BatchNormState& state, double eps, NormMode mode);
NormGrads bn_backward(const Tensor& dy, const NormCache& cache, const AffineParams& affine);

// Weight norm reparameterizes a conv/dense weight as w = g * v / ||v||,
// with one Euclidean norm per output unit over its fan-in slice.
// v has the weight's shape; g is (out, 1, 1, 1).
struct WeightNormParams {
  Tensor v;
  Tensor g;
};

struct WeightNormGrads {
  Tensor dv;
  Tensor dg;
};

Tensor wn_materialize(const WeightNormParams& params);
WeightNormGrads wn_backward(const Tensor& dw, const WeightNormParams& params);

// Switchable norm: each activation is normalized with a convex blend of
// the batch-norm, instance-norm and layer-norm statistics, the blend
// weights coming from two softmaxes (one for means, one for variances)
// over learned logits. Logit order is {BN, IN, LN}.
struct SwitchNormParams {
  Tensor mean_logits;  // (1, 1, 1, 3)
  Tensor var_logits;   // (1, 1, 1, 3)
  AffineParams affine;

  static SwitchNormParams init(std::size_t channels);
};

struct SwitchNormCache {
  Shape input_shape;
  Tensor x;      // saved input
  Tensor x_hat;  // normalized activations, pre-affine
  Tensor sigma2;          // blended var + eps, per element
  Tensor mean_bn, var_bn;  // (1, C, 1, 1); running stats on the inference path
  Tensor mean_in, var_in;  // (N, C, 1, 1)
  Tensor mean_ln, var_ln;  // (N, 1, 1, 1)
  double w_mean[3] = {0, 0, 0};  // softmax weights, {BN, IN, LN}
  double w_var[3] = {0, 0, 0};
  bool stats_from_running = false;
};

struct SwitchNormGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
  Tensor dmean_logits;  // (1, 1, 1, 3)
  Tensor dvar_logits;   // (1, 1, 1, 3)
};

std::pair<Tensor, SwitchNormCache> sn_forward(const Tensor& x, const SwitchNormParams& params,
                                              BatchNormState& state, double eps, NormMode mode);
SwitchNormGrads sn_backward(const Tensor& dy, const SwitchNormCache& cache,
                            const SwitchNormParams& params);

}  // namespace normkit
