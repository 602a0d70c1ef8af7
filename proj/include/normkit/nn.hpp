#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "normkit/norm.hpp"
#include "normkit/tensor.hpp"

namespace normkit {

class Rng;

enum class NormKind { BatchNorm, LayerNorm, InstanceNorm, GroupNorm, WeightNorm, SwitchNorm };

NormKind norm_kind_from_string(const std::string& name);  // "bn", "ln", ...
std::string to_string(NormKind kind);

// Norm layer settings injected into every block of the model.
struct NormSettings {
  NormKind kind = NormKind::GroupNorm;
  std::size_t groups = 4;  // group norm only
  double eps = 1e-5;
  double momentum = 0.9;  // batch/switch norm running stats
};

// --- functional building blocks ---------------------------------------

struct ConvCache {
  Tensor x_padded;
  Shape in_shape;
  std::size_t stride = 1, pad = 0;
  Tensor weight;  // the weight used by forward (materialized for WN)
  bool has_bias = false;
};

struct ConvGrads {
  Tensor dx, dweight, dbias;
};

// Cross-correlation: y[n,o,i,j] = sum_{c,p,q} x_pad[n,c,i*s+p,j*s+q] * w[o,c,p,q] (+ bias).
// weight is (out_c, in_c, k, k); bias, when given, is (out_c, 1, 1, 1).
std::pair<Tensor, ConvCache> conv2d_forward(const Tensor& x, const Tensor& weight,
                                            const Tensor* bias, std::size_t stride,
                                            std::size_t pad);
ConvGrads conv2d_backward(const Tensor& dy, const ConvCache& cache);

std::pair<Tensor, Tensor> relu_forward(const Tensor& x);  // (y, mask)
Tensor relu_backward(const Tensor& dy, const Tensor& mask);

struct MaxPoolCache {
  Shape in_shape;
  std::size_t window = 0, stride = 0;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

// Ties route to the first element of the window in flat-index order.
std::pair<Tensor, MaxPoolCache> maxpool_forward(const Tensor& x, std::size_t window,
                                                std::size_t stride);
Tensor maxpool_backward(const Tensor& dy, const MaxPoolCache& cache);

std::pair<Tensor, Shape> global_avgpool_forward(const Tensor& x);  // y is (N, C, 1, 1)
Tensor global_avgpool_backward(const Tensor& dy, const Shape& in_shape);

struct DenseCache {
  Tensor x;  // (N, F, 1, 1)
};

// weight (K, F, 1, 1), bias (1, K, 1, 1), y (N, K, 1, 1).
std::pair<Tensor, DenseCache> dense_forward(const Tensor& x, const Tensor& weight,
                                            const Tensor& bias);
struct DenseGrads {
  Tensor dx, dweight, dbias;
};
DenseGrads dense_backward(const Tensor& dy, const DenseCache& cache, const Tensor& weight);

struct CrossEntropyResult {
  double loss = 0.0;
  Tensor dlogits;
};

// Mean over the batch of -log softmax(logits)[label], max-shifted for
// stability; dlogits = (softmax - onehot) / N.
CrossEntropyResult cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

// --- parameter registry ------------------------------------------------

// Ordered view over a model's tensors. Trainable entries pair each
// parameter with its gradient slot; state entries (running statistics) are
// persisted but not optimized. Iteration order is registration order,
// which keeps optimizer updates and checkpoints deterministic.
struct ParamEntry {
  std::string name;
  Tensor* param = nullptr;
  Tensor* grad = nullptr;
};

struct StateEntry {
  std::string name;
  Tensor* tensor = nullptr;
};

struct ParamRegistry {
  std::vector<ParamEntry> trainable;
  std::vector<StateEntry> state;
  std::vector<std::pair<std::string, std::size_t*>> counters;  // e.g. trained_steps

  void add(std::string name, Tensor* param, Tensor* grad) {
    trainable.push_back({std::move(name), param, grad});
  }
  void add_state(std::string name, Tensor* tensor) { state.push_back({std::move(name), tensor}); }
  void add_counter(std::string name, std::size_t* value) {
    counters.push_back({std::move(name), value});
  }
};

// --- model -------------------------------------------------------------

enum class BlockStyle { Basic, Bottleneck };

struct ModelConfig {
  std::vector<std::size_t> stage_widths{8, 16};
  std::size_t blocks_per_stage = 2;
  std::size_t classes = 4;
  BlockStyle block_style = BlockStyle::Basic;
  NormSettings norm;
  std::size_t in_channels = 1;
  bool stem_pool = false;  // 3x3/2 max-pool after the stem
};

class Layer;

// Residual CNN: stem conv -> (optional max-pool) -> stages of residual
// blocks -> global average pool -> dense classifier. The first block of
// every stage after the first downsamples with stride 2 and projects the
// skip path with a 1x1 conv.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  ~Model();

  Tensor forward(const Tensor& x, NormMode mode);
  void backward(const Tensor& dlogits);  // fills gradient slots
  void zero_grads();

  ParamRegistry& params() { return registry_; }
  const ParamRegistry& params() const { return registry_; }
  const ModelConfig& config() const { return cfg_; }
  std::size_t param_count() const;  // trainable scalars

  void save_checkpoint(const std::filesystem::path& dir) const;
  static Model load_checkpoint(const std::filesystem::path& dir);

 private:
  void rebuild_registry();

  ModelConfig cfg_;
  std::vector<std::unique_ptr<Layer>> layers_;
  ParamRegistry registry_;
  bool has_cache_ = false;
};

Model build_model(const ModelConfig& cfg, std::uint64_t seed);

// The structural checks Model's constructor runs, available without
// building the layers (invalid_argument on the first violation).
void validate_model_config(const ModelConfig& cfg);

}  // namespace normkit
