#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "normkit/nn.hpp"
#include "normkit/tensor.hpp"

namespace normkit {

class Rng;

struct SgdConfig {
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t epochs = 15;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;  // data-order seed (init seed is the model's own)
};

struct Dataset {
  Tensor images;  // (size, C, H, W)
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
};

struct RunRecord {
  std::vector<double> step_losses;
  std::vector<double> loss_optimum;  // running minimum, non-increasing
  std::vector<double> loss_variance_curve;
  std::size_t variance_window = 0;
  std::vector<double> epoch_val_accuracy;  // top-1 on the held-out split
  std::vector<double> epoch_wallclock_s;
  double final_train_loss = std::numeric_limits<double>::quiet_NaN();  // mean over last epoch
};

// Momentum buffers, parallel to the registry's trainable entries.
struct VelocityState {
  std::vector<Tensor> v;
};

// v <- momentum * v + g; p <- p - lr * v. Velocity buffers are created on
// first use; a missing or mis-shaped gradient raises a state error naming
// the parameter.
void sgd_step(ParamRegistry& params, VelocityState& velocity, const SgdConfig& cfg);

// Sliding-window biased variance; output length is len - window + 1.
std::vector<double> loss_variance(std::span<const double> losses, std::size_t window);

struct TrainOptions {
  bool timing = false;  // false records 0.0 per epoch, keeping output byte-stable
};

// Plain SGD training: per-epoch reshuffle from cfg.seed, whole batches
// only (a trailing partial batch is dropped), divergence abort on a
// non-finite loss or loss > 1e6.
RunRecord train(Model& model, const Dataset& train_set, const Dataset& val_set,
                const SgdConfig& cfg, const TrainOptions& opts = {});

// Inference-mode predictions; eval_batch 0 means the whole set at once.
std::vector<std::size_t> predict(Model& model, const Dataset& data, std::size_t eval_batch = 0);
double evaluate_accuracy(Model& model, const Dataset& data);  // top-1 fraction correct

// --- gradient checking ---------------------------------------------------

enum class CheckTarget { Bn, Ln, In, Gn, Wn, Sn, Conv, Dense, CrossEntropy, Model };

CheckTarget check_target_from_string(const std::string& name);

struct GradCheckOptions {
  double tol = 1e-6;
  double step = 1e-5;        // central-difference half-step
  std::size_t max_probes = 100;  // per tensor; larger tensors are sampled
  std::uint64_t seed = 1;
  std::size_t groups = 2;  // group norm target only
};

struct GradCheckEntry {
  std::string tensor;
  double max_rel_err = 0.0;
  std::size_t probes = 0;
  bool pass = false;
};

struct GradCheckReport {
  double tol = 0.0;
  std::vector<GradCheckEntry> entries;

  bool passed() const {
    for (const auto& e : entries) {
      if (!e.pass) return false;
    }
    return !entries.empty();
  }
};

// Compares every analytic gradient of the target against central finite
// differences of a scalar objective (a fixed random projection of the
// output). relative error = |a - f| / max(|a|, |f|, 1).
GradCheckReport grad_check(CheckTarget target, Shape shape, const GradCheckOptions& opts);

// Building block for custom checks (also how tests inject corrupted
// gradients): probe one tensor against finite differences of `loss`.
GradCheckEntry check_tensor_against_fd(const std::function<double()>& loss, Tensor& t,
                                       const Tensor& analytic, const std::string& name,
                                       const GradCheckOptions& opts, Rng& probe_rng);

}  // namespace normkit
