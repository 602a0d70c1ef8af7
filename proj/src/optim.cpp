#include "normkit/optim.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "normkit/error.hpp"
#include "normkit/rng.hpp"

namespace normkit {

void sgd_step(ParamRegistry& params, VelocityState& velocity, const SgdConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("sgd_step: lr must be > 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
    throw std::invalid_argument("sgd_step: momentum must be in [0,1)");
  }
  if (velocity.v.empty()) {
    velocity.v.reserve(params.trainable.size());
    for (const auto& entry : params.trainable) velocity.v.emplace_back(entry.param->shape());
  }
  if (velocity.v.size() != params.trainable.size()) {
    throw StateError("sgd_step: velocity has " + std::to_string(velocity.v.size()) +
                     " buffers for " + std::to_string(params.trainable.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.trainable.size(); ++i) {
    ParamEntry& entry = params.trainable[i];
    if (entry.grad == nullptr || entry.grad->shape() != entry.param->shape()) {
      throw StateError("sgd_step: missing gradient for parameter '" + entry.name + "'");
    }
    Tensor& v = velocity.v[i];
    Tensor& p = *entry.param;
    const Tensor& g = *entry.grad;
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = cfg.momentum * v[j] + g[j];
      p[j] -= cfg.lr * v[j];
    }
  }
}

std::vector<double> loss_variance(std::span<const double> losses, std::size_t window) {
  if (window < 2) throw std::invalid_argument("loss_variance: window must be >= 2");
  if (window > losses.size()) {
    throw std::invalid_argument("loss_variance: window " + std::to_string(window) +
                                " exceeds sequence length " + std::to_string(losses.size()));
  }
  std::vector<double> out;
  out.reserve(losses.size() - window + 1);
  const double inv = 1.0 / static_cast<double>(window);
  for (std::size_t start = 0; start + window <= losses.size(); ++start) {
    double mean = 0.0;
    for (std::size_t i = 0; i < window; ++i) mean += losses[start + i];
    mean *= inv;
    double var = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
      const double d = losses[start + i] - mean;
      var += d * d;
    }
    out.push_back(var * inv);
  }
  return out;
}

namespace {

Dataset gather_batch(const Dataset& data, std::span<const std::size_t> rows) {
  const Shape& s = data.images.shape();
  const std::size_t sample = s.c * s.h * s.w;
  Dataset batch;
  batch.images = Tensor(Shape{rows.size(), s.c, s.h, s.w});
  batch.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* src = data.images.data() + rows[i] * sample;
    std::copy(src, src + sample, batch.images.data() + i * sample);
    batch.labels.push_back(data.labels[rows[i]]);
  }
  return batch;
}

void check_dataset(const Dataset& data, const char* who) {
  if (data.size() == 0) throw std::invalid_argument(std::string(who) + ": empty dataset");
  if (data.images.shape().n != data.size()) {
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(data.size()) +
                                " labels for " + std::to_string(data.images.shape().n) +
                                " images");
  }
}

}  // namespace

std::vector<std::size_t> predict(Model& model, const Dataset& data, std::size_t eval_batch) {
  check_dataset(data, "predict");
  const std::size_t total = data.size();
  if (eval_batch == 0) eval_batch = total;
  std::vector<std::size_t> preds;
  preds.reserve(total);
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < total; start += eval_batch) {
    const std::size_t stop = std::min(total, start + eval_batch);
    rows.clear();
    for (std::size_t i = start; i < stop; ++i) rows.push_back(i);
    const Dataset batch = gather_batch(data, rows);
    const Tensor logits = model.forward(batch.images, NormMode::Infer);
    const std::size_t classes = logits.shape().c;
    for (std::size_t n = 0; n < logits.shape().n; ++n) {
      const double* z = logits.data() + n * classes;
      std::size_t best = 0;
      for (std::size_t k = 1; k < classes; ++k) {
        if (z[k] > z[best]) best = k;  // ties keep the lowest class index
      }
      preds.push_back(best);
    }
  }
  return preds;
}

double evaluate_accuracy(Model& model, const Dataset& data) {
  const std::vector<std::size_t> preds = predict(model, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

RunRecord train(Model& model, const Dataset& train_set, const Dataset& val_set,
                const SgdConfig& cfg, const TrainOptions& opts) {
  check_dataset(train_set, "train");
  check_dataset(val_set, "train (validation split)");
  if (cfg.epochs == 0) throw std::invalid_argument("train: epochs must be >= 1");
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch size must be >= 1");
  if (cfg.batch_size > train_set.size()) {
    throw std::invalid_argument("train: batch size " + std::to_string(cfg.batch_size) +
                                " exceeds training-set size " + std::to_string(train_set.size()));
  }
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("train: lr must be > 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
    throw std::invalid_argument("train: momentum must be in [0,1)");
  }

  Rng shuffle_rng(cfg.seed);
  VelocityState velocity;
  RunRecord record;
  const std::size_t steps_per_epoch = train_set.size() / cfg.batch_size;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step, ++global_step) {
      const Dataset batch = gather_batch(
          train_set, std::span(order).subspan(step * cfg.batch_size, cfg.batch_size));
      const Tensor logits = model.forward(batch.images, NormMode::Train);
      CrossEntropyResult ce;
      try {
        ce = cross_entropy(logits, batch.labels);
      } catch (const std::domain_error&) {
        throw DivergenceError(global_step, cfg.lr,
                              "training diverged: non-finite logits at step " +
                                  std::to_string(global_step) + " (lr " + std::to_string(cfg.lr) +
                                  ")");
      }
      if (!std::isfinite(ce.loss) || ce.loss > 1e6) {
        throw DivergenceError(global_step, cfg.lr,
                              "training diverged: loss " + std::to_string(ce.loss) + " at step " +
                                  std::to_string(global_step) + " (lr " + std::to_string(cfg.lr) +
                                  ")");
      }
      model.zero_grads();
      model.backward(ce.dlogits);
      sgd_step(model.params(), velocity, cfg);
      record.step_losses.push_back(ce.loss);
      record.loss_optimum.push_back(record.loss_optimum.empty()
                                        ? ce.loss
                                        : std::min(record.loss_optimum.back(), ce.loss));
      epoch_loss += ce.loss;
    }
    record.epoch_val_accuracy.push_back(evaluate_accuracy(model, val_set));
    if (opts.timing) {
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - epoch_start;
      record.epoch_wallclock_s.push_back(dt.count());
    } else {
      record.epoch_wallclock_s.push_back(0.0);
    }
    if (steps_per_epoch > 0) {
      record.final_train_loss = epoch_loss / static_cast<double>(steps_per_epoch);
    }
  }

  if (record.step_losses.size() >= 2) {
    record.variance_window = std::min<std::size_t>(25, record.step_losses.size());
    record.loss_variance_curve = loss_variance(record.step_losses, record.variance_window);
  }
  return record;
}

// --- gradient checking ---------------------------------------------------

CheckTarget check_target_from_string(const std::string& name) {
  if (name == "bn") return CheckTarget::Bn;
  if (name == "ln") return CheckTarget::Ln;
  if (name == "in") return CheckTarget::In;
  if (name == "gn") return CheckTarget::Gn;
  if (name == "wn") return CheckTarget::Wn;
  if (name == "sn") return CheckTarget::Sn;
  if (name == "conv") return CheckTarget::Conv;
  if (name == "dense") return CheckTarget::Dense;
  if (name == "xent") return CheckTarget::CrossEntropy;
  if (name == "model") return CheckTarget::Model;
  throw std::invalid_argument("unknown gradcheck layer '" + name +
                              "' (want bn|ln|in|gn|wn|sn|conv|dense|xent|model)");
}

namespace {

double dot(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// First `count` entries of a seeded partial shuffle of [0, size).
std::vector<std::size_t> sample_coords(std::size_t size, std::size_t count, Rng& rng) {
  std::vector<std::size_t> all(size);
  std::iota(all.begin(), all.end(), std::size_t{0});
  count = std::min(count, size);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(size - i));
    std::swap(all[i], all[j]);
  }
  all.resize(count);
  return all;
}

}  // namespace

GradCheckEntry check_tensor_against_fd(const std::function<double()>& loss, Tensor& t,
                                       const Tensor& analytic, const std::string& name,
                                       const GradCheckOptions& opts, Rng& probe_rng) {
  if (analytic.shape() != t.shape()) {
    throw std::invalid_argument("check_tensor_against_fd: analytic gradient shape " +
                                analytic.shape().str() + " does not match tensor " +
                                t.shape().str());
  }
  const std::vector<std::size_t> coords = sample_coords(t.size(), opts.max_probes, probe_rng);
  GradCheckEntry entry;
  entry.tensor = name;
  entry.probes = coords.size();
  for (const std::size_t i : coords) {
    const double saved = t[i];
    t[i] = saved + opts.step;
    const double up = loss();
    t[i] = saved - opts.step;
    const double down = loss();
    t[i] = saved;
    const double fd = (up - down) / (2.0 * opts.step);
    const double a = analytic[i];
    const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1.0});
    entry.max_rel_err = std::max(entry.max_rel_err, rel);
  }
  entry.pass = entry.max_rel_err <= opts.tol;
  return entry;
}

namespace {

struct NamedTensor {
  std::string name;
  Tensor* tensor;
  const Tensor* analytic;
};

GradCheckReport run_case(const std::function<double()>& loss,
                         const std::function<void()>& refresh_analytic,
                         std::span<NamedTensor> tensors, const GradCheckOptions& opts) {
  refresh_analytic();
  GradCheckReport report;
  report.tol = opts.tol;
  Rng probe_rng(derive_seed(opts.seed, 100));
  for (NamedTensor& nt : tensors) {
    report.entries.push_back(
        check_tensor_against_fd(loss, *nt.tensor, *nt.analytic, nt.name, opts, probe_rng));
  }
  return report;
}

GradCheckReport check_window_norm(CheckTarget target, Shape shape, const GradCheckOptions& opts) {
  Rng rng(opts.seed);
  Tensor x = random_normal(shape, rng);
  AffineParams affine = AffineParams::identity(shape.c);
  for (std::size_t c = 0; c < shape.c; ++c) {
    affine.gamma[c] = 1.0 + 0.2 * rng.normal();
    affine.beta[c] = 0.2 * rng.normal();
  }
  const Tensor projection = random_normal(shape, rng);
  const double eps = 1e-5;
  const GroupNormConfig gn_cfg{opts.groups, eps};
  BatchNormState state0 = BatchNormState::init(shape.c);

  auto forward = [&]() -> Tensor {
    switch (target) {
      case CheckTarget::Bn: {
        BatchNormState state = state0;
        return bn_forward(x, affine, state, eps, NormMode::Train).first;
      }
      case CheckTarget::Ln: return ln_forward(x, affine, eps).first;
      case CheckTarget::In: return in_forward(x, affine, eps).first;
      default: return gn_forward(x, affine, gn_cfg, NormMode::Train).first;
    }
  };
  auto loss = [&] { return dot(forward(), projection); };

  NormGrads grads;
  auto refresh = [&] {
    switch (target) {
      case CheckTarget::Bn: {
        BatchNormState state = state0;
        auto [y, cache] = bn_forward(x, affine, state, eps, NormMode::Train);
        grads = bn_backward(projection, cache, affine);
        break;
      }
      case CheckTarget::Ln: {
        auto [y, cache] = ln_forward(x, affine, eps);
        grads = ln_backward(projection, cache, affine);
        break;
      }
      case CheckTarget::In: {
        auto [y, cache] = in_forward(x, affine, eps);
        grads = in_backward(projection, cache, affine);
        break;
      }
      default: {
        auto [y, cache] = gn_forward(x, affine, gn_cfg, NormMode::Train);
        grads = gn_backward(projection, cache, affine);
        break;
      }
    }
  };

  NamedTensor tensors[] = {{"x", &x, &grads.dx},
                           {"gamma", &affine.gamma, &grads.dgamma},
                           {"beta", &affine.beta, &grads.dbeta}};
  return run_case(loss, refresh, tensors, opts);
}

GradCheckReport check_wn(Shape shape, const GradCheckOptions& opts) {
  Rng rng(opts.seed);
  WeightNormParams params;
  params.v = random_normal(shape, rng);
  params.g = Tensor(Shape{shape.n, 1, 1, 1});
  for (std::size_t o = 0; o < shape.n; ++o) params.g[o] = 1.0 + 0.3 * rng.normal();
  const Tensor projection = random_normal(shape, rng);

  auto loss = [&] { return dot(wn_materialize(params), projection); };
  WeightNormGrads grads;
  auto refresh = [&] { grads = wn_backward(projection, params); };
  NamedTensor tensors[] = {{"v", &params.v, &grads.dv}, {"g", &params.g, &grads.dg}};
  return run_case(loss, refresh, tensors, opts);
}

GradCheckReport check_sn(Shape shape, const GradCheckOptions& opts) {
  Rng rng(opts.seed);
  Tensor x = random_normal(shape, rng);
  SwitchNormParams params = SwitchNormParams::init(shape.c);
  for (std::size_t k = 0; k < 3; ++k) {
    params.mean_logits[k] = 0.3 * rng.normal();
    params.var_logits[k] = 0.3 * rng.normal();
  }
  for (std::size_t c = 0; c < shape.c; ++c) {
    params.affine.gamma[c] = 1.0 + 0.2 * rng.normal();
    params.affine.beta[c] = 0.2 * rng.normal();
  }
  const Tensor projection = random_normal(shape, rng);
  const double eps = 1e-5;
  BatchNormState state0 = BatchNormState::init(shape.c);

  auto loss = [&] {
    BatchNormState state = state0;
    return dot(sn_forward(x, params, state, eps, NormMode::Train).first, projection);
  };
  SwitchNormGrads grads;
  auto refresh = [&] {
    BatchNormState state = state0;
    auto [y, cache] = sn_forward(x, params, state, eps, NormMode::Train);
    grads = sn_backward(projection, cache, params);
  };
  NamedTensor tensors[] = {{"x", &x, &grads.dx},
                           {"gamma", &params.affine.gamma, &grads.dgamma},
                           {"beta", &params.affine.beta, &grads.dbeta},
                           {"mean_logits", &params.mean_logits, &grads.dmean_logits},
                           {"var_logits", &params.var_logits, &grads.dvar_logits}};
  return run_case(loss, refresh, tensors, opts);
}

GradCheckReport check_conv(Shape shape, const GradCheckOptions& opts) {
  Rng rng(opts.seed);
  Tensor x = random_normal(shape, rng);
  const std::size_t out_c = 4, k = 3, stride = 1, pad = 1;
  Tensor weight = random_normal(Shape{out_c, shape.c, k, k}, rng, 0.0, 0.5);
  Tensor bias = random_normal(Shape{out_c, 1, 1, 1}, rng, 0.0, 0.2);
  const Shape out_shape{shape.n, out_c, shape.h, shape.w};
  const Tensor projection = random_normal(out_shape, rng);

  auto loss = [&] {
    return dot(conv2d_forward(x, weight, &bias, stride, pad).first, projection);
  };
  ConvGrads grads;
  auto refresh = [&] {
    auto [y, cache] = conv2d_forward(x, weight, &bias, stride, pad);
    grads = conv2d_backward(projection, cache);
  };
  NamedTensor tensors[] = {{"x", &x, &grads.dx},
                           {"weight", &weight, &grads.dweight},
                           {"bias", &bias, &grads.dbias}};
  return run_case(loss, refresh, tensors, opts);
}

GradCheckReport check_dense(Shape shape, const GradCheckOptions& opts) {
  Rng rng(opts.seed);
  const std::size_t features = shape.c * shape.h * shape.w, out = 4;
  Tensor x = random_normal(Shape{shape.n, features, 1, 1}, rng);
  Tensor weight = random_normal(Shape{out, features, 1, 1}, rng, 0.0, 0.5);
  Tensor bias = random_normal(Shape{1, out, 1, 1}, rng, 0.0, 0.2);
  const Tensor projection = random_normal(Shape{shape.n, out, 1, 1}, rng);

  auto loss = [&] { return dot(dense_forward(x, weight, bias).first, projection); };
  DenseGrads grads;
  auto refresh = [&] {
    auto [y, cache] = dense_forward(x, weight, bias);
    grads = dense_backward(projection, cache, weight);
  };
  NamedTensor tensors[] = {{"x", &x, &grads.dx},
                           {"weight", &weight, &grads.dweight},
                           {"bias", &bias, &grads.dbias}};
  return run_case(loss, refresh, tensors, opts);
}

GradCheckReport check_cross_entropy(Shape shape, const GradCheckOptions& opts) {
  Rng rng(opts.seed);
  const std::size_t classes = std::max<std::size_t>(2, shape.c);
  Tensor logits = random_normal(Shape{shape.n, classes, 1, 1}, rng);
  std::vector<std::size_t> labels(shape.n);
  for (std::size_t n = 0; n < shape.n; ++n) labels[n] = n % classes;

  auto loss = [&] { return cross_entropy(logits, labels).loss; };
  Tensor dlogits;
  auto refresh = [&] { dlogits = cross_entropy(logits, labels).dlogits; };
  NamedTensor tensors[] = {{"logits", &logits, &dlogits}};
  return run_case(loss, refresh, tensors, opts);
}

GradCheckReport check_model(Shape shape, const GradCheckOptions& opts) {
  ModelConfig cfg;  // desk defaults: widths (8,16), 2 basic blocks, GN
  cfg.in_channels = shape.c;
  Model model = build_model(cfg, derive_seed(opts.seed, 7));
  Rng rng(opts.seed);
  Tensor x = random_normal(shape, rng);
  std::vector<std::size_t> labels(shape.n);
  for (std::size_t n = 0; n < shape.n; ++n) labels[n] = n % cfg.classes;

  auto loss = [&] {
    return cross_entropy(model.forward(x, NormMode::Train), labels).loss;
  };
  model.zero_grads();
  const CrossEntropyResult ce = cross_entropy(model.forward(x, NormMode::Train), labels);
  model.backward(ce.dlogits);

  // 10 probe coordinates over the flattened parameter space, mapped back to
  // their tensors; the per-tensor reports share the one probe budget.
  ParamRegistry& reg = model.params();
  std::size_t total = 0;
  for (const auto& entry : reg.trainable) total += entry.param->size();
  Rng probe_rng(derive_seed(opts.seed, 100));
  const std::vector<std::size_t> flat = sample_coords(total, 10, probe_rng);

  GradCheckReport report;
  report.tol = opts.tol;
  for (const std::size_t coord : flat) {
    std::size_t offset = coord;
    const ParamEntry* hit = nullptr;
    for (const auto& entry : reg.trainable) {
      if (offset < entry.param->size()) {
        hit = &entry;
        break;
      }
      offset -= entry.param->size();
    }
    Tensor& t = *hit->param;
    const double saved = t[offset];
    t[offset] = saved + opts.step;
    const double up = loss();
    t[offset] = saved - opts.step;
    const double down = loss();
    t[offset] = saved;
    const double fd = (up - down) / (2.0 * opts.step);
    const double a = (*hit->grad)[offset];
    const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1.0});
    GradCheckEntry entry;
    entry.tensor = hit->name;
    entry.max_rel_err = rel;
    entry.probes = 1;
    entry.pass = rel <= opts.tol;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace

GradCheckReport grad_check(CheckTarget target, Shape shape, const GradCheckOptions& opts) {
  if (!(opts.tol > 0.0)) throw std::invalid_argument("grad_check: tol must be > 0");
  if (!(opts.step > 0.0)) throw std::invalid_argument("grad_check: step must be > 0");
  switch (target) {
    case CheckTarget::Bn:
    case CheckTarget::Ln:
    case CheckTarget::In:
    case CheckTarget::Gn: return check_window_norm(target, shape, opts);
    case CheckTarget::Wn: return check_wn(shape, opts);
    case CheckTarget::Sn: return check_sn(shape, opts);
    case CheckTarget::Conv: return check_conv(shape, opts);
    case CheckTarget::Dense: return check_dense(shape, opts);
    case CheckTarget::CrossEntropy: return check_cross_entropy(shape, opts);
    case CheckTarget::Model: return check_model(shape, opts);
  }
  throw std::invalid_argument("grad_check: unknown target");
}

}  // namespace normkit
