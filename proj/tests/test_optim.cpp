#include <doctest.h>

#include <cmath>
#include <vector>

#include "normkit/nn.hpp"
#include "normkit/optim.hpp"
#include "normkit/rng.hpp"
#include "normkit/tensor.hpp"

using namespace normkit;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.stage_widths = {4};
  cfg.blocks_per_stage = 1;
  cfg.classes = 3;
  cfg.norm.kind = NormKind::GroupNorm;
  cfg.norm.groups = 2;
  return cfg;
}

Dataset toy_dataset(std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.images = random_normal({size, 1, 6, 6}, rng);
  d.labels.resize(size);
  for (std::size_t i = 0; i < size; ++i) d.labels[i] = i % 3;
  return d;
}

// minimal registry around loose tensors for direct sgd_step checks
struct LooseParams {
  Tensor p, g;
  ParamRegistry reg;

  LooseParams(Tensor param, Tensor grad) : p(std::move(param)), g(std::move(grad)) {
    reg.add("p", &p, &g);
  }
};

}  // namespace

TEST_CASE("sgd two steps match the closed form") {
  // constant gradient g: after two steps p = p0 - lr*g - lr*(m*g + g)
  //                                        = p0 - lr*g*(2 + m)
  LooseParams lp(Tensor::full({1, 1, 1, 2}, 1.0), Tensor({1, 1, 1, 2}, {0.5, -2.0}));
  SgdConfig cfg;
  cfg.lr = 0.1;
  cfg.momentum = 0.9;
  VelocityState vel;
  sgd_step(lp.reg, vel, cfg);
  sgd_step(lp.reg, vel, cfg);
  CHECK(lp.p[0] == doctest::Approx(1.0 - 0.1 * 0.5 * 2.9).epsilon(1e-15));
  CHECK(lp.p[1] == doctest::Approx(1.0 + 0.1 * 2.0 * 2.9).epsilon(1e-15));
}

TEST_CASE("momentum zero is plain gradient descent") {
  LooseParams lp(Tensor::full({1, 1, 1, 1}, 3.0), Tensor::full({1, 1, 1, 1}, 2.0));
  SgdConfig cfg;
  cfg.lr = 0.25;
  cfg.momentum = 0.0;
  VelocityState vel;
  sgd_step(lp.reg, vel, cfg);
  CHECK(lp.p[0] == 2.5);
  sgd_step(lp.reg, vel, cfg);
  CHECK(lp.p[0] == 2.0);
}

TEST_CASE("zero gradient leaves parameters and velocity untouched") {
  LooseParams lp(Tensor({1, 1, 1, 3}, {1.0, -2.0, 0.5}), Tensor::zeros({1, 1, 1, 3}));
  SgdConfig cfg;
  VelocityState vel;
  sgd_step(lp.reg, vel, cfg);
  sgd_step(lp.reg, vel, cfg);
  CHECK(lp.p.values() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("a mis-shaped gradient slot is a state error naming the parameter") {
  Tensor p = Tensor::zeros({1, 1, 1, 4});
  Tensor g = Tensor::zeros({1, 1, 1, 3});  // wrong length
  ParamRegistry reg;
  reg.add("stage0.block0.conv1.weight", &p, &g);
  VelocityState vel;
  try {
    sgd_step(reg, vel, SgdConfig{});
    FAIL("expected StateError");
  } catch (const StateError& err) {
    CHECK(std::string(err.what()).find("stage0.block0.conv1.weight") != std::string::npos);
  }

  ParamRegistry missing;
  missing.add("head.fc.bias", &p, nullptr);
  VelocityState vel2;
  try {
    sgd_step(missing, vel2, SgdConfig{});
    FAIL("expected StateError");
  } catch (const StateError& err) {
    CHECK(std::string(err.what()).find("head.fc.bias") != std::string::npos);
  }
}

TEST_CASE("loss variance worked examples") {
  const std::vector<double> two{0.0, 2.0};
  const std::vector<double> out = loss_variance(two, 2);
  REQUIRE(out.size() == 1);
  CHECK(out[0] == 1.0);  // biased: mean 1, ((0-1)^2 + (2-1)^2)/2

  const std::vector<double> constant(10, 3.5);
  for (double v : loss_variance(constant, 4)) CHECK(v == 0.0);

  const std::vector<double> ramp{1.0, 2.0, 3.0, 4.0};
  const std::vector<double> w2 = loss_variance(ramp, 2);
  REQUIRE(w2.size() == 3);
  for (double v : w2) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  CHECK_THROWS_AS(loss_variance(ramp, 5), std::invalid_argument);
  CHECK_THROWS_AS(loss_variance(ramp, 1), std::invalid_argument);
  CHECK_THROWS_AS(loss_variance(ramp, 0), std::invalid_argument);
}

TEST_CASE("loss variance matches a brute-force oracle on random data") {
  Rng rng(11);
  std::vector<double> losses(40);
  for (double& v : losses) v = rng.uniform(0.0, 5.0);
  for (std::size_t window : {2u, 3u, 7u, 40u}) {
    const std::vector<double> got = loss_variance(losses, window);
    REQUIRE(got.size() == losses.size() - window + 1);
    for (std::size_t s = 0; s < got.size(); ++s) {
      double mean = 0.0;
      for (std::size_t i = 0; i < window; ++i) mean += losses[s + i];
      mean /= static_cast<double>(window);
      double var = 0.0;
      for (std::size_t i = 0; i < window; ++i) {
        const double d = losses[s + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(window);
      CHECK(got[s] == doctest::Approx(var).epsilon(1e-12));
    }
  }
}

TEST_CASE("training is bitwise deterministic") {
  Dataset train_set = toy_dataset(12, 101);
  Dataset val_set = toy_dataset(6, 102);
  SgdConfig cfg;
  cfg.lr = 0.02;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.seed = 5;

  Model m1(tiny_config(), 7);
  RunRecord r1 = train(m1, train_set, val_set, cfg);
  Model m2(tiny_config(), 7);
  RunRecord r2 = train(m2, train_set, val_set, cfg);

  CHECK(r1.step_losses == r2.step_losses);
  CHECK(r1.loss_optimum == r2.loss_optimum);
  CHECK(r1.loss_variance_curve == r2.loss_variance_curve);
  CHECK(r1.epoch_val_accuracy == r2.epoch_val_accuracy);
  for (std::size_t i = 0; i < m1.params().trainable.size(); ++i)
    CHECK(*m1.params().trainable[i].param == *m2.params().trainable[i].param);

  // timing off by default: wallclock entries are exactly zero
  for (double t : r1.epoch_wallclock_s) CHECK(t == 0.0);
  REQUIRE(r1.epoch_wallclock_s.size() == 3);
}

TEST_CASE("train bookkeeping: step counts, optimum, final loss") {
  Dataset train_set = toy_dataset(10, 103);  // batch 4 -> 2 steps/epoch, 2 dropped
  Dataset val_set = toy_dataset(3, 104);
  SgdConfig cfg;
  cfg.lr = 0.01;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  Model model(tiny_config(), 9);
  RunRecord rec = train(model, train_set, val_set, cfg);

  CHECK(rec.step_losses.size() == 8);  // floor(10/4) * 4 epochs
  REQUIRE(rec.loss_optimum.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    double best = rec.step_losses[0];
    for (std::size_t j = 1; j <= i; ++j) best = std::min(best, rec.step_losses[j]);
    CHECK(rec.loss_optimum[i] == best);
    if (i > 0) CHECK(rec.loss_optimum[i] <= rec.loss_optimum[i - 1]);
  }
  const double last_epoch_mean = (rec.step_losses[6] + rec.step_losses[7]) / 2.0;
  CHECK(rec.final_train_loss == doctest::Approx(last_epoch_mean).epsilon(1e-15));
  CHECK(rec.epoch_val_accuracy.size() == 4);
  CHECK(rec.variance_window >= 1);
  if (rec.step_losses.size() >= rec.variance_window)
    CHECK(rec.loss_variance_curve.size() == rec.step_losses.size() - rec.variance_window + 1);
}

TEST_CASE("non-positive learning rates are rejected everywhere") {
  LooseParams lp(Tensor::full({1, 1, 1, 1}, 1.0), Tensor::full({1, 1, 1, 1}, 1.0));
  SgdConfig cfg;
  cfg.lr = 0.0;
  VelocityState vel;
  CHECK_THROWS_AS(sgd_step(lp.reg, vel, cfg), std::invalid_argument);
  cfg.lr = -0.1;
  CHECK_THROWS_AS(sgd_step(lp.reg, vel, cfg), std::invalid_argument);

  Model model(tiny_config(), 13);
  Dataset train_set = toy_dataset(8, 105);
  Dataset val_set = toy_dataset(4, 106);
  cfg.lr = 0.0;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  CHECK_THROWS_AS(train(model, train_set, val_set, cfg), std::invalid_argument);
}

TEST_CASE("training at a small learning rate reduces the loss") {
  Dataset train_set = toy_dataset(12, 107);
  Dataset val_set = toy_dataset(6, 108);
  SgdConfig cfg;
  cfg.lr = 1e-3;
  cfg.momentum = 0.0;
  cfg.epochs = 6;
  cfg.batch_size = 12;  // full batch: every step sees the same data
  Model model(tiny_config(), 15);
  RunRecord rec = train(model, train_set, val_set, cfg);
  CHECK(rec.step_losses.back() < rec.step_losses.front());
}

TEST_CASE("divergence aborts with step and learning rate attached") {
  Dataset train_set = toy_dataset(8, 109);
  Dataset val_set = toy_dataset(4, 110);
  SgdConfig cfg;
  cfg.lr = 1e9;  // guaranteed blow-up
  cfg.epochs = 5;
  cfg.batch_size = 4;
  Model model(tiny_config(), 17);
  try {
    train(model, train_set, val_set, cfg);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& err) {
    CHECK(err.lr == 1e9);
    CHECK(err.step >= 1);
    CHECK(std::string(err.what()).find("loss") != std::string::npos);
  }
}

TEST_CASE("train validates batch size against the dataset") {
  Dataset train_set = toy_dataset(4, 111);
  Dataset val_set = toy_dataset(2, 112);
  SgdConfig cfg;
  cfg.batch_size = 8;  // larger than the dataset: zero steps possible
  cfg.epochs = 1;
  Model model(tiny_config(), 19);
  CHECK_THROWS_AS(train(model, train_set, val_set, cfg), std::invalid_argument);
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train(model, train_set, val_set, cfg), std::invalid_argument);
}

TEST_CASE("predict is deterministic and eval batching does not change it") {
  Dataset data = toy_dataset(10, 113);
  Model model(tiny_config(), 21);
  const std::vector<std::size_t> whole = predict(model, data);
  const std::vector<std::size_t> again = predict(model, data);
  CHECK(whole == again);
  for (std::size_t eval_batch : {1u, 3u, 10u}) {
    CHECK(predict(model, data, eval_batch) == whole);
  }
  REQUIRE(whole.size() == 10);
  for (std::size_t p : whole) CHECK(p < 3);

  double correct = 0.0;
  for (std::size_t i = 0; i < 10; ++i) correct += whole[i] == data.labels[i] ? 1.0 : 0.0;
  CHECK(evaluate_accuracy(model, data) == doctest::Approx(correct / 10.0).epsilon(1e-15));
}

TEST_CASE("grad check passes every layer target on its default shapes") {
  GradCheckOptions opts;
  opts.max_probes = 20;
  for (CheckTarget t : {CheckTarget::Bn, CheckTarget::Ln, CheckTarget::In, CheckTarget::Gn,
                        CheckTarget::Wn, CheckTarget::Sn, CheckTarget::Conv, CheckTarget::Dense,
                        CheckTarget::CrossEntropy}) {
    GradCheckReport report = grad_check(t, {4, 8, 6, 6}, opts);
    CHECK(report.passed());
    for (const auto& e : report.entries) {
      CHECK(e.pass);
      CHECK(e.max_rel_err < opts.tol);
      CHECK(e.probes > 0);
    }
  }
}

TEST_CASE("grad check covers the whole model at a looser tolerance") {
  GradCheckOptions opts;
  opts.tol = 1e-4;
  opts.max_probes = 10;
  GradCheckReport report = grad_check(CheckTarget::Model, {2, 1, 8, 8}, opts);
  CHECK(report.passed());
  CHECK(report.tol == 1e-4);
  CHECK(report.entries.size() > 5);  // one entry per parameter tensor plus the input
}

TEST_CASE("a corrupted gradient is detected") {
  // dense layer with one analytic gradient entry sign-flipped
  Rng rng(23);
  Tensor x = random_normal({3, 5, 1, 1}, rng);
  Tensor w = random_normal({4, 5, 1, 1}, rng);
  Tensor b = random_normal({1, 4, 1, 1}, rng);
  Tensor proj = random_normal({3, 4, 1, 1}, rng);

  auto loss = [&]() {
    Tensor y = dense_forward(x, w, b).first;
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += proj[i] * y[i];
    return acc;
  };
  auto [y, cache] = dense_forward(x, w, b);
  DenseGrads g = dense_backward(proj, cache, w);

  GradCheckOptions opts;
  opts.max_probes = w.size();
  Rng probe(29);
  GradCheckEntry clean = check_tensor_against_fd(loss, w, g.dweight, "dense.weight", opts, probe);
  CHECK(clean.pass);

  Tensor corrupted = g.dweight;
  corrupted[3] = -corrupted[3] + 1.0;
  Rng probe2(29);
  GradCheckEntry bad = check_tensor_against_fd(loss, w, corrupted, "dense.weight", opts, probe2);
  CHECK_FALSE(bad.pass);
  CHECK(bad.max_rel_err > opts.tol);
}

TEST_CASE("check target names parse") {
  CHECK(check_target_from_string("bn") == CheckTarget::Bn);
  CHECK(check_target_from_string("sn") == CheckTarget::Sn);
  CHECK(check_target_from_string("xent") == CheckTarget::CrossEntropy);
  CHECK(check_target_from_string("model") == CheckTarget::Model);
  CHECK_THROWS_AS(check_target_from_string("nope"), std::invalid_argument);
}
