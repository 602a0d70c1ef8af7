#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "normkit/metrics.hpp"
#include "normkit/nn.hpp"
#include "normkit/optim.hpp"

namespace normkit {

// --- synthetic data ------------------------------------------------------

struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t train_per_class = 200;
  std::size_t val_per_class = 50;
  std::size_t image_size = 32;
  double noise = 0.3;  // Gaussian noise stddev on top of the class archetype
  std::uint64_t seed = 7;
};

struct SyntheticData {
  Dataset train;
  Dataset val;
};

// Noiseless class pattern: a smooth product of sinusoids with a
// class-specific frequency pair and phase, values in [-1, 1].
Tensor class_archetype(std::size_t label, std::size_t image_size);

// Single-channel images, labels cycling 0..classes-1, bitwise-deterministic
// given the spec.
SyntheticData gen_synthetic(const SyntheticSpec& spec);

// <prefix>_images.nkt plus <prefix>_labels.txt (one integer per line).
void write_dataset(const Dataset& data, const std::filesystem::path& dir,
                   const std::string& prefix);
Dataset read_dataset(const std::filesystem::path& dir, const std::string& prefix);

// --- run configuration ---------------------------------------------------

struct RunConfig {
  std::uint64_t seed = 1;
  NormSettings norm;  // kind gn, groups 4, eps 1e-5, momentum 0.9

  std::vector<std::size_t> widths{8, 16};
  std::size_t blocks_per_stage = 2;
  BlockStyle block_style = BlockStyle::Basic;
  std::size_t classes = 4;
  bool stem_pool = false;

  std::string data_source = "synthetic";  // or "files"
  std::size_t train_per_class = 200;
  std::size_t val_per_class = 50;
  std::size_t image_size = 32;
  double noise = 0.3;
  std::string data_dir;  // files source: directory with train_/val_ datasets

  double lr = 0.05;
  double sgd_momentum = 0.9;
  std::size_t epochs = 15;
  std::size_t batch_size = 32;

  std::string out_dir = "out";
  bool timing = false;  // measured wall-clock vs byte-stable zeros
};

// Strict JSON: unknown keys are errors, missing keys take the defaults
// above. The NORMKIT_SEED environment variable, when set, overrides the
// seed. Validation runs before returning.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config_text(const std::string& text);
void validate_config(const RunConfig& cfg);

// Same JSON rules for a standalone synthetic-data spec (gen-data --spec).
SyntheticSpec load_synthetic_spec(const std::filesystem::path& path);
SyntheticSpec parse_synthetic_spec_text(const std::string& text);

ModelConfig model_config(const RunConfig& cfg);
SgdConfig sgd_config(const RunConfig& cfg);
SyntheticSpec synthetic_spec(const RunConfig& cfg);

// Seed streams derived from the run seed so init, data order, and data
// content can vary independently.
std::uint64_t init_seed(std::uint64_t seed);
std::uint64_t shuffle_seed(std::uint64_t seed);
std::uint64_t data_seed(std::uint64_t seed);

// --- experiment runs -------------------------------------------------------

struct RunOutputs {
  RunRecord record;
  MetricReport report;                  // one-vs-rest metrics on the val split
  std::optional<double> val_acc;        // top-1 fraction correct
  std::vector<std::size_t> val_preds;
};

// Dataset -> model -> train -> evaluate. epochs 0 skips training and
// evaluates the untrained model. Writes nothing.
RunOutputs run_single(const RunConfig& cfg, std::optional<Model>* trained_out = nullptr);

// run_single plus artifacts under cfg.out_dir: run.csv, metrics.txt,
// loss_curve/loss_optimum/loss_variance/metric_bars plot data, checkpoint/.
RunOutputs run_single_to_dir(const RunConfig& cfg);

struct SweepRow {
  std::string norm;
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::optional<double> final_train_loss;
  std::optional<double> val_acc, val_sen, val_spe, val_mcc;
  std::optional<double> loss_var;     // biased variance of the step-loss curve
  std::optional<double> wallclock_s;  // summed over epochs
  std::string status;                 // ok | failed_divergence | failed_io | failed_internal
};

struct SweepResult {
  std::vector<SweepRow> rows;  // grid order: norm-major, then batch, then seed
};

// Compute-matched grid: every cell runs the same epochs over the same
// dataset-per-seed, so steps-per-epoch x batch-size is constant. Every
// (norm, batch) cell is validated before any cell runs; batch sizes must
// divide the training-set size exactly. Failed cells keep their row with a
// status and empty metric fields.
SweepResult run_sweep(const RunConfig& base, const std::vector<std::string>& norms,
                      const std::vector<std::size_t>& batch_sizes,
                      const std::vector<std::uint64_t>& seeds);

// Exact CSV schema:
// norm,batch_size,seed,epochs,final_train_loss,val_acc,val_sen,val_spe,val_mcc,loss_var,wallclock_s,status
std::string sweep_csv(const SweepResult& result);
void emit_csv(const SweepResult& result, const std::filesystem::path& path);

// Per-run curves (loss_curve, loss_optimum, loss_variance) and per-class
// metric bars as two-column/row CSV plot data.
void emit_plotdata(const RunRecord& record, const MetricReport& report,
                   const std::filesystem::path& dir);

// Per-norm mean validation metrics over the sweep's ok rows.
void emit_metric_bars(const SweepResult& result, const std::filesystem::path& path);

}  // namespace normkit
