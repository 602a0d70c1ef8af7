#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>

#include "normkit/error.hpp"
#include "normkit/harness.hpp"

namespace normkit {

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [ptr, errc] = std::to_chars(buf, buf + sizeof(buf), v);
  if (errc != std::errc{}) throw std::runtime_error("format_double: to_chars failed");
  return std::string(buf, ptr);
}

std::string opt_field(const std::optional<double>& v) {
  return v.has_value() ? format_double(*v) : std::string{};
}

void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

void make_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string());
}

std::optional<double> curve_variance(const std::vector<double>& losses) {
  if (losses.empty()) return std::nullopt;
  double mean = 0.0;
  for (double v : losses) mean += v;
  mean /= static_cast<double>(losses.size());
  double acc = 0.0;
  for (double v : losses) acc += (v - mean) * (v - mean);
  return acc / static_cast<double>(losses.size());
}

std::optional<double> top1_fraction(std::span<const std::size_t> preds,
                                    std::span<const std::size_t> truth) {
  if (truth.empty()) return std::nullopt;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (preds[i] == truth[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

struct LoadedData {
  Dataset train;
  Dataset val;
};

LoadedData load_data(const RunConfig& cfg) {
  LoadedData data;
  if (cfg.data_source == "synthetic") {
    SyntheticData synth = gen_synthetic(synthetic_spec(cfg));
    data.train = std::move(synth.train);
    data.val = std::move(synth.val);
  } else {
    data.train = read_dataset(cfg.data_dir, "train");
    data.val = read_dataset(cfg.data_dir, "val");
  }
  if (cfg.batch_size > data.train.size())
    throw ConfigError("config: optim.batch_size " + std::to_string(cfg.batch_size) +
                      " exceeds the training-set size " + std::to_string(data.train.size()));
  for (std::size_t label : data.train.labels)
    if (label >= cfg.classes)
      throw ConfigError("config: training label " + std::to_string(label) +
                        " out of range for " + std::to_string(cfg.classes) + " classes");
  for (std::size_t label : data.val.labels)
    if (label >= cfg.classes)
      throw ConfigError("config: validation label " + std::to_string(label) +
                        " out of range for " + std::to_string(cfg.classes) + " classes");
  if (data.val.images.shape().c != data.train.images.shape().c)
    throw ConfigError("config: train and validation channel counts differ");
  return data;
}

RunOutputs run_with_data(const RunConfig& cfg, const Dataset& train_set, const Dataset& val_set,
                         std::optional<Model>* trained_out) {
  ModelConfig mc = model_config(cfg);
  mc.in_channels = train_set.images.shape().c;
  Model model(mc, init_seed(cfg.seed));

  RunOutputs out;
  if (cfg.epochs > 0) {
    TrainOptions opts;
    opts.timing = cfg.timing;
    out.record = train(model, train_set, val_set, sgd_config(cfg), opts);
  }
  out.val_preds = predict(model, val_set);
  out.report = macro_report(out.val_preds, val_set.labels, cfg.classes);
  out.val_acc = top1_fraction(out.val_preds, val_set.labels);
  if (trained_out != nullptr) trained_out->emplace(std::move(model));
  return out;
}

SweepRow make_row(const std::string& norm, std::size_t batch, std::uint64_t seed,
                  std::size_t epochs) {
  SweepRow row;
  row.norm = norm;
  row.batch_size = batch;
  row.seed = seed;
  row.epochs = epochs;
  return row;
}

void fill_row(SweepRow& row, const RunOutputs& out) {
  if (std::isfinite(out.record.final_train_loss))
    row.final_train_loss = out.record.final_train_loss;
  row.val_acc = out.val_acc;
  row.val_sen = out.report.macro_sen;
  row.val_spe = out.report.macro_spe;
  row.val_mcc = out.report.macro_mcc;
  row.loss_var = curve_variance(out.record.step_losses);
  double wall = 0.0;
  for (double s : out.record.epoch_wallclock_s) wall += s;
  row.wallclock_s = wall;
  row.status = "ok";
}

std::string row_csv(const SweepRow& row) {
  std::string line;
  line += row.norm;
  line += ',';
  line += std::to_string(row.batch_size);
  line += ',';
  line += std::to_string(row.seed);
  line += ',';
  line += std::to_string(row.epochs);
  line += ',';
  line += opt_field(row.final_train_loss);
  line += ',';
  line += opt_field(row.val_acc);
  line += ',';
  line += opt_field(row.val_sen);
  line += ',';
  line += opt_field(row.val_spe);
  line += ',';
  line += opt_field(row.val_mcc);
  line += ',';
  line += opt_field(row.loss_var);
  line += ',';
  line += opt_field(row.wallclock_s);
  line += ',';
  line += row.status;
  line += '\n';
  return line;
}

constexpr const char* kCsvHeader =
    "norm,batch_size,seed,epochs,final_train_loss,val_acc,val_sen,val_spe,val_mcc,"
    "loss_var,wallclock_s,status\n";

}  // namespace

RunOutputs run_single(const RunConfig& cfg, std::optional<Model>* trained_out) {
  validate_config(cfg);
  LoadedData data = load_data(cfg);
  return run_with_data(cfg, data.train, data.val, trained_out);
}

RunOutputs run_single_to_dir(const RunConfig& cfg) {
  std::optional<Model> model;
  RunOutputs out = run_single(cfg, &model);

  const std::filesystem::path dir(cfg.out_dir);
  make_dir(dir);

  SweepRow row = make_row(to_string(cfg.norm.kind), cfg.batch_size, cfg.seed,
                          cfg.epochs);
  fill_row(row, out);
  write_text(dir / "run.csv", std::string(kCsvHeader) + row_csv(row));
  write_text(dir / "metrics.txt", out.report.table());
  emit_plotdata(out.record, out.report, dir);
  model->save_checkpoint(dir / "checkpoint");
  return out;
}

SweepResult run_sweep(const RunConfig& base, const std::vector<std::string>& norms,
                      const std::vector<std::size_t>& batch_sizes,
                      const std::vector<std::uint64_t>& seeds) {
  // Validate every cell before anything runs.
  for (const std::string& norm : norms) {
    RunConfig cell = base;
    try {
      cell.norm.kind = norm_kind_from_string(norm);
    } catch (const std::invalid_argument&) {
      throw ConfigError("config: sweep norm '" + norm + "' is not one of bn, ln, in, gn, wn, sn");
    }
    for (std::size_t batch : batch_sizes) {
      cell.batch_size = batch;
      validate_config(cell);
    }
  }

  // Datasets are shared across cells with the same seed.
  std::map<std::uint64_t, LoadedData> data_cache;
  RunConfig probe = base;
  for (std::uint64_t seed : seeds) {
    probe.seed = seed;
    auto [it, fresh] = data_cache.try_emplace(seed);
    if (fresh) it->second = load_data(probe);
    for (std::size_t batch : batch_sizes) {
      if (it->second.train.size() % batch != 0)
        throw ConfigError("config: batch size " + std::to_string(batch) +
                          " does not divide the training-set size " +
                          std::to_string(it->second.train.size()) +
                          "; the sweep is compute-matched");
    }
  }

  SweepResult result;
  for (const std::string& norm : norms) {
    for (std::size_t batch : batch_sizes) {
      for (std::uint64_t seed : seeds) {
        RunConfig cell = base;
        cell.norm.kind = norm_kind_from_string(norm);
        cell.batch_size = batch;
        cell.seed = seed;

        SweepRow row = make_row(norm, batch, seed, cell.epochs);
        const LoadedData& data = data_cache.at(seed);
        try {
          RunOutputs out = run_with_data(cell, data.train, data.val, nullptr);
          fill_row(row, out);
        } catch (const DivergenceError&) {
          row.status = "failed_divergence";
        } catch (const IoError&) {
          row.status = "failed_io";
        } catch (const std::exception&) {
          row.status = "failed_internal";
        }
        result.rows.push_back(std::move(row));
      }
    }
  }
  return result;
}

std::string sweep_csv(const SweepResult& result) {
  std::string out = kCsvHeader;
  for (const SweepRow& row : result.rows) out += row_csv(row);
  return out;
}

void emit_csv(const SweepResult& result, const std::filesystem::path& path) {
  if (path.has_parent_path()) make_dir(path.parent_path());
  write_text(path, sweep_csv(result));
}

void emit_plotdata(const RunRecord& record, const MetricReport& report,
                   const std::filesystem::path& dir) {
  make_dir(dir);

  std::string curve = "step,loss\n";
  for (std::size_t i = 0; i < record.step_losses.size(); ++i)
    curve += std::to_string(i) + "," + format_double(record.step_losses[i]) + "\n";
  write_text(dir / "loss_curve.csv", curve);

  std::string optimum = "step,loss\n";
  for (std::size_t i = 0; i < record.loss_optimum.size(); ++i)
    optimum += std::to_string(i) + "," + format_double(record.loss_optimum[i]) + "\n";
  write_text(dir / "loss_optimum.csv", optimum);

  std::string variance = "window_start,variance\n";
  for (std::size_t i = 0; i < record.loss_variance_curve.size(); ++i)
    variance += std::to_string(i) + "," + format_double(record.loss_variance_curve[i]) + "\n";
  write_text(dir / "loss_variance.csv", variance);

  std::string bars = "class,sen,spe,acc,mcc\n";
  for (const ClassMetrics& cm : report.per_class) {
    bars += std::to_string(cm.label) + "," + opt_field(cm.sen) + "," + opt_field(cm.spe) + "," +
            opt_field(cm.acc) + "," + opt_field(cm.mcc) + "\n";
  }
  bars += "macro," + opt_field(report.macro_sen) + "," + opt_field(report.macro_spe) + "," +
          opt_field(report.macro_acc) + "," + opt_field(report.macro_mcc) + "\n";
  write_text(dir / "metric_bars.csv", bars);
}

void emit_metric_bars(const SweepResult& result, const std::filesystem::path& path) {
  struct Sums {
    double acc = 0, sen = 0, spe = 0, mcc = 0;
    std::size_t n_acc = 0, n_sen = 0, n_spe = 0, n_mcc = 0;
  };
  std::vector<std::pair<std::string, Sums>> by_norm;  // first-appearance order
  for (const SweepRow& row : result.rows) {
    if (row.status != "ok") continue;
    Sums* sums = nullptr;
    for (auto& [name, s] : by_norm)
      if (name == row.norm) sums = &s;
    if (sums == nullptr) sums = &by_norm.emplace_back(row.norm, Sums{}).second;
    if (row.val_acc) { sums->acc += *row.val_acc; ++sums->n_acc; }
    if (row.val_sen) { sums->sen += *row.val_sen; ++sums->n_sen; }
    if (row.val_spe) { sums->spe += *row.val_spe; ++sums->n_spe; }
    if (row.val_mcc) { sums->mcc += *row.val_mcc; ++sums->n_mcc; }
  }

  auto mean = [](double total, std::size_t n) -> std::string {
    return n == 0 ? std::string{} : format_double(total / static_cast<double>(n));
  };
  std::string out = "norm,mean_val_acc,mean_val_sen,mean_val_spe,mean_val_mcc\n";
  for (const auto& [name, s] : by_norm) {
    out += name + "," + mean(s.acc, s.n_acc) + "," + mean(s.sen, s.n_sen) + "," +
           mean(s.spe, s.n_spe) + "," + mean(s.mcc, s.n_mcc) + "\n";
  }
  if (path.has_parent_path()) make_dir(path.parent_path());
  write_text(path, out);
}

}  // namespace normkit
