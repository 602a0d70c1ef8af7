#include <charconv>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "normkit/error.hpp"
#include "normkit/harness.hpp"

namespace {

using namespace normkit;

Shape parse_shape(const std::string& text) {
  std::vector<std::size_t> dims;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t next = text.find('x', pos);
    const std::string part = text.substr(pos, next == std::string::npos ? next : next - pos);
    std::size_t value = 0;
    auto [ptr, errc] = std::from_chars(part.data(), part.data() + part.size(), value);
    if (errc != std::errc{} || ptr != part.data() + part.size() || value == 0)
      throw ConfigError("shape '" + text + "' must be NxCxHxW with positive integers");
    dims.push_back(value);
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  if (dims.size() != 4) throw ConfigError("shape '" + text + "' must have exactly 4 dimensions");
  return Shape{dims[0], dims[1], dims[2], dims[3]};
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t next = text.find(',', pos);
    const std::string part = text.substr(pos, next == std::string::npos ? next : next - pos);
    if constexpr (std::is_same_v<T, std::string>) {
      if (part.empty()) throw ConfigError(what + " list has an empty entry");
      out.push_back(part);
    } else {
      T value{};
      auto [ptr, errc] = std::from_chars(part.data(), part.data() + part.size(), value);
      if (errc != std::errc{} || ptr != part.data() + part.size())
        throw ConfigError(what + " entry '" + part + "' is not an unsigned integer");
      out.push_back(value);
    }
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return out;
}

std::vector<std::size_t> read_label_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::size_t> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() && in.peek() == std::char_traits<char>::eof()) break;
    std::size_t value = 0;
    auto [ptr, errc] = std::from_chars(line.data(), line.data() + line.size(), value);
    if (errc != std::errc{} || ptr != line.data() + line.size())
      throw FormatError("bad label at " + path + ":" + std::to_string(line_no));
    out.push_back(value);
  }
  return out;
}

int cmd_gradcheck(const std::string& target_name, const std::string& shape_text,
                  const GradCheckOptions& opts) {
  CheckTarget target;
  try {
    target = check_target_from_string(target_name);
  } catch (const std::invalid_argument& err) {
    throw ConfigError(err.what());
  }
  const GradCheckReport report = grad_check(target, parse_shape(shape_text), opts);
  for (const auto& entry : report.entries) {
    std::printf("%-24s max_rel_err %.3e  probes %zu  %s\n", entry.tensor.c_str(),
                entry.max_rel_err, entry.probes, entry.pass ? "ok" : "FAIL");
  }
  std::printf("gradcheck %s: %s (tol %.1e)\n", target_name.c_str(),
              report.passed() ? "PASS" : "FAIL", report.tol);
  return report.passed() ? 0 : 1;
}

int cmd_train(const std::string& config_path, const std::string& out_override) {
  RunConfig cfg = load_config(config_path);
  if (!out_override.empty()) cfg.out_dir = out_override;
  const RunOutputs out = run_single_to_dir(cfg);
  if (std::isfinite(out.record.final_train_loss))
    std::printf("final_train_loss %.6f\n", out.record.final_train_loss);
  if (out.val_acc) std::printf("val_acc %.4f\n", *out.val_acc);
  std::printf("%s", out.report.table().c_str());
  std::printf("artifacts in %s\n", cfg.out_dir.c_str());
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& norms_text,
              const std::string& batches_text, const std::string& seeds_text,
              const std::string& out_override) {
  RunConfig cfg = load_config(config_path);
  if (!out_override.empty()) cfg.out_dir = out_override;
  const auto norms = parse_list<std::string>(norms_text, "norms");
  const auto batches = parse_list<std::size_t>(batches_text, "batches");
  const auto seeds = parse_list<std::uint64_t>(seeds_text, "seeds");

  const SweepResult result = run_sweep(cfg, norms, batches, seeds);
  const std::filesystem::path dir(cfg.out_dir);
  emit_csv(result, dir / "sweep.csv");
  emit_metric_bars(result, dir / "metric_bars.csv");

  std::size_t ok = 0;
  for (const auto& row : result.rows)
    if (row.status == "ok") ++ok;
  std::printf("sweep: %zu/%zu cells ok, results in %s\n", ok, result.rows.size(),
              cfg.out_dir.c_str());
  return 0;
}

int cmd_metrics(const std::string& preds_path, const std::string& truth_path,
                std::size_t classes, const std::string& form_name) {
  MccForm form;
  if (form_name == "standard") form = MccForm::Standard;
  else if (form_name == "paper") form = MccForm::Paper;
  else throw ConfigError("mcc-form '" + form_name + "' is not one of standard, paper");

  const auto preds = read_label_file(preds_path);
  const auto truth = read_label_file(truth_path);
  if (preds.size() != truth.size())
    throw ConfigError("prediction count " + std::to_string(preds.size()) +
                      " does not match truth count " + std::to_string(truth.size()));
  if (classes == 0) {  // infer the class universe from the labels
    for (std::size_t v : preds) classes = std::max(classes, v + 1);
    for (std::size_t v : truth) classes = std::max(classes, v + 1);
    if (classes < 2) classes = 2;
  }
  try {
    std::printf("%s", macro_report(preds, truth, classes, form).table().c_str());
  } catch (const std::invalid_argument& err) {
    throw ConfigError(err.what());
  }
  return 0;
}

int cmd_gen_data(const SyntheticSpec& spec, const std::string& out_dir) {
  const SyntheticData data = gen_synthetic(spec);
  write_dataset(data.train, out_dir, "train");
  write_dataset(data.val, out_dir, "val");
  std::printf("wrote %zu train and %zu val samples to %s\n", data.train.size(), data.val.size(),
              out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"normkit: normalization layers, a residual CNN, and experiment tooling"};
  app.require_subcommand(1);

  auto* gradcheck = app.add_subcommand("gradcheck", "compare analytic gradients to finite differences");
  std::string target = "gn";
  std::string shape_text = "4x8x6x6";
  GradCheckOptions gc_opts;
  gc_opts.tol = 1e-4;
  gradcheck->add_option("--layer,--target", target, "bn|ln|in|gn|wn|sn|conv|dense|xent|model");
  gradcheck->add_option("--shape", shape_text, "input shape NxCxHxW");
  gradcheck->add_option("--tol", gc_opts.tol, "relative-error tolerance");
  gradcheck->add_option("--step", gc_opts.step, "central-difference half-step");
  gradcheck->add_option("--probes", gc_opts.max_probes, "sampled coordinates per tensor");
  gradcheck->add_option("--seed", gc_opts.seed, "rng seed");
  gradcheck->add_option("--groups", gc_opts.groups, "group count (gn target)");

  auto* train_cmd = app.add_subcommand("train", "train one model from a JSON config");
  std::string train_config;
  std::string train_out;
  train_cmd->add_option("--config", train_config, "JSON config path")->required();
  train_cmd->add_option("--out", train_out, "override output.dir");

  auto* sweep_cmd = app.add_subcommand("sweep", "compute-matched norm x batch-size x seed grid");
  std::string sweep_config, sweep_norms, sweep_batches, sweep_seeds, sweep_out;
  sweep_cmd->add_option("--config", sweep_config, "JSON config path")->required();
  sweep_cmd->add_option("--norms", sweep_norms, "comma list, e.g. bn,gn")->required();
  sweep_cmd->add_option("--batch-sizes,--batches", sweep_batches, "comma list, e.g. 2,8,32")
      ->required();
  sweep_cmd->add_option("--seeds", sweep_seeds, "comma list, e.g. 1,2,3")->required();
  sweep_cmd->add_option("--out", sweep_out, "override output.dir");

  auto* metrics_cmd = app.add_subcommand("metrics", "classification report from label files");
  std::string preds_path, truth_path;
  std::size_t classes = 0;  // 0 infers max(label)+1
  std::string form_name = "standard";
  metrics_cmd->add_option("--pred,--preds", preds_path, "predictions, one integer per line")
      ->required();
  metrics_cmd->add_option("--truth", truth_path, "ground truth, one integer per line")->required();
  metrics_cmd->add_option("--classes", classes, "class count (default: inferred from labels)");
  metrics_cmd->add_option("--mcc-form,--form", form_name, "standard|paper");

  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset to disk");
  std::string spec_path;
  SyntheticSpec cli_spec;
  std::string gen_out = "data";
  gen_cmd->add_option("--spec", spec_path, "JSON spec file (flags below override it)");
  gen_cmd->add_option("--out", gen_out, "output directory");
  auto* opt_classes = gen_cmd->add_option("--classes", cli_spec.classes, "class count");
  auto* opt_train = gen_cmd->add_option("--train-per-class", cli_spec.train_per_class,
                                        "training samples per class");
  auto* opt_val = gen_cmd->add_option("--val-per-class", cli_spec.val_per_class,
                                      "validation samples per class");
  auto* opt_size = gen_cmd->add_option("--image-size", cli_spec.image_size, "square image side");
  auto* opt_noise = gen_cmd->add_option("--noise", cli_spec.noise, "Gaussian noise stddev");
  auto* opt_seed = gen_cmd->add_option("--seed", cli_spec.seed, "rng seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gradcheck->parsed()) return cmd_gradcheck(target, shape_text, gc_opts);
    if (train_cmd->parsed()) return cmd_train(train_config, train_out);
    if (sweep_cmd->parsed())
      return cmd_sweep(sweep_config, sweep_norms, sweep_batches, sweep_seeds, sweep_out);
    if (metrics_cmd->parsed()) return cmd_metrics(preds_path, truth_path, classes, form_name);
    if (gen_cmd->parsed()) {
      SyntheticSpec spec = spec_path.empty() ? SyntheticSpec{} : load_synthetic_spec(spec_path);
      if (opt_classes->count() > 0) spec.classes = cli_spec.classes;
      if (opt_train->count() > 0) spec.train_per_class = cli_spec.train_per_class;
      if (opt_val->count() > 0) spec.val_per_class = cli_spec.val_per_class;
      if (opt_size->count() > 0) spec.image_size = cli_spec.image_size;
      if (opt_noise->count() > 0) spec.noise = cli_spec.noise;
      if (opt_seed->count() > 0) spec.seed = cli_spec.seed;
      return cmd_gen_data(spec, gen_out);
    }
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const DivergenceError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  } catch (const IoError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 4;
  } catch (const FormatError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 4;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }
  return 0;
}
