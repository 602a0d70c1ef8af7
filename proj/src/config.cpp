#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include <json.hpp>

#include "normkit/error.hpp"
#include "normkit/harness.hpp"
#include "normkit/rng.hpp"

namespace normkit {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& message) { throw ConfigError("config: " + message); }

void check_keys(const json& obj, const std::string& where,
                std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* key : allowed)
      if (item.key() == key) { known = true; break; }
    if (!known) fail("unknown key '" + where + item.key() + "'");
  }
}

const json* find(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

std::uint64_t get_uint(const json& v, const std::string& where) {
  if (!v.is_number_unsigned()) fail(where + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}

std::size_t get_size(const json& v, const std::string& where) {
  return static_cast<std::size_t>(get_uint(v, where));
}

double get_double(const json& v, const std::string& where) {
  if (!v.is_number()) fail(where + " must be a number");
  return v.get<double>();
}

std::string get_string(const json& v, const std::string& where) {
  if (!v.is_string()) fail(where + " must be a string");
  return v.get<std::string>();
}

bool get_bool(const json& v, const std::string& where) {
  if (!v.is_boolean()) fail(where + " must be a boolean");
  return v.get<bool>();
}

void parse_norm(const json& obj, RunConfig& cfg) {
  if (!obj.is_object()) fail("norm must be an object");
  check_keys(obj, "norm.", {"kind", "groups", "eps", "momentum"});
  if (const json* v = find(obj, "kind")) {
    const std::string kind = get_string(*v, "norm.kind");
    try {
      cfg.norm.kind = norm_kind_from_string(kind);
    } catch (const std::invalid_argument&) {
      fail("norm.kind '" + kind + "' is not one of bn, ln, in, gn, wn, sn");
    }
  }
  if (const json* v = find(obj, "groups")) cfg.norm.groups = get_size(*v, "norm.groups");
  if (const json* v = find(obj, "eps")) cfg.norm.eps = get_double(*v, "norm.eps");
  if (const json* v = find(obj, "momentum")) cfg.norm.momentum = get_double(*v, "norm.momentum");
}

void parse_model(const json& obj, RunConfig& cfg) {
  if (!obj.is_object()) fail("model must be an object");
  check_keys(obj, "model.",
             {"widths", "blocks_per_stage", "block_style", "classes", "stem_pool"});
  if (const json* v = find(obj, "widths")) {
    if (!v->is_array() || v->empty()) fail("model.widths must be a non-empty array");
    cfg.widths.clear();
    for (std::size_t i = 0; i < v->size(); ++i)
      cfg.widths.push_back(get_size((*v)[i], "model.widths[" + std::to_string(i) + "]"));
  }
  if (const json* v = find(obj, "blocks_per_stage"))
    cfg.blocks_per_stage = get_size(*v, "model.blocks_per_stage");
  if (const json* v = find(obj, "block_style")) {
    const std::string style = get_string(*v, "model.block_style");
    if (style == "basic") cfg.block_style = BlockStyle::Basic;
    else if (style == "bottleneck") cfg.block_style = BlockStyle::Bottleneck;
    else fail("model.block_style '" + style + "' is not one of basic, bottleneck");
  }
  if (const json* v = find(obj, "classes")) cfg.classes = get_size(*v, "model.classes");
  if (const json* v = find(obj, "stem_pool")) cfg.stem_pool = get_bool(*v, "model.stem_pool");
}

void parse_data(const json& obj, RunConfig& cfg) {
  if (!obj.is_object()) fail("data must be an object");
  check_keys(obj, "data.",
             {"source", "train_per_class", "val_per_class", "image_size", "noise", "dir"});
  if (const json* v = find(obj, "source")) cfg.data_source = get_string(*v, "data.source");
  if (const json* v = find(obj, "train_per_class"))
    cfg.train_per_class = get_size(*v, "data.train_per_class");
  if (const json* v = find(obj, "val_per_class"))
    cfg.val_per_class = get_size(*v, "data.val_per_class");
  if (const json* v = find(obj, "image_size")) cfg.image_size = get_size(*v, "data.image_size");
  if (const json* v = find(obj, "noise")) cfg.noise = get_double(*v, "data.noise");
  if (const json* v = find(obj, "dir")) cfg.data_dir = get_string(*v, "data.dir");
}

void parse_optim(const json& obj, RunConfig& cfg) {
  if (!obj.is_object()) fail("optim must be an object");
  check_keys(obj, "optim.", {"lr", "momentum", "epochs", "batch_size"});
  if (const json* v = find(obj, "lr")) cfg.lr = get_double(*v, "optim.lr");
  if (const json* v = find(obj, "momentum")) cfg.sgd_momentum = get_double(*v, "optim.momentum");
  if (const json* v = find(obj, "epochs")) cfg.epochs = get_size(*v, "optim.epochs");
  if (const json* v = find(obj, "batch_size")) cfg.batch_size = get_size(*v, "optim.batch_size");
}

void parse_output(const json& obj, RunConfig& cfg) {
  if (!obj.is_object()) fail("output must be an object");
  check_keys(obj, "output.", {"dir", "timing"});
  if (const json* v = find(obj, "dir")) cfg.out_dir = get_string(*v, "output.dir");
  if (const json* v = find(obj, "timing")) {
    const std::string timing = get_string(*v, "output.timing");
    if (timing == "none") cfg.timing = false;
    else if (timing == "measured") cfg.timing = true;
    else fail("output.timing '" + timing + "' is not one of none, measured");
  }
}

void apply_env_seed(RunConfig& cfg) {
  const char* raw = std::getenv("NORMKIT_SEED");
  if (raw == nullptr || *raw == '\0') return;
  std::uint64_t value = 0;
  const char* last = raw + std::string_view(raw).size();
  auto [ptr, errc] = std::from_chars(raw, last, value);
  if (errc != std::errc{} || ptr != last)
    fail(std::string("NORMKIT_SEED '") + raw + "' is not an unsigned integer");
  cfg.seed = value;
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  json root = json::parse(text, nullptr, false);
  if (root.is_discarded()) fail("not valid JSON");
  if (!root.is_object()) fail("top level must be an object");
  check_keys(root, "", {"seed", "norm", "model", "data", "optim", "output"});

  RunConfig cfg;
  if (const json* v = find(root, "seed")) cfg.seed = get_uint(*v, "seed");
  if (const json* v = find(root, "norm")) parse_norm(*v, cfg);
  if (const json* v = find(root, "model")) parse_model(*v, cfg);
  if (const json* v = find(root, "data")) parse_data(*v, cfg);
  if (const json* v = find(root, "optim")) parse_optim(*v, cfg);
  if (const json* v = find(root, "output")) parse_output(*v, cfg);

  apply_env_seed(cfg);
  validate_config(cfg);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_config: cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (in.bad()) throw IoError("load_config: read failed for " + path.string());
  return parse_config_text(buffer.str());
}

void validate_config(const RunConfig& cfg) {
  if (!std::isfinite(cfg.norm.eps) || cfg.norm.eps <= 0.0) fail("norm.eps must be > 0");
  if (cfg.norm.groups == 0) fail("norm.groups must be >= 1");
  if (!std::isfinite(cfg.norm.momentum) || cfg.norm.momentum <= 0.0 || cfg.norm.momentum >= 1.0)
    fail("norm.momentum must lie in (0, 1)");

  if (cfg.widths.empty()) fail("model.widths must be non-empty");
  for (std::size_t w : cfg.widths)
    if (w == 0) fail("model.widths entries must be >= 1");
  if (cfg.blocks_per_stage == 0) fail("model.blocks_per_stage must be >= 1");
  if (cfg.classes < 2) fail("model.classes must be >= 2");
  try {
    validate_model_config(model_config(cfg));
  } catch (const std::invalid_argument& err) {
    fail(err.what());
  }

  if (cfg.data_source != "synthetic" && cfg.data_source != "files")
    fail("data.source '" + cfg.data_source + "' is not one of synthetic, files");
  if (cfg.data_source == "files" && cfg.data_dir.empty())
    fail("data.dir is required when data.source is files");
  if (cfg.data_source == "synthetic") {
    if (cfg.train_per_class == 0) fail("data.train_per_class must be >= 1");
    if (cfg.val_per_class == 0) fail("data.val_per_class must be >= 1");
    if (cfg.image_size < 4 || cfg.image_size > 256)
      fail("data.image_size must lie in [4, 256]");
    if (!std::isfinite(cfg.noise) || cfg.noise < 0.0) fail("data.noise must be >= 0");
    const std::size_t train_size = cfg.train_per_class * cfg.classes;
    if (cfg.batch_size > train_size)
      fail("optim.batch_size " + std::to_string(cfg.batch_size) +
           " exceeds the training-set size " + std::to_string(train_size));
  }

  if (!std::isfinite(cfg.lr) || cfg.lr <= 0.0) fail("optim.lr must be > 0");
  if (!std::isfinite(cfg.sgd_momentum) || cfg.sgd_momentum < 0.0 || cfg.sgd_momentum >= 1.0)
    fail("optim.momentum must lie in [0, 1)");
  if (cfg.batch_size == 0) fail("optim.batch_size must be >= 1");

  if (cfg.out_dir.empty()) fail("output.dir must be non-empty");
}

ModelConfig model_config(const RunConfig& cfg) {
  ModelConfig mc;
  mc.stage_widths = cfg.widths;
  mc.blocks_per_stage = cfg.blocks_per_stage;
  mc.classes = cfg.classes;
  mc.block_style = cfg.block_style;
  mc.norm = cfg.norm;
  mc.in_channels = 1;
  mc.stem_pool = cfg.stem_pool;
  return mc;
}

SgdConfig sgd_config(const RunConfig& cfg) {
  SgdConfig sc;
  sc.lr = cfg.lr;
  sc.momentum = cfg.sgd_momentum;
  sc.epochs = cfg.epochs;
  sc.batch_size = cfg.batch_size;
  sc.seed = shuffle_seed(cfg.seed);
  return sc;
}

SyntheticSpec synthetic_spec(const RunConfig& cfg) {
  SyntheticSpec spec;
  spec.classes = cfg.classes;
  spec.train_per_class = cfg.train_per_class;
  spec.val_per_class = cfg.val_per_class;
  spec.image_size = cfg.image_size;
  spec.noise = cfg.noise;
  spec.seed = data_seed(cfg.seed);
  return spec;
}

std::uint64_t init_seed(std::uint64_t seed) { return derive_seed(seed, 1); }
std::uint64_t shuffle_seed(std::uint64_t seed) { return derive_seed(seed, 2); }
std::uint64_t data_seed(std::uint64_t seed) { return derive_seed(seed, 3); }

SyntheticSpec parse_synthetic_spec_text(const std::string& text) {
  json root = json::parse(text, nullptr, false);
  if (root.is_discarded()) fail("not valid JSON");
  if (!root.is_object()) fail("top level must be an object");
  check_keys(root, "",
             {"classes", "train_per_class", "val_per_class", "image_size", "noise", "seed"});

  SyntheticSpec spec;
  if (const json* v = find(root, "classes")) spec.classes = get_size(*v, "classes");
  if (const json* v = find(root, "train_per_class"))
    spec.train_per_class = get_size(*v, "train_per_class");
  if (const json* v = find(root, "val_per_class"))
    spec.val_per_class = get_size(*v, "val_per_class");
  if (const json* v = find(root, "image_size")) spec.image_size = get_size(*v, "image_size");
  if (const json* v = find(root, "noise")) spec.noise = get_double(*v, "noise");
  if (const json* v = find(root, "seed")) spec.seed = get_uint(*v, "seed");
  return spec;
}

SyntheticSpec load_synthetic_spec(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_synthetic_spec: cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (in.bad()) throw IoError("load_synthetic_spec: read failed for " + path.string());
  return parse_synthetic_spec_text(buffer.str());
}

}  // namespace normkit
