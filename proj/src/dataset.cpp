#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <string>

#include "normkit/error.hpp"
#include "normkit/harness.hpp"
#include "normkit/rng.hpp"

namespace normkit {

namespace {

void check_spec(const SyntheticSpec& spec) {
  if (spec.classes < 2) throw std::invalid_argument("gen_synthetic: classes must be >= 2");
  if (spec.train_per_class == 0 || spec.val_per_class == 0)
    throw std::invalid_argument("gen_synthetic: per-class sample counts must be >= 1");
  if (spec.image_size < 4 || spec.image_size > 256)
    throw std::invalid_argument("gen_synthetic: image_size must be in [4, 256]");
  if (!std::isfinite(spec.noise) || spec.noise < 0.0)
    throw std::invalid_argument("gen_synthetic: noise must be finite and >= 0");
}

Dataset gen_split(const SyntheticSpec& spec, std::size_t per_class, Rng& rng) {
  const std::size_t s = spec.image_size;
  const std::size_t count = per_class * spec.classes;
  Dataset out;
  out.images = Tensor::zeros({count, 1, s, s});
  out.labels.resize(count);

  std::vector<Tensor> archetypes;
  archetypes.reserve(spec.classes);
  for (std::size_t k = 0; k < spec.classes; ++k)
    archetypes.push_back(class_archetype(k, s));

  double* dst = out.images.data();
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % spec.classes;  // round-robin: balanced prefixes
    out.labels[i] = label;
    const double* base = archetypes[label].data();
    for (std::size_t p = 0; p < s * s; ++p)
      dst[i * s * s + p] = base[p] + spec.noise * rng.normal();
  }
  return out;
}

}  // namespace

Tensor class_archetype(std::size_t label, std::size_t image_size) {
  if (image_size == 0) throw std::invalid_argument("class_archetype: image_size must be >= 1");
  const double s = static_cast<double>(image_size);
  const double fx = 1.0 + static_cast<double>(label % 3);
  const double fy = 1.0 + static_cast<double>((label / 3) % 3);
  const double phase_x = 0.7 * static_cast<double>(label);
  const double phase_y = 0.4 * static_cast<double>(label);
  constexpr double tau = 2.0 * std::numbers::pi;

  Tensor out = Tensor::zeros({1, 1, image_size, image_size});
  double* d = out.data();
  for (std::size_t y = 0; y < image_size; ++y) {
    const double cy = std::cos(tau * fy * (static_cast<double>(y) + 0.5) / s + phase_y);
    for (std::size_t x = 0; x < image_size; ++x) {
      const double sx = std::sin(tau * fx * (static_cast<double>(x) + 0.5) / s + phase_x);
      d[y * image_size + x] = sx * cy;
    }
  }
  return out;
}

SyntheticData gen_synthetic(const SyntheticSpec& spec) {
  check_spec(spec);
  Rng rng(spec.seed);
  SyntheticData data;
  data.train = gen_split(spec, spec.train_per_class, rng);
  data.val = gen_split(spec, spec.val_per_class, rng);
  return data;
}

void write_dataset(const Dataset& data, const std::filesystem::path& dir,
                   const std::string& prefix) {
  if (data.labels.size() != data.images.shape().n)
    throw std::invalid_argument("write_dataset: label count does not match image count");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("write_dataset: cannot create directory " + dir.string());

  write_tensor(data.images, dir / (prefix + "_images.nkt"));

  const auto label_path = dir / (prefix + "_labels.txt");
  std::ofstream out(label_path);
  if (!out) throw IoError("write_dataset: cannot open " + label_path.string());
  for (std::size_t label : data.labels) out << label << "\n";
  out.flush();
  if (!out) throw IoError("write_dataset: write failed for " + label_path.string());
}

Dataset read_dataset(const std::filesystem::path& dir, const std::string& prefix) {
  Dataset data;
  data.images = read_tensor(dir / (prefix + "_images.nkt"));

  const auto label_path = dir / (prefix + "_labels.txt");
  std::ifstream in(label_path);
  if (!in) throw IoError("read_dataset: cannot open " + label_path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() && in.peek() == std::char_traits<char>::eof()) break;
    std::size_t value = 0;
    const char* first = line.data();
    const char* last = first + line.size();
    auto [ptr, errc] = std::from_chars(first, last, value);
    if (errc != std::errc{} || ptr != last)
      throw FormatError("read_dataset: bad label at " + label_path.string() + ":" +
                        std::to_string(line_no));
    data.labels.push_back(value);
  }
  if (data.labels.size() != data.images.shape().n)
    throw FormatError("read_dataset: " + std::to_string(data.labels.size()) +
                      " labels for " + std::to_string(data.images.shape().n) + " images");
  return data;
}

}  // namespace normkit
