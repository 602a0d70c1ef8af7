#include "normkit/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "normkit/rng.hpp"

namespace normkit {

namespace {

void check_shape(const Shape& s, const char* who) {
  if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
    throw std::invalid_argument(std::string(who) + ": every dimension must be >= 1, got " +
                                s.str());
  }
}

}  // namespace

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
         std::to_string(w);
}

std::string AxisSet::str() const {
  std::string out = "{";
  const char* names[] = {"N", "C", "H", "W"};
  for (Axis a : {Axis::N, Axis::C, Axis::H, Axis::W}) {
    if (!contains(a)) continue;
    if (out.size() > 1) out += ",";
    out += names[static_cast<int>(a)];
  }
  return out + "}";
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape) {
  check_shape(shape, "Tensor");
  data_.assign(shape.count(), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
  check_shape(shape, "Tensor");
  if (data_.size() != shape.count()) {
    throw std::invalid_argument("Tensor: shape " + shape.str() + " wants " +
                                std::to_string(shape.count()) + " values, got " +
                                std::to_string(data_.size()));
  }
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor random_normal(Shape shape, Rng& rng, double mean, double stddev) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(mean, stddev);
  return t;
}

Tensor reduce_mean(const Tensor& t, AxisSet axes) {
  if (t.empty()) throw std::invalid_argument("reduce_mean: empty tensor");
  if (axes.empty()) throw std::invalid_argument("reduce_mean: empty axis set");
  const Shape& s = t.shape();
  const Shape os{axes.contains(Axis::N) ? 1 : s.n, axes.contains(Axis::C) ? 1 : s.c,
                 axes.contains(Axis::H) ? 1 : s.h, axes.contains(Axis::W) ? 1 : s.w};
  Tensor out(os);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w)
          out.at(os.n == 1 ? 0 : n, os.c == 1 ? 0 : c, os.h == 1 ? 0 : h, os.w == 1 ? 0 : w) +=
              t.at(n, c, h, w);
  const double scale = 1.0 / (static_cast<double>(s.count()) / static_cast<double>(os.count()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= scale;
  return out;
}

Tensor reduce_var(const Tensor& t, AxisSet axes, const Tensor& mean) {
  if (t.empty()) throw std::invalid_argument("reduce_var: empty tensor");
  if (axes.empty()) throw std::invalid_argument("reduce_var: empty axis set");
  const Shape& s = t.shape();
  const Shape os{axes.contains(Axis::N) ? 1 : s.n, axes.contains(Axis::C) ? 1 : s.c,
                 axes.contains(Axis::H) ? 1 : s.h, axes.contains(Axis::W) ? 1 : s.w};
  if (mean.shape() != os) {
    throw std::invalid_argument("reduce_var: mean shape " + mean.shape().str() +
                                " does not match reduction over " + axes.str() + " of " + s.str() +
                                " (want " + os.str() + ")");
  }
  Tensor out(os);
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t h = 0; h < s.h; ++h)
        for (std::size_t w = 0; w < s.w; ++w) {
          const std::size_t on = os.n == 1 ? 0 : n, oc = os.c == 1 ? 0 : c,
                            oh = os.h == 1 ? 0 : h, ow = os.w == 1 ? 0 : w;
          const double d = t.at(n, c, h, w) - mean.at(on, oc, oh, ow);
          out.at(on, oc, oh, ow) += d * d;
        }
  const double scale = 1.0 / (static_cast<double>(s.count()) / static_cast<double>(os.count()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= scale;
  return out;
}

Tensor map_binary(const Tensor& a, const Tensor& b, BinaryOp op) {
  if (a.empty() || b.empty()) throw std::invalid_argument("map_binary: empty tensor");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool ok = (sb.n == sa.n || sb.n == 1) && (sb.c == sa.c || sb.c == 1) &&
                  (sb.h == sa.h || sb.h == 1) && (sb.w == sa.w || sb.w == 1);
  if (!ok) {
    throw std::invalid_argument("map_binary: shape " + sb.str() + " does not broadcast to " +
                                sa.str());
  }
  Tensor out(sa);
  for (std::size_t n = 0; n < sa.n; ++n)
    for (std::size_t c = 0; c < sa.c; ++c)
      for (std::size_t h = 0; h < sa.h; ++h)
        for (std::size_t w = 0; w < sa.w; ++w) {
          const double x = a.at(n, c, h, w);
          const double y = b.at(sb.n == 1 ? 0 : n, sb.c == 1 ? 0 : c, sb.h == 1 ? 0 : h,
                                sb.w == 1 ? 0 : w);
          double r = 0.0;
          switch (op) {
            case BinaryOp::Add: r = x + y; break;
            case BinaryOp::Sub: r = x - y; break;
            case BinaryOp::Mul: r = x * y; break;
            case BinaryOp::Div:
              if (y == 0.0) {
                throw std::domain_error("map_binary: division by zero at " + std::to_string(n) +
                                        "," + std::to_string(c) + "," + std::to_string(h) + "," +
                                        std::to_string(w));
              }
              r = x / y;
              break;
          }
          out.at(n, c, h, w) = r;
        }
  return out;
}

GroupedShape regroup(const Shape& shape, std::size_t groups) {
  check_shape(shape, "regroup");
  if (groups == 0 || shape.c % groups != 0) {
    throw std::invalid_argument("regroup: group count " + std::to_string(groups) +
                                " does not divide channel count " + std::to_string(shape.c));
  }
  return GroupedShape{shape.n, groups, shape.c / groups, shape.h, shape.w};
}

Shape ungroup(const GroupedShape& grouped) {
  Shape s{grouped.n, grouped.groups * grouped.channels_per_group, grouped.h, grouped.w};
  check_shape(s, "ungroup");
  return s;
}

namespace {

constexpr std::size_t kHeaderSize = 24;
constexpr unsigned char kMagic[4] = {0x4e, 0x4b, 0x54, 0x31};  // "NKT1"

std::uint32_t load_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

void store_u32(unsigned char* p, std::uint32_t v) {
  p[0] = v & 0xff;
  p[1] = (v >> 8) & 0xff;
  p[2] = (v >> 16) & 0xff;
  p[3] = (v >> 24) & 0xff;
}

std::uint64_t load_u64(const unsigned char* p) {
  return std::uint64_t(load_u32(p)) | std::uint64_t(load_u32(p + 4)) << 32;
}

void store_u64(unsigned char* p, std::uint64_t v) {
  store_u32(p, static_cast<std::uint32_t>(v));
  store_u32(p + 4, static_cast<std::uint32_t>(v >> 32));
}

}  // namespace

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open for reading");
  in.seekg(0, std::ios::end);
  const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  if (file_size < kHeaderSize) throw FormatError(path.string() + ": truncated header");

  unsigned char header[kHeaderSize];
  if (!in.read(reinterpret_cast<char*>(header), kHeaderSize)) {
    throw IoError(path.string() + ": header read failed");
  }
  if (std::memcmp(header, kMagic, 4) != 0) throw FormatError(path.string() + ": bad magic");
  if (load_u32(header + 4) != 0) throw FormatError(path.string() + ": reserved bytes nonzero");

  const std::uint32_t dims[4] = {load_u32(header + 8), load_u32(header + 12),
                                 load_u32(header + 16), load_u32(header + 20)};
  const char* dim_names[4] = {"n", "c", "h", "w"};
  for (int i = 0; i < 4; ++i) {
    if (dims[i] == 0) {
      throw FormatError(path.string() + ": dimension " + dim_names[i] + " is zero");
    }
  }
  unsigned __int128 count = 1;
  for (int i = 0; i < 4; ++i) count *= dims[i];
  if (count > (unsigned __int128)(std::numeric_limits<std::uint64_t>::max() - kHeaderSize) / 8) {
    throw FormatError(path.string() + ": dimensions overflow the addressable payload size");
  }
  const std::uint64_t n_values = static_cast<std::uint64_t>(count);
  const std::uint64_t expected = kHeaderSize + 8 * n_values;
  if (file_size < expected) throw FormatError(path.string() + ": truncated payload");
  if (file_size > expected) throw FormatError(path.string() + ": trailing bytes after payload");

  std::vector<double> values(n_values);
  std::vector<unsigned char> buffer(8 * n_values);
  if (!in.read(reinterpret_cast<char*>(buffer.data()),
               static_cast<std::streamsize>(buffer.size()))) {
    throw IoError(path.string() + ": payload read failed");
  }
  for (std::uint64_t i = 0; i < n_values; ++i) {
    values[i] = std::bit_cast<double>(load_u64(buffer.data() + 8 * i));
  }
  return Tensor(Shape{dims[0], dims[1], dims[2], dims[3]}, std::move(values));
}

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  if (t.empty()) throw std::invalid_argument("write_tensor: empty tensor");
  const Shape& s = t.shape();
  constexpr std::size_t dim_max = std::numeric_limits<std::uint32_t>::max();
  if (s.n > dim_max || s.c > dim_max || s.h > dim_max || s.w > dim_max) {
    throw std::invalid_argument("write_tensor: dimension exceeds uint32 range in " + s.str());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");

  unsigned char header[kHeaderSize] = {};
  std::memcpy(header, kMagic, 4);
  store_u32(header + 8, static_cast<std::uint32_t>(s.n));
  store_u32(header + 12, static_cast<std::uint32_t>(s.c));
  store_u32(header + 16, static_cast<std::uint32_t>(s.h));
  store_u32(header + 20, static_cast<std::uint32_t>(s.w));
  out.write(reinterpret_cast<const char*>(header), kHeaderSize);

  std::vector<unsigned char> buffer(8 * t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    store_u64(buffer.data() + 8 * i, std::bit_cast<std::uint64_t>(t[i]));
  }
  out.write(reinterpret_cast<const char*>(buffer.data()),
            static_cast<std::streamsize>(buffer.size()));
  if (!out) throw IoError(path.string() + ": write failed");
}

}  // namespace normkit
