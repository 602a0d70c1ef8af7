#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <vector>

#include "normkit/error.hpp"

namespace normkit {

// Dimensions of a dense 4-D array in (batch, channel, height, width) order.
struct Shape {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  std::size_t count() const { return n * c * h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;  // "2x4x3x3"
};

enum class Axis { N, C, H, W };

// Set of reduction axes.
class AxisSet {
 public:
  AxisSet() = default;
  AxisSet(std::initializer_list<Axis> axes) {
    for (Axis a : axes) mask_ |= bit(a);
  }

  bool contains(Axis a) const { return (mask_ & bit(a)) != 0; }
  bool empty() const { return mask_ == 0; }
  std::string str() const;  // "{N,H,W}"

 private:
  static unsigned bit(Axis a) { return 1u << static_cast<unsigned>(a); }
  unsigned mask_ = 0;
};

// Dense 4-D tensor of 64-bit floats, row-major with w fastest. All shapes
// in this library are NCHW; vectors and matrices use size-1 trailing axes.
class Tensor {
 public:
  Tensor() = default;  // empty; any operation on it is invalid

  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor full(Shape shape, double value) { return Tensor(shape, value); }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    assert(n < shape_.n && c < shape_.c && h < shape_.h && w < shape_.w);
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[index(n, c, h, w)];
  }
  double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[index(n, c, h, w)];
  }

  double& operator[](std::size_t flat) { return data_[flat]; }
  double operator[](std::size_t flat) const { return data_[flat]; }

  bool all_finite() const;

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Filled with draws from N(mean, stddev^2) in flat order.
Tensor random_normal(Shape shape, class Rng& rng, double mean = 0.0, double stddev = 1.0);

// Mean over the given axes; reduced axes collapse to size 1.
Tensor reduce_mean(const Tensor& t, AxisSet axes);

// Biased variance (divide by element count) over the given axes. `mean`
// must be the matching reduce_mean output.
Tensor reduce_var(const Tensor& t, AxisSet axes, const Tensor& mean);

enum class BinaryOp { Add, Sub, Mul, Div };

// Elementwise op with broadcasting: each axis of b must equal a's or be 1.
Tensor map_binary(const Tensor& a, const Tensor& b, BinaryOp op);

inline Tensor add(const Tensor& a, const Tensor& b) { return map_binary(a, b, BinaryOp::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return map_binary(a, b, BinaryOp::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return map_binary(a, b, BinaryOp::Mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return map_binary(a, b, BinaryOp::Div); }

// Grouped view of a tensor's channel axis: (n, c, h, w) seen as
// (n, groups, c/groups, h, w). Data is shared, not copied; NCHW layout
// already has group-mates contiguous, so only the bookkeeping changes.
struct GroupedShape {
  std::size_t n = 0, groups = 0, channels_per_group = 0, h = 0, w = 0;
  std::size_t count() const { return n * groups * channels_per_group * h * w; }
};

GroupedShape regroup(const Shape& shape, std::size_t groups);
Shape ungroup(const GroupedShape& grouped);

// NKT1 tensor file format. Little-endian throughout:
//   bytes 0-3   magic "NKT1" (4E 4B 54 31)
//   bytes 4-7   reserved, must be zero
//   bytes 8-23  four uint32 dims n, c, h, w, each >= 1
//   bytes 24-   n*c*h*w IEEE-754 binary64 payload, w fastest
// No padding, no trailing bytes.
Tensor read_tensor(const std::filesystem::path& path);
void write_tensor(const Tensor& t, const std::filesystem::path& path);

}  // namespace normkit
