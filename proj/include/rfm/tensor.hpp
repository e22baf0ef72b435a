#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace rfm {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles. The value type behind every feature map,
/// weight and gradient in the library.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, v); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const;
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::int64_t i, std::int64_t j);
  double at(std::int64_t i, std::int64_t j) const;
  double& at(std::int64_t c, std::int64_t y, std::int64_t x);
  double at(std::int64_t c, std::int64_t y, std::int64_t x) const;
  double& at(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x);
  double at(std::int64_t b, std::int64_t c, std::int64_t y, std::int64_t x) const;

  /// Same data, new extents. Throws if the element count differs.
  Tensor reshaped(Shape shape) const;
  void reshape(Shape shape);

  void fill(double v);
  bool all_finite() const;
  double sum() const;
  double max_abs() const;

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

// Binary serialization: "RFMT", u32 rank, u64 extents, f64 payload, all little-endian.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace rfm
