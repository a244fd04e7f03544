#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace icre {

/// Dense row-major double tensor, rank <= 4 in practice (NCHW / NTC / NxD).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
  }
  Tensor(std::vector<int64_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
      throw std::invalid_argument("Tensor: data size does not match shape");
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }
  static Tensor ones(std::vector<int64_t> shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const { return shape_.size(); }
  int64_t numel() const { return numel_of(shape_); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // NCHW-style accessors; caller is responsible for matching rank.
  double& at2(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double at2(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  double& at3(int64_t i, int64_t j, int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at3(int64_t i, int64_t j, int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  double at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(0.0); }

  Tensor reshaped(std::vector<int64_t> new_shape) const {
    if (numel_of(new_shape) != numel())
      throw std::invalid_argument("Tensor::reshaped: element count mismatch");
    return Tensor(std::move(new_shape), data_);
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
  std::string shape_str() const { return shape_str(shape_); }

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

inline void check_finite(const Tensor& t, const char* what) {
  for (double v : t.vec())
    if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value in ") + what);
}

}  // namespace icre
