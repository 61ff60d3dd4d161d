#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "snapdyn/rng.hpp"

namespace snapdyn {

// Dense row-major tensor of 64-bit floats.  Immutable by convention once
// handed to a Tape; mutated in place only by the optimizer between steps.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size())
      throw std::invalid_argument("Tensor: shape " + shape_string() +
                                  " does not match data length " +
                                  std::to_string(data_.size()));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor zeros(std::vector<std::size_t> shape) {
    return Tensor(std::move(shape));
  }

  static Tensor full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  static Tensor vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  static Tensor randn(std::vector<std::size_t> shape, Rng& rng,
                      double sd = 1.0) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = sd * rng.normal();
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }

  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size())
      throw std::invalid_argument("Tensor: dim " + std::to_string(i) +
                                  " out of rank " +
                                  std::to_string(shape_.size()));
    return shape_[i];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

  // Scalar extraction; rejects non-singleton tensors.
  double value() const {
    if (data_.size() != 1)
      throw std::invalid_argument("Tensor: value() on shape " + shape_string());
    return data_[0];
  }

  bool is_scalar() const { return shape_.empty(); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  Tensor reshaped(std::vector<std::size_t> shape) const {
    if (count(shape) != data_.size())
      throw std::invalid_argument("Tensor: cannot reshape " + shape_string() +
                                  " to incompatible shape");
    return Tensor(std::move(shape), data_);
  }

 private:
  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

}  // namespace snapdyn
