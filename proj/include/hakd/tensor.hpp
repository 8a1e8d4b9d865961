#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "hakd/errors.hpp"
#include "hakd/rng.hpp"

namespace hakd {

using Dims = std::vector<std::size_t>;

inline std::size_t numel(const Dims& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

inline std::string dims_to_string(const Dims& dims) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. A rank-0 tensor holds one value and is the scalar
// representation used throughout the library.
template <typename T>
class Tensor {
 public:
  Tensor() : dims_{}, data_(1, T(0)) {}

  explicit Tensor(Dims dims) : dims_(std::move(dims)), data_(numel(dims_), T(0)) {}

  Tensor(Dims dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != numel(dims_))
      throw shape_error("tensor data length " + std::to_string(data_.size()) +
                        " does not match dims " + dims_to_string(dims_));
  }

  static Tensor scalar(T v) {
    Tensor t;
    t.data_[0] = v;
    return t;
  }

  static Tensor full(Dims dims, T v) {
    Tensor t(std::move(dims));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const Dims& dims() const { return dims_; }
  std::size_t ndim() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return dims_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool is_scalar() const { return data_.size() == 1; }
  T scalar_value() const {
    if (!is_scalar()) throw contract_error("tensor is not a scalar: " + dims_to_string(dims_));
    return data_[0];
  }

  // Same data, new dims; element count must match.
  Tensor reshaped(Dims new_dims) const {
    if (numel(new_dims) != data_.size())
      throw shape_error("reshape " + dims_to_string(dims_) + " -> " + dims_to_string(new_dims));
    Tensor t;
    t.dims_ = std::move(new_dims);
    t.data_ = data_;
    return t;
  }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

 private:
  Dims dims_;
  std::vector<T> data_;
};

template <typename T>
inline void require_same_dims(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.dims() != b.dims())
    throw shape_error(std::string(op) + ": dims mismatch " + dims_to_string(a.dims()) + " vs " +
                      dims_to_string(b.dims()));
}

template <typename T>
inline void require_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw invalid_input(std::string(op) + ": non-finite input value");
}

template <typename T>
inline Tensor<T> random_uniform(Dims dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(dims));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
inline Tensor<T> random_normal(Dims dims, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  Tensor<T> t(std::move(dims));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(mean + stddev * rng.normal());
  return t;
}

template <typename Dst, typename Src>
inline Tensor<Dst> cast_tensor(const Tensor<Src>& src) {
  Tensor<Dst> out(src.dims());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<Dst>(src[i]);
  return out;
}

// Integer label maps: class ids in [0, C) plus the ignore sentinel.
using LabelTensor = Tensor<std::int32_t>;
inline constexpr std::int32_t kIgnoreLabel = 255;

}  // namespace hakd
