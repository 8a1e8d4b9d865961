#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "hakd/tensor.hpp"

namespace hakd {

// The only clamp in the library: log arguments and sigmoid outputs are
// floored/ceilinged here so no reduction ever sees -inf.
inline constexpr double kProbFloor = 1e-12;

template <typename T>
inline T clamp_prob(T p) {
  const T lo = static_cast<T>(kProbFloor);
  const T hi = static_cast<T>(1.0) - lo;
  return std::min(std::max(p, lo), hi);
}

template <typename T>
inline T stable_sigmoid(T x) {
  if (x >= T(0)) {
    T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
inline Tensor<T> sigmoid(const Tensor<T>& x) {
  require_finite(x, "sigmoid");
  Tensor<T> out(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = stable_sigmoid(x[i]);
  return out;
}

// In-place temperature softmax on one contiguous row of length c.
template <typename T>
inline void softmax_row(const T* z, T* out, std::size_t c, T tau) {
  T m = z[0];
  for (std::size_t i = 1; i < c; ++i) m = std::max(m, z[i]);
  T sum = T(0);
  for (std::size_t i = 0; i < c; ++i) {
    out[i] = std::exp((z[i] - m) / tau);
    sum += out[i];
  }
  for (std::size_t i = 0; i < c; ++i) out[i] /= sum;
}

// Temperature softmax over the last dimension. Max-subtraction keeps the
// exponentials bounded for any finite input.
template <typename T>
inline Tensor<T> softmax_temperature(const Tensor<T>& logits, T tau) {
  if (!(tau > T(0))) throw invalid_parameter("softmax_temperature: tau must be > 0");
  if (logits.ndim() == 0) throw shape_error("softmax_temperature: rank-0 input");
  require_finite(logits, "softmax_temperature");
  const std::size_t c = logits.dims().back();
  if (c < 1) throw shape_error("softmax_temperature: empty channel dim");
  Tensor<T> out(logits.dims());
  const std::size_t rows = logits.size() / c;
  for (std::size_t r = 0; r < rows; ++r)
    softmax_row(logits.data() + r * c, out.data() + r * c, c, tau);
  return out;
}

// KL(p || q) for probability vectors; p_i = 0 terms contribute 0 and q is
// floored at kProbFloor.
template <typename T>
inline double kl_divergence(const Tensor<T>& p, const Tensor<T>& q) {
  if (p.dims() != q.dims())
    throw shape_error("kl_divergence: dims mismatch " + dims_to_string(p.dims()) + " vs " +
                      dims_to_string(q.dims()));
  require_finite(p, "kl_divergence");
  require_finite(q, "kl_divergence");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = static_cast<double>(p[i]);
    if (pi < 0.0 || static_cast<double>(q[i]) < 0.0)
      throw invalid_input("kl_divergence: negative probability entry");
    if (pi == 0.0) continue;
    const double qi = std::max(static_cast<double>(q[i]), kProbFloor);
    acc += pi * std::log(pi / qi);
  }
  return acc;
}

// Argmax over the last dim; ties resolve to the lowest index.
template <typename T>
inline LabelTensor argmax_last_dim(const Tensor<T>& t) {
  if (t.ndim() == 0) throw shape_error("argmax_last_dim: rank-0 input");
  const std::size_t c = t.dims().back();
  Dims out_dims(t.dims().begin(), t.dims().end() - 1);
  LabelTensor out(out_dims);
  const std::size_t rows = t.size() / c;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = t.data() + r * c;
    std::size_t best = 0;
    for (std::size_t i = 1; i < c; ++i)
      if (row[i] > row[best]) best = i;
    out[r] = static_cast<std::int32_t>(best);
  }
  return out;
}

}  // namespace hakd
