#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "hakd/autodiff.hpp"
#include "hakd/mathops.hpp"
#include "hakd/tensor.hpp"

namespace hakd {

namespace detail {

template <typename T>
inline void check_logits_labels(const Tensor<T>& z, const LabelTensor& y, const char* op) {
  if (z.ndim() < 2) throw shape_error(std::string(op) + ": logits need a channel dim");
  Dims spatial(z.dims().begin(), z.dims().end() - 1);
  if (spatial != y.dims())
    throw shape_error(std::string(op) + ": logits spatial dims " + dims_to_string(z.dims()) +
                      " do not match labels " + dims_to_string(y.dims()));
}

}  // namespace detail

// Per-pixel, per-channel binary cross-entropy between the sigmoid of a logit
// channel and the one-hot label indicator. Low means reliable. Ignore pixels
// hold 0 and are masked from every downstream reduction.
template <typename T>
inline Tensor<T> reliability(const Tensor<T>& logits, const LabelTensor& labels) {
  detail::check_logits_labels(logits, labels, "reliability");
  const std::size_t c = logits.dims().back();
  const std::size_t px = labels.size();
  Tensor<T> out(logits.dims());
  for (std::size_t p = 0; p < px; ++p) {
    const std::int32_t y = labels[p];
    if (y == kIgnoreLabel) continue;  // leave the sentinel 0
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw invalid_label("reliability: label " + std::to_string(y) + " out of range for C = " +
                          std::to_string(c));
    const T* zp = logits.data() + p * c;
    T* op = out.data() + p * c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T s = clamp_prob(stable_sigmoid(zp[ch]));
      op[ch] = static_cast<std::size_t>(y) == ch ? -std::log(s) : -std::log(T(1) - s);
    }
  }
  return out;
}

// Teacher-side mixing weight: 1 - Ht / (Ht + Hs), with the all-reliable tie
// (Ht + Hs below the floor) defined as 0.5.
template <typename T>
inline Tensor<T> mixing_weights(const Tensor<T>& h_teacher, const Tensor<T>& h_student) {
  require_same_dims(h_teacher, h_student, "mixing_weights");
  Tensor<T> out(h_teacher.dims());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T ht = h_teacher[i];
    const T hs = h_student[i];
    if (ht < T(0) || hs < T(0)) throw invalid_input("mixing_weights: negative reliability");
    const T denom = ht + hs;
    out[i] = denom < static_cast<T>(kProbFloor) ? T(0.5) : T(1) - ht / denom;
  }
  return out;
}

// Convex per-pixel, per-channel blend of teacher and student logits. This is
// a teaching-signal construction: callers must pass detached values, the
// result never joins a gradient path.
template <typename T>
inline Tensor<T> hybrid_logits(const Tensor<T>& z_teacher, const Tensor<T>& z_student,
                               const Tensor<T>& mix) {
  require_same_dims(z_teacher, z_student, "hybrid_logits");
  require_same_dims(z_teacher, mix, "hybrid_logits");
  Tensor<T> out(z_teacher.dims());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T s = mix[i];
    if (s < T(0) || s > T(1)) throw invalid_input("hybrid_logits: mix weight outside [0,1]");
    out[i] = s * z_teacher[i] + (T(1) - s) * z_student[i];
  }
  return out;
}

// Positive part of the student-minus-hybrid reliability gap.
template <typename T>
inline Tensor<T> relative_importance(const Tensor<T>& h_student, const Tensor<T>& h_hybrid) {
  require_same_dims(h_student, h_hybrid, "relative_importance");
  Tensor<T> out(h_student.dims());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T d = h_student[i] - h_hybrid[i];
    out[i] = d > T(0) ? d : T(0);
  }
  return out;
}

// Per-pixel channel weights: softmax over channels of Hs + dH, computed with
// max-subtraction. Because relative_importance never emits a negative value,
// the dH <= 0 branch of the two-branch form coincides with dH = 0 and this
// single softmax realizes both.
template <typename T>
inline Tensor<T> kem_weights(const Tensor<T>& h_student, const Tensor<T>& delta) {
  require_same_dims(h_student, delta, "kem_weights");
  if (h_student.ndim() < 1) throw shape_error("kem_weights: rank-0 input");
  const std::size_t c = h_student.dims().back();
  Tensor<T> out(h_student.dims());
  const std::size_t rows = out.size() / c;
  std::vector<T> row(c);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* hp = h_student.data() + r * c;
    const T* dp = delta.data() + r * c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (dp[ch] < T(0)) throw invalid_input("kem_weights: negative importance");
      row[ch] = hp[ch] + dp[ch];
    }
    softmax_row(row.data(), out.data() + r * c, c, T(1));
  }
  return out;
}

// Reweighted distillation loss between hybrid-target and student soft class
// probabilities:
//   (1/C) * mean over non-ignore pixels of sum_c p_hat_c * (-log p_c) * W_c
// with p = softmax(z_student / tau). Targets and weights are plain tensors,
// so gradient flows through the student logits alone.
template <typename T>
inline Var hakd_loss(Tape<T>& tp, const Tensor<T>& z_hybrid, Var z_student, const Tensor<T>& kem,
                     const LabelTensor& labels, T tau) {
  if (!(tau > T(0))) throw invalid_parameter("hakd_loss: tau must be > 0");
  const Tensor<T>& zs = tp.value(z_student);
  require_same_dims(z_hybrid, zs, "hakd_loss");
  require_same_dims(z_hybrid, kem, "hakd_loss");
  detail::check_logits_labels(zs, labels, "hakd_loss");
  const std::size_t c = zs.dims().back();
  const std::size_t px = labels.size();

  Tensor<T> p_hat = softmax_temperature(z_hybrid, tau);
  Tensor<T> p_s = softmax_temperature(zs, tau);

  std::size_t valid = 0;
  double acc = 0.0;
  for (std::size_t p = 0; p < px; ++p) {
    if (labels[p] == kIgnoreLabel) continue;
    ++valid;
    const T* tp_ = p_hat.data() + p * c;
    const T* sp = p_s.data() + p * c;
    const T* wp = kem.data() + p * c;
    double pixel = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch)
      pixel += static_cast<double>(tp_[ch]) *
               -std::log(std::max(static_cast<double>(sp[ch]), kProbFloor)) *
               static_cast<double>(wp[ch]);
    acc += pixel;
  }
  const double denom = valid > 0 ? static_cast<double>(valid) * static_cast<double>(c) : 1.0;
  const T loss = static_cast<T>(acc / denom);

  LabelTensor labels_copy = labels;
  auto back = [z_student, p_hat, p_s, kem, labels_copy, c, px, denom, tau](Tape<T>& t, int self) {
    if (!t.wants_grad(z_student)) return;
    const T g = t.grad_mut(self)[0];
    Tensor<T>& gz = t.grad_mut(z_student);
    const T scale = g / static_cast<T>(denom);
    for (std::size_t p = 0; p < px; ++p) {
      if (labels_copy[p] == kIgnoreLabel) continue;
      const T* tp_ = p_hat.data() + p * c;
      const T* sp = p_s.data() + p * c;
      const T* wp = kem.data() + p * c;
      // e_c = p_hat_c * W_c where the log was live (p above the floor);
      // d loss / d z_k = (1/tau) * (p_k * sum_c e_c - e_k) per pixel.
      T esum = T(0);
      std::vector<T> e(c);
      for (std::size_t ch = 0; ch < c; ++ch) {
        e[ch] = static_cast<double>(sp[ch]) > kProbFloor ? tp_[ch] * wp[ch] : T(0);
        esum += e[ch];
      }
      T* gp = gz.data() + p * c;
      for (std::size_t ch = 0; ch < c; ++ch)
        gp[ch] += scale / tau * (sp[ch] * esum - e[ch]);
    }
  };
  return tp.record(Tensor<T>::scalar(loss), {z_student}, back);
}

// Value-only evaluation of the reweighted loss.
template <typename T>
inline T hakd_loss_value(const Tensor<T>& z_hybrid, const Tensor<T>& z_student,
                         const Tensor<T>& kem, const LabelTensor& labels, T tau) {
  Tape<T> tp;
  Var zs = tp.constant(z_student);
  return tp.value(hakd_loss(tp, z_hybrid, zs, kem, labels, tau)).scalar_value();
}

// Mean of the reliability map over non-ignore pixels and channels, as a
// differentiable objective. Fitting a projector against this calibrates its
// logits to the labels, which is what makes the reliability maps meaningful.
template <typename T>
inline Var reliability_loss(Tape<T>& tp, Var logits, const LabelTensor& labels) {
  const Tensor<T>& z = tp.value(logits);
  detail::check_logits_labels(z, labels, "reliability_loss");
  const std::size_t c = z.dims().back();
  const std::size_t px = labels.size();
  Tensor<T> h = reliability(z, labels);
  std::size_t valid = 0;
  double acc = 0.0;
  for (std::size_t p = 0; p < px; ++p) {
    if (labels[p] == kIgnoreLabel) continue;
    ++valid;
    for (std::size_t ch = 0; ch < c; ++ch) acc += static_cast<double>(h[p * c + ch]);
  }
  const double denom = valid > 0 ? static_cast<double>(valid) * static_cast<double>(c) : 1.0;
  const T loss = static_cast<T>(acc / denom);
  LabelTensor labels_copy = labels;
  auto back = [logits, labels_copy, c, px, denom](Tape<T>& t, int self) {
    if (!t.wants_grad(logits)) return;
    const T g = t.grad_mut(self)[0];
    const Tensor<T>& z = t.value(logits);
    Tensor<T>& gz = t.grad_mut(logits);
    const T scale = g / static_cast<T>(denom);
    for (std::size_t p = 0; p < px; ++p) {
      const std::int32_t y = labels_copy[p];
      if (y == kIgnoreLabel) continue;
      const T* zp = z.data() + p * c;
      T* gp = gz.data() + p * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T s = stable_sigmoid(zp[ch]);
        // d BCE / dz = sigmoid(z) - target, flat where the probability clamp
        // is active.
        if (static_cast<double>(s) <= kProbFloor || static_cast<double>(s) >= 1.0 - kProbFloor)
          continue;
        const T target = static_cast<std::size_t>(y) == ch ? T(1) : T(0);
        gp[ch] += scale * (s - target);
      }
    }
  };
  return tp.record(Tensor<T>::scalar(loss), {logits}, back);
}

}  // namespace hakd
