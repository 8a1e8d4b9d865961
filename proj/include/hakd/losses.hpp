#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "hakd/autodiff.hpp"
#include "hakd/distill.hpp"
#include "hakd/mathops.hpp"
#include "hakd/tensor.hpp"

namespace hakd {

enum class KdDirection {
  teacher_to_student,          // KL(p_t || p_s), teacher as reference
  literal_student_to_teacher,  // KL(p_s || p_t)
};

struct DistillConfig {
  double tau = 1.0;
  double lambda1 = 0.1;
  double lambda2 = 1.0;
  KdDirection kd_direction = KdDirection::teacher_to_student;
  double warmup_fraction = 0.1;  // in [0, 1)
  bool tau2_scaling = false;

  void validate() const {
    if (!(tau > 0.0)) throw invalid_parameter("DistillConfig: tau must be > 0");
    if (lambda1 < 0.0 || lambda2 < 0.0)
      throw invalid_parameter("DistillConfig: lambda weights must be >= 0");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
      throw invalid_parameter("DistillConfig: warmup_fraction must be in [0, 1)");
  }
};

// Pixel-averaged KL between per-pixel temperature softmaxes of student and
// teacher output logits. The teacher side is a plain tensor and carries no
// gradient. Ignore pixels are excluded from the mean.
template <typename T>
inline Var kd_loss(Tape<T>& tp, Var z_student, const Tensor<T>& z_teacher,
                   const LabelTensor& labels, T tau, KdDirection direction) {
  if (!(tau > T(0))) throw invalid_parameter("kd_loss: tau must be > 0");
  const Tensor<T>& zs = tp.value(z_student);
  require_same_dims(zs, z_teacher, "kd_loss");
  detail::check_logits_labels(zs, labels, "kd_loss");
  const std::size_t c = zs.dims().back();
  const std::size_t px = labels.size();

  Tensor<T> p_s = softmax_temperature(zs, tau);
  Tensor<T> p_t = softmax_temperature(z_teacher, tau);

  std::size_t valid = 0;
  double acc = 0.0;
  for (std::size_t p = 0; p < px; ++p) {
    if (labels[p] == kIgnoreLabel) continue;
    ++valid;
    const T* sp = p_s.data() + p * c;
    const T* tpp = p_t.data() + p * c;
    double pixel = 0.0;
    if (direction == KdDirection::teacher_to_student) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double pt = static_cast<double>(tpp[ch]);
        if (pt == 0.0) continue;
        pixel += pt * std::log(pt / std::max(static_cast<double>(sp[ch]), kProbFloor));
      }
    } else {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double ps = static_cast<double>(sp[ch]);
        if (ps == 0.0) continue;
        pixel += ps * std::log(ps / std::max(static_cast<double>(tpp[ch]), kProbFloor));
      }
    }
    acc += pixel;
  }
  const double denom = valid > 0 ? static_cast<double>(valid) : 1.0;
  const T loss = static_cast<T>(acc / denom);

  LabelTensor labels_copy = labels;
  auto back = [z_student, p_s, p_t, labels_copy, c, px, denom, tau, direction](Tape<T>& t,
                                                                               int self) {
    if (!t.wants_grad(z_student)) return;
    const T g = t.grad_mut(self)[0];
    Tensor<T>& gz = t.grad_mut(z_student);
    const T scale = g / static_cast<T>(denom);
    std::vector<T> e(c);
    for (std::size_t p = 0; p < px; ++p) {
      if (labels_copy[p] == kIgnoreLabel) continue;
      const T* sp = p_s.data() + p * c;
      const T* tpp = p_t.data() + p * c;
      T* gp = gz.data() + p * c;
      if (direction == KdDirection::teacher_to_student) {
        // d/dz_k of -sum_c pt_c log ps_c (pt log pt is constant):
        // (1/tau) * (ps_k * sum_c e_c - e_k), e_c = pt_c where the log is live.
        T esum = T(0);
        for (std::size_t ch = 0; ch < c; ++ch) {
          e[ch] = static_cast<double>(sp[ch]) > kProbFloor ? tpp[ch] : T(0);
          esum += e[ch];
        }
        for (std::size_t ch = 0; ch < c; ++ch)
          gp[ch] += scale / tau * (sp[ch] * esum - e[ch]);
      } else {
        // d/dz_k of sum_c ps_c log(ps_c / pt~_c) = (1/tau) * ps_k (r_k - KL_pixel).
        double klp = 0.0;
        std::vector<double> r(c, 0.0);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double ps = static_cast<double>(sp[ch]);
          if (ps == 0.0) continue;
          r[ch] = std::log(ps / std::max(static_cast<double>(tpp[ch]), kProbFloor));
          klp += ps * r[ch];
        }
        for (std::size_t ch = 0; ch < c; ++ch)
          gp[ch] += scale / tau * sp[ch] * static_cast<T>(r[ch] - klp);
      }
    }
  };
  return tp.record(Tensor<T>::scalar(loss), {z_student}, back);
}

template <typename T>
inline T kd_loss_value(const Tensor<T>& z_student, const Tensor<T>& z_teacher,
                       const LabelTensor& labels, T tau, KdDirection direction) {
  Tape<T> tp;
  Var zs = tp.constant(z_student);
  return tp.value(kd_loss(tp, zs, z_teacher, labels, tau, direction)).scalar_value();
}

// Feature-regression baseline: mean over pixels of the squared channel
// residual between teacher features and projected student features.
template <typename T>
inline Var fd_loss(Tape<T>& tp, Var psi_student, const Tensor<T>& f_teacher) {
  const Tensor<T>& fs = tp.value(psi_student);
  if (fs.dims() != f_teacher.dims())
    throw shape_error("fd_loss: projected student dims " + dims_to_string(fs.dims()) +
                      " do not match teacher " + dims_to_string(f_teacher.dims()));
  const std::size_t c = fs.dims().back();
  const std::size_t px = fs.size() / c;
  double acc = 0.0;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    const double d = static_cast<double>(f_teacher[i]) - static_cast<double>(fs[i]);
    acc += d * d;
  }
  const T loss = static_cast<T>(acc / static_cast<double>(px));
  Tensor<T> teacher_copy = f_teacher;
  auto back = [psi_student, teacher_copy, px](Tape<T>& t, int self) {
    if (!t.wants_grad(psi_student)) return;
    const T g = t.grad_mut(self)[0];
    const Tensor<T>& fs = t.value(psi_student);
    Tensor<T>& gf = t.grad_mut(psi_student);
    const T scale = g * T(2) / static_cast<T>(px);
    for (std::size_t i = 0; i < fs.size(); ++i)
      gf[i] += scale * (fs[i] - teacher_copy[i]);
  };
  return tp.record(Tensor<T>::scalar(loss), {psi_student}, back);
}

template <typename T>
inline T fd_loss_value(const Tensor<T>& psi_student, const Tensor<T>& f_teacher) {
  Tape<T> tp;
  Var fs = tp.constant(psi_student);
  return tp.value(fd_loss(tp, fs, f_teacher)).scalar_value();
}

// Pixel-wise cross-entropy over the softmax of output logits, averaged over
// non-ignore pixels, with the probability floored at kProbFloor.
template <typename T>
inline Var task_loss(Tape<T>& tp, Var z, const LabelTensor& labels) {
  const Tensor<T>& zs = tp.value(z);
  detail::check_logits_labels(zs, labels, "task_loss");
  const std::size_t c = zs.dims().back();
  const std::size_t px = labels.size();
  Tensor<T> p = softmax_temperature(zs, T(1));
  std::size_t valid = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < px; ++i) {
    const std::int32_t y = labels[i];
    if (y == kIgnoreLabel) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw invalid_label("task_loss: label " + std::to_string(y) + " out of range");
    ++valid;
    acc += -std::log(std::max(static_cast<double>(p[i * c + static_cast<std::size_t>(y)]),
                              kProbFloor));
  }
  const double denom = valid > 0 ? static_cast<double>(valid) : 1.0;
  const T loss = static_cast<T>(acc / denom);
  LabelTensor labels_copy = labels;
  auto back = [z, p, labels_copy, c, px, denom](Tape<T>& t, int self) {
    if (!t.wants_grad(z)) return;
    const T g = t.grad_mut(self)[0];
    Tensor<T>& gz = t.grad_mut(z);
    const T scale = g / static_cast<T>(denom);
    for (std::size_t i = 0; i < px; ++i) {
      const std::int32_t y = labels_copy[i];
      if (y == kIgnoreLabel) continue;
      const T* pp = p.data() + i * c;
      const std::size_t yc = static_cast<std::size_t>(y);
      if (static_cast<double>(pp[yc]) <= kProbFloor) continue;  // log saturated at the floor
      T* gp = gz.data() + i * c;
      for (std::size_t ch = 0; ch < c; ++ch)
        gp[ch] += scale * (pp[ch] - (ch == yc ? T(1) : T(0)));
    }
  };
  return tp.record(Tensor<T>::scalar(loss), {z}, back);
}

template <typename T>
inline T task_loss_value(const Tensor<T>& z, const LabelTensor& labels) {
  Tape<T> tp;
  Var zv = tp.constant(z);
  return tp.value(task_loss(tp, zv, labels)).scalar_value();
}

// task + lambda1 * kd + lambda2 * hakd, evaluated left to right.
inline double total_loss(double task, double kd, double hakd, const DistillConfig& cfg) {
  cfg.validate();
  if (!std::isfinite(task) || !std::isfinite(kd) || !std::isfinite(hakd))
    throw invalid_input("total_loss: non-finite component");
  return task + cfg.lambda1 * kd + cfg.lambda2 * hakd;
}

// Tape-side combination with the same evaluation order.
template <typename T>
inline Var total_loss(Tape<T>& tp, Var task, Var kd, Var hakd, const DistillConfig& cfg) {
  cfg.validate();
  return add(tp, add(tp, task, scale(tp, kd, static_cast<T>(cfg.lambda1))),
             scale(tp, hakd, static_cast<T>(cfg.lambda2)));
}

}  // namespace hakd
