#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>

#include "hakd/autodiff.hpp"
#include "hakd/interp.hpp"
#include "hakd/tensor.hpp"
#include "hakd/tensor_io.hpp"

namespace hakd {

// Counts every projector evaluation. Tests use it to assert that the plain
// inference path never touches projector parameters.
inline std::atomic<std::uint64_t>& projector_eval_count() {
  static std::atomic<std::uint64_t> count{0};
  return count;
}

enum class NormMode { train, eval };

// 1x1 projection head: per-pixel linear map, batch norm, rectifier.
// weight is [C, d] (row per output channel).
template <typename T>
struct ProjectorParams {
  Tensor<T> weight;            // [c_out, d_in]
  Tensor<T> bias;              // [c_out]
  Tensor<T> bn_gamma;          // [c_out]
  Tensor<T> bn_beta;           // [c_out]
  Tensor<T> bn_running_mean;   // [c_out]
  Tensor<T> bn_running_var;    // [c_out]
  T bn_eps = static_cast<T>(1e-5);
  T bn_momentum = static_cast<T>(0.1);
  NormMode mode = NormMode::eval;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_depth() const { return weight.dim(1); }

  static ProjectorParams identity(std::size_t channels) {
    ProjectorParams p;
    p.weight = Tensor<T>(Dims{channels, channels});
    for (std::size_t i = 0; i < channels; ++i) p.weight[i * channels + i] = T(1);
    p.bias = Tensor<T>(Dims{channels});
    p.bn_gamma = Tensor<T>::full(Dims{channels}, T(1));
    p.bn_beta = Tensor<T>(Dims{channels});
    p.bn_running_mean = Tensor<T>(Dims{channels});
    p.bn_running_var = Tensor<T>::full(Dims{channels}, T(1));
    return p;
  }

  static ProjectorParams init(std::size_t out_channels, std::size_t in_depth, Rng& rng) {
    ProjectorParams p;
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_depth));
    p.weight = random_uniform<T>(Dims{out_channels, in_depth}, rng, -bound, bound);
    p.bias = Tensor<T>(Dims{out_channels});
    p.bn_gamma = Tensor<T>::full(Dims{out_channels}, T(1));
    p.bn_beta = Tensor<T>(Dims{out_channels});
    p.bn_running_mean = Tensor<T>(Dims{out_channels});
    p.bn_running_var = Tensor<T>::full(Dims{out_channels}, T(1));
    return p;
  }

  void validate() const {
    if (weight.ndim() != 2 || bias.size() != weight.dim(0))
      throw shape_error("projector: weight/bias mismatch");
    if (!(bn_eps > T(0))) throw invalid_parameter("projector: bn_eps must be > 0");
    for (std::size_t i = 0; i < bn_running_var.size(); ++i)
      if (bn_running_var[i] < T(0))
        throw invalid_input("projector: negative running variance");
  }
};

// Tape-side projector evaluation. In train mode the result carries the
// proposed running-stat update; committing it is the trainer's job.
template <typename T>
struct ProjectorBinding {
  Var weight, bias, gamma, beta;
  ProjectorParams<T>* params = nullptr;
};

template <typename T>
inline ProjectorBinding<T> bind_projector(Tape<T>& tp, ProjectorParams<T>& p, bool trainable) {
  ProjectorBinding<T> b;
  b.weight = tp.leaf(p.weight, trainable);
  b.bias = tp.leaf(p.bias, trainable);
  b.gamma = tp.leaf(p.bn_gamma, trainable);
  b.beta = tp.leaf(p.bn_beta, trainable);
  b.params = &p;
  return b;
}

template <typename T>
struct ProjectedLogits {
  Var logits;
  // Valid only in train mode; empty tensors otherwise.
  Tensor<T> new_running_mean;
  Tensor<T> new_running_var;
};

// features: [N, H, W, d] -> logits [N, H, W, C] at feature resolution.
template <typename T>
inline ProjectedLogits<T> project_to_logits(Tape<T>& tp, Var features,
                                            const ProjectorBinding<T>& proj) {
  projector_eval_count().fetch_add(1, std::memory_order_relaxed);
  const ProjectorParams<T>& p = *proj.params;
  p.validate();
  if (tp.value(features).dims().back() != p.in_depth())
    throw shape_error("project_to_logits: feature depth " +
                      std::to_string(tp.value(features).dims().back()) +
                      " does not match projector depth " + std::to_string(p.in_depth()));
  Var lin = linear_ct(tp, features, proj.weight, proj.bias);
  ProjectedLogits<T> out;
  if (p.mode == NormMode::train) {
    BatchNormResult<T> bn = batchnorm_train(tp, lin, proj.gamma, proj.beta, p.bn_running_mean,
                                            p.bn_running_var, p.bn_momentum, p.bn_eps);
    out.new_running_mean = std::move(bn.new_running_mean);
    out.new_running_var = std::move(bn.new_running_var);
    out.logits = relu(tp, bn.y);
  } else {
    Var bn = batchnorm_eval(tp, lin, proj.gamma, proj.beta, p.bn_running_mean, p.bn_running_var,
                            p.bn_eps);
    out.logits = relu(tp, bn);
  }
  return out;
}

// Plain (no-gradient) evaluation; forward math identical to the tape path.
template <typename T>
inline Tensor<T> project_to_logits_eval(const Tensor<T>& features, ProjectorParams<T>& p) {
  Tape<T> tp;
  Var f = tp.constant(features);
  ProjectorBinding<T> b = bind_projector(tp, p, false);
  ProjectedLogits<T> out = project_to_logits(tp, f, b);
  return tp.value(out.logits);
}

// Baseline feature projector: per-pixel linear map only, into the teacher's
// feature depth. No norm, no rectifier.
template <typename T>
inline Var project_features_psi(Tape<T>& tp, Var features, const ProjectorBinding<T>& proj) {
  projector_eval_count().fetch_add(1, std::memory_order_relaxed);
  const ProjectorParams<T>& p = *proj.params;
  if (tp.value(features).dims().back() != p.in_depth())
    throw shape_error("project_features_psi: feature depth mismatch");
  return linear_ct(tp, features, proj.weight, proj.bias);
}

template <typename T>
inline Tensor<T> project_features_psi_eval(const Tensor<T>& features, ProjectorParams<T>& p) {
  Tape<T> tp;
  Var f = tp.constant(features);
  ProjectorBinding<T> b = bind_projector(tp, p, false);
  return tp.value(project_features_psi(tp, f, b));
}

enum class ResampleMethod { bilinear, nearest };

// Resamples a logits/feature map to the target spatial size. Labels are
// never resampled; callers bring logits to label resolution instead.
template <typename T>
inline Tensor<T> align_spatial(const Tensor<T>& map, std::size_t target_h, std::size_t target_w,
                               ResampleMethod method) {
  if (method == ResampleMethod::bilinear) return bilinear_resize(map, target_h, target_w);
  return nearest_resize(map, target_h, target_w);
}

// Projector checkpoint: manifest naming one tensor file per parameter.
template <typename T>
inline void save_projector(const ProjectorParams<T>& p, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_tensor(p.weight, dir / "weight.hakd");
  save_tensor(p.bias, dir / "bias.hakd");
  save_tensor(p.bn_gamma, dir / "bn_gamma.hakd");
  save_tensor(p.bn_beta, dir / "bn_beta.hakd");
  save_tensor(p.bn_running_mean, dir / "bn_running_mean.hakd");
  save_tensor(p.bn_running_var, dir / "bn_running_var.hakd");
  std::ofstream os(dir / "manifest.txt");
  if (!os) throw io_error("cannot write projector manifest in " + dir.string());
  os << "projector v1\n";
  for (const char* name :
       {"weight", "bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"})
    os << "param " << name << " " << name << ".hakd\n";
}

template <typename T>
inline ProjectorParams<T> load_projector(const std::filesystem::path& dir) {
  ProjectorParams<T> p;
  p.weight = load_tensor<T>(dir / "weight.hakd");
  p.bias = load_tensor<T>(dir / "bias.hakd");
  p.bn_gamma = load_tensor<T>(dir / "bn_gamma.hakd");
  p.bn_beta = load_tensor<T>(dir / "bn_beta.hakd");
  p.bn_running_mean = load_tensor<T>(dir / "bn_running_mean.hakd");
  p.bn_running_var = load_tensor<T>(dir / "bn_running_var.hakd");
  p.validate();
  return p;
}

}  // namespace hakd
