#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hakd/autodiff.hpp"
#include "hakd/models.hpp"
#include "hakd/tensor.hpp"

namespace hakd {

// base_lr * (1 - iter/total)^0.9
inline double poly_lr(double base_lr, std::size_t iter, std::size_t total, double power = 0.9) {
  if (total == 0) throw invalid_parameter("poly_lr: total must be > 0");
  if (iter > total) throw invalid_parameter("poly_lr: iter beyond schedule end");
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(total);
  return base_lr * std::pow(frac, power);
}

enum class OptKind { sgd_momentum, adamw };

struct OptimizerSettings {
  OptKind kind = OptKind::sgd_momentum;
  double base_lr = 0.05;
  double momentum = 0.9;        // sgd
  double weight_decay = 1e-4;   // L2 for sgd, decoupled for adamw
  double beta1 = 0.9;           // adamw
  double beta2 = 0.999;         // adamw
  double eps = 1e-8;            // adamw
};

// Per-architecture optimizer split: momentum SGD for the convolutional
// variant, decoupled-weight-decay Adam for the attention variant.
inline OptimizerSettings default_optimizer(Arch arch, double sgd_lr, double adamw_lr) {
  OptimizerSettings s;
  if (arch == Arch::conv) {
    s.kind = OptKind::sgd_momentum;
    s.base_lr = sgd_lr;
  } else {
    s.kind = OptKind::adamw;
    s.base_lr = adamw_lr;
  }
  return s;
}

// Slot-per-parameter optimizer state.
template <typename T>
struct OptState {
  std::vector<Tensor<T>> m1;  // momentum / first moment
  std::vector<Tensor<T>> m2;  // adamw second moment
  std::size_t step_count = 0;

  template <typename ParamList>
  static OptState init(const ParamList& params, OptKind kind) {
    OptState s;
    s.m1.reserve(params.size());
    for (const auto& kv : params) s.m1.emplace_back(kv.second.dims());
    if (kind == OptKind::adamw) {
      s.m2.reserve(params.size());
      for (const auto& kv : params) s.m2.emplace_back(kv.second.dims());
    }
    return s;
  }
};

// One optimizer update over an explicit (param, grad) slot list.
template <typename T>
inline void apply_update(std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
                         OptState<T>& state, const OptimizerSettings& set, double lr) {
  if (params.size() != grads.size() || params.size() != state.m1.size())
    throw contract_error("apply_update: slot count mismatch");
  state.step_count += 1;
  if (set.kind == OptKind::sgd_momentum) {
    for (std::size_t s = 0; s < params.size(); ++s) {
      Tensor<T>& p = *params[s];
      const Tensor<T>& g = *grads[s];
      Tensor<T>& v = state.m1[s];
      const T mu = static_cast<T>(set.momentum);
      const T wd = static_cast<T>(set.weight_decay);
      const T step = static_cast<T>(lr);
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = mu * v[i] + (g[i] + wd * p[i]);
        p[i] -= step * v[i];
      }
    }
  } else {
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(set.beta1, t);
    const double bc2 = 1.0 - std::pow(set.beta2, t);
    for (std::size_t s = 0; s < params.size(); ++s) {
      Tensor<T>& p = *params[s];
      const Tensor<T>& g = *grads[s];
      Tensor<T>& m = state.m1[s];
      Tensor<T>& v = state.m2[s];
      const T b1 = static_cast<T>(set.beta1);
      const T b2 = static_cast<T>(set.beta2);
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        const double mhat = static_cast<double>(m[i]) / bc1;
        const double vhat = static_cast<double>(v[i]) / bc2;
        const double upd = mhat / (std::sqrt(vhat) + set.eps) +
                           set.weight_decay * static_cast<double>(p[i]);
        p[i] -= static_cast<T>(lr * upd);
      }
    }
  }
}

template <typename T>
inline std::string param_norm_digest(const ModelParams<T>& m) {
  std::ostringstream os;
  for (const auto& kv : m.params) {
    double sq = 0.0;
    for (std::size_t i = 0; i < kv.second.size(); ++i) {
      const double v = static_cast<double>(kv.second[i]);
      sq += v * v;
    }
    os << " " << kv.first << "=" << std::sqrt(sq);
  }
  return os.str();
}

// One training step: build a fresh tape, run the caller's loss graph, take
// exact tape gradients, update, commit BN running stats. A non-finite loss
// aborts with the batch id and per-parameter norms in the message.
template <typename T>
inline double train_step(ModelParams<T>& model, OptState<T>& state, const OptimizerSettings& set,
                         double lr,
                         const std::function<Var(Tape<T>&, ModelBinding<T>&)>& build_loss,
                         const std::string& batch_id) {
  Tape<T> tape;
  ModelBinding<T> binding = bind_model(tape, model, true);
  Var loss = build_loss(tape, binding);
  const double loss_value = static_cast<double>(tape.value(loss).scalar_value());
  if (!std::isfinite(loss_value))
    throw numeric_error("non-finite loss at " + batch_id + "; parameter norms:" +
                        param_norm_digest(model));
  tape.backward(loss);

  std::vector<Tensor<T>*> params;
  std::vector<const Tensor<T>*> grads;
  params.reserve(model.params.size());
  grads.reserve(model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    params.push_back(&model.params[i].second);
    grads.push_back(&tape.grad(binding.param_vars[i]));
  }
  apply_update(params, grads, state, set, lr);
  for (auto& [name, value] : binding.pending_buffers) model.buffer(name) = std::move(value);
  if (!model.all_finite())
    throw numeric_error("non-finite parameter after update at " + batch_id +
                        "; parameter norms:" + param_norm_digest(model));
  return loss_value;
}

}  // namespace hakd
