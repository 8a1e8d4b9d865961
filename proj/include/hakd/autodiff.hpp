#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "hakd/interp.hpp"
#include "hakd/mathops.hpp"
#include "hakd/tensor.hpp"

namespace hakd {

// Handle into a Tape. Plain value type; only meaningful together with the
// tape that produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended during the forward pass; backward()
// zeroes all gradients and replays the recorded closures in strict reverse
// creation order, so two replays of the same graph are bit-identical.
// Single-owner: one tape per training step, never shared across threads.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int self)>;

  Var leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Records a node whose backward closure reads grad(self) and accumulates
  // into the gradients of its inputs. The node requires a gradient iff any
  // input does; closures must test wants_grad per input before writing.
  Var record(Tensor<T> value, const std::vector<Var>& inputs, BackFn back) {
    bool needs_grad = false;
    for (Var v : inputs) needs_grad = needs_grad || nodes_[v.id].requires_grad;
    nodes_.push_back(Node{std::move(value), Tensor<T>(), needs_grad,
                          needs_grad ? std::move(back) : BackFn{}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(Var v) const { return nodes_[v.id].value; }
  const Tensor<T>& value(int id) const { return nodes_[id].value; }

  const Tensor<T>& grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (!n.requires_grad) throw contract_error("grad requested for a non-gradient node");
    return n.grad;
  }

  bool wants_grad(Var v) const { return v.valid() && nodes_[v.id].requires_grad; }

  Tensor<T>& grad_mut(Var v) { return nodes_[v.id].grad; }
  Tensor<T>& grad_mut(int id) { return nodes_[id].grad; }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var root) {
    if (!root.valid() || root.id >= static_cast<int>(nodes_.size()))
      throw contract_error("backward: invalid root");
    if (!nodes_[root.id].value.is_scalar())
      throw contract_error("backward: root must be a scalar");
    if (!nodes_[root.id].requires_grad)
      throw contract_error("backward: root does not depend on any gradient leaf");
    for (int i = 0; i <= root.id; ++i) {
      Node& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.grad.dims() != n.value.dims()) n.grad = Tensor<T>(n.value.dims());
      n.grad.fill(T(0));
    }
    nodes_[root.id].grad[0] = T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackFn backward;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <typename T>
inline Var add(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& va = tp.value(a);
  const Tensor<T>& vb = tp.value(b);
  require_same_dims(va, vb, "add");
  Tensor<T> out(va.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
  return tp.record(std::move(out), {a, b}, [a, b](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    if (t.wants_grad(a)) {
      Tensor<T>& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(b)) {
      Tensor<T>& gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

template <typename T>
inline Var mul(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& va = tp.value(a);
  const Tensor<T>& vb = tp.value(b);
  require_same_dims(va, vb, "mul");
  Tensor<T> out(va.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
  return tp.record(std::move(out), {a, b}, [a, b](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& va = t.value(a);
    const Tensor<T>& vb = t.value(b);
    if (t.wants_grad(a)) {
      Tensor<T>& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (t.wants_grad(b)) {
      Tensor<T>& gb = t.grad_mut(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

template <typename T>
inline Var scale(Tape<T>& tp, Var a, T c) {
  const Tensor<T>& va = tp.value(a);
  Tensor<T> out(va.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * va[i];
  return tp.record(std::move(out), {a}, [a, c](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    if (t.wants_grad(a)) {
      Tensor<T>& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    }
  });
}

// Left-to-right total reduction to a rank-0 scalar.
template <typename T>
inline Var sum(Tape<T>& tp, Var a) {
  const Tensor<T>& va = tp.value(a);
  T acc = T(0);
  for (std::size_t i = 0; i < va.size(); ++i) acc += va[i];
  return tp.record(Tensor<T>::scalar(acc), {a}, [a](Tape<T>& t, int self) {
    const T g = t.grad_mut(self)[0];
    if (t.wants_grad(a)) {
      Tensor<T>& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    }
  });
}

template <typename T>
inline Var relu(Tape<T>& tp, Var a) {
  const Tensor<T>& va = tp.value(a);
  Tensor<T> out(va.dims());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] > T(0) ? va[i] : T(0);
  return tp.record(std::move(out), {a}, [a](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& va = t.value(a);
    if (t.wants_grad(a)) {
      Tensor<T>& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (va[i] > T(0)) ga[i] += g[i];
    }
  });
}

// Exact GELU, x * Phi(x) with the Gaussian CDF.
template <typename T>
inline Var gelu(Tape<T>& tp, Var a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  const Tensor<T>& va = tp.value(a);
  Tensor<T> out(va.dims());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = static_cast<double>(va[i]);
    out[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }
  return tp.record(std::move(out), {a}, [a](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& va = t.value(a);
    if (t.wants_grad(a)) {
      Tensor<T>& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = static_cast<double>(va[i]);
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        ga[i] += g[i] * static_cast<T>(cdf + x * pdf);
      }
    }
  });
}

template <typename T>
inline Var reshape(Tape<T>& tp, Var a, Dims dims) {
  Tensor<T> out = tp.value(a).reshaped(dims);
  return tp.record(std::move(out), {a}, [a](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    if (t.wants_grad(a)) {
      Tensor<T>& ga = t.grad_mut(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear maps
// ---------------------------------------------------------------------------

// x: [..., d_in], w: [d_in, d_out], b: [d_out].
template <typename T>
inline Var linear(Tape<T>& tp, Var x, Var w, Var b) {
  const Tensor<T>& vx = tp.value(x);
  const Tensor<T>& vw = tp.value(w);
  const Tensor<T>& vb = tp.value(b);
  if (vw.ndim() != 2 || vb.ndim() != 1 || vx.ndim() < 1)
    throw shape_error("linear: bad ranks");
  const std::size_t din = vw.dim(0), dout = vw.dim(1);
  if (vx.dims().back() != din || vb.dim(0) != dout)
    throw shape_error("linear: dims mismatch");
  const std::size_t m = vx.size() / din;
  Dims out_dims(vx.dims());
  out_dims.back() = dout;
  Tensor<T> out(out_dims);
  for (std::size_t r = 0; r < m; ++r) {
    const T* xp = vx.data() + r * din;
    T* yp = out.data() + r * dout;
    for (std::size_t o = 0; o < dout; ++o) yp[o] = vb[o];
    for (std::size_t i = 0; i < din; ++i) {
      const T xi = xp[i];
      const T* wp = vw.data() + i * dout;
      for (std::size_t o = 0; o < dout; ++o) yp[o] += xi * wp[o];
    }
  }
  return tp.record(std::move(out), {x, w, b}, [x, w, b, m, din, dout](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& vx = t.value(x);
    const Tensor<T>& vw = t.value(w);
    if (t.wants_grad(x)) {
      Tensor<T>& gx = t.grad_mut(x);
      for (std::size_t r = 0; r < m; ++r) {
        const T* gp = g.data() + r * dout;
        T* gxp = gx.data() + r * din;
        for (std::size_t i = 0; i < din; ++i) {
          const T* wp = vw.data() + i * dout;
          T acc = T(0);
          for (std::size_t o = 0; o < dout; ++o) acc += gp[o] * wp[o];
          gxp[i] += acc;
        }
      }
    }
    if (t.wants_grad(w)) {
      Tensor<T>& gw = t.grad_mut(w);
      for (std::size_t r = 0; r < m; ++r) {
        const T* xp = vx.data() + r * din;
        const T* gp = g.data() + r * dout;
        for (std::size_t i = 0; i < din; ++i) {
          const T xi = xp[i];
          T* gwp = gw.data() + i * dout;
          for (std::size_t o = 0; o < dout; ++o) gwp[o] += xi * gp[o];
        }
      }
    }
    if (t.wants_grad(b)) {
      Tensor<T>& gb = t.grad_mut(b);
      for (std::size_t r = 0; r < m; ++r) {
        const T* gp = g.data() + r * dout;
        for (std::size_t o = 0; o < dout; ++o) gb[o] += gp[o];
      }
    }
  });
}

// x: [..., c_in], w: [c_out, c_in] (row-per-output layout), b: [c_out].
template <typename T>
inline Var linear_ct(Tape<T>& tp, Var x, Var w, Var b) {
  const Tensor<T>& vx = tp.value(x);
  const Tensor<T>& vw = tp.value(w);
  const Tensor<T>& vb = tp.value(b);
  if (vw.ndim() != 2 || vb.ndim() != 1 || vx.ndim() < 1)
    throw shape_error("linear_ct: bad ranks");
  const std::size_t cout = vw.dim(0), cin = vw.dim(1);
  if (vx.dims().back() != cin || vb.dim(0) != cout)
    throw shape_error("linear_ct: dims mismatch (input depth " +
                      std::to_string(vx.dims().back()) + ", weight expects " +
                      std::to_string(cin) + ")");
  const std::size_t m = vx.size() / cin;
  Dims out_dims(vx.dims());
  out_dims.back() = cout;
  Tensor<T> out(out_dims);
  for (std::size_t r = 0; r < m; ++r) {
    const T* xp = vx.data() + r * cin;
    T* yp = out.data() + r * cout;
    for (std::size_t o = 0; o < cout; ++o) {
      const T* wp = vw.data() + o * cin;
      T acc = vb[o];
      for (std::size_t i = 0; i < cin; ++i) acc += wp[i] * xp[i];
      yp[o] = acc;
    }
  }
  return tp.record(std::move(out), {x, w, b}, [x, w, b, m, cin, cout](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& vx = t.value(x);
    const Tensor<T>& vw = t.value(w);
    if (t.wants_grad(x)) {
      Tensor<T>& gx = t.grad_mut(x);
      for (std::size_t r = 0; r < m; ++r) {
        const T* gp = g.data() + r * cout;
        T* gxp = gx.data() + r * cin;
        for (std::size_t o = 0; o < cout; ++o) {
          const T go = gp[o];
          const T* wp = vw.data() + o * cin;
          for (std::size_t i = 0; i < cin; ++i) gxp[i] += go * wp[i];
        }
      }
    }
    if (t.wants_grad(w)) {
      Tensor<T>& gw = t.grad_mut(w);
      for (std::size_t r = 0; r < m; ++r) {
        const T* gp = g.data() + r * cout;
        const T* xp = vx.data() + r * cin;
        for (std::size_t o = 0; o < cout; ++o) {
          const T go = gp[o];
          T* gwp = gw.data() + o * cin;
          for (std::size_t i = 0; i < cin; ++i) gwp[i] += go * xp[i];
        }
      }
    }
    if (t.wants_grad(b)) {
      Tensor<T>& gb = t.grad_mut(b);
      for (std::size_t r = 0; r < m; ++r) {
        const T* gp = g.data() + r * cout;
        for (std::size_t o = 0; o < cout; ++o) gb[o] += gp[o];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution (NHWC, weight [kh, kw, c_in, c_out])
// ---------------------------------------------------------------------------

template <typename T>
inline Var conv2d(Tape<T>& tp, Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
  const Tensor<T>& vx = tp.value(x);
  const Tensor<T>& vw = tp.value(w);
  const Tensor<T>& vb = tp.value(b);
  if (vx.ndim() != 4 || vw.ndim() != 4 || vb.ndim() != 1)
    throw shape_error("conv2d: bad ranks");
  const std::size_t n = vx.dim(0), ih = vx.dim(1), iw = vx.dim(2), cin = vx.dim(3);
  const std::size_t kh = vw.dim(0), kw = vw.dim(1), cout = vw.dim(3);
  if (vw.dim(2) != cin || vb.dim(0) != cout) throw shape_error("conv2d: channel mismatch");
  if (stride == 0) throw invalid_parameter("conv2d: stride must be >= 1");
  const std::size_t oh = (ih + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (iw + 2 * pad - kw) / stride + 1;
  Tensor<T> out(Dims{n, oh, ow, cout});
  for (std::size_t bn = 0; bn < n; ++bn) {
    const T* xim = vx.data() + bn * ih * iw * cin;
    T* yim = out.data() + bn * oh * ow * cout;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T* yp = yim + (oy * ow + ox) * cout;
        for (std::size_t o = 0; o < cout; ++o) yp[o] = vb[o];
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
            const T* xp = xim + (static_cast<std::size_t>(iy) * iw + static_cast<std::size_t>(ix)) * cin;
            const T* wkk = vw.data() + (ky * kw + kx) * cin * cout;
            for (std::size_t i = 0; i < cin; ++i) {
              const T xi = xp[i];
              const T* wp = wkk + i * cout;
              for (std::size_t o = 0; o < cout; ++o) yp[o] += xi * wp[o];
            }
          }
        }
      }
    }
  }
  auto back = [x, w, b, n, ih, iw, cin, kh, kw, cout, oh, ow, stride, pad](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& vx = t.value(x);
    const Tensor<T>& vw = t.value(w);
    const bool need_x = t.wants_grad(x);
    const bool need_w = t.wants_grad(w);
    const bool need_b = t.wants_grad(b);
    Tensor<T>* gx = need_x ? &t.grad_mut(x) : nullptr;
    Tensor<T>* gw = need_w ? &t.grad_mut(w) : nullptr;
    Tensor<T>* gb = need_b ? &t.grad_mut(b) : nullptr;
    for (std::size_t bn = 0; bn < n; ++bn) {
      const T* xim = vx.data() + bn * ih * iw * cin;
      const T* gim = g.data() + bn * oh * ow * cout;
      T* gxim = need_x ? gx->data() + bn * ih * iw * cin : nullptr;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T* gp = gim + (oy * ow + ox) * cout;
          if (need_b) {
            T* gbp = gb->data();
            for (std::size_t o = 0; o < cout; ++o) gbp[o] += gp[o];
          }
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(ih)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(iw)) continue;
              const std::size_t off = (static_cast<std::size_t>(iy) * iw + static_cast<std::size_t>(ix)) * cin;
              const T* xp = xim + off;
              const std::size_t wbase = (ky * kw + kx) * cin * cout;
              if (need_x) {
                T* gxp = gxim + off;
                for (std::size_t i = 0; i < cin; ++i) {
                  const T* wp = vw.data() + wbase + i * cout;
                  T acc = T(0);
                  for (std::size_t o = 0; o < cout; ++o) acc += gp[o] * wp[o];
                  gxp[i] += acc;
                }
              }
              if (need_w) {
                for (std::size_t i = 0; i < cin; ++i) {
                  const T xi = xp[i];
                  T* gwp = gw->data() + wbase + i * cout;
                  for (std::size_t o = 0; o < cout; ++o) gwp[o] += xi * gp[o];
                }
              }
            }
          }
        }
      }
    }
  };
  return tp.record(std::move(out), {x, w, b}, back);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormResult {
  Var y;
  Tensor<T> new_running_mean;
  Tensor<T> new_running_var;
};

// Batch statistics over every axis but the last; population variance.
// The updated running stats are returned to the caller, which commits them
// after the optimizer step (finite-difference replays must not mutate state).
template <typename T>
inline BatchNormResult<T> batchnorm_train(Tape<T>& tp, Var x, Var gamma, Var beta,
                                          const Tensor<T>& running_mean,
                                          const Tensor<T>& running_var, T momentum, T eps) {
  const Tensor<T>& vx = tp.value(x);
  const Tensor<T>& vg = tp.value(gamma);
  const Tensor<T>& vb = tp.value(beta);
  if (vx.ndim() < 2) throw shape_error("batchnorm_train: need at least 2 dims");
  const std::size_t c = vx.dims().back();
  if (vg.size() != c || vb.size() != c || running_mean.size() != c || running_var.size() != c)
    throw shape_error("batchnorm_train: channel mismatch");
  const std::size_t m = vx.size() / c;
  Tensor<T> mean(Dims{c}), var(Dims{c}), inv_std(Dims{c});
  for (std::size_t r = 0; r < m; ++r) {
    const T* xp = vx.data() + r * c;
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += xp[ch];
  }
  for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= static_cast<T>(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* xp = vx.data() + r * c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T d = xp[ch] - mean[ch];
      var[ch] += d * d;
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    var[ch] /= static_cast<T>(m);
    inv_std[ch] = T(1) / std::sqrt(var[ch] + eps);
  }
  Tensor<T> out(vx.dims());
  for (std::size_t r = 0; r < m; ++r) {
    const T* xp = vx.data() + r * c;
    T* yp = out.data() + r * c;
    for (std::size_t ch = 0; ch < c; ++ch)
      yp[ch] = vg[ch] * (xp[ch] - mean[ch]) * inv_std[ch] + vb[ch];
  }
  BatchNormResult<T> res;
  res.new_running_mean = Tensor<T>(Dims{c});
  res.new_running_var = Tensor<T>(Dims{c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    res.new_running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mean[ch];
    res.new_running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * var[ch];
  }
  auto back = [x, gamma, beta, m, c, mean, inv_std](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& vx = t.value(x);
    const Tensor<T>& vg = t.value(gamma);
    // Per-channel sums of dy and dy * xhat, needed by every branch.
    std::vector<T> sum_dy(c, T(0)), sum_dy_xhat(c, T(0));
    for (std::size_t r = 0; r < m; ++r) {
      const T* gp = g.data() + r * c;
      const T* xp = vx.data() + r * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        sum_dy[ch] += gp[ch];
        sum_dy_xhat[ch] += gp[ch] * (xp[ch] - mean[ch]) * inv_std[ch];
      }
    }
    if (t.wants_grad(beta)) {
      Tensor<T>& gb = t.grad_mut(beta);
      for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_dy[ch];
    }
    if (t.wants_grad(gamma)) {
      Tensor<T>& gg = t.grad_mut(gamma);
      for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_dy_xhat[ch];
    }
    if (t.wants_grad(x)) {
      Tensor<T>& gx = t.grad_mut(x);
      const T invm = T(1) / static_cast<T>(m);
      for (std::size_t r = 0; r < m; ++r) {
        const T* gp = g.data() + r * c;
        const T* xp = vx.data() + r * c;
        T* gxp = gx.data() + r * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T xhat = (xp[ch] - mean[ch]) * inv_std[ch];
          gxp[ch] += vg[ch] * inv_std[ch] *
                     (gp[ch] - sum_dy[ch] * invm - xhat * sum_dy_xhat[ch] * invm);
        }
      }
    }
  };
  res.y = tp.record(std::move(out), {x, gamma, beta}, back);
  return res;
}

template <typename T>
inline Var batchnorm_eval(Tape<T>& tp, Var x, Var gamma, Var beta,
                          const Tensor<T>& running_mean, const Tensor<T>& running_var, T eps) {
  const Tensor<T>& vx = tp.value(x);
  const Tensor<T>& vg = tp.value(gamma);
  const Tensor<T>& vb = tp.value(beta);
  const std::size_t c = vx.dims().back();
  if (vg.size() != c || vb.size() != c || running_mean.size() != c || running_var.size() != c)
    throw shape_error("batchnorm_eval: channel mismatch");
  Tensor<T> inv_std(Dims{c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (running_var[ch] < T(0)) throw invalid_input("batchnorm_eval: negative running variance");
    inv_std[ch] = T(1) / std::sqrt(running_var[ch] + eps);
  }
  const std::size_t m = vx.size() / c;
  Tensor<T> out(vx.dims());
  Tensor<T> rm = running_mean;
  for (std::size_t r = 0; r < m; ++r) {
    const T* xp = vx.data() + r * c;
    T* yp = out.data() + r * c;
    for (std::size_t ch = 0; ch < c; ++ch)
      yp[ch] = vg[ch] * (xp[ch] - rm[ch]) * inv_std[ch] + vb[ch];
  }
  auto back = [x, gamma, beta, m, c, rm, inv_std](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& vx = t.value(x);
    const Tensor<T>& vg = t.value(gamma);
    if (t.wants_grad(x)) {
      Tensor<T>& gx = t.grad_mut(x);
      for (std::size_t r = 0; r < m; ++r) {
        const T* gp = g.data() + r * c;
        T* gxp = gx.data() + r * c;
        for (std::size_t ch = 0; ch < c; ++ch) gxp[ch] += gp[ch] * vg[ch] * inv_std[ch];
      }
    }
    if (t.wants_grad(gamma)) {
      Tensor<T>& gg = t.grad_mut(gamma);
      for (std::size_t r = 0; r < m; ++r) {
        const T* gp = g.data() + r * c;
        const T* xp = vx.data() + r * c;
        for (std::size_t ch = 0; ch < c; ++ch)
          gg[ch] += gp[ch] * (xp[ch] - rm[ch]) * inv_std[ch];
      }
    }
    if (t.wants_grad(beta)) {
      Tensor<T>& gb = t.grad_mut(beta);
      for (std::size_t r = 0; r < m; ++r) {
        const T* gp = g.data() + r * c;
        for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += gp[ch];
      }
    }
  };
  return tp.record(std::move(out), {x, gamma, beta}, back);
}

// Per-row normalization over the last dimension.
template <typename T>
inline Var layernorm(Tape<T>& tp, Var x, Var gamma, Var beta, T eps) {
  const Tensor<T>& vx = tp.value(x);
  const Tensor<T>& vg = tp.value(gamma);
  const Tensor<T>& vb = tp.value(beta);
  const std::size_t d = vx.dims().back();
  if (vg.size() != d || vb.size() != d) throw shape_error("layernorm: dim mismatch");
  const std::size_t m = vx.size() / d;
  Tensor<T> out(vx.dims());
  Tensor<T> mean(Dims{m}), inv_std(Dims{m});
  for (std::size_t r = 0; r < m; ++r) {
    const T* xp = vx.data() + r * d;
    T mu = T(0);
    for (std::size_t i = 0; i < d; ++i) mu += xp[i];
    mu /= static_cast<T>(d);
    T v = T(0);
    for (std::size_t i = 0; i < d; ++i) {
      const T t = xp[i] - mu;
      v += t * t;
    }
    v /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(v + eps);
    mean[r] = mu;
    inv_std[r] = inv;
    T* yp = out.data() + r * d;
    for (std::size_t i = 0; i < d; ++i) yp[i] = vg[i] * (xp[i] - mu) * inv + vb[i];
  }
  auto back = [x, gamma, beta, m, d, mean, inv_std](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& vx = t.value(x);
    const Tensor<T>& vg = t.value(gamma);
    const bool need_x = t.wants_grad(x);
    const bool need_g = t.wants_grad(gamma);
    const bool need_b = t.wants_grad(beta);
    for (std::size_t r = 0; r < m; ++r) {
      const T* gp = g.data() + r * d;
      const T* xp = vx.data() + r * d;
      const T mu = mean[r], inv = inv_std[r];
      if (need_g || need_b) {
        Tensor<T>* gg = need_g ? &t.grad_mut(gamma) : nullptr;
        Tensor<T>* gb = need_b ? &t.grad_mut(beta) : nullptr;
        for (std::size_t i = 0; i < d; ++i) {
          if (need_g) (*gg)[i] += gp[i] * (xp[i] - mu) * inv;
          if (need_b) (*gb)[i] += gp[i];
        }
      }
      if (need_x) {
        Tensor<T>& gx = t.grad_mut(x);
        T sum_h = T(0), sum_hx = T(0);
        for (std::size_t i = 0; i < d; ++i) {
          const T h = gp[i] * vg[i];
          sum_h += h;
          sum_hx += h * (xp[i] - mu) * inv;
        }
        const T invd = T(1) / static_cast<T>(d);
        T* gxp = gx.data() + r * d;
        for (std::size_t i = 0; i < d; ++i) {
          const T h = gp[i] * vg[i];
          const T xhat = (xp[i] - mu) * inv;
          gxp[i] += inv * (h - sum_h * invd - xhat * sum_hx * invd);
        }
      }
    }
  };
  return tp.record(std::move(out), {x, gamma, beta}, back);
}

// ---------------------------------------------------------------------------
// Softmax, batched matmul, resize
// ---------------------------------------------------------------------------

template <typename T>
inline Var softmax_lastdim(Tape<T>& tp, Var z, T tau) {
  if (!(tau > T(0))) throw invalid_parameter("softmax_lastdim: tau must be > 0");
  Tensor<T> out = softmax_temperature(tp.value(z), tau);
  const std::size_t c = out.dims().back();
  const std::size_t rows = out.size() / c;
  return tp.record(std::move(out), {z}, [z, tau, c, rows](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& y = t.value(self);
    if (t.wants_grad(z)) {
      Tensor<T>& gz = t.grad_mut(z);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yp = y.data() + r * c;
        const T* gp = g.data() + r * c;
        T dot = T(0);
        for (std::size_t i = 0; i < c; ++i) dot += gp[i] * yp[i];
        T* gzp = gz.data() + r * c;
        for (std::size_t i = 0; i < c; ++i) gzp[i] += yp[i] * (gp[i] - dot) / tau;
      }
    }
  });
}

// C[n,t,s] = sum_d A[n,t,d] * B[n,s,d]
template <typename T>
inline Var bmm_nt(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& va = tp.value(a);
  const Tensor<T>& vb = tp.value(b);
  if (va.ndim() != 3 || vb.ndim() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(2))
    throw shape_error("bmm_nt: dims mismatch");
  const std::size_t n = va.dim(0), tt = va.dim(1), ss = vb.dim(1), d = va.dim(2);
  Tensor<T> out(Dims{n, tt, ss});
  for (std::size_t bn = 0; bn < n; ++bn) {
    const T* ap = va.data() + bn * tt * d;
    const T* bp = vb.data() + bn * ss * d;
    T* cp = out.data() + bn * tt * ss;
    for (std::size_t t = 0; t < tt; ++t)
      for (std::size_t s = 0; s < ss; ++s) {
        const T* ar = ap + t * d;
        const T* br = bp + s * d;
        T acc = T(0);
        for (std::size_t k = 0; k < d; ++k) acc += ar[k] * br[k];
        cp[t * ss + s] = acc;
      }
  }
  return tp.record(std::move(out), {a, b}, [a, b, n, tt, ss, d](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& va = t.value(a);
    const Tensor<T>& vb = t.value(b);
    if (t.wants_grad(a)) {
      Tensor<T>& ga = t.grad_mut(a);
      for (std::size_t bn = 0; bn < n; ++bn) {
        const T* gp = g.data() + bn * tt * ss;
        const T* bp = vb.data() + bn * ss * d;
        T* gap = ga.data() + bn * tt * d;
        for (std::size_t ti = 0; ti < tt; ++ti)
          for (std::size_t s = 0; s < ss; ++s) {
            const T gv = gp[ti * ss + s];
            const T* br = bp + s * d;
            T* gar = gap + ti * d;
            for (std::size_t k = 0; k < d; ++k) gar[k] += gv * br[k];
          }
      }
    }
    if (t.wants_grad(b)) {
      Tensor<T>& gb = t.grad_mut(b);
      for (std::size_t bn = 0; bn < n; ++bn) {
        const T* gp = g.data() + bn * tt * ss;
        const T* ap = va.data() + bn * tt * d;
        T* gbp = gb.data() + bn * ss * d;
        for (std::size_t ti = 0; ti < tt; ++ti)
          for (std::size_t s = 0; s < ss; ++s) {
            const T gv = gp[ti * ss + s];
            const T* ar = ap + ti * d;
            T* gbr = gbp + s * d;
            for (std::size_t k = 0; k < d; ++k) gbr[k] += gv * ar[k];
          }
      }
    }
  });
}

// C[n,t,d] = sum_s A[n,t,s] * B[n,s,d]
template <typename T>
inline Var bmm_nn(Tape<T>& tp, Var a, Var b) {
  const Tensor<T>& va = tp.value(a);
  const Tensor<T>& vb = tp.value(b);
  if (va.ndim() != 3 || vb.ndim() != 3 || va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(1))
    throw shape_error("bmm_nn: dims mismatch");
  const std::size_t n = va.dim(0), tt = va.dim(1), ss = va.dim(2), d = vb.dim(2);
  Tensor<T> out(Dims{n, tt, d});
  for (std::size_t bn = 0; bn < n; ++bn) {
    const T* ap = va.data() + bn * tt * ss;
    const T* bp = vb.data() + bn * ss * d;
    T* cp = out.data() + bn * tt * d;
    for (std::size_t t = 0; t < tt; ++t) {
      T* cr = cp + t * d;
      for (std::size_t k = 0; k < d; ++k) cr[k] = T(0);
      for (std::size_t s = 0; s < ss; ++s) {
        const T av = ap[t * ss + s];
        const T* br = bp + s * d;
        for (std::size_t k = 0; k < d; ++k) cr[k] += av * br[k];
      }
    }
  }
  return tp.record(std::move(out), {a, b}, [a, b, n, tt, ss, d](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    const Tensor<T>& va = t.value(a);
    const Tensor<T>& vb = t.value(b);
    if (t.wants_grad(a)) {
      Tensor<T>& ga = t.grad_mut(a);
      for (std::size_t bn = 0; bn < n; ++bn) {
        const T* gp = g.data() + bn * tt * d;
        const T* bp = vb.data() + bn * ss * d;
        T* gap = ga.data() + bn * tt * ss;
        for (std::size_t ti = 0; ti < tt; ++ti)
          for (std::size_t s = 0; s < ss; ++s) {
            const T* gr = gp + ti * d;
            const T* br = bp + s * d;
            T acc = T(0);
            for (std::size_t k = 0; k < d; ++k) acc += gr[k] * br[k];
            gap[ti * ss + s] += acc;
          }
      }
    }
    if (t.wants_grad(b)) {
      Tensor<T>& gb = t.grad_mut(b);
      for (std::size_t bn = 0; bn < n; ++bn) {
        const T* gp = g.data() + bn * tt * d;
        const T* ap = va.data() + bn * tt * ss;
        T* gbp = gb.data() + bn * ss * d;
        for (std::size_t ti = 0; ti < tt; ++ti) {
          const T* gr = gp + ti * d;
          for (std::size_t s = 0; s < ss; ++s) {
            const T av = ap[ti * ss + s];
            T* gbr = gbp + s * d;
            for (std::size_t k = 0; k < d; ++k) gbr[k] += av * gr[k];
          }
        }
      }
    }
  });
}

template <typename T>
inline Var bilinear_upsample(Tape<T>& tp, Var x, std::size_t out_h, std::size_t out_w) {
  const Tensor<T>& vx = tp.value(x);
  if (vx.ndim() != 4) throw shape_error("bilinear_upsample: expected N x H x W x C");
  Tensor<T> out = bilinear_resize(vx, out_h, out_w);
  const std::size_t n = vx.dim(0), ih = vx.dim(1), iw = vx.dim(2), c = vx.dim(3);
  return tp.record(std::move(out), {x}, [x, n, ih, iw, c, out_h, out_w](Tape<T>& t, int self) {
    const Tensor<T>& g = t.grad_mut(self);
    if (!t.wants_grad(x)) return;
    Tensor<T>& gx = t.grad_mut(x);
    const std::size_t src_img = ih * iw * c;
    const std::size_t dst_img = out_h * out_w * c;
    for (std::size_t bn = 0; bn < n; ++bn) {
      const T* gp = g.data() + bn * dst_img;
      T* gxp = gx.data() + bn * src_img;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const LinearTap ty = linear_tap(oy, out_h, ih);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const LinearTap tx = linear_tap(ox, out_w, iw);
          const T* gpx = gp + (oy * out_w + ox) * c;
          const double wy1 = ty.w_hi, wy0 = 1.0 - wy1;
          const double wx1 = tx.w_hi, wx0 = 1.0 - wx1;
          const double w00 = wy0 * wx0, w01 = wy0 * wx1, w10 = wy1 * wx0, w11 = wy1 * wx1;
          T* g00 = gxp + (ty.lo * iw + tx.lo) * c;
          T* g01 = gxp + (ty.lo * iw + tx.hi) * c;
          T* g10 = gxp + (ty.hi * iw + tx.lo) * c;
          T* g11 = gxp + (ty.hi * iw + tx.hi) * c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T gv = gpx[ch];
            if (w00 != 0.0) g00[ch] += static_cast<T>(w00) * gv;
            if (w01 != 0.0) g01[ch] += static_cast<T>(w01) * gv;
            if (w10 != 0.0) g10[ch] += static_cast<T>(w10) * gv;
            if (w11 != 0.0) g11[ch] += static_cast<T>(w11) * gv;
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

// Compares the tape gradient of fn at `input` against central finite
// differences, coordinate by coordinate, and returns the largest relative
// error. The denominator is floored so near-zero gradients are judged on an
// absolute scale instead of blowing up.
template <typename T>
inline double grad_check(const std::function<Var(Tape<T>&, Var)>& fn, const Tensor<T>& input,
                         T step, double denom_floor = 1e-4) {
  if (!(step > T(0))) throw invalid_parameter("grad_check: step must be > 0");
  Tape<T> tape;
  Var x = tape.leaf(input, true);
  Var y = fn(tape, x);
  if (!tape.value(y).is_scalar())
    throw contract_error("grad_check: objective did not produce a scalar");
  tape.backward(y);
  Tensor<T> analytic = tape.grad(x);

  auto eval = [&fn](const Tensor<T>& point) -> double {
    Tape<T> t;
    Var xi = t.leaf(point, false);
    Var yi = fn(t, xi);
    if (!t.value(yi).is_scalar())
      throw contract_error("grad_check: objective did not produce a scalar");
    return static_cast<double>(t.value(yi).scalar_value());
  };

  double worst = 0.0;
  Tensor<T> probe = input;
  for (std::size_t i = 0; i < input.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + step;
    const double fp = eval(probe);
    probe[i] = orig - step;
    const double fm = eval(probe);
    probe[i] = orig;
    const double fd = (fp - fm) / (2.0 * static_cast<double>(step));
    const double an = static_cast<double>(analytic[i]);
    const double denom = std::max({std::abs(fd), std::abs(an), denom_floor});
    worst = std::max(worst, std::abs(fd - an) / denom);
  }
  return worst;
}

}  // namespace hakd
