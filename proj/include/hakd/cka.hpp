#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "hakd/tensor.hpp"

namespace hakd {

// Representation-similarity analysis runs in double regardless of the
// training dtype.

// K = X * X^T for an n x d feature matrix. The upper triangle is computed
// once and mirrored, so the result is exactly symmetric.
inline Tensor<double> gram(const Tensor<double>& x) {
  if (x.ndim() != 2) throw shape_error("gram: expected n x d matrix, got " + dims_to_string(x.dims()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (n < 1 || d < 1) throw shape_error("gram: empty matrix");
  Tensor<double> k(Dims{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data() + i * d;
    for (std::size_t j = i; j < n; ++j) {
      const double* xj = x.data() + j * d;
      double acc = 0.0;
      for (std::size_t t = 0; t < d; ++t) acc += xi[t] * xj[t];
      k[i * n + j] = acc;
      k[j * n + i] = acc;
    }
  }
  return k;
}

// Unbiased HSIC estimator. With Kt, Lt the inputs with zeroed diagonals:
//   [ tr(Kt*Lt) + (1'Kt1)(1'Lt1)/((n-1)(n-2)) - (2/(n-2)) * 1'Kt*Lt*1 ] / (n(n-3))
// May legitimately be negative.
inline double hsic_unbiased(const Tensor<double>& k, const Tensor<double>& l) {
  if (k.ndim() != 2 || l.ndim() != 2 || k.dim(0) != k.dim(1) || l.dim(0) != l.dim(1) ||
      k.dim(0) != l.dim(0))
    throw shape_error("hsic_unbiased: expected matching square matrices");
  const std::size_t n = k.dim(0);
  if (n < 4) throw invalid_parameter("hsic_unbiased: needs n >= 4, got n = " + std::to_string(n));

  auto off = [n](const Tensor<double>& m, std::size_t i, std::size_t j) {
    return i == j ? 0.0 : m[i * n + j];
  };

  double trace_kl = 0.0;  // tr(Kt * Lt)
  double sum_k = 0.0;     // 1' Kt 1
  double sum_l = 0.0;     // 1' Lt 1
  std::vector<double> col_k(n, 0.0), row_l(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double kv = off(k, i, j);
      const double lv = off(l, i, j);
      trace_kl += kv * off(l, j, i);
      sum_k += kv;
      sum_l += lv;
      col_k[j] += kv;
      row_l[i] += lv;
    }
  }
  // 1' Kt Lt 1 = sum_t colsum(Kt)[t] * rowsum(Lt)[t]
  double quad = 0.0;
  for (std::size_t t = 0; t < n; ++t) quad += col_k[t] * row_l[t];
  const double dn = static_cast<double>(n);
  const double value = (trace_kl + sum_k * sum_l / ((dn - 1.0) * (dn - 2.0)) -
                        2.0 * quad / (dn - 2.0)) /
                       (dn * (dn - 3.0));
  if (!std::isfinite(value)) throw numeric_error("hsic_unbiased: non-finite result");
  return value;
}

// Streaming state for minibatch CKA: three HSIC running sums plus the
// minibatch count. n is fixed across minibatches.
struct CkaAccumulator {
  double hsic_xy_sum = 0.0;
  double hsic_xx_sum = 0.0;
  double hsic_yy_sum = 0.0;
  std::size_t k = 0;
  std::size_t n = 0;

  void add(const Tensor<double>& x, const Tensor<double>& y) {
    if (x.ndim() != 2 || y.ndim() != 2 || x.dim(0) != y.dim(0))
      throw shape_error("CkaAccumulator: paired minibatches must share the sample count");
    if (n == 0) n = x.dim(0);
    if (x.dim(0) != n)
      throw shape_error("CkaAccumulator: minibatch sample count changed mid-stream");
    if (n < 4) throw invalid_parameter("CkaAccumulator: unbiased HSIC needs n >= 4");
    Tensor<double> gx = gram(x);
    Tensor<double> gy = gram(y);
    hsic_xy_sum += hsic_unbiased(gx, gy);
    hsic_xx_sum += hsic_unbiased(gx, gx);
    hsic_yy_sum += hsic_unbiased(gy, gy);
    ++k;
  }

  double finalize() const {
    if (k < 1) throw invalid_parameter("CkaAccumulator: no minibatches accumulated");
    const double kk = static_cast<double>(k);
    const double mean_xx = hsic_xx_sum / kk;
    const double mean_yy = hsic_yy_sum / kk;
    if (!(mean_xx > 0.0) || !(mean_yy > 0.0))
      throw degenerate_input("minibatch_cka: non-positive mean self-HSIC (constant features?)");
    return (hsic_xy_sum / kk) / (std::sqrt(mean_xx) * std::sqrt(mean_yy));
  }
};

// CKA over paired minibatch streams of per-sample feature vectors.
inline double minibatch_cka(const std::vector<Tensor<double>>& stream_x,
                            const std::vector<Tensor<double>>& stream_y) {
  if (stream_x.size() != stream_y.size() || stream_x.empty())
    throw invalid_parameter("minibatch_cka: streams must be non-empty and equally long");
  CkaAccumulator acc;
  for (std::size_t i = 0; i < stream_x.size(); ++i) acc.add(stream_x[i], stream_y[i]);
  return acc.finalize();
}

// Collapses a per-sample spatial feature map to one vector per sample.
// Accepts n x d (returned as-is) or n x H x W x d (global average pool).
inline Tensor<double> pool_features(const Tensor<double>& f) {
  if (f.ndim() == 2) return f;
  if (f.ndim() != 4)
    throw shape_error("pool_features: expected n x d or n x H x W x d, got " +
                      dims_to_string(f.dims()));
  const std::size_t n = f.dim(0), h = f.dim(1), w = f.dim(2), d = f.dim(3);
  Tensor<double> out(Dims{n, d});
  const double inv = 1.0 / static_cast<double>(h * w);
  for (std::size_t s = 0; s < n; ++s) {
    const double* fp = f.data() + s * h * w * d;
    double* op = out.data() + s * d;
    for (std::size_t px = 0; px < h * w; ++px)
      for (std::size_t c = 0; c < d; ++c) op[c] += fp[px * d + c];
    for (std::size_t c = 0; c < d; ++c) op[c] *= inv;
  }
  return out;
}

// Splits pooled n_total x d features into consecutive minibatches of size n;
// a trailing remainder smaller than n is dropped.
inline std::vector<Tensor<double>> make_minibatches(const Tensor<double>& pooled, std::size_t n) {
  if (pooled.ndim() != 2) throw shape_error("make_minibatches: expected n_total x d");
  if (n < 4) throw invalid_parameter("make_minibatches: n must be >= 4");
  const std::size_t total = pooled.dim(0), d = pooled.dim(1);
  std::vector<Tensor<double>> out;
  for (std::size_t start = 0; start + n <= total; start += n) {
    Tensor<double> mb(Dims{n, d});
    std::copy(pooled.data() + start * d, pooled.data() + (start + n) * d, mb.data());
    out.push_back(std::move(mb));
  }
  return out;
}

struct CkaHeatmap {
  std::vector<std::string> row_names;
  std::vector<std::string> col_names;
  // row-major [rows x cols]; nullopt marks a degenerate cell.
  std::vector<std::optional<double>> cells;

  std::optional<double> at(std::size_t i, std::size_t j) const {
    return cells[i * col_names.size() + j];
  }
};

// Pairwise CKA between two models' layer streams. A degenerate cell
// (constant features on either side) is recorded as empty instead of
// aborting the whole map.
inline CkaHeatmap cka_heatmap(const std::vector<std::string>& names_a,
                              const std::vector<std::vector<Tensor<double>>>& layers_a,
                              const std::vector<std::string>& names_b,
                              const std::vector<std::vector<Tensor<double>>>& layers_b) {
  if (names_a.size() != layers_a.size() || names_b.size() != layers_b.size())
    throw invalid_parameter("cka_heatmap: name/stream count mismatch");
  CkaHeatmap map;
  map.row_names = names_a;
  map.col_names = names_b;
  map.cells.resize(names_a.size() * names_b.size());
  for (std::size_t i = 0; i < layers_a.size(); ++i) {
    for (std::size_t j = 0; j < layers_b.size(); ++j) {
      try {
        map.cells[i * names_b.size() + j] = minibatch_cka(layers_a[i], layers_b[j]);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::degenerate_input) throw;
        map.cells[i * names_b.size() + j] = std::nullopt;
      }
    }
  }
  return map;
}

}  // namespace hakd
