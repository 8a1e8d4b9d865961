#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hakd/autodiff.hpp"
#include "hakd/rng.hpp"
#include "hakd/tensor.hpp"
#include "hakd/tensor_io.hpp"

namespace hakd {

enum class Arch { conv, attention };

inline std::string arch_name(Arch a) { return a == Arch::conv ? "conv" : "attention"; }

inline Arch arch_from_name(const std::string& s) {
  if (s == "conv") return Arch::conv;
  if (s == "attention") return Arch::attention;
  throw config_error("unknown architecture tag: " + s);
}

inline constexpr double kModelBnEps = 1e-5;
inline constexpr double kModelBnMomentum = 0.1;

// Named parameter store for one micro segmentation network. The architecture
// tag fixes the exact parameter set; checkpoint loading verifies it.
template <typename T>
struct ModelParams {
  Arch arch = Arch::conv;
  std::size_t feature_depth = 0;  // d, channel width of the distillation tap
  std::size_t num_classes = 0;    // C
  std::vector<std::pair<std::string, Tensor<T>>> params;   // trainable
  std::vector<std::pair<std::string, Tensor<T>>> buffers;  // BN running stats

  Tensor<T>& param(const std::string& name) {
    for (auto& kv : params)
      if (kv.first == name) return kv.second;
    throw contract_error("model parameter not found: " + name);
  }
  const Tensor<T>& param(const std::string& name) const {
    return const_cast<ModelParams*>(this)->param(name);
  }
  Tensor<T>& buffer(const std::string& name) {
    for (auto& kv : buffers)
      if (kv.first == name) return kv.second;
    throw contract_error("model buffer not found: " + name);
  }

  bool all_finite() const {
    for (const auto& kv : params)
      if (!kv.second.all_finite()) return false;
    for (const auto& kv : buffers)
      if (!kv.second.all_finite()) return false;
    return true;
  }
};

// Feature-tap layer names exposed for representation analysis.
inline std::vector<std::string> model_layer_names(Arch a) {
  if (a == Arch::conv) return {"stem", "block1", "block2"};
  return {"embed", "blk1", "blk2"};
}

namespace detail {

template <typename T>
inline void add_conv_init(ModelParams<T>& m, Rng& rng, const std::string& name, std::size_t kh,
                          std::size_t kw, std::size_t cin, std::size_t cout) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(kh * kw * cin));
  m.params.emplace_back(name + ".w", random_uniform<T>(Dims{kh, kw, cin, cout}, rng, -bound, bound));
  m.params.emplace_back(name + ".b", Tensor<T>(Dims{cout}));
}

template <typename T>
inline void add_linear_init(ModelParams<T>& m, Rng& rng, const std::string& name, std::size_t din,
                            std::size_t dout) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(din));
  m.params.emplace_back(name + ".w", random_uniform<T>(Dims{din, dout}, rng, -bound, bound));
  m.params.emplace_back(name + ".b", Tensor<T>(Dims{dout}));
}

template <typename T>
inline void add_norm_init(ModelParams<T>& m, const std::string& name, std::size_t c,
                          bool with_buffers) {
  m.params.emplace_back(name + ".gamma", Tensor<T>::full(Dims{c}, T(1)));
  m.params.emplace_back(name + ".beta", Tensor<T>(Dims{c}));
  if (with_buffers) {
    m.buffers.emplace_back(name + ".mean", Tensor<T>(Dims{c}));
    m.buffers.emplace_back(name + ".var", Tensor<T>::full(Dims{c}, T(1)));
  }
}

}  // namespace detail

// Fresh parameters, uniform fan-in init, norm scales 1 / shifts 0.
// Deterministic for a fixed rng seed.
template <typename T>
inline ModelParams<T> init_model(Arch arch, std::size_t d, std::size_t num_classes, Rng& rng) {
  ModelParams<T> m;
  m.arch = arch;
  m.feature_depth = d;
  m.num_classes = num_classes;
  if (arch == Arch::conv) {
    if (d % 2 != 0) throw invalid_parameter("conv model: feature depth must be even");
    const std::size_t h0 = d / 2;
    detail::add_conv_init(m, rng, "stem", 3, 3, 3, h0);
    detail::add_norm_init(m, "stem.bn", h0, true);
    const std::size_t cins[2] = {h0, d};
    for (int b = 1; b <= 2; ++b) {
      const std::string pre = "block" + std::to_string(b);
      const std::size_t cin = cins[b - 1];
      detail::add_conv_init(m, rng, pre + ".conv1", 3, 3, cin, d);
      detail::add_norm_init(m, pre + ".bn1", d, true);
      detail::add_conv_init(m, rng, pre + ".conv2", 3, 3, d, d);
      detail::add_norm_init(m, pre + ".bn2", d, true);
      detail::add_conv_init(m, rng, pre + ".skip", 1, 1, cin, d);
      detail::add_norm_init(m, pre + ".bnskip", d, true);
    }
    detail::add_linear_init(m, rng, "head", d, num_classes);
  } else {
    if (d % 4 != 0) throw invalid_parameter("attention model: feature depth must be divisible by 4");
    detail::add_conv_init(m, rng, "embed", 4, 4, 3, d);
    for (int b = 1; b <= 2; ++b) {
      const std::string pre = "blk" + std::to_string(b);
      detail::add_norm_init(m, pre + ".ln1", d, false);
      for (const char* proj : {"wq", "wk", "wv", "wo"}) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(d));
        m.params.emplace_back(pre + ".attn." + proj,
                              random_uniform<T>(Dims{d, d}, rng, -bound, bound));
        std::string bias_name = std::string(proj);
        bias_name[0] = 'b';
        m.params.emplace_back(pre + ".attn." + bias_name, Tensor<T>(Dims{d}));
      }
      detail::add_norm_init(m, pre + ".ln2", d, false);
      detail::add_linear_init(m, rng, pre + ".mlp.fc1", d, 4 * d);
      detail::add_linear_init(m, rng, pre + ".mlp.fc2", 4 * d, d);
    }
    detail::add_linear_init(m, rng, "head", d, num_classes);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

enum class RunMode { train, eval };

// Tape-side view of a model: one Var per parameter plus the running-stat
// updates proposed by train-mode batch norm (committed by the trainer after
// the optimizer step).
template <typename T>
struct ModelBinding {
  ModelParams<T>* model = nullptr;
  std::vector<Var> param_vars;  // aligned with model->params
  std::vector<std::pair<std::string, Tensor<T>>> pending_buffers;

  Var var(const std::string& name) const {
    for (std::size_t i = 0; i < model->params.size(); ++i)
      if (model->params[i].first == name) return param_vars[i];
    throw contract_error("model binding: no parameter named " + name);
  }
};

template <typename T>
inline ModelBinding<T> bind_model(Tape<T>& tp, ModelParams<T>& m, bool trainable) {
  ModelBinding<T> b;
  b.model = &m;
  b.param_vars.reserve(m.params.size());
  for (auto& kv : m.params) b.param_vars.push_back(tp.leaf(kv.second, trainable));
  return b;
}

template <typename T>
struct ForwardVars {
  Var feature;  // [N, H/4, W/4, d], the distillation tap
  Var logits;   // [N, H, W, C]
};

using TapList = std::vector<std::pair<std::string, Var>>;

namespace detail {

template <typename T>
inline Var model_bn(Tape<T>& tp, ModelBinding<T>& b, const std::string& prefix, Var x,
                    RunMode mode) {
  Var gamma = b.var(prefix + ".gamma");
  Var beta = b.var(prefix + ".beta");
  Tensor<T>& rm = b.model->buffer(prefix + ".mean");
  Tensor<T>& rv = b.model->buffer(prefix + ".var");
  if (mode == RunMode::train) {
    BatchNormResult<T> r = batchnorm_train(tp, x, gamma, beta, rm, rv,
                                           static_cast<T>(kModelBnMomentum),
                                           static_cast<T>(kModelBnEps));
    b.pending_buffers.emplace_back(prefix + ".mean", std::move(r.new_running_mean));
    b.pending_buffers.emplace_back(prefix + ".var", std::move(r.new_running_var));
    return r.y;
  }
  return batchnorm_eval(tp, x, gamma, beta, rm, rv, static_cast<T>(kModelBnEps));
}

// conv -> BN -> relu -> conv -> BN, plus a 1x1-conv/BN shortcut; relu after
// the join. stride applies to the first conv and the shortcut.
template <typename T>
inline Var residual_block(Tape<T>& tp, ModelBinding<T>& b, const std::string& pre, Var x,
                          std::size_t stride, RunMode mode) {
  Var main = conv2d(tp, x, b.var(pre + ".conv1.w"), b.var(pre + ".conv1.b"), stride, 1);
  main = model_bn(tp, b, pre + ".bn1", main, mode);
  main = relu(tp, main);
  main = conv2d(tp, main, b.var(pre + ".conv2.w"), b.var(pre + ".conv2.b"), 1, 1);
  main = model_bn(tp, b, pre + ".bn2", main, mode);
  Var skip = conv2d(tp, x, b.var(pre + ".skip.w"), b.var(pre + ".skip.b"), stride, 0);
  skip = model_bn(tp, b, pre + ".bnskip", skip, mode);
  return relu(tp, add(tp, main, skip));
}

// 2-D sinusoidal position table for a hp x wp token grid, d divisible by 4.
template <typename T>
inline Tensor<T> position_table(std::size_t hp, std::size_t wp, std::size_t d) {
  const std::size_t q = d / 4;
  Tensor<T> pe(Dims{hp * wp, d});
  for (std::size_t py = 0; py < hp; ++py) {
    for (std::size_t px = 0; px < wp; ++px) {
      T* row = pe.data() + (py * wp + px) * d;
      for (std::size_t i = 0; i < q; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(q));
        row[i] = static_cast<T>(std::sin(static_cast<double>(py) * freq));
        row[q + i] = static_cast<T>(std::cos(static_cast<double>(py) * freq));
        row[2 * q + i] = static_cast<T>(std::sin(static_cast<double>(px) * freq));
        row[3 * q + i] = static_cast<T>(std::cos(static_cast<double>(px) * freq));
      }
    }
  }
  return pe;
}

// Pre-LN encoder block with single-head scaled dot-product self-attention.
template <typename T>
inline Var encoder_block(Tape<T>& tp, ModelBinding<T>& b, const std::string& pre, Var x,
                         std::size_t d, TapList* taps) {
  Var h = layernorm(tp, x, b.var(pre + ".ln1.gamma"), b.var(pre + ".ln1.beta"),
                    static_cast<T>(1e-6));
  Var q = linear(tp, h, b.var(pre + ".attn.wq"), b.var(pre + ".attn.bq"));
  Var k = linear(tp, h, b.var(pre + ".attn.wk"), b.var(pre + ".attn.bk"));
  Var v = linear(tp, h, b.var(pre + ".attn.wv"), b.var(pre + ".attn.bv"));
  Var scores = scale(tp, bmm_nt(tp, q, k), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d))));
  Var probs = softmax_lastdim(tp, scores, T(1));
  if (taps) taps->emplace_back(pre + ".attn", probs);
  Var ctx = bmm_nn(tp, probs, v);
  ctx = linear(tp, ctx, b.var(pre + ".attn.wo"), b.var(pre + ".attn.bo"));
  x = add(tp, x, ctx);
  Var h2 = layernorm(tp, x, b.var(pre + ".ln2.gamma"), b.var(pre + ".ln2.beta"),
                     static_cast<T>(1e-6));
  Var m = linear(tp, h2, b.var(pre + ".mlp.fc1.w"), b.var(pre + ".mlp.fc1.b"));
  m = gelu(tp, m);
  m = linear(tp, m, b.var(pre + ".mlp.fc2.w"), b.var(pre + ".mlp.fc2.b"));
  return add(tp, x, m);
}

}  // namespace detail

// Shared contract for both variants: images [N, H, W, 3] with H, W divisible
// by 4 -> feature [N, H/4, W/4, d] and logits [N, H, W, C].
template <typename T>
inline ForwardVars<T> forward_model(Tape<T>& tp, ModelBinding<T>& b, Var images, RunMode mode,
                                    TapList* taps = nullptr) {
  const Tensor<T>& im = tp.value(images);
  if (im.ndim() != 4 || im.dim(3) != 3)
    throw shape_error("forward_model: expected N x H x W x 3 images, got " +
                      dims_to_string(im.dims()));
  const std::size_t n = im.dim(0), h = im.dim(1), w = im.dim(2);
  if (h % 4 != 0 || w % 4 != 0)
    throw shape_error("forward_model: spatial dims must be divisible by 4");
  const ModelParams<T>& m = *b.model;
  const std::size_t d = m.feature_depth;
  ForwardVars<T> out;
  if (m.arch == Arch::conv) {
    Var x = conv2d(tp, images, b.var("stem.w"), b.var("stem.b"), 1, 1);
    x = detail::model_bn(tp, b, "stem.bn", x, mode);
    x = relu(tp, x);
    if (taps) taps->emplace_back("stem", x);
    x = detail::residual_block(tp, b, "block1", x, 2, mode);
    if (taps) taps->emplace_back("block1", x);
    x = detail::residual_block(tp, b, "block2", x, 2, mode);
    if (taps) taps->emplace_back("block2", x);
    out.feature = x;
  } else {
    Var x = conv2d(tp, images, b.var("embed.w"), b.var("embed.b"), 4, 0);
    const std::size_t hp = h / 4, wp = w / 4;
    x = reshape(tp, x, Dims{n, hp * wp, d});
    Tensor<T> pe = detail::position_table<T>(hp, wp, d);
    Tensor<T> pe_batch(Dims{n, hp * wp, d});
    for (std::size_t i = 0; i < n; ++i)
      std::copy(pe.data(), pe.data() + pe.size(), pe_batch.data() + i * pe.size());
    x = add(tp, x, tp.constant(std::move(pe_batch)));
    if (taps) taps->emplace_back("embed", reshape(tp, x, Dims{n, hp, wp, d}));
    x = detail::encoder_block(tp, b, "blk1", x, d, taps);
    if (taps) taps->emplace_back("blk1", reshape(tp, x, Dims{n, hp, wp, d}));
    x = detail::encoder_block(tp, b, "blk2", x, d, taps);
    x = reshape(tp, x, Dims{n, hp, wp, d});
    if (taps) taps->emplace_back("blk2", x);
    out.feature = x;
  }
  Var logits = linear(tp, out.feature, b.var("head.w"), b.var("head.b"));
  out.logits = bilinear_upsample(tp, logits, h, w);
  return out;
}

// Plain-tensor outputs of one forward pass.
template <typename T>
struct ModelOutput {
  Tensor<T> feature;
  Tensor<T> logits;
};

template <typename T>
inline ModelOutput<T> forward_eval(ModelParams<T>& m, const Tensor<T>& images) {
  Tape<T> tp;
  ModelBinding<T> b = bind_model(tp, m, false);
  Var im = tp.constant(images);
  ForwardVars<T> f = forward_model(tp, b, im, RunMode::eval);
  return ModelOutput<T>{tp.value(f.feature), tp.value(f.logits)};
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest + one tensor file per entry
// ---------------------------------------------------------------------------

template <typename T>
inline void save_model(const ModelParams<T>& m, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "manifest.txt");
  if (!os) throw io_error("cannot write model manifest in " + dir.string());
  os << "model v1\n";
  os << "arch " << arch_name(m.arch) << "\n";
  os << "feature_depth " << m.feature_depth << "\n";
  os << "num_classes " << m.num_classes << "\n";
  for (const auto& kv : m.params) {
    os << "param " << kv.first << " " << kv.first << ".hakd\n";
    save_tensor(kv.second, dir / (kv.first + ".hakd"));
  }
  for (const auto& kv : m.buffers) {
    os << "buffer " << kv.first << " " << kv.first << ".hakd\n";
    save_tensor(kv.second, dir / (kv.first + ".hakd"));
  }
}

template <typename T>
inline ModelParams<T> load_model(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.txt");
  if (!is) throw io_error("cannot open model manifest in " + dir.string());
  std::string header;
  std::getline(is, header);
  if (header != "model v1") throw io_error("bad model manifest header in " + dir.string());
  ModelParams<T> m;
  std::vector<std::pair<std::string, std::string>> param_files, buffer_files;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "arch") {
      std::string v;
      ls >> v;
      m.arch = arch_from_name(v);
    } else if (key == "feature_depth") {
      ls >> m.feature_depth;
    } else if (key == "num_classes") {
      ls >> m.num_classes;
    } else if (key == "param" || key == "buffer") {
      std::string name, file;
      ls >> name >> file;
      (key == "param" ? param_files : buffer_files).emplace_back(name, file);
    } else {
      throw io_error("unknown manifest entry '" + key + "' in " + dir.string());
    }
  }
  for (auto& [name, file] : param_files)
    m.params.emplace_back(name, load_tensor<T>(dir / file));
  for (auto& [name, file] : buffer_files)
    m.buffers.emplace_back(name, load_tensor<T>(dir / file));

  // The architecture tag fixes the exact parameter set; verify names and
  // shapes against a freshly initialized skeleton.
  Rng scratch(0);
  ModelParams<T> expect = init_model<T>(m.arch, m.feature_depth, m.num_classes, scratch);
  auto check = [&dir](const auto& got, const auto& want, const char* what) {
    if (got.size() != want.size())
      throw io_error(std::string("checkpoint ") + dir.string() + ": " + what + " count " +
                     std::to_string(got.size()) + ", expected " + std::to_string(want.size()));
    for (std::size_t i = 0; i < got.size(); ++i) {
      if (got[i].first != want[i].first)
        throw io_error(std::string("checkpoint ") + dir.string() + ": unexpected " + what + " '" +
                       got[i].first + "' (expected '" + want[i].first + "')");
      if (got[i].second.dims() != want[i].second.dims())
        throw io_error(std::string("checkpoint ") + dir.string() + ": " + what + " '" +
                       got[i].first + "' has dims " + dims_to_string(got[i].second.dims()) +
                       ", expected " + dims_to_string(want[i].second.dims()));
    }
  };
  check(m.params, expect.params, "parameter");
  check(m.buffers, expect.buffers, "buffer");
  if (!m.all_finite()) throw numeric_error("checkpoint " + dir.string() + ": non-finite values");
  return m;
}

}  // namespace hakd
