#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hakd/autodiff.hpp"
#include "hakd/cka.hpp"
#include "hakd/config.hpp"
#include "hakd/data.hpp"
#include "hakd/distill.hpp"
#include "hakd/losses.hpp"
#include "hakd/mathops.hpp"
#include "hakd/metrics.hpp"
#include "hakd/models.hpp"
#include "hakd/optim.hpp"
#include "hakd/projection.hpp"
#include "hakd/report.hpp"
#include "hakd/tensor_io.hpp"

namespace hakd {

// ---------------------------------------------------------------------------
// Dataset plumbing
// ---------------------------------------------------------------------------

template <typename T>
inline void save_dataset(const SyntheticDataset<T>& train, const SyntheticDataset<T>& val,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_tensor(train.images, dir / "train_images.hakd");
  save_tensor(cast_tensor<T>(train.labels), dir / "train_labels.hakd");
  save_tensor(val.images, dir / "val_images.hakd");
  save_tensor(cast_tensor<T>(val.labels), dir / "val_labels.hakd");
  std::ofstream os(dir / "dataset.txt");
  if (!os) throw io_error("cannot write dataset manifest in " + dir.string());
  os << "dataset v1\n";
  os << "num_classes " << train.num_classes << "\n";
  os << "image_size " << train.height() << "\n";
  os << "seed " << train.seed << "\n";
  os << "train_samples " << train.count() << "\n";
  os << "val_samples " << val.count() << "\n";
}

template <typename T>
inline LabelTensor labels_from_float(const Tensor<T>& t) {
  LabelTensor out(t.dims());
  for (std::size_t i = 0; i < t.size(); ++i)
    out[i] = static_cast<std::int32_t>(std::lround(static_cast<double>(t[i])));
  return out;
}

template <typename T>
inline std::pair<SyntheticDataset<T>, SyntheticDataset<T>> load_dataset(
    const std::filesystem::path& dir, const RunConfig& cfg) {
  std::ifstream is(dir / "dataset.txt");
  if (!is) throw config_error("dataset manifest not found in " + dir.string());
  std::string header;
  std::getline(is, header);
  if (header != "dataset v1") throw config_error("bad dataset manifest in " + dir.string());
  std::map<std::string, std::uint64_t> meta;
  std::string key;
  std::uint64_t value;
  while (is >> key >> value) meta[key] = value;
  if (meta["num_classes"] != cfg.num_classes || meta["image_size"] != cfg.image_size)
    throw config_error("dataset in " + dir.string() + " does not match the config (classes " +
                       std::to_string(meta["num_classes"]) + ", image size " +
                       std::to_string(meta["image_size"]) + ")");
  SyntheticDataset<T> train, val;
  train.images = load_tensor<T>(dir / "train_images.hakd");
  train.labels = labels_from_float(load_tensor<T>(dir / "train_labels.hakd"));
  val.images = load_tensor<T>(dir / "val_images.hakd");
  val.labels = labels_from_float(load_tensor<T>(dir / "val_labels.hakd"));
  train.split = "train";
  val.split = "val";
  train.seed = val.seed = meta["seed"];
  train.num_classes = val.num_classes = cfg.num_classes;
  return {std::move(train), std::move(val)};
}

template <typename T>
inline std::pair<SyntheticDataset<T>, SyntheticDataset<T>> load_or_generate(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return load_dataset<T>(cfg.data_dir, cfg);
  return {gen_synthetic<T>(cfg.data_seed, cfg.train_samples, cfg.image_size, cfg.image_size,
                           cfg.num_classes, "train"),
          gen_synthetic<T>(cfg.data_seed, cfg.val_samples, cfg.image_size, cfg.image_size,
                           cfg.num_classes, "val")};
}

// Epoch-shuffled batch index stream.
class BatchSampler {
 public:
  BatchSampler(std::uint64_t seed, std::size_t n) : rng_(seed), n_(n), pos_(n) {
    order_.resize(n);
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
  }

  std::vector<std::size_t> draw(std::size_t k) {
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      if (pos_ == n_) {
        for (std::size_t j = n_; j > 1; --j)
          std::swap(order_[j - 1], order_[rng_.below(j)]);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  Rng rng_;
  std::size_t n_;
  std::size_t pos_;
  std::vector<std::size_t> order_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

template <typename T>
inline EvalResult evaluate_model(ModelParams<T>& model, const SyntheticDataset<T>& ds,
                                 std::size_t batch_size, LabelTensor* predictions_out = nullptr) {
  const std::size_t n = ds.count(), h = ds.height(), w = ds.width();
  LabelTensor pred(Dims{n, h, w});
  Tensor<T> images;
  LabelTensor labels;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t count = std::min(batch_size, n - start);
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = start + i;
    gather_batch(ds, idx, {}, images, labels);
    ModelOutput<T> out = forward_eval(model, images);
    LabelTensor batch_pred = argmax_last_dim(out.logits);
    std::copy(batch_pred.data(), batch_pred.data() + batch_pred.size(),
              pred.data() + start * h * w);
  }
  EvalResult r = evaluate_miou(pred, ds.labels, ds.num_classes);
  if (predictions_out) *predictions_out = std::move(pred);
  return r;
}

// ---------------------------------------------------------------------------
// Teacher training (supervised only)
// ---------------------------------------------------------------------------

template <typename T>
struct TeacherRun {
  ModelParams<T> model;
  std::vector<TrainRecord> records;
  EvalResult val_eval;
};

template <typename T>
inline TeacherRun<T> train_teacher(const RunConfig& cfg, std::uint64_t seed,
                                   const SyntheticDataset<T>& train, const SyntheticDataset<T>& val) {
  TeacherRun<T> run;
  Rng init_rng(Rng::derive(seed, "init-teacher"));
  run.model = init_model<T>(cfg.teacher_architecture(), cfg.teacher_depth, cfg.num_classes, init_rng);
  OptimizerSettings opt = default_optimizer(cfg.teacher_architecture(), cfg.sgd_lr, cfg.adamw_lr);
  opt.weight_decay = cfg.weight_decay;
  opt.momentum = cfg.momentum;
  OptState<T> state = OptState<T>::init(run.model.params, opt.kind);
  BatchSampler sampler(Rng::derive(seed, "teacher-batches"), train.count());
  Rng aug(Rng::derive(seed, "teacher-augment"));
  Tensor<T> images;
  LabelTensor labels;
  for (std::size_t iter = 0; iter < cfg.teacher_iters; ++iter) {
    const double lr = poly_lr(opt.base_lr, iter, cfg.teacher_iters);
    std::vector<std::size_t> idx = sampler.draw(cfg.batch_size);
    std::vector<bool> flips(idx.size(), false);
    if (cfg.hflip)
      for (std::size_t i = 0; i < idx.size(); ++i) flips[i] = aug.coin();
    gather_batch(train, idx, flips, images, labels);
    auto loss_fn = [&](Tape<T>& tp, ModelBinding<T>& b) {
      ForwardVars<T> f = forward_model(tp, b, tp.constant(images), RunMode::train);
      return task_loss(tp, f.logits, labels);
    };
    const double loss =
        train_step<T>(run.model, state, opt, lr, loss_fn, "teacher iter " + std::to_string(iter));
    run.records.push_back(TrainRecord{iter, loss, 0.0, 0.0, loss, lr});
  }
  run.val_eval = evaluate_model(run.model, val, cfg.batch_size);
  return run;
}

// ---------------------------------------------------------------------------
// Projector calibration
// ---------------------------------------------------------------------------

// Fits one projector against the labels on frozen backbone features: the
// features come from `feature_of`, which must return [n, h/4, w/4, d] for a
// requested batch.
template <typename T>
inline void fit_projector(
    ProjectorParams<T>& proj, const SyntheticDataset<T>& train, const RunConfig& cfg,
    std::uint64_t stream_seed,
    const std::function<Tensor<T>(const Tensor<T>& images)>& feature_of) {
  proj.mode = NormMode::train;
  OptimizerSettings opt;
  opt.kind = OptKind::adamw;
  opt.base_lr = cfg.proj_lr;
  opt.weight_decay = 0.0;
  std::vector<std::pair<std::string, Tensor<T>>> slots = {
      {"weight", proj.weight}, {"bias", proj.bias}, {"gamma", proj.bn_gamma},
      {"beta", proj.bn_beta}};
  OptState<T> state = OptState<T>::init(slots, opt.kind);
  BatchSampler sampler(Rng::derive(stream_seed, "proj-batches"), train.count());
  Rng aug(Rng::derive(stream_seed, "proj-augment"));
  Tensor<T> images;
  LabelTensor labels;
  const std::size_t hh = train.height(), ww = train.width();
  for (std::size_t it = 0; it < cfg.proj_fit_iters; ++it) {
    std::vector<std::size_t> idx = sampler.draw(cfg.batch_size);
    std::vector<bool> flips(idx.size(), false);
    if (cfg.hflip)
      for (std::size_t i = 0; i < idx.size(); ++i) flips[i] = aug.coin();
    gather_batch(train, idx, flips, images, labels);
    Tensor<T> features = feature_of(images);

    Tape<T> tp;
    ProjectorBinding<T> pb = bind_projector(tp, proj, true);
    ProjectedLogits<T> pl = project_to_logits(tp, tp.constant(features), pb);
    Var z_up = bilinear_upsample(tp, pl.logits, hh, ww);
    Var loss = reliability_loss(tp, z_up, labels);
    const double lv = static_cast<double>(tp.value(loss).scalar_value());
    if (!std::isfinite(lv))
      throw numeric_error("non-finite projector-fit loss at iter " + std::to_string(it));
    tp.backward(loss);
    std::vector<Tensor<T>*> params = {&proj.weight, &proj.bias, &proj.bn_gamma, &proj.bn_beta};
    std::vector<const Tensor<T>*> grads = {&tp.grad(pb.weight), &tp.grad(pb.bias),
                                           &tp.grad(pb.gamma), &tp.grad(pb.beta)};
    apply_update(params, grads, state, opt, opt.base_lr);
    proj.bn_running_mean = pl.new_running_mean;
    proj.bn_running_var = pl.new_running_var;
  }
}

// ---------------------------------------------------------------------------
// Distillation run
// ---------------------------------------------------------------------------

template <typename T>
struct PipelineOutcome {
  ModelParams<T> student;
  std::vector<TrainRecord> records;
  EvalResult val_eval;
  LabelTensor val_predictions;
  bool projectors_active = false;
  ProjectorParams<T> student_projector;
  ProjectorParams<T> teacher_projector;
};

namespace detail {

// Frozen-teacher outputs per (sample, orientation); filled lazily.
template <typename T>
struct TeacherCache {
  ModelParams<T>* teacher = nullptr;
  const SyntheticDataset<T>* data = nullptr;
  std::vector<Tensor<T>> logits[2];   // [flip][sample]
  std::vector<Tensor<T>> feature[2];  // [flip][sample]
  std::vector<bool> ready[2];

  void init(ModelParams<T>& t, const SyntheticDataset<T>& ds) {
    teacher = &t;
    data = &ds;
    for (int f = 0; f < 2; ++f) {
      logits[f].resize(ds.count());
      feature[f].resize(ds.count());
      ready[f].assign(ds.count(), false);
    }
  }

  void ensure(const std::vector<std::size_t>& idx, const std::vector<bool>& flips) {
    std::vector<std::size_t> missing_idx;
    std::vector<bool> missing_flip;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const int f = flips.empty() ? 0 : static_cast<int>(flips[i]);
      if (!ready[f][idx[i]]) {
        ready[f][idx[i]] = true;  // claim now; duplicates in one batch are rare but possible
        missing_idx.push_back(idx[i]);
        missing_flip.push_back(f != 0);
      }
    }
    if (missing_idx.empty()) return;
    Tensor<T> images;
    LabelTensor labels;
    gather_batch(*data, missing_idx, missing_flip, images, labels);
    ModelOutput<T> out = forward_eval(*teacher, images);
    const std::size_t h = out.logits.dim(1), w = out.logits.dim(2), c = out.logits.dim(3);
    const std::size_t fh = out.feature.dim(1), fw = out.feature.dim(2), fd = out.feature.dim(3);
    for (std::size_t i = 0; i < missing_idx.size(); ++i) {
      const int f = static_cast<int>(missing_flip[i]);
      Tensor<T> zl(Dims{h, w, c});
      std::copy(out.logits.data() + i * h * w * c, out.logits.data() + (i + 1) * h * w * c,
                zl.data());
      logits[f][missing_idx[i]] = std::move(zl);
      Tensor<T> ft(Dims{fh, fw, fd});
      std::copy(out.feature.data() + i * fh * fw * fd, out.feature.data() + (i + 1) * fh * fw * fd,
                ft.data());
      feature[f][missing_idx[i]] = std::move(ft);
    }
  }

  // Assembles batched teacher logits/features for the given draw.
  void batch(const std::vector<std::size_t>& idx, const std::vector<bool>& flips,
             Tensor<T>& logits_out, Tensor<T>& features_out) {
    ensure(idx, flips);
    const int f0 = flips.empty() ? 0 : static_cast<int>(flips[0]);
    const Dims& zd = logits[f0][idx[0]].dims();
    const Dims& fd = feature[f0][idx[0]].dims();
    logits_out = Tensor<T>(Dims{idx.size(), zd[0], zd[1], zd[2]});
    features_out = Tensor<T>(Dims{idx.size(), fd[0], fd[1], fd[2]});
    const std::size_t zsz = numel(zd), fsz = numel(fd);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const int f = flips.empty() ? 0 : static_cast<int>(flips[i]);
      const Tensor<T>& zl = logits[f][idx[i]];
      const Tensor<T>& ft = feature[f][idx[i]];
      std::copy(zl.data(), zl.data() + zsz, logits_out.data() + i * zsz);
      std::copy(ft.data(), ft.data() + fsz, features_out.data() + i * fsz);
    }
  }
};

}  // namespace detail

// Student training with optional distillation. Phases:
//   [0, warmup_end)        task loss only, full label supervision
//   at warmup_end          projector calibration (only when lambda2 > 0)
//   [warmup_end, end_iter) joint objective task + l1 * kd + l2 * hakd
// `end_iter` trims the loop (the standalone warm-up command stops at
// warmup_end); the batch/augment streams are identical either way.
template <typename T>
inline PipelineOutcome<T> run_student_training(const RunConfig& cfg, std::uint64_t seed,
                                               ModelParams<T>* teacher, std::size_t end_iter,
                                               const std::filesystem::path* dump_dir = nullptr) {
  cfg.validate();
  const DistillConfig dc = cfg.distill();
  const bool use_kd = cfg.lambda1 > 0.0;
  const bool use_hakd = cfg.lambda2 > 0.0;
  if ((use_kd || use_hakd) && teacher == nullptr)
    throw config_error("distillation requires a teacher checkpoint");

  auto [train, val] = load_or_generate<T>(cfg);
  const std::size_t h = train.height(), w = train.width();

  PipelineOutcome<T> out;
  Rng init_rng(Rng::derive(seed, "init-student"));
  out.student =
      init_model<T>(cfg.student_architecture(), cfg.student_depth, cfg.num_classes, init_rng);

  OptimizerSettings opt = default_optimizer(cfg.student_architecture(), cfg.sgd_lr, cfg.adamw_lr);
  opt.weight_decay = cfg.weight_decay;
  opt.momentum = cfg.momentum;

  const std::size_t warmup_end = cfg.warmup_iters();
  const std::size_t stop = std::min(end_iter, cfg.total_iters);

  // Optimizer slots: student parameters, plus the student projector once the
  // joint phase begins (its state slots exist from the start so the update
  // loop stays uniform).
  detail::TeacherCache<T> cache;
  if (use_kd || use_hakd) cache.init(*teacher, train);

  if (use_hakd) {
    Rng proj_rng(Rng::derive(seed, "init-projectors"));
    out.teacher_projector =
        ProjectorParams<T>::init(cfg.num_classes, teacher->feature_depth, proj_rng);
    out.student_projector =
        ProjectorParams<T>::init(cfg.num_classes, out.student.feature_depth, proj_rng);
    out.projectors_active = true;
  }

  OptState<T> state = OptState<T>::init(out.student.params, opt.kind);
  OptState<T> proj_state;
  if (use_hakd) {
    std::vector<std::pair<std::string, Tensor<T>>> proj_slots = {
        {"weight", out.student_projector.weight},
        {"bias", out.student_projector.bias},
        {"gamma", out.student_projector.bn_gamma},
        {"beta", out.student_projector.bn_beta}};
    proj_state = OptState<T>::init(proj_slots, opt.kind);
  }

  BatchSampler sampler(Rng::derive(seed, "student-batches"), train.count());
  Rng aug(Rng::derive(seed, "student-augment"));
  Tensor<T> images, z_t_out, f_t;
  LabelTensor labels;

  for (std::size_t iter = 0; iter < stop; ++iter) {
    const double lr = poly_lr(opt.base_lr, iter, cfg.total_iters);
    const bool in_warmup = iter < warmup_end;

    if (use_hakd && iter == warmup_end) {
      // Calibrate both projectors on frozen features before the joint phase.
      fit_projector<T>(out.teacher_projector, train, cfg, Rng::derive(seed, "proj-teacher"),
                       [&](const Tensor<T>& ims) {
                         ModelOutput<T> o = forward_eval(*teacher, ims);
                         return o.feature;
                       });
      out.teacher_projector.mode = NormMode::eval;  // frozen from here on
      fit_projector<T>(out.student_projector, train, cfg, Rng::derive(seed, "proj-student"),
                       [&](const Tensor<T>& ims) {
                         ModelOutput<T> o = forward_eval(out.student, ims);
                         return o.feature;
                       });
      out.student_projector.mode = NormMode::train;
    }

    std::vector<std::size_t> idx = sampler.draw(cfg.batch_size);
    std::vector<bool> flips(idx.size(), false);
    if (cfg.hflip)
      for (std::size_t i = 0; i < idx.size(); ++i) flips[i] = aug.coin();
    gather_batch(train, idx, flips, images, labels);

    const bool kd_live = use_kd && !in_warmup;
    const bool hakd_live = use_hakd && !in_warmup;
    if (kd_live || hakd_live) cache.batch(idx, flips, z_t_out, f_t);

    Tape<T> tape;
    ModelBinding<T> binding = bind_model(tape, out.student, true);
    ProjectorBinding<T> proj_binding;
    ProjectedLogits<T> proj_logits;
    ForwardVars<T> fwd = forward_model(tape, binding, tape.constant(images), RunMode::train);
    Var task = task_loss(tape, fwd.logits, labels);
    double task_v = static_cast<double>(tape.value(task).scalar_value());
    double kd_v = 0.0, hakd_v = 0.0;
    Var total = task;

    if (kd_live) {
      Var kd = kd_loss(tape, fwd.logits, z_t_out, labels, static_cast<T>(dc.tau), dc.kd_direction);
      kd_v = static_cast<double>(tape.value(kd).scalar_value());
      total = add(tape, total, scale(tape, kd, static_cast<T>(dc.lambda1)));
    }
    double effective_l2 = dc.lambda2;
    if (dc.tau2_scaling) effective_l2 *= dc.tau * dc.tau;
    if (hakd_live) {
      proj_binding = bind_projector(tape, out.student_projector, true);
      proj_logits = project_to_logits(tape, fwd.feature, proj_binding);
      Var z_s_up = bilinear_upsample(tape, proj_logits.logits, h, w);

      // Teacher side and every KMM/KEM map are detached teaching signals.
      Tensor<T> z_t_proj = project_to_logits_eval(f_t, out.teacher_projector);
      Tensor<T> z_t_up = bilinear_resize(z_t_proj, h, w);
      const Tensor<T>& z_s_val = tape.value(z_s_up);
      Tensor<T> h_t = reliability(z_t_up, labels);
      Tensor<T> h_s = reliability(z_s_val, labels);
      Tensor<T> mix = mixing_weights(h_t, h_s);
      Tensor<T> z_hybrid = hybrid_logits(z_t_up, z_s_val, mix);
      Tensor<T> h_hybrid = reliability(z_hybrid, labels);
      Tensor<T> delta = relative_importance(h_s, h_hybrid);
      Tensor<T> kem = kem_weights(h_s, delta);

      Var hk = hakd_loss(tape, z_hybrid, z_s_up, kem, labels, static_cast<T>(dc.tau));
      hakd_v = static_cast<double>(tape.value(hk).scalar_value());
      total = add(tape, total, scale(tape, hk, static_cast<T>(effective_l2)));

      if (dump_dir && iter == warmup_end) {
        const std::filesystem::path inter = *dump_dir / "intermediates";
        std::filesystem::create_directories(inter);
        save_tensor(z_t_up, inter / "teacher_projected_logits.hakd");
        save_tensor(z_s_val, inter / "student_projected_logits.hakd");
        save_tensor(h_t, inter / "teacher_reliability.hakd");
        save_tensor(h_s, inter / "student_reliability.hakd");
        save_tensor(mix, inter / "mix_weights.hakd");
        save_tensor(z_hybrid, inter / "hybrid_logits.hakd");
        save_tensor(h_hybrid, inter / "hybrid_reliability.hakd");
        save_tensor(delta, inter / "relative_importance.hakd");
        save_tensor(kem, inter / "kem_weights.hakd");
      }
    }

    const double total_v = static_cast<double>(tape.value(total).scalar_value());
    if (!std::isfinite(total_v)) {
      std::string ids;
      for (std::size_t i : idx) ids += " " + std::to_string(i);
      throw numeric_error("non-finite loss at iter " + std::to_string(iter) + " (batch samples" +
                          ids + "); parameter norms:" + param_norm_digest(out.student));
    }
    tape.backward(total);

    std::vector<Tensor<T>*> params;
    std::vector<const Tensor<T>*> grads;
    for (std::size_t i = 0; i < out.student.params.size(); ++i) {
      params.push_back(&out.student.params[i].second);
      grads.push_back(&tape.grad(binding.param_vars[i]));
    }
    apply_update(params, grads, state, opt, lr);
    if (hakd_live) {
      std::vector<Tensor<T>*> pparams = {&out.student_projector.weight,
                                         &out.student_projector.bias,
                                         &out.student_projector.bn_gamma,
                                         &out.student_projector.bn_beta};
      std::vector<const Tensor<T>*> pgrads = {&tape.grad(proj_binding.weight),
                                              &tape.grad(proj_binding.bias),
                                              &tape.grad(proj_binding.gamma),
                                              &tape.grad(proj_binding.beta)};
      apply_update(pparams, pgrads, proj_state, opt, lr);
      out.student_projector.bn_running_mean = std::move(proj_logits.new_running_mean);
      out.student_projector.bn_running_var = std::move(proj_logits.new_running_var);
    }
    for (auto& [name, value] : binding.pending_buffers) out.student.buffer(name) = std::move(value);
    if (!out.student.all_finite())
      throw numeric_error("non-finite parameter after update at iter " + std::to_string(iter) +
                          "; parameter norms:" + param_norm_digest(out.student));

    const double total_recorded = task_v + dc.lambda1 * kd_v + effective_l2 * hakd_v;
    out.records.push_back(TrainRecord{iter, task_v, kd_v, hakd_v, total_recorded, lr});
  }

  out.val_eval = evaluate_model(out.student, val, cfg.batch_size, &out.val_predictions);
  return out;
}

// Full distillation pipeline: warm-up, projector calibration, joint phase,
// final evaluation. The teacher is loaded from cfg.teacher_ckpt unless the
// run needs no teacher at all (both lambdas zero).
template <typename T>
inline PipelineOutcome<T> run_distillation(const RunConfig& cfg, std::uint64_t seed,
                                           ModelParams<T>* teacher = nullptr,
                                           const std::filesystem::path* dump_dir = nullptr) {
  ModelParams<T> loaded;
  if (teacher == nullptr && (cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0)) {
    if (cfg.teacher_ckpt.empty())
      throw config_error("distillation needs teacher_ckpt in the config");
    if (!std::filesystem::exists(std::filesystem::path(cfg.teacher_ckpt) / "manifest.txt"))
      throw config_error("teacher checkpoint not found: " + cfg.teacher_ckpt);
    loaded = load_model<T>(cfg.teacher_ckpt);
    teacher = &loaded;
  }
  return run_student_training<T>(cfg, seed, teacher, cfg.total_iters, dump_dir);
}

// Warm-up alone: the first warmup_fraction * total_iters iterations under
// task loss only. Streams match run_distillation, so the produced checkpoint
// is exactly the state a distillation run passes through.
template <typename T>
inline PipelineOutcome<T> warmup_train(const RunConfig& cfg, std::uint64_t seed) {
  return run_student_training<T>(cfg, seed, nullptr, cfg.warmup_iters());
}

// ---------------------------------------------------------------------------
// CKA report
// ---------------------------------------------------------------------------

template <typename T>
struct CkaReportResult {
  CkaHeatmap heatmap;
  std::vector<std::string> layers_a, layers_b;
};

// Extracts per-layer features for every sample (eval mode, no flip), pools
// them, and runs the minibatch CKA grid. Raw per-layer dumps are written when
// dump_dir is given.
template <typename T>
inline CkaReportResult<T> cka_report(ModelParams<T>& model_a, ModelParams<T>& model_b,
                                     const SyntheticDataset<T>& ds, std::size_t minibatch_n,
                                     std::size_t batch_size,
                                     const std::vector<std::string>& layers_a,
                                     const std::vector<std::string>& layers_b,
                                     const std::filesystem::path* dump_dir = nullptr) {
  if (minibatch_n < 4) throw invalid_parameter("cka_report: minibatch size must be >= 4");
  auto extract = [&](ModelParams<T>& m, const std::vector<std::string>& names,
                     const std::string& tag) {
    const std::vector<std::string> known = model_layer_names(m.arch);
    for (const std::string& n : names)
      if (std::find(known.begin(), known.end(), n) == known.end())
        throw config_error("model has no layer named '" + n + "'");
    std::map<std::string, std::vector<Tensor<T>>> per_layer;
    Tensor<T> images;
    LabelTensor labels;
    for (std::size_t start = 0; start < ds.count(); start += batch_size) {
      const std::size_t count = std::min(batch_size, ds.count() - start);
      std::vector<std::size_t> idx(count);
      for (std::size_t i = 0; i < count; ++i) idx[i] = start + i;
      gather_batch(ds, idx, {}, images, labels);
      Tape<T> tp;
      ModelBinding<T> b = bind_model(tp, m, false);
      TapList taps;
      forward_model(tp, b, tp.constant(images), RunMode::eval, &taps);
      for (const auto& [name, var] : taps)
        if (std::find(names.begin(), names.end(), name) != names.end())
          per_layer[name].push_back(tp.value(var));
    }
    // Concatenate batches into one n_total x H x W x d tensor per layer.
    std::vector<Tensor<double>> pooled_streams;
    for (const std::string& name : names) {
      const auto& chunks = per_layer[name];
      const Dims& cd = chunks.front().dims();
      Tensor<T> full(Dims{ds.count(), cd[1], cd[2], cd[3]});
      std::size_t offset = 0;
      for (const Tensor<T>& ch : chunks) {
        std::copy(ch.data(), ch.data() + ch.size(), full.data() + offset);
        offset += ch.size();
      }
      if (dump_dir) {
        std::filesystem::create_directories(*dump_dir);
        save_tensor(full, *dump_dir / (tag + "_" + name + ".hakd"));
      }
      pooled_streams.push_back(pool_features(cast_tensor<double>(full)));
    }
    return pooled_streams;
  };

  std::vector<Tensor<double>> pooled_a = extract(model_a, layers_a, "model_a");
  std::vector<Tensor<double>> pooled_b = extract(model_b, layers_b, "model_b");
  std::vector<std::vector<Tensor<double>>> streams_a, streams_b;
  for (const auto& p : pooled_a) streams_a.push_back(make_minibatches(p, minibatch_n));
  for (const auto& p : pooled_b) streams_b.push_back(make_minibatches(p, minibatch_n));

  CkaReportResult<T> result;
  result.layers_a = layers_a;
  result.layers_b = layers_b;
  result.heatmap = cka_heatmap(layers_a, streams_a, layers_b, streams_b);
  return result;
}

}  // namespace hakd
