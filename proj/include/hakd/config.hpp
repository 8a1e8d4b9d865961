#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hakd/errors.hpp"
#include "hakd/losses.hpp"
#include "hakd/models.hpp"

namespace hakd {

// Flat key=value config file: one key per line, '#' starts a comment,
// unknown or duplicate keys are errors.
inline std::map<std::string, std::string> parse_config_text(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const char* ws = " \t\r";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error("config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw config_error("config line " + std::to_string(lineno) + ": empty key");
    if (kv.count(key))
      throw config_error("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv[key] = value;
  }
  return kv;
}

// Everything one run needs. Defaults are the desk-scale setup; a config file
// overrides them key by key.
struct RunConfig {
  std::string dtype = "f32";  // f32 | f64

  // task
  std::size_t image_size = 32;
  std::size_t num_classes = 3;
  std::size_t train_samples = 200;
  std::size_t val_samples = 50;
  std::uint64_t data_seed = 1000;
  std::string data_dir;  // load instead of generate when set
  bool hflip = true;

  // models
  std::string teacher_arch = "attention";
  std::string student_arch = "conv";
  std::size_t teacher_depth = 64;
  std::size_t student_depth = 32;
  std::string teacher_ckpt;

  // optimization
  std::size_t batch_size = 8;
  std::size_t total_iters = 600;
  std::size_t teacher_iters = 1200;
  double sgd_lr = 0.05;
  double adamw_lr = 1e-3;
  double weight_decay = 1e-4;
  double momentum = 0.9;

  // distillation
  double tau = 1.0;
  double lambda1 = 0.1;
  double lambda2 = 1.0;
  std::string kd_direction = "teacher-to-student";
  double warmup_fraction = 0.1;
  bool tau2_scaling = false;
  std::size_t proj_fit_iters = 150;
  double proj_lr = 0.01;

  // analysis
  std::size_t cka_samples = 500;
  std::size_t cka_minibatch = 10;
  std::string eval_split = "val";

  DistillConfig distill() const {
    DistillConfig d;
    d.tau = tau;
    d.lambda1 = lambda1;
    d.lambda2 = lambda2;
    d.kd_direction = kd_direction == "teacher-to-student"
                         ? KdDirection::teacher_to_student
                         : KdDirection::literal_student_to_teacher;
    d.warmup_fraction = warmup_fraction;
    d.tau2_scaling = tau2_scaling;
    return d;
  }

  Arch teacher_architecture() const { return arch_from_name(teacher_arch); }
  Arch student_architecture() const { return arch_from_name(student_arch); }

  std::size_t warmup_iters() const {
    return static_cast<std::size_t>(warmup_fraction * static_cast<double>(total_iters));
  }

  void validate() const {
    if (dtype != "f32" && dtype != "f64") throw config_error("dtype must be f32 or f64");
    if (num_classes < 2) throw config_error("num_classes must be >= 2");
    if (image_size % 4 != 0 || image_size == 0) throw config_error("image_size must be a positive multiple of 4");
    if (batch_size == 0 || total_iters == 0 || teacher_iters == 0)
      throw config_error("batch_size, total_iters and teacher_iters must be positive");
    if (train_samples == 0 || val_samples == 0)
      throw config_error("train_samples and val_samples must be positive");
    if (!(tau > 0.0)) throw config_error("tau must be > 0");
    if (lambda1 < 0.0 || lambda2 < 0.0) throw config_error("lambda weights must be >= 0");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0)
      throw config_error("warmup_fraction must be in [0, 1)");
    if (kd_direction != "teacher-to-student" && kd_direction != "literal-student-to-teacher")
      throw config_error("kd_direction must be teacher-to-student or literal-student-to-teacher");
    if (eval_split != "val" && eval_split != "train")
      throw config_error("eval_split must be val or train");
    if (cka_minibatch < 4) throw config_error("cka_minibatch must be >= 4");
    arch_from_name(teacher_arch);
    arch_from_name(student_arch);
  }
};

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw config_error("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long d = std::stoll(v, &pos);
    if (pos != v.size() || d < 0) throw std::invalid_argument("negative");
    return static_cast<std::size_t>(d);
  } catch (const std::exception&) {
    throw config_error("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw config_error("config key '" + key + "': expected true or false, got '" + v + "'");
}

}  // namespace detail

inline RunConfig apply_config(RunConfig cfg, const std::map<std::string, std::string>& kv) {
  using detail::to_bool;
  using detail::to_double;
  using detail::to_size;
  for (const auto& [key, v] : kv) {
    if (key == "dtype") cfg.dtype = v;
    else if (key == "image_size") cfg.image_size = to_size(key, v);
    else if (key == "num_classes") cfg.num_classes = to_size(key, v);
    else if (key == "train_samples") cfg.train_samples = to_size(key, v);
    else if (key == "val_samples") cfg.val_samples = to_size(key, v);
    else if (key == "data_seed") cfg.data_seed = static_cast<std::uint64_t>(to_size(key, v));
    else if (key == "data_dir") cfg.data_dir = v;
    else if (key == "hflip") cfg.hflip = to_bool(key, v);
    else if (key == "teacher_arch") cfg.teacher_arch = v;
    else if (key == "student_arch") cfg.student_arch = v;
    else if (key == "teacher_depth") cfg.teacher_depth = to_size(key, v);
    else if (key == "student_depth") cfg.student_depth = to_size(key, v);
    else if (key == "teacher_ckpt") cfg.teacher_ckpt = v;
    else if (key == "batch_size") cfg.batch_size = to_size(key, v);
    else if (key == "total_iters") cfg.total_iters = to_size(key, v);
    else if (key == "teacher_iters") cfg.teacher_iters = to_size(key, v);
    else if (key == "sgd_lr") cfg.sgd_lr = to_double(key, v);
    else if (key == "adamw_lr") cfg.adamw_lr = to_double(key, v);
    else if (key == "weight_decay") cfg.weight_decay = to_double(key, v);
    else if (key == "momentum") cfg.momentum = to_double(key, v);
    else if (key == "tau") cfg.tau = to_double(key, v);
    else if (key == "lambda1") cfg.lambda1 = to_double(key, v);
    else if (key == "lambda2") cfg.lambda2 = to_double(key, v);
    else if (key == "kd_direction") cfg.kd_direction = v;
    else if (key == "warmup_fraction") cfg.warmup_fraction = to_double(key, v);
    else if (key == "tau2_scaling") cfg.tau2_scaling = to_bool(key, v);
    else if (key == "proj_fit_iters") cfg.proj_fit_iters = to_size(key, v);
    else if (key == "proj_lr") cfg.proj_lr = to_double(key, v);
    else if (key == "cka_samples") cfg.cka_samples = to_size(key, v);
    else if (key == "cka_minibatch") cfg.cka_minibatch = to_size(key, v);
    else if (key == "eval_split") cfg.eval_split = v;
    else throw config_error("unknown config key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw config_error("cannot open config file: " + path.string());
  return apply_config(RunConfig{}, parse_config_text(is));
}

}  // namespace hakd
