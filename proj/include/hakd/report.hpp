#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hakd/cka.hpp"
#include "hakd/config.hpp"
#include "hakd/errors.hpp"
#include "hakd/metrics.hpp"

namespace hakd {

// All CSV floats carry 17 significant digits so doubles round-trip exactly.
inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

struct TrainRecord {
  std::size_t iter = 0;
  double task = 0.0;
  double kd = 0.0;
  double hakd = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

// Everything a run reports. wall_clock_seconds is kept out of the CSV so two
// identical runs produce byte-identical report files; the CLI prints it.
struct RunReport {
  std::uint64_t seed = 0;
  std::vector<TrainRecord> records;
  EvalResult final_eval;
  RunConfig config;
  double wall_clock_seconds = 0.0;
};

// Canonical (key, value) config snapshot, fixed order.
inline std::vector<std::pair<std::string, std::string>> config_snapshot(const RunConfig& c) {
  std::vector<std::pair<std::string, std::string>> kv;
  auto add = [&kv](const std::string& k, const std::string& v) { kv.emplace_back(k, v); };
  auto num = [](std::size_t v) { return std::to_string(v); };
  add("dtype", c.dtype);
  add("image_size", num(c.image_size));
  add("num_classes", num(c.num_classes));
  add("train_samples", num(c.train_samples));
  add("val_samples", num(c.val_samples));
  add("data_seed", std::to_string(c.data_seed));
  add("data_dir", c.data_dir);
  add("hflip", c.hflip ? "true" : "false");
  add("teacher_arch", c.teacher_arch);
  add("student_arch", c.student_arch);
  add("teacher_depth", num(c.teacher_depth));
  add("student_depth", num(c.student_depth));
  add("teacher_ckpt", c.teacher_ckpt);
  add("batch_size", num(c.batch_size));
  add("total_iters", num(c.total_iters));
  add("teacher_iters", num(c.teacher_iters));
  add("sgd_lr", format_g17(c.sgd_lr));
  add("adamw_lr", format_g17(c.adamw_lr));
  add("weight_decay", format_g17(c.weight_decay));
  add("momentum", format_g17(c.momentum));
  add("tau", format_g17(c.tau));
  add("lambda1", format_g17(c.lambda1));
  add("lambda2", format_g17(c.lambda2));
  add("kd_direction", c.kd_direction);
  add("warmup_fraction", format_g17(c.warmup_fraction));
  add("tau2_scaling", c.tau2_scaling ? "true" : "false");
  add("proj_fit_iters", num(c.proj_fit_iters));
  add("proj_lr", format_g17(c.proj_lr));
  add("cka_samples", num(c.cka_samples));
  add("cka_minibatch", num(c.cka_minibatch));
  add("eval_split", c.eval_split);
  return kv;
}

inline void write_run_report_csv(const RunReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw io_error("cannot write report: " + path.string());
  os << "record,field,value\n";
  os << "meta,seed," << r.seed << "\n";
  for (const auto& [k, v] : config_snapshot(r.config)) os << "config," << k << "," << v << "\n";
  os << "summary,final_miou," << format_g17(r.final_eval.miou) << "\n";
  for (std::size_t c = 0; c < r.final_eval.class_iou.size(); ++c) {
    os << "summary,class_iou_" << c << ",";
    if (r.final_eval.class_included[c]) os << format_g17(r.final_eval.class_iou[c]);
    os << "\n";
  }
  os << "loss,iter,task,kd,hakd,total,lr\n";
  for (const TrainRecord& t : r.records)
    os << "loss," << t.iter << "," << format_g17(t.task) << "," << format_g17(t.kd) << ","
       << format_g17(t.hakd) << "," << format_g17(t.total) << "," << format_g17(t.lr) << "\n";
  if (!os) throw io_error("short write: " + path.string());
}

// Per-class evaluation CSV; excluded classes leave the value empty.
inline void write_eval_csv(const EvalResult& e, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw io_error("cannot write eval report: " + path.string());
  os << "record,class,value\n";
  for (std::size_t c = 0; c < e.class_iou.size(); ++c) {
    os << "class_iou," << c << ",";
    if (e.class_included[c]) os << format_g17(e.class_iou[c]);
    os << "\n";
  }
  os << "miou,," << format_g17(e.miou) << "\n";
  if (!os) throw io_error("short write: " + path.string());
}

struct EvalCsv {
  std::vector<double> class_iou;  // excluded classes read back as 0
  std::vector<bool> included;
  double miou = 0.0;
};

inline EvalCsv read_eval_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw io_error("cannot open eval report: " + path.string());
  EvalCsv out;
  std::string line;
  std::getline(is, line);
  if (line != "record,class,value") throw report_error("bad eval report header in " + path.string());
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string record, cls, value;
    std::getline(ls, record, ',');
    std::getline(ls, cls, ',');
    std::getline(ls, value);
    if (record == "class_iou") {
      const std::size_t c = static_cast<std::size_t>(std::stoull(cls));
      if (out.class_iou.size() <= c) {
        out.class_iou.resize(c + 1, 0.0);
        out.included.resize(c + 1, false);
      }
      if (!value.empty()) {
        out.class_iou[c] = std::stod(value);
        out.included[c] = true;
      }
    } else if (record == "miou") {
      out.miou = std::stod(value);
    } else {
      throw report_error("unknown record '" + record + "' in " + path.string());
    }
  }
  return out;
}

inline void write_comparison_csv(const std::vector<ClassDelta>& rows,
                                 const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw io_error("cannot write comparison: " + path.string());
  os << "class,teacher_iou,student_iou,delta\n";
  for (const ClassDelta& r : rows)
    os << r.class_id << "," << format_g17(r.teacher_iou) << "," << format_g17(r.student_iou) << ","
       << format_g17(r.delta) << "\n";
  if (!os) throw io_error("short write: " + path.string());
}

// Heatmap CSV with a layer-name header row and column; degenerate cells stay
// empty.
inline void write_heatmap_csv(const CkaHeatmap& map, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw io_error("cannot write heatmap: " + path.string());
  for (const std::string& name : map.col_names) os << "," << name;
  os << "\n";
  for (std::size_t i = 0; i < map.row_names.size(); ++i) {
    os << map.row_names[i];
    for (std::size_t j = 0; j < map.col_names.size(); ++j) {
      os << ",";
      const std::optional<double>& cell = map.at(i, j);
      if (cell.has_value()) os << format_g17(*cell);
    }
    os << "\n";
  }
  if (!os) throw io_error("short write: " + path.string());
}

}  // namespace hakd
