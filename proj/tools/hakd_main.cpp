// Command-line front end for the desk-scale heterogeneous distillation lab.
//
// Subcommands: gen-data, train-teacher, warmup, distill, eval,
// compare-classes, cka. Exit codes: 0 success, 2 config error, 3 numeric
// failure, 4 i/o error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hakd/config.hpp"
#include "hakd/pipeline.hpp"
#include "hakd/report.hpp"

namespace fs = std::filesystem;
using namespace hakd;

namespace {

int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::numeric:
      return 3;
    case ErrorKind::io:
      return 4;
    default:
      return 2;
  }
}

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  bool dump_intermediates = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_seed = true) {
  cmd->add_option("--config", args.config_path, "flat key=value config file");
  if (with_seed) cmd->add_option("--seed", args.seed, "run seed");
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_flag("--dump-intermediates", args.dump_intermediates,
                "dump intermediate maps/features as tensor files");
}

RunConfig load_cfg(const CommonArgs& args) {
  RunConfig cfg;
  if (!args.config_path.empty()) cfg = load_config(args.config_path);
  cfg.validate();
  return cfg;
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

template <typename T>
int cmd_gen_data(const CommonArgs& args, const RunConfig& cfg) {
  SyntheticDataset<T> train = gen_synthetic<T>(args.seed, cfg.train_samples, cfg.image_size,
                                               cfg.image_size, cfg.num_classes, "train");
  SyntheticDataset<T> val = gen_synthetic<T>(args.seed, cfg.val_samples, cfg.image_size,
                                             cfg.image_size, cfg.num_classes, "val");
  save_dataset(train, val, args.out_dir);
  std::printf("wrote %zu train / %zu val samples (%zux%zu, %zu classes) to %s\n", train.count(),
              val.count(), cfg.image_size, cfg.image_size, cfg.num_classes,
              args.out_dir.c_str());
  return 0;
}

template <typename T>
int cmd_train_teacher(const CommonArgs& args, const RunConfig& cfg) {
  Stopwatch watch;
  auto [train, val] = load_or_generate<T>(cfg);
  TeacherRun<T> run = train_teacher(cfg, args.seed, train, val);
  fs::create_directories(args.out_dir);
  save_model(run.model, fs::path(args.out_dir) / "checkpoint");
  RunReport report;
  report.seed = args.seed;
  report.records = run.records;
  report.final_eval = run.val_eval;
  report.config = cfg;
  write_run_report_csv(report, fs::path(args.out_dir) / "run_report.csv");
  write_eval_csv(run.val_eval, fs::path(args.out_dir) / "eval_report.csv");
  std::printf("teacher (%s, d=%zu) trained %zu iters: val mIoU %.4f [%.1fs]\n",
              cfg.teacher_arch.c_str(), cfg.teacher_depth, cfg.teacher_iters, run.val_eval.miou,
              watch.seconds());
  return 0;
}

template <typename T>
int cmd_warmup(const CommonArgs& args, const RunConfig& cfg) {
  Stopwatch watch;
  PipelineOutcome<T> out = warmup_train<T>(cfg, args.seed);
  fs::create_directories(args.out_dir);
  save_model(out.student, fs::path(args.out_dir) / "checkpoint");
  RunReport report;
  report.seed = args.seed;
  report.records = out.records;
  report.final_eval = out.val_eval;
  report.config = cfg;
  write_run_report_csv(report, fs::path(args.out_dir) / "run_report.csv");
  write_eval_csv(out.val_eval, fs::path(args.out_dir) / "eval_report.csv");
  std::printf("warm-up finished after %zu iters: val mIoU %.4f [%.1fs]\n", cfg.warmup_iters(),
              out.val_eval.miou, watch.seconds());
  return 0;
}

template <typename T>
int cmd_distill(const CommonArgs& args, const RunConfig& cfg) {
  Stopwatch watch;
  fs::create_directories(args.out_dir);
  const fs::path out_dir(args.out_dir);
  const fs::path* dump = args.dump_intermediates ? &out_dir : nullptr;
  PipelineOutcome<T> out = run_distillation<T>(cfg, args.seed, nullptr, dump);
  save_model(out.student, out_dir / "checkpoint");
  if (out.projectors_active) {
    save_projector(out.student_projector, out_dir / "projector_student");
    save_projector(out.teacher_projector, out_dir / "projector_teacher");
  }
  RunReport report;
  report.seed = args.seed;
  report.records = out.records;
  report.final_eval = out.val_eval;
  report.config = cfg;
  report.wall_clock_seconds = watch.seconds();
  write_run_report_csv(report, out_dir / "run_report.csv");
  write_eval_csv(out.val_eval, out_dir / "eval_report.csv");
  save_tensor(cast_tensor<T>(out.val_predictions), out_dir / "val_predictions.hakd");
  std::printf("distillation done (%zu iters, warm-up %zu): val mIoU %.4f [%.1fs]\n",
              cfg.total_iters, cfg.warmup_iters(), out.val_eval.miou,
              report.wall_clock_seconds);
  return 0;
}

template <typename T>
int cmd_eval(const CommonArgs& args, const RunConfig& cfg, const std::string& ckpt) {
  ModelParams<T> model = load_model<T>(ckpt);
  auto [train, val] = load_or_generate<T>(cfg);
  const SyntheticDataset<T>& split = cfg.eval_split == "train" ? train : val;
  LabelTensor pred;
  EvalResult r = evaluate_model(model, split, cfg.batch_size, &pred);
  fs::create_directories(args.out_dir);
  write_eval_csv(r, fs::path(args.out_dir) / "eval_report.csv");
  save_tensor(cast_tensor<T>(pred), fs::path(args.out_dir) / "predictions.hakd");
  std::printf("%s split mIoU %.4f over %zu samples\n", cfg.eval_split.c_str(), r.miou,
              split.count());
  return 0;
}

int cmd_compare(const std::string& teacher_csv, const std::string& student_csv,
                const std::string& out_dir) {
  EvalCsv t = read_eval_csv(teacher_csv);
  EvalCsv s = read_eval_csv(student_csv);
  std::vector<ClassDelta> rows = per_class_comparison(t.class_iou, s.class_iou);
  fs::create_directories(out_dir);
  write_comparison_csv(rows, fs::path(out_dir) / "class_comparison.csv");
  std::printf("student beats teacher on %zu of %zu classes\n", rows.size(), t.class_iou.size());
  return 0;
}

std::vector<std::string> split_layers(const std::string& csv, Arch arch) {
  if (csv.empty()) return model_layer_names(arch);
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(csv);
  while (std::getline(is, item, ',')) out.push_back(item);
  return out;
}

template <typename T>
int cmd_cka(const CommonArgs& args, const RunConfig& cfg, const std::string& ckpt_a,
            const std::string& ckpt_b, const std::string& layers_a_csv,
            const std::string& layers_b_csv) {
  Stopwatch watch;
  ModelParams<T> a = load_model<T>(ckpt_a);
  ModelParams<T> b = load_model<T>(ckpt_b);
  SyntheticDataset<T> ds = gen_synthetic<T>(cfg.data_seed, cfg.cka_samples, cfg.image_size,
                                            cfg.image_size, cfg.num_classes, "cka");
  fs::create_directories(args.out_dir);
  const fs::path out_dir(args.out_dir);
  const fs::path features_dir = out_dir / "features";
  CkaReportResult<T> result =
      cka_report(a, b, ds, cfg.cka_minibatch, cfg.batch_size, split_layers(layers_a_csv, a.arch),
                 split_layers(layers_b_csv, b.arch),
                 args.dump_intermediates ? &features_dir : nullptr);
  write_heatmap_csv(result.heatmap, out_dir / "cka_heatmap.csv");
  std::printf("cka heatmap %zux%zu over %zu samples (minibatch %zu) [%.1fs]\n",
              result.layers_a.size(), result.layers_b.size(), ds.count(), cfg.cka_minibatch,
              watch.seconds());
  return 0;
}

template <typename F>
int with_dtype(const RunConfig& cfg, F&& f) {
  if (cfg.dtype == "f64") return f(double{});
  return f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale heterogeneous knowledge-distillation lab"};
  app.require_subcommand(1);

  CommonArgs gen_args, teacher_args, warmup_args, distill_args, eval_args, cka_args;
  std::string eval_ckpt, cka_a, cka_b, cka_layers_a, cka_layers_b;
  std::string cmp_teacher, cmp_student, cmp_out = "out";

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen, gen_args);

  CLI::App* teacher = app.add_subcommand("train-teacher", "train the teacher on the task");
  add_common(teacher, teacher_args);

  CLI::App* warm = app.add_subcommand("warmup", "label-only student warm-up");
  add_common(warm, warmup_args);

  CLI::App* dist = app.add_subcommand("distill", "full distillation run");
  add_common(dist, distill_args);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--ckpt", eval_ckpt, "model checkpoint directory")->required();

  CLI::App* cmp = app.add_subcommand("compare-classes",
                                     "classes where the student beats the teacher");
  cmp->add_option("--teacher-report", cmp_teacher, "teacher eval_report.csv")->required();
  cmp->add_option("--student-report", cmp_student, "student eval_report.csv")->required();
  cmp->add_option("--out", cmp_out, "output directory");

  CLI::App* cka_cmd = app.add_subcommand("cka", "representation-similarity heatmap");
  add_common(cka_cmd, cka_args, /*with_seed=*/false);
  cka_cmd->add_option("--model-a", cka_a, "first checkpoint directory")->required();
  cka_cmd->add_option("--model-b", cka_b, "second checkpoint directory")->required();
  cka_cmd->add_option("--layers-a", cka_layers_a, "comma-separated layer names (default: all)");
  cka_cmd->add_option("--layers-b", cka_layers_b, "comma-separated layer names (default: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      const RunConfig cfg = load_cfg(gen_args);
      return with_dtype(cfg, [&](auto tag) { return cmd_gen_data<decltype(tag)>(gen_args, cfg); });
    }
    if (teacher->parsed()) {
      const RunConfig cfg = load_cfg(teacher_args);
      return with_dtype(cfg, [&](auto tag) {
        return cmd_train_teacher<decltype(tag)>(teacher_args, cfg);
      });
    }
    if (warm->parsed()) {
      const RunConfig cfg = load_cfg(warmup_args);
      return with_dtype(cfg, [&](auto tag) { return cmd_warmup<decltype(tag)>(warmup_args, cfg); });
    }
    if (dist->parsed()) {
      const RunConfig cfg = load_cfg(distill_args);
      return with_dtype(cfg, [&](auto tag) { return cmd_distill<decltype(tag)>(distill_args, cfg); });
    }
    if (eval_cmd->parsed()) {
      const RunConfig cfg = load_cfg(eval_args);
      return with_dtype(cfg, [&](auto tag) {
        return cmd_eval<decltype(tag)>(eval_args, cfg, eval_ckpt);
      });
    }
    if (cmp->parsed()) return cmd_compare(cmp_teacher, cmp_student, cmp_out);
    if (cka_cmd->parsed()) {
      const RunConfig cfg = load_cfg(cka_args);
      return with_dtype(cfg, [&](auto tag) {
        return cmd_cka<decltype(tag)>(cka_args, cfg, cka_a, cka_b, cka_layers_a, cka_layers_b);
      });
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
