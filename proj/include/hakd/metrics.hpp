#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "hakd/tensor.hpp"

namespace hakd {

struct EvalResult {
  double miou = 0.0;
  std::vector<double> class_iou;       // 0 for excluded classes
  std::vector<bool> class_included;    // union > 0
  std::vector<std::uint64_t> intersection;
  std::vector<std::uint64_t> union_count;
};

// Dataset-level IoU per class, accumulated over the whole batch. Classes
// absent from both prediction and ground truth are excluded from the mean;
// ignore pixels never count.
inline EvalResult evaluate_miou(const LabelTensor& pred, const LabelTensor& gt,
                                std::size_t num_classes) {
  if (pred.dims() != gt.dims())
    throw shape_error("evaluate_miou: prediction dims " + dims_to_string(pred.dims()) +
                      " do not match ground truth " + dims_to_string(gt.dims()));
  EvalResult r;
  r.intersection.assign(num_classes, 0);
  r.union_count.assign(num_classes, 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const std::int32_t g = gt[i];
    if (g == kIgnoreLabel) continue;
    const std::int32_t p = pred[i];
    if (g < 0 || static_cast<std::size_t>(g) >= num_classes)
      throw invalid_label("evaluate_miou: ground-truth label " + std::to_string(g) +
                          " out of range");
    if (p < 0 || static_cast<std::size_t>(p) >= num_classes)
      throw invalid_label("evaluate_miou: predicted label " + std::to_string(p) + " out of range");
    if (p == g) {
      r.intersection[static_cast<std::size_t>(g)] += 1;
      r.union_count[static_cast<std::size_t>(g)] += 1;
    } else {
      r.union_count[static_cast<std::size_t>(g)] += 1;
      r.union_count[static_cast<std::size_t>(p)] += 1;
    }
  }
  r.class_iou.assign(num_classes, 0.0);
  r.class_included.assign(num_classes, false);
  double sum = 0.0;
  std::size_t included = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (r.union_count[c] == 0) continue;
    r.class_included[c] = true;
    r.class_iou[c] = static_cast<double>(r.intersection[c]) / static_cast<double>(r.union_count[c]);
    sum += r.class_iou[c];
    ++included;
  }
  r.miou = included > 0 ? sum / static_cast<double>(included) : 0.0;
  return r;
}

struct ClassDelta {
  std::size_t class_id = 0;
  double teacher_iou = 0.0;
  double student_iou = 0.0;
  double delta = 0.0;  // student - teacher
};

// Classes where the student beats the teacher, sorted by delta descending
// (stable on ties, so the output is deterministic).
inline std::vector<ClassDelta> per_class_comparison(const std::vector<double>& teacher_iou,
                                                    const std::vector<double>& student_iou) {
  if (teacher_iou.size() != student_iou.size())
    throw report_error("per_class_comparison: class count mismatch (" +
                       std::to_string(teacher_iou.size()) + " vs " +
                       std::to_string(student_iou.size()) + ")");
  std::vector<ClassDelta> rows;
  for (std::size_t c = 0; c < teacher_iou.size(); ++c) {
    const double delta = student_iou[c] - teacher_iou[c];
    if (delta > 0.0) rows.push_back(ClassDelta{c, teacher_iou[c], student_iou[c], delta});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ClassDelta& a, const ClassDelta& b) { return a.delta > b.delta; });
  return rows;
}

}  // namespace hakd
