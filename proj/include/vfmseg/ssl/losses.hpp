// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vfmseg/core/tensor.hpp"
#include "vfmseg/student/student.hpp"
#include "vfmseg/teachers/teachers.hpp"

namespace vfmseg::ssl {

struct LossWeights {
  double lambda_l = 1.0 / 3.0;
  double lambda_u = 1.0 / 3.0;
  double lambda_d = 1.0 / 3.0;

  void validate() const;
};

struct EmaConfig {
  double momentum = 0.999;

  void validate() const;
};

/// Hard pseudo-labels plus the confidence mask derived from teacher
/// predictions on the weak view. Carries no autograd state by construction.
struct PseudoLabelBundle {
  int batch = 0;
  int height = 0;
  int width = 0;
  std::vector<std::int32_t> hard_labels;      // B*H*W
  std::vector<std::uint8_t> confidence_mask;  // B*H*W, 1 = confident
  double coverage = 0.0;
};

/// Named scalar losses for one optimization step; the logging contract.
struct LossReport {
  std::int64_t step = 0;
  double l_sup = 0.0;
  double l_unsup = 0.0;
  double l_distill_total = 0.0;
  std::map<std::string, double> l_distill_per_teacher;
  double total = 0.0;
  double pseudo_coverage = 0.0;
  double lr_encoder = 0.0;
  double lr_decoder = 0.0;

  std::string to_json_line() const;
  static LossReport from_json_line(const std::string& line);
  bool bitwise_equal(const LossReport& other) const;
};

/// Mean pixel-wise cross-entropy over non-ignore pixels of the labeled
/// batch. All-ignore batches yield a graph-free zero with a warning on
/// stderr. logits: [B,C,H,W]; labels: B*H*W ids (row-major).
Tensor supervised_loss(const Tensor& logits,
                       std::span<const std::int32_t> labels,
                       std::int32_t ignore_value);

/// Argmax + confidence threshold over softmax(weak_logits). No gradient
/// flows through this operation. tau must lie in (0, 1].
PseudoLabelBundle pseudo_label(const Tensor& weak_logits, double tau);

/// Cross-entropy between strong-view logits and pseudo-labels on confident
/// pixels only, normalized by the full pixel population (masked-out pixels
/// contribute zero to the numerator but stay in the denominator).
Tensor unsupervised_loss(const Tensor& strong_logits,
                         const PseudoLabelBundle& bundle);

struct DistillationResult {
  Tensor total;  // scalar; mean over teachers
  std::map<std::string, double> per_teacher;
};

/// Per-teacher mean-squared-error between translated student tokens and
/// (detached) teacher tokens: sum over the embedding dim, mean over B*N.
/// Total is the arithmetic mean over teachers. Both maps must share keys.
DistillationResult distillation_loss(
    const std::map<std::string, teachers::TokenFeatureMap>& translated,
    const std::map<std::string, teachers::TokenFeatureMap>& teacher_feats);

struct TotalLoss {
  Tensor total;
  LossReport report;
};

/// Weighted composition: total = lambda_l*l_sup + lambda_u*l_unsup +
/// lambda_d*l_distill. Non-finite inputs raise NumericError carrying the
/// per-term values.
TotalLoss total_loss(const Tensor& l_sup, const Tensor& l_unsup,
                     const DistillationResult& distill, const LossWeights& w,
                     double pseudo_coverage, std::int64_t step);

/// teacher <- momentum*teacher + (1-momentum)*student, every parameter
/// elementwise. Applied once per optimizer step, after the update.
void ema_update(student::ParamStore& teacher,
                const student::ParamStore& student_params, double momentum);

}  // namespace vfmseg::ssl
