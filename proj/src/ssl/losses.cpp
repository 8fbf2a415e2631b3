// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/ssl/losses.hpp"

#include <cmath>
#include <cstring>
#include <iostream>

#include <nlohmann/json.hpp>

#include "vfmseg/core/error.hpp"
#include "vfmseg/core/ops.hpp"
#include "vfmseg/kernels/kernels.hpp"

namespace vfmseg::ssl {

void LossWeights::validate() const {
  if (lambda_l < 0.0 || lambda_u < 0.0 || lambda_d < 0.0) {
    throw ConfigError("loss weights must be non-negative");
  }
  if (lambda_l + lambda_u + lambda_d <= 0.0) {
    throw ConfigError("loss weights must not all be zero");
  }
}

void EmaConfig::validate() const {
  if (momentum < 0.0 || momentum > 1.0) {
    throw ConfigError("EMA momentum must lie in [0,1]");
  }
}

namespace {

// [B,C,H,W] -> [B*H*W, C] with autograd.
Tensor logits_to_rows(const Tensor& logits) {
  const std::int64_t b = logits.dim(0);
  const std::int64_t c = logits.dim(1);
  const std::int64_t h = logits.dim(2);
  const std::int64_t w = logits.dim(3);
  return ops::reshape(ops::permute(logits, {0, 2, 3, 1}), {b * h * w, c});
}

}  // namespace

Tensor supervised_loss(const Tensor& logits,
                       std::span<const std::int32_t> labels,
                       std::int32_t ignore_value) {
  if (logits.ndim() != 4) {
    throw ContractViolation("supervised_loss: logits must be [B,C,H,W]");
  }
  const std::int64_t pixels = logits.dim(0) * logits.dim(2) * logits.dim(3);
  if (static_cast<std::int64_t>(labels.size()) != pixels) {
    throw ContractViolation("supervised_loss: label count mismatch");
  }
  std::vector<std::uint8_t> mask(labels.size());
  std::int64_t valid = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool ok = labels[i] != ignore_value;
    mask[i] = ok ? 1 : 0;
    valid += ok ? 1 : 0;
  }
  if (valid == 0) {
    std::cerr << "[vfmseg] warning: supervised batch has no scored pixels\n";
    return Tensor::scalar(0.0);
  }
  return ops::masked_cross_entropy(logits_to_rows(logits), labels, mask,
                                   static_cast<double>(valid));
}

PseudoLabelBundle pseudo_label(const Tensor& weak_logits, double tau) {
  if (!(tau > 0.0) || tau > 1.0) {
    throw ConfigError("confidence threshold tau must lie in (0,1]");
  }
  if (weak_logits.ndim() != 4) {
    throw ContractViolation("pseudo_label: logits must be [B,C,H,W]");
  }
  const std::int64_t b = weak_logits.dim(0);
  const std::int64_t c = weak_logits.dim(1);
  const std::int64_t h = weak_logits.dim(2);
  const std::int64_t w = weak_logits.dim(3);
  const std::int64_t hw = h * w;
  PseudoLabelBundle bundle;
  bundle.batch = static_cast<int>(b);
  bundle.height = static_cast<int>(h);
  bundle.width = static_cast<int>(w);
  bundle.hard_labels.resize(static_cast<std::size_t>(b * hw));
  bundle.confidence_mask.resize(static_cast<std::size_t>(b * hw));
  const double* ld = weak_logits.data();
  std::int64_t confident = 0;
  std::vector<double> probs(static_cast<std::size_t>(c));
  for (std::int64_t bi = 0; bi < b; ++bi) {
    const double* base = ld + bi * c * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      double mx = base[p];
      std::int32_t arg = 0;
      for (std::int64_t ch = 1; ch < c; ++ch) {
        const double v = base[ch * hw + p];
        if (v > mx) {
          mx = v;
          arg = static_cast<std::int32_t>(ch);
        }
      }
      double sum = 0.0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        probs[static_cast<std::size_t>(ch)] = std::exp(base[ch * hw + p] - mx);
        sum += probs[static_cast<std::size_t>(ch)];
      }
      const double max_prob = probs[static_cast<std::size_t>(arg)] / sum;
      const std::size_t idx = static_cast<std::size_t>(bi * hw + p);
      bundle.hard_labels[idx] = arg;
      const bool keep = max_prob >= tau;
      bundle.confidence_mask[idx] = keep ? 1 : 0;
      confident += keep ? 1 : 0;
    }
  }
  bundle.coverage =
      static_cast<double>(confident) / static_cast<double>(b * hw);
  return bundle;
}

Tensor unsupervised_loss(const Tensor& strong_logits,
                         const PseudoLabelBundle& bundle) {
  if (strong_logits.ndim() != 4) {
    throw ContractViolation("unsupervised_loss: logits must be [B,C,H,W]");
  }
  const std::int64_t pixels =
      strong_logits.dim(0) * strong_logits.dim(2) * strong_logits.dim(3);
  if (static_cast<std::int64_t>(bundle.hard_labels.size()) != pixels) {
    throw ContractViolation("unsupervised_loss: bundle size mismatch");
  }
  bool any = false;
  for (std::uint8_t m : bundle.confidence_mask) {
    if (m != 0) {
      any = true;
      break;
    }
  }
  if (!any) return Tensor::scalar(0.0);
  // Masked-out pixels count as zero loss but stay in the denominator.
  return ops::masked_cross_entropy(logits_to_rows(strong_logits),
                                   bundle.hard_labels, bundle.confidence_mask,
                                   static_cast<double>(pixels));
}

DistillationResult distillation_loss(
    const std::map<std::string, teachers::TokenFeatureMap>& translated,
    const std::map<std::string, teachers::TokenFeatureMap>& teacher_feats) {
  if (translated.size() != teacher_feats.size()) {
    throw ContractViolation("distillation_loss: teacher sets differ in size");
  }
  DistillationResult result;
  Tensor sum;
  for (const auto& [key, trans] : translated) {
    auto it = teacher_feats.find(key);
    if (it == teacher_feats.end()) {
      throw ContractViolation("distillation_loss: no teacher features for '" +
                              key + "'");
    }
    Tensor term = ops::mse_token_mean(trans.data, it->second.data);
    result.per_teacher[key] = term.item();
    sum = sum.defined() ? ops::add(sum, term) : term;
  }
  if (!sum.defined()) {
    result.total = Tensor::scalar(0.0);
    return result;
  }
  result.total =
      ops::scale(sum, 1.0 / static_cast<double>(translated.size()));
  return result;
}

TotalLoss total_loss(const Tensor& l_sup, const Tensor& l_unsup,
                     const DistillationResult& distill, const LossWeights& w,
                     double pseudo_coverage, std::int64_t step) {
  w.validate();
  const double sup = l_sup.item();
  const double unsup = l_unsup.item();
  const double dist = distill.total.item();
  if (!std::isfinite(sup) || !std::isfinite(unsup) || !std::isfinite(dist)) {
    throw NumericError("non-finite loss at step " + std::to_string(step) +
                       " (l_sup=" + std::to_string(sup) +
                       ", l_unsup=" + std::to_string(unsup) +
                       ", l_distill=" + std::to_string(dist) + ")");
  }
  TotalLoss out;
  out.total = ops::add(
      ops::add(ops::scale(l_sup, w.lambda_l), ops::scale(l_unsup, w.lambda_u)),
      ops::scale(distill.total, w.lambda_d));
  out.report.step = step;
  out.report.l_sup = sup;
  out.report.l_unsup = unsup;
  out.report.l_distill_total = dist;
  out.report.l_distill_per_teacher = distill.per_teacher;
  out.report.total = out.total.item();
  out.report.pseudo_coverage = pseudo_coverage;
  return out;
}

void ema_update(student::ParamStore& teacher,
                const student::ParamStore& student_params, double momentum) {
  if (momentum < 0.0 || momentum > 1.0) {
    throw ConfigError("EMA momentum must lie in [0,1]");
  }
  auto& t = teacher.mutable_all();
  const auto& s = student_params.all();
  if (t.size() != s.size()) {
    throw ContractViolation("ema_update: parameter sets differ");
  }
  auto ti = t.begin();
  auto si = s.begin();
  for (; ti != t.end(); ++ti, ++si) {
    if (ti->first != si->first ||
        ti->second.shape() != si->second.shape()) {
      throw ContractViolation("ema_update: shape mismatch at '" + ti->first +
                              "'");
    }
    // Momentum 1 must leave the teacher bit-identical.
    if (momentum == 1.0) continue;
    kernels::active().ema(ti->second.data(), si->second.data(), momentum,
                          static_cast<std::size_t>(ti->second.numel()));
  }
}

namespace {

nlohmann::ordered_json report_to_json(const LossReport& r) {
  nlohmann::ordered_json j;
  j["type"] = "step";
  j["step"] = r.step;
  j["l_sup"] = r.l_sup;
  j["l_unsup"] = r.l_unsup;
  j["l_distill_total"] = r.l_distill_total;
  j["l_distill"] = r.l_distill_per_teacher;
  j["total"] = r.total;
  j["pseudo_coverage"] = r.pseudo_coverage;
  j["lr_encoder"] = r.lr_encoder;
  j["lr_decoder"] = r.lr_decoder;
  return j;
}

}  // namespace

std::string LossReport::to_json_line() const {
  return report_to_json(*this).dump();
}

LossReport LossReport::from_json_line(const std::string& line) {
  LossReport r;
  try {
    const auto j = nlohmann::json::parse(line);
    r.step = j.at("step").get<std::int64_t>();
    r.l_sup = j.at("l_sup").get<double>();
    r.l_unsup = j.at("l_unsup").get<double>();
    r.l_distill_total = j.at("l_distill_total").get<double>();
    for (const auto& [key, value] : j.at("l_distill").items()) {
      r.l_distill_per_teacher[key] = value.get<double>();
    }
    r.total = j.at("total").get<double>();
    r.pseudo_coverage = j.at("pseudo_coverage").get<double>();
    r.lr_encoder = j.at("lr_encoder").get<double>();
    r.lr_decoder = j.at("lr_decoder").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad loss report line: ") + e.what());
  }
  return r;
}

bool LossReport::bitwise_equal(const LossReport& other) const {
  auto same = [](double a, double b) {
    return std::memcmp(&a, &b, sizeof(double)) == 0;
  };
  if (step != other.step || !same(l_sup, other.l_sup) ||
      !same(l_unsup, other.l_unsup) ||
      !same(l_distill_total, other.l_distill_total) ||
      !same(total, other.total) ||
      !same(pseudo_coverage, other.pseudo_coverage)) {
    return false;
  }
  if (l_distill_per_teacher.size() != other.l_distill_per_teacher.size()) {
    return false;
  }
  auto it = l_distill_per_teacher.begin();
  auto ot = other.l_distill_per_teacher.begin();
  for (; it != l_distill_per_teacher.end(); ++it, ++ot) {
    if (it->first != ot->first || !same(it->second, ot->second)) return false;
  }
  return true;
}

}  // namespace vfmseg::ssl
