// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/metrics/metrics.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vfmseg/core/error.hpp"

namespace vfmseg::metrics {

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes),
      counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes <= 0) {
    throw ConfigError("confusion matrix needs at least one class");
  }
}

std::uint64_t ConfusionMatrix::at(int truth, int pred) const {
  return counts_[static_cast<std::size_t>(truth) * num_classes_ + pred];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t c : counts_) t += c;
  return t;
}

void ConfusionMatrix::accumulate(std::span<const std::int32_t> pred,
                                 std::span<const std::int32_t> label,
                                 std::int32_t ignore_value,
                                 const std::string& context) {
  if (pred.size() != label.size()) {
    throw ContractViolation("accumulate: pred/label size mismatch");
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const std::int32_t g = label[i];
    if (g == ignore_value) continue;
    const std::int32_t p = pred[i];
    if (g < 0 || g >= num_classes_ || p < 0 || p >= num_classes_) {
      throw DataError("class id out of range (label " + std::to_string(g) +
                      ", pred " + std::to_string(p) + ")" +
                      (context.empty() ? "" : " in " + context));
    }
    ++counts_[static_cast<std::size_t>(g) * num_classes_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_) {
    throw ContractViolation("merge: class count mismatch");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    counts_[i] += other.counts_[i];
  }
}

std::uint64_t ConfusionMatrix::row_sum(int c) const {
  std::uint64_t s = 0;
  for (int j = 0; j < num_classes_; ++j) s += at(c, j);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(int c) const {
  std::uint64_t s = 0;
  for (int i = 0; i < num_classes_; ++i) s += at(i, c);
  return s;
}

std::vector<double> iou_per_class(const ConfusionMatrix& cm) {
  std::vector<double> out(static_cast<std::size_t>(cm.num_classes()), 0.0);
  for (int c = 0; c < cm.num_classes(); ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    const double denom =
        static_cast<double>(cm.row_sum(c) + cm.col_sum(c) - cm.at(c, c));
    out[static_cast<std::size_t>(c)] = denom > 0.0 ? tp / denom : 0.0;
  }
  return out;
}

std::vector<double> f1_per_class(const ConfusionMatrix& cm) {
  std::vector<double> out(static_cast<std::size_t>(cm.num_classes()), 0.0);
  for (int c = 0; c < cm.num_classes(); ++c) {
    const double tp = static_cast<double>(cm.at(c, c));
    // 2TP + FP + FN = row + col
    const double denom = static_cast<double>(cm.row_sum(c) + cm.col_sum(c));
    out[static_cast<std::size_t>(c)] = denom > 0.0 ? 2.0 * tp / denom : 0.0;
  }
  return out;
}

std::vector<bool> class_validity(const ConfusionMatrix& cm) {
  std::vector<bool> valid(static_cast<std::size_t>(cm.num_classes()));
  for (int c = 0; c < cm.num_classes(); ++c) {
    valid[static_cast<std::size_t>(c)] = cm.row_sum(c) + cm.col_sum(c) > 0;
  }
  return valid;
}

double overall_accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw DataError("overall accuracy of an empty matrix");
  std::uint64_t diag = 0;
  for (int c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
  return static_cast<double>(diag) / static_cast<double>(total);
}

double kappa(const ConfusionMatrix& cm, bool* degenerate) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw DataError("kappa of an empty matrix");
  const double oa = overall_accuracy(cm);
  double pre = 0.0;
  const double t = static_cast<double>(total);
  for (int c = 0; c < cm.num_classes(); ++c) {
    pre += (static_cast<double>(cm.row_sum(c)) / t) *
           (static_cast<double>(cm.col_sum(c)) / t);
  }
  if (degenerate != nullptr) *degenerate = false;
  if (pre >= 1.0) {
    if (degenerate != nullptr) *degenerate = true;
    return 0.0;
  }
  return (oa - pre) / (1.0 - pre);
}

double mean_of_valid(std::span<const double> values,
                     const std::vector<bool>& valid) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (valid.empty() || valid[i]) {
      sum += values[i];
      ++n;
    }
  }
  return n > 0 ? sum / n : 0.0;
}

MetricsReport summarize(const ConfusionMatrix& cm,
                        std::vector<std::string> class_names) {
  MetricsReport report;
  if (class_names.empty()) {
    for (int c = 0; c < cm.num_classes(); ++c) {
      class_names.push_back("class_" + std::to_string(c));
    }
  }
  if (static_cast<int>(class_names.size()) != cm.num_classes()) {
    throw ContractViolation("summarize: class name count mismatch");
  }
  report.class_names = std::move(class_names);
  report.iou_per_class = iou_per_class(cm);
  report.f1_per_class = f1_per_class(cm);
  report.class_valid = class_validity(cm);
  report.miou = mean_of_valid(report.iou_per_class, report.class_valid);
  report.mf1 = mean_of_valid(report.f1_per_class, report.class_valid);
  report.oa = overall_accuracy(cm);
  report.kappa = kappa(cm, &report.kappa_degenerate);
  return report;
}

namespace {

std::string pct2(double fraction) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << fraction * 100.0;
  return os.str();
}

std::string frac4(double fraction) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << fraction;
  return os.str();
}

}  // namespace

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["class_names"] = class_names;
  j["iou_per_class"] = iou_per_class;
  j["f1_per_class"] = f1_per_class;
  j["class_valid"] = std::vector<int>(class_valid.begin(), class_valid.end());
  j["miou"] = miou;
  j["mf1"] = mf1;
  j["oa"] = oa;
  j["kappa"] = kappa;
  j["kappa_degenerate"] = kappa_degenerate;
  return j.dump(2);
}

MetricsReport MetricsReport::from_json_file(
    const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open metrics report " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad metrics report " + path.string() + ": " + e.what());
  }
  MetricsReport r;
  try {
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.iou_per_class = j.at("iou_per_class").get<std::vector<double>>();
    r.f1_per_class = j.at("f1_per_class").get<std::vector<double>>();
    const auto valid = j.at("class_valid").get<std::vector<int>>();
    r.class_valid.assign(valid.begin(), valid.end());
    r.miou = j.at("miou").get<double>();
    r.mf1 = j.at("mf1").get<double>();
    r.oa = j.at("oa").get<double>();
    r.kappa = j.at("kappa").get<double>();
    r.kappa_degenerate = j.value("kappa_degenerate", false);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("metrics report " + path.string() +
                    " missing field: " + e.what());
  }
  return r;
}

std::string MetricsReport::csv_header() const {
  std::ostringstream os;
  for (const auto& name : class_names) os << "iou_" << name << ",";
  os << "miou,mf1,kappa";
  return os.str();
}

std::string MetricsReport::to_csv_row() const {
  std::ostringstream os;
  for (double v : iou_per_class) os << pct2(v) << ",";
  os << pct2(miou) << "," << pct2(mf1) << "," << frac4(kappa);
  return os.str();
}

}  // namespace vfmseg::metrics
