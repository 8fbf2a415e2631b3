// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace vfmseg::metrics {

/// C x C pixel-count table; rows are ground-truth classes, columns predicted.
/// Ignore pixels are never counted. The sole source of every evaluation
/// metric.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return num_classes_; }
  std::uint64_t at(int truth, int pred) const;
  std::uint64_t total() const;

  /// Adds one (pred, label) pair of equal-sized id maps. Pixels whose label
  /// is `ignore_value` are skipped. Ids >= C that are not the ignore value
  /// raise a data error naming `context`.
  void accumulate(std::span<const std::int32_t> pred,
                  std::span<const std::int32_t> label,
                  std::int32_t ignore_value, const std::string& context = "");

  /// Pure merge; accumulation may be sharded and merged in any order.
  void merge(const ConfusionMatrix& other);

  std::uint64_t row_sum(int c) const;
  std::uint64_t col_sum(int c) const;

 private:
  int num_classes_;
  std::vector<std::uint64_t> counts_;
};

/// Per-class scores plus aggregates. Classes absent from both prediction and
/// truth (empty row and column) are flagged invalid and excluded from the
/// mIoU / mF1 means. Values are fractions in [0,1]; percentages appear only
/// at serialization time.
struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<double> iou_per_class;
  std::vector<double> f1_per_class;
  std::vector<bool> class_valid;
  double miou = 0.0;
  double mf1 = 0.0;
  double oa = 0.0;
  double kappa = 0.0;
  bool kappa_degenerate = false;

  std::string to_json() const;
  /// CSV in table column order: per-class IoU (percent, 2 dp), then
  /// mIoU, mF1 (percent, 2 dp) and Kappa (fraction, 4 dp).
  std::string to_csv_row() const;
  std::string csv_header() const;

  static MetricsReport from_json_file(const std::filesystem::path& path);
};

std::vector<double> iou_per_class(const ConfusionMatrix& cm);
std::vector<double> f1_per_class(const ConfusionMatrix& cm);
/// Validity flags: false for classes with empty row and column.
std::vector<bool> class_validity(const ConfusionMatrix& cm);
double overall_accuracy(const ConfusionMatrix& cm);
/// Chance-corrected agreement. Degenerate expected agreement (PRE == 1)
/// yields 0 with `degenerate` set when provided.
double kappa(const ConfusionMatrix& cm, bool* degenerate = nullptr);

MetricsReport summarize(const ConfusionMatrix& cm,
                        std::vector<std::string> class_names = {});

/// Mean over entries whose flag is set; used by both summarize and the
/// report table validation.
double mean_of_valid(std::span<const double> values,
                     const std::vector<bool>& valid);

}  // namespace vfmseg::metrics
