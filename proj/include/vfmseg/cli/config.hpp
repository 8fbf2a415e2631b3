// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vfmseg/datapipe/augment.hpp"
#include "vfmseg/ssl/trainer.hpp"

namespace vfmseg::cli {

/// Full experiment description. Loads from JSON with strict unknown-key
/// rejection (a typo in a hyperparameter name is an error, never a silent
/// default) and round-trips identically through to_json().
struct ExperimentConfig {
  // dataset
  std::string dataset_root;
  std::string dataset_name = "dataset";
  int tile_size = 512;
  std::int32_t ignore_value = 255;

  // split
  std::array<int, 3> split_ratios{6, 2, 2};
  double label_ratio = 0.1;
  std::uint64_t split_seed = 42;

  // model
  student::StudentConfig student;
  student::FusionWeights fusion;
  std::string inference_mode = "fused";
  int crop_size = 512;

  // teachers
  std::vector<teachers::TeacherSpec> teacher_specs;

  // ssl
  ssl::LossWeights loss_weights;
  double ema_momentum = 0.999;
  double tau = 0.95;
  bool distill_labeled = false;

  // optim
  ssl::AdamWConfig optim;
  int batch_size = 8;
  int epochs = 60;
  std::int64_t max_steps = 0;

  // augment
  datapipe::AugmentationSpec augment;

  // io
  std::string out_dir = "out";
  int checkpoint_every_epochs = 1;
  int validate_every_epochs = 0;

  std::uint64_t train_seed = 42;

  static ExperimentConfig from_file(const std::filesystem::path& path);
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
  void save(const std::filesystem::path& path) const;

  void validate() const;

  ssl::TrainSetup to_train_setup() const;

  /// Manifest file locations under out_dir/manifests.
  std::filesystem::path manifests_dir() const;
  std::filesystem::path train_manifest_path() const;
  std::filesystem::path val_manifest_path() const;
  std::filesystem::path test_manifest_path() const;
};

/// "5" for 0.05, "0.5" for 0.005: percentage with trailing zeros trimmed.
std::string ratio_tag(double ratio);

}  // namespace vfmseg::cli
