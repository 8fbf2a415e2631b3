// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vfmseg/cli/config.hpp"

namespace vfmseg::cli {

/// Writes the per-split manifest files (train manifest carries the
/// labeled/unlabeled partition for the configured ratio) under
/// out_dir/manifests. Prints tile counts; prints "up to date" when the files
/// already match byte-for-byte.
int cmd_split(const ExperimentConfig& config);

/// Runs training per the config; optionally resumes from a checkpoint.
int cmd_train(const ExperimentConfig& config,
              const std::filesystem::path& resume);

/// Tiled inference over a manifest split with a checkpointed model
/// ("student" or "ema" parameters), confusion-matrix accumulation, metrics
/// report in JSON and CSV under out_dir.
int cmd_eval(const std::filesystem::path& checkpoint,
             const std::filesystem::path& manifest_path,
             const std::filesystem::path& dataset_root,
             const std::string& model_source, const std::string& mode,
             const std::filesystem::path& out_dir);

/// Renders one or more metrics reports as a Markdown table (stdout and
/// optionally a file) plus a CSV file. Best value per column is bolded in
/// Markdown. Rows whose per-class mean disagrees with their stated mIoU by
/// more than 0.005 get a validation warning.
int cmd_report(const std::vector<std::filesystem::path>& report_files,
               const std::filesystem::path& markdown_out,
               const std::filesystem::path& csv_out);

/// Generates the bundled synthetic dataset.
int cmd_synth(const std::filesystem::path& out_dir, int num_images,
              int image_size, std::uint64_t seed);

/// Downloads and checksum-verifies a weight bundle (by registry name or
/// explicit URL+sha256) into the weights cache.
int cmd_fetch(const std::string& name, const std::string& url,
              const std::string& sha256,
              const std::filesystem::path& registry_path,
              const std::filesystem::path& cache_dir);

}  // namespace vfmseg::cli
