// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <optional>

#include "vfmseg/core/archive.hpp"
#include "vfmseg/datapipe/loader.hpp"
#include "vfmseg/datapipe/manifest.hpp"
#include "vfmseg/metrics/metrics.hpp"
#include "vfmseg/ssl/losses.hpp"
#include "vfmseg/ssl/optimizer.hpp"
#include "vfmseg/student/student.hpp"
#include "vfmseg/teachers/teachers.hpp"

namespace vfmseg::ssl {

struct SslSettings {
  LossWeights loss_weights;
  EmaConfig ema;
  double tau = 0.95;
  bool distill_labeled = false;
};

struct IoSettings {
  std::filesystem::path out_dir;
  int checkpoint_every_epochs = 1;
  int validate_every_epochs = 0;  // 0: only a final validation
};

struct TrainSetup {
  student::StudentConfig student_config;
  student::FusionWeights fusion;
  student::InferenceMode mode = student::InferenceMode::kFused;
  int crop_size = 64;
  std::vector<teachers::TeacherSpec> teacher_specs;
  SslSettings ssl;
  AdamWConfig optim;
  int batch_size = 8;
  int epochs = 60;
  /// 0 derives the step budget from epochs * steps_per_epoch.
  std::int64_t max_steps = 0;
  datapipe::AugmentationSpec augment;
  std::uint64_t seed = 42;
  IoSettings io;
};

struct LabeledBatch {
  Tensor images;                     // [B,3,H,W]
  std::vector<std::int32_t> labels;  // B*H*W
};

struct UnlabeledBatch {
  std::vector<datapipe::SegmentationSample> weak_views;
  std::vector<std::uint64_t> strong_seeds;
};

struct TrainSummary {
  std::int64_t steps = 0;
  double best_miou = -1.0;
  std::int64_t best_step = -1;
  std::optional<metrics::MetricsReport> final_val;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
};

/// What the decoder consumed on the most recent traced forward, for the
/// fusion-substitution checks. When the step ran an unlabeled strong-view
/// forward the trace comes from it, otherwise from the labeled forward.
struct StepTrace {
  student::ForwardTrace forward;
  Tensor f_s;
  bool from_unlabeled = false;
  bool valid = false;
};

/// Owns the train state (student, EMA teacher, optimizer, step counter) and
/// runs the training loop: pseudo-labeling on weak views, strong-view
/// consistency, multi-teacher feature distillation, fusion, EMA maintenance.
/// All data order and augmentation randomness is a pure function of
/// (seed, step), which is what makes runs replayable and resumable.
class Trainer {
 public:
  Trainer(TrainSetup setup, datapipe::DatasetManifest manifest,
          std::filesystem::path dataset_root);

  /// One optimization step on explicit batches (Algorithm-1 ordering):
  /// EMA pseudo-labels on the weak views, strong-view composition, student
  /// forward, frozen-teacher features + distillation, labeled forward,
  /// total loss, backward, optimizer step, EMA update.
  LossReport train_step(const LabeledBatch& labeled,
                        const UnlabeledBatch& unlabeled);

  /// Deterministic batch builders for a given step index.
  LabeledBatch make_labeled_batch(std::int64_t step) const;
  UnlabeledBatch make_unlabeled_batch(std::int64_t step) const;

  /// Builds the batches for the current step counter and trains on them.
  LossReport run_one_step();

  /// Full loop with logging, periodic validation and checkpoints.
  TrainSummary run(const std::function<void(const LossReport&)>& on_step = {});

  metrics::MetricsReport validate(bool use_ema) const;

  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

  std::int64_t step() const { return step_; }
  std::int64_t steps_per_epoch() const { return steps_per_epoch_; }
  std::int64_t total_steps() const;
  student::StudentModel& student_model() { return student_; }
  student::StudentModel& ema_model() { return ema_; }
  const std::vector<std::pair<std::string, teachers::TeacherPtr>>& teachers()
      const {
    return teachers_;
  }
  const TrainSetup& setup() const { return setup_; }
  const datapipe::DatasetManifest& manifest() const { return manifest_; }

  void set_tracing(bool on) { tracing_ = on; }
  const StepTrace& last_trace() const { return trace_; }

 private:
  struct DistillInputs {
    std::map<std::string, teachers::TokenFeatureMap> translated;
    std::map<std::string, teachers::TokenFeatureMap> teacher_feats;
  };

  Tensor forward_with_mode(const student::EncodeResult& enc,
                           std::map<std::string, teachers::TokenFeatureMap>*
                               translated_out,
                           int out_h, int out_w,
                           student::ForwardTrace* trace) const;
  std::map<std::string, teachers::TokenFeatureMap> extract_teacher_features(
      const Tensor& images, int rows, int cols) const;
  metrics::MetricsReport evaluate_tiles(
      const student::StudentModel& model,
      const std::vector<const datapipe::TileRecord*>& tiles) const;

  TrainSetup setup_;
  datapipe::DatasetManifest manifest_;
  datapipe::TileLoader loader_;
  std::vector<const datapipe::TileRecord*> labeled_tiles_;
  std::vector<const datapipe::TileRecord*> unlabeled_tiles_;
  std::vector<const datapipe::TileRecord*> val_tiles_;
  std::vector<std::pair<std::string, teachers::TeacherPtr>> teachers_;
  student::StudentModel student_;
  student::StudentModel ema_;
  AdamW optimizer_;
  std::int64_t step_ = 0;
  std::int64_t steps_per_epoch_ = 0;
  bool tracing_ = false;
  StepTrace trace_;
};

/// Rebuilds a model from checkpoint metadata, loading the parameter set
/// under `prefix` ("student." or "ema."). Fused-mode inference needs no
/// teacher handles, so evaluation works offline from the checkpoint alone.
student::StudentModel model_from_checkpoint(const Archive& archive,
                                            const std::string& prefix);

/// Helpers shared with the CLI.
Tensor stack_images(std::span<const datapipe::SegmentationSample> samples);
std::vector<std::int32_t> stack_labels(
    std::span<const datapipe::SegmentationSample> samples);
std::vector<std::int32_t> argmax_logits(const Tensor& logits);

}  // namespace vfmseg::ssl
