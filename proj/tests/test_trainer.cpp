// SPDX-License-Identifier: Apache-2.0
//
// Training-loop contracts: Algorithm ordering effects observable from the
// outside (frozen teachers, EMA motion, pseudo-label coverage at init),
// determinism, resume equivalence and the ablation switches.

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "vfmseg/core/error.hpp"
#include "vfmseg/core/ops.hpp"
#include "vfmseg/datapipe/synth.hpp"
#include "vfmseg/ssl/trainer.hpp"

using vfmseg::Rng;
using vfmseg::Tensor;
namespace dp = vfmseg::datapipe;
namespace ssl = vfmseg::ssl;
namespace student = vfmseg::student;
namespace teachers = vfmseg::teachers;
namespace fs = std::filesystem;
namespace ops = vfmseg::ops;

namespace {

struct DeskWorld {
  fs::path root;
  dp::DatasetManifest manifest;
};

// One shared tiny synthetic dataset for the whole binary.
const DeskWorld& desk_world() {
  static DeskWorld world = [] {
    DeskWorld w;
    w.root = fs::temp_directory_path() / "vfmseg_trainer_world";
    fs::remove_all(w.root);
    dp::SynthSpec spec;
    spec.num_images = 40;
    spec.image_size = 64;
    spec.seed = 11;
    dp::generate_synthetic_dataset(w.root, spec);
    auto m = dp::build_manifest(w.root, 64, {6, 2, 2}, 1);
    w.manifest = dp::partition_labeled(m, 0.25, 1);
    return w;
  }();
  return world;
}

ssl::TrainSetup desk_setup(std::uint64_t seed = 42) {
  ssl::TrainSetup setup;
  setup.student_config.embed_dim = 16;
  setup.student_config.patch_size = 16;
  setup.student_config.depth = 4;
  setup.student_config.heads = 4;
  setup.student_config.mlp_ratio = 2.0;
  setup.student_config.pyramid_taps = {0, 1, 2, 3};
  setup.student_config.num_classes = 4;
  setup.student_config.decoder_channels = 8;
  setup.crop_size = 64;
  setup.fusion = {1.0, 0.5};
  for (int i = 0; i < 2; ++i) {
    teachers::TeacherSpec t;
    t.kind = teachers::TeacherKind::kMock;
    t.embed_dim = 12;
    t.patch_size = 16;
    t.seed = 100 + static_cast<std::uint64_t>(i);
    setup.teacher_specs.push_back(t);
  }
  setup.ssl.tau = 0.95;
  setup.ssl.ema.momentum = 0.99;
  setup.optim.lr_encoder = 1e-4;
  setup.optim.lr_decoder = 1e-3;
  setup.batch_size = 3;
  setup.epochs = 5;
  setup.augment.weak.resize_min = 1.0;
  setup.augment.weak.resize_max = 1.25;
  setup.augment.weak.crop_size = 64;
  setup.seed = seed;
  setup.io.out_dir = fs::temp_directory_path() / "vfmseg_trainer_out";
  setup.io.checkpoint_every_epochs = 0;
  setup.io.validate_every_epochs = 0;
  return setup;
}

std::uint64_t params_checksum(const student::ParamStore& store) {
  std::vector<Tensor> all;
  for (const auto& [name, t] : store.all()) all.push_back(t);
  return teachers::checksum_tensors(all);
}

}  // namespace

TEST_CASE("first step: uniform logits mask every pseudo-label") {
  // Zero head -> constant logits -> max softmax = 1/C < 0.95. The step must
  // complete with zero coverage and zero unsupervised loss.
  auto setup = desk_setup();
  ssl::Trainer trainer(setup, desk_world().manifest, desk_world().root);
  const auto report = trainer.run_one_step();
  CHECK(report.pseudo_coverage == 0.0);
  CHECK(report.l_unsup == 0.0);
  CHECK(report.l_sup > 0.0);
  CHECK(report.l_distill_total > 0.0);
  CHECK(std::isfinite(report.total));
}

TEST_CASE("frozen teachers keep their checksums over training steps") {
  auto setup = desk_setup();
  ssl::Trainer trainer(setup, desk_world().manifest, desk_world().root);
  std::vector<std::uint64_t> before;
  for (const auto& [key, handle] : trainer.teachers()) {
    before.push_back(handle->param_checksum());
  }
  for (int i = 0; i < 5; ++i) trainer.run_one_step();
  std::size_t idx = 0;
  for (const auto& [key, handle] : trainer.teachers()) {
    REQUIRE(handle->param_checksum() == before[idx++]);
  }
}

TEST_CASE("ema teacher moves unless momentum is one") {
  auto setup = desk_setup();
  setup.ssl.ema.momentum = 1.0;
  ssl::Trainer frozen(setup, desk_world().manifest, desk_world().root);
  const auto ema_before = params_checksum(frozen.ema_model().params());
  const auto student_before = params_checksum(frozen.student_model().params());
  frozen.run_one_step();
  CHECK(params_checksum(frozen.ema_model().params()) == ema_before);
  CHECK(params_checksum(frozen.student_model().params()) != student_before);

  auto setup2 = desk_setup();
  setup2.ssl.ema.momentum = 0.9;
  ssl::Trainer moving(setup2, desk_world().manifest, desk_world().root);
  const auto ema0 = params_checksum(moving.ema_model().params());
  moving.run_one_step();
  CHECK(params_checksum(moving.ema_model().params()) != ema0);
}

TEST_CASE("lambda_u = lambda_d = 0 equals a purely supervised step") {
  auto setup = desk_setup();
  setup.ssl.loss_weights = {1.0, 0.0, 0.0};
  ssl::Trainer a(setup, desk_world().manifest, desk_world().root);
  ssl::Trainer b(setup, desk_world().manifest, desk_world().root);

  // a: full train_step with the degenerate weights.
  const auto report = a.train_step(a.make_labeled_batch(0),
                                   a.make_unlabeled_batch(0));
  CHECK(report.l_unsup == 0.0);
  CHECK(report.l_distill_total == 0.0);
  CHECK(report.l_distill_per_teacher.empty());

  // b: hand-rolled supervised step on the same labeled batch.
  const auto labeled = b.make_labeled_batch(0);
  ssl::AdamW opt(b.student_model().params(), setup.optim);
  opt.zero_grad();
  Tensor logits = b.student_model().predict(
      labeled.images, student::InferenceMode::kFused, 64, 64);
  Tensor l_sup = ssl::supervised_loss(logits, labeled.labels, 255);
  ops::scale(l_sup, 1.0).backward();
  opt.step();

  CHECK(params_checksum(a.student_model().params()) ==
        params_checksum(b.student_model().params()));
}

TEST_CASE("two seeded runs produce bit-identical loss report streams") {
  auto s1 = desk_setup(777);
  auto s2 = desk_setup(777);
  ssl::Trainer a(s1, desk_world().manifest, desk_world().root);
  ssl::Trainer b(s2, desk_world().manifest, desk_world().root);
  for (int i = 0; i < 10; ++i) {
    const auto ra = a.run_one_step();
    const auto rb = b.run_one_step();
    CAPTURE(i);
    REQUIRE(ra.bitwise_equal(rb));
  }
  // A different seed diverges.
  auto s3 = desk_setup(778);
  ssl::Trainer c(s3, desk_world().manifest, desk_world().root);
  bool all_same = true;
  ssl::Trainer d(desk_setup(777), desk_world().manifest, desk_world().root);
  for (int i = 0; i < 3; ++i) {
    all_same = all_same && c.run_one_step().bitwise_equal(d.run_one_step());
  }
  CHECK_FALSE(all_same);
}

TEST_CASE("resume from a checkpoint reproduces the uninterrupted stream") {
  const auto dir = fs::temp_directory_path() / "vfmseg_resume";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto setup = desk_setup(99);

  // Uninterrupted reference run: 8 steps.
  ssl::Trainer ref(setup, desk_world().manifest, desk_world().root);
  std::vector<ssl::LossReport> want;
  for (int i = 0; i < 8; ++i) want.push_back(ref.run_one_step());

  // Interrupted run: 5 steps, checkpoint, fresh trainer, 3 more.
  ssl::Trainer first(setup, desk_world().manifest, desk_world().root);
  for (int i = 0; i < 5; ++i) first.run_one_step();
  const auto ckpt = dir / "mid.ckpt";
  first.save_checkpoint(ckpt);

  ssl::Trainer resumed(setup, desk_world().manifest, desk_world().root);
  resumed.load_checkpoint(ckpt);
  CHECK(resumed.step() == 5);
  for (int i = 5; i < 8; ++i) {
    const auto r = resumed.run_one_step();
    CAPTURE(i);
    REQUIRE(r.bitwise_equal(want[static_cast<std::size_t>(i)]));
  }
  fs::remove_all(dir);
}

TEST_CASE("checkpoints restore an equivalent evaluator") {
  const auto dir = fs::temp_directory_path() / "vfmseg_ckpt_eval";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto setup = desk_setup(55);
  ssl::Trainer trainer(setup, desk_world().manifest, desk_world().root);
  for (int i = 0; i < 3; ++i) trainer.run_one_step();
  const auto path = dir / "ck.ckpt";
  trainer.save_checkpoint(path);

  const auto archive = vfmseg::Archive::load(path);
  auto restored = ssl::model_from_checkpoint(archive, "student.");
  CHECK(params_checksum(restored.params()) ==
        params_checksum(trainer.student_model().params()));
  auto ema_restored = ssl::model_from_checkpoint(archive, "ema.");
  CHECK(params_checksum(ema_restored.params()) ==
        params_checksum(trainer.ema_model().params()));
  // Evaluating twice gives identical reports.
  const auto r1 = trainer.validate(true);
  const auto r2 = trainer.validate(true);
  CHECK(r1.miou == r2.miou);
  CHECK(r1.kappa == r2.kappa);
  fs::remove_all(dir);
}

TEST_CASE("ablation switches produce structurally distinct reports") {
  // teacher x / fuse x: no distillation terms at all.
  auto plain = desk_setup(31);
  plain.ssl.loss_weights = {1.0 / 3, 1.0 / 3, 0.0};
  plain.fusion = {1.0, 0.0};
  ssl::Trainer t_plain(plain, desk_world().manifest, desk_world().root);
  t_plain.set_tracing(true);
  const auto r_plain = t_plain.run_one_step();
  CHECK(r_plain.l_distill_per_teacher.empty());
  CHECK(r_plain.l_distill_total == 0.0);

  // teacher ok / fuse x: distillation present, decoder input equals f_S.
  auto no_fuse = desk_setup(31);
  no_fuse.fusion = {1.0, 0.0};
  ssl::Trainer t_nofuse(no_fuse, desk_world().manifest, desk_world().root);
  t_nofuse.set_tracing(true);
  const auto r_nofuse = t_nofuse.run_one_step();
  CHECK(r_nofuse.l_distill_per_teacher.size() == 2);
  CHECK(r_nofuse.l_distill_total > 0.0);
  {
    const auto& trace = t_nofuse.last_trace();
    REQUIRE(trace.valid);
    REQUIRE(trace.forward.fused.defined());
    // omega_d = 0: the deepest decoder input carries exactly f_S.
    REQUIRE(trace.forward.fused.numel() == trace.f_s.numel());
    for (std::int64_t i = 0; i < trace.forward.fused.numel(); ++i) {
      REQUIRE(trace.forward.decoder_inputs[3].data()[i] ==
              doctest::Approx(trace.f_s.data()[i]).epsilon(1e-12));
    }
  }

  // teacher ok / fuse ok: distillation present and fused input differs.
  auto full = desk_setup(31);
  ssl::Trainer t_full(full, desk_world().manifest, desk_world().root);
  t_full.set_tracing(true);
  const auto r_full = t_full.run_one_step();
  CHECK(r_full.l_distill_per_teacher.size() == 2);
  {
    const auto& trace = t_full.last_trace();
    REQUIRE(trace.valid);
    double max_diff = 0.0;
    for (std::int64_t i = 0; i < trace.forward.fused.numel(); ++i) {
      max_diff = std::max(max_diff, std::abs(trace.forward.decoder_inputs[3].data()[i] -
                                             trace.f_s.data()[i]));
    }
    CHECK(max_diff > 0.0);
    // And the decoder really consumed the fused tensor.
    CHECK(trace.forward.decoder_inputs[3].impl() == trace.forward.fused.impl());
  }
}

TEST_CASE("run() writes one loss record per step plus checkpoints") {
  auto setup = desk_setup(21);
  setup.epochs = 2;  // 2 steps/epoch at batch 3 with 6 labeled tiles
  setup.io.out_dir = fs::temp_directory_path() / "vfmseg_run_out";
  setup.io.checkpoint_every_epochs = 1;
  setup.io.validate_every_epochs = 1;
  fs::remove_all(setup.io.out_dir);
  ssl::Trainer trainer(setup, desk_world().manifest, desk_world().root);
  const auto summary = trainer.run();
  CHECK(summary.steps == trainer.steps_per_epoch() * 2);
  CHECK(fs::exists(summary.last_checkpoint));
  CHECK(fs::exists(summary.best_checkpoint));
  CHECK(summary.final_val.has_value());

  std::ifstream log(setup.io.out_dir / "train_log.jsonl");
  int step_lines = 0, val_lines = 0;
  std::string line;
  while (std::getline(log, line)) {
    if (line.find("\"type\":\"step\"") != std::string::npos) ++step_lines;
    if (line.find("\"type\":\"val\"") != std::string::npos) ++val_lines;
  }
  CHECK(step_lines == summary.steps);
  CHECK(val_lines >= 2);
  fs::remove_all(setup.io.out_dir);
}

TEST_CASE("non-finite losses abort with a numeric fault") {
  auto setup = desk_setup(3);
  ssl::Trainer trainer(setup, desk_world().manifest, desk_world().root);
  // Poison a parameter to force a NaN forward.
  Tensor w = trainer.student_model().params().at("encoder.patch_embed.weight");
  w.data()[0] = std::nan("");
  CHECK_THROWS_AS(trainer.run_one_step(), vfmseg::NumericError);
}

TEST_CASE("trainer rejects manifests without labeled tiles") {
  auto setup = desk_setup(3);
  auto manifest = desk_world().manifest;
  for (auto& t : manifest.tiles) t.labeled = false;
  CHECK_THROWS_AS(ssl::Trainer(setup, manifest, desk_world().root),
                  vfmseg::ConfigError);
}

TEST_CASE("pseudo-labeling path is gradient-isolated from the EMA teacher") {
  auto setup = desk_setup(88);
  ssl::Trainer trainer(setup, desk_world().manifest, desk_world().root);
  trainer.run_one_step();
  for (const auto& [name, t] : trainer.ema_model().params().all()) {
    CAPTURE(name);
    REQUIRE_FALSE(t.has_grad());
    REQUIRE_FALSE(t.requires_grad());
  }
}
