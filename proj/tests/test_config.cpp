// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "vfmseg/cli/commands.hpp"
#include "vfmseg/cli/config.hpp"
#include "vfmseg/core/error.hpp"
#include "vfmseg/datapipe/synth.hpp"

using vfmseg::cli::ExperimentConfig;
namespace fs = std::filesystem;

namespace {

fs::path binary_path() {
  return fs::path(VFMSEG_BIN_DIR) / "tools" / "vfmseg";
}

int run_cli(const std::string& args) {
  const std::string cmd = binary_path().string() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("config round-trips through serialization") {
  ExperimentConfig c;
  c.dataset_root = "/data/x";
  c.label_ratio = 0.05;
  c.student.embed_dim = 48;
  c.student.heads = 6;
  c.crop_size = 64;
  c.student.patch_size = 16;
  c.tau = 0.9;
  vfmseg::teachers::TeacherSpec t;
  t.kind = vfmseg::teachers::TeacherKind::kMock;
  t.embed_dim = 32;
  t.seed = 5;
  c.teacher_specs.push_back(t);
  const auto j = c.to_json();
  const auto back = ExperimentConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.label_ratio == 0.05);
  CHECK(back.student.embed_dim == 48);
  CHECK(back.teacher_specs.size() == 1);
  CHECK(back.teacher_specs[0].embed_dim == 32);
}

TEST_CASE("unknown keys are rejected everywhere") {
  nlohmann::json j;
  j["optim"]["learning_rate"] = 1e-3;  // typo for lr_decoder
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), vfmseg::ConfigError);
  nlohmann::json j2;
  j2["modle"] = nlohmann::json::object();
  CHECK_THROWS_AS(ExperimentConfig::from_json(j2), vfmseg::ConfigError);
  nlohmann::json j3;
  j3["ssl"]["lambda_x"] = 0.5;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j3), vfmseg::ConfigError);
}

TEST_CASE("validation catches contract violations at load time") {
  nlohmann::json j;
  j["ssl"]["tau"] = 1.5;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), vfmseg::ConfigError);
  nlohmann::json j2;
  j2["split"]["label_ratio"] = 0.0;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j2), vfmseg::ConfigError);
  nlohmann::json j3;
  j3["model"]["patch_size"] = 48;  // does not divide crop 512
  CHECK_THROWS_AS(ExperimentConfig::from_json(j3), vfmseg::ConfigError);
}

TEST_CASE("paper defaults are the config defaults") {
  const ExperimentConfig c;
  CHECK(c.tau == 0.95);
  CHECK(c.loss_weights.lambda_l == doctest::Approx(1.0 / 3));
  CHECK(c.loss_weights.lambda_u == doctest::Approx(1.0 / 3));
  CHECK(c.loss_weights.lambda_d == doctest::Approx(1.0 / 3));
  CHECK(c.optim.lr_encoder == 5e-6);
  CHECK(c.optim.lr_decoder == 2e-4);
  CHECK(c.optim.beta1 == 0.9);
  CHECK(c.optim.beta2 == 0.999);
  CHECK(c.optim.weight_decay == 0.01);
  CHECK(c.batch_size == 8);
  CHECK(c.epochs == 60);
  CHECK(c.ema_momentum == 0.999);
  CHECK(c.tile_size == 512);
  CHECK(c.ignore_value == 255);
  CHECK(c.split_ratios == std::array<int, 3>{6, 2, 2});
  CHECK(c.fusion.omega_s == 1.0);
  CHECK(c.fusion.omega_d == 0.5);
  CHECK(c.augment.weak.resize_min == 0.5);
  CHECK(c.augment.weak.resize_max == 2.0);
  CHECK(c.augment.weak.hflip_prob == 0.5);
  CHECK(c.augment.strong.brightness == 0.5);
  CHECK(c.augment.strong.hue == 0.25);
  CHECK(c.augment.strong.jitter_prob == 0.8);
  CHECK(c.inference_mode == "fused");
}

TEST_CASE("ratio tags") {
  CHECK(vfmseg::cli::ratio_tag(0.01) == "1");
  CHECK(vfmseg::cli::ratio_tag(0.05) == "5");
  CHECK(vfmseg::cli::ratio_tag(0.1) == "10");
  CHECK(vfmseg::cli::ratio_tag(0.005) == "0.5");
}

TEST_CASE("cli exit-code discipline") {
  REQUIRE(fs::exists(binary_path()));
  // 0: success (synth into a temp dir).
  const auto dir = fs::temp_directory_path() / "vfmseg_cli_synth";
  fs::remove_all(dir);
  CHECK(run_cli("synth --out " + dir.string() + " --images 4 --size 32") == 0);
  // config error -> 2 (tau out of range).
  CHECK(run_cli("train --tau 1.7") == 2);
  // data error -> 3 (missing dataset for split).
  const auto cfg_dir = fs::temp_directory_path() / "vfmseg_cli_cfg";
  fs::create_directories(cfg_dir);
  {
    ExperimentConfig c;
    c.dataset_root = (cfg_dir / "nowhere").string();
    c.tile_size = 32;
    c.crop_size = 32;
    c.student.patch_size = 16;
    c.out_dir = (cfg_dir / "out").string();
    c.save(cfg_dir / "cfg.json");
  }
  CHECK(run_cli("split --config " + (cfg_dir / "cfg.json").string()) == 3);
  fs::remove_all(dir);
  fs::remove_all(cfg_dir);
}

TEST_CASE("cmd_split writes manifests and detects up-to-date reruns") {
  const auto root = fs::temp_directory_path() / "vfmseg_split_cli";
  fs::remove_all(root);
  vfmseg::datapipe::SynthSpec spec;
  spec.num_images = 20;
  spec.image_size = 32;
  spec.seed = 2;
  vfmseg::datapipe::generate_synthetic_dataset(root / "data", spec);

  ExperimentConfig c;
  c.dataset_root = (root / "data").string();
  c.tile_size = 32;
  c.crop_size = 32;
  c.student.patch_size = 16;
  c.student.num_classes = 4;
  c.label_ratio = 0.25;
  c.out_dir = (root / "out").string();
  CHECK(vfmseg::cli::cmd_split(c) == 0);
  CHECK(fs::exists(c.train_manifest_path()));
  CHECK(fs::exists(c.val_manifest_path()));
  CHECK(fs::exists(c.test_manifest_path()));
  const auto t1 = fs::last_write_time(c.train_manifest_path());
  // Rerun: identical bytes, nothing rewritten.
  CHECK(vfmseg::cli::cmd_split(c) == 0);
  CHECK(fs::last_write_time(c.train_manifest_path()) == t1);
  // A different ratio produces a distinct file.
  c.label_ratio = 0.5;
  CHECK(vfmseg::cli::cmd_split(c) == 0);
  CHECK(c.train_manifest_path() != ExperimentConfig{}.train_manifest_path());
  CHECK(fs::exists(c.train_manifest_path()));
  const auto train =
      vfmseg::datapipe::DatasetManifest::load(c.train_manifest_path());
  CHECK(train.labeled_train_count() == 6);  // round(0.5 * 12)
  fs::remove_all(root);
}

TEST_CASE("cmd_report renders bold-best markdown and checks consistency") {
  const auto dir = fs::temp_directory_path() / "vfmseg_report";
  fs::remove_all(dir);
  fs::create_directories(dir);
  // Two hand-written reports with a known best column.
  auto write_report = [&](const std::string& name, double i0, double i1) {
    vfmseg::metrics::MetricsReport r;
    r.class_names = {"a", "b"};
    r.iou_per_class = {i0, i1};
    r.f1_per_class = {2 * i0 / (1 + i0), 2 * i1 / (1 + i1)};
    r.class_valid = {true, true};
    r.miou = (i0 + i1) / 2;
    r.mf1 = (r.f1_per_class[0] + r.f1_per_class[1]) / 2;
    r.oa = 0.9;
    r.kappa = 0.5;
    std::ofstream os(dir / name);
    os << r.to_json();
  };
  write_report("run_a.json", 0.50, 0.70);
  write_report("run_b.json", 0.80, 0.60);
  const auto md_path = dir / "table.md";
  const auto csv_path = dir / "table.csv";
  CHECK(vfmseg::cli::cmd_report({dir / "run_a.json", dir / "run_b.json"},
                                md_path, csv_path) == 0);
  std::ifstream md(md_path);
  std::string text((std::istreambuf_iterator<char>(md)), {});
  CHECK(text.find("**80.00**") != std::string::npos);  // best class-a IoU
  CHECK(text.find("**70.00**") != std::string::npos);  // best class-b IoU
  std::ifstream csv(csv_path);
  std::string csv_text((std::istreambuf_iterator<char>(csv)), {});
  CHECK(csv_text.find("model,iou_a,iou_b,miou,mf1,kappa") == 0);
  fs::remove_all(dir);
}

TEST_CASE("train + eval + resume round-trip through the commands") {
  const auto root = fs::temp_directory_path() / "vfmseg_train_cli";
  fs::remove_all(root);
  vfmseg::datapipe::SynthSpec spec;
  spec.num_images = 30;
  spec.image_size = 64;
  spec.seed = 13;
  vfmseg::datapipe::generate_synthetic_dataset(root / "data", spec);

  ExperimentConfig c;
  c.dataset_root = (root / "data").string();
  c.tile_size = 64;
  c.crop_size = 64;
  c.student.embed_dim = 16;
  c.student.patch_size = 16;
  c.student.depth = 4;
  c.student.heads = 2;
  c.student.mlp_ratio = 2.0;
  c.student.num_classes = 4;
  c.student.decoder_channels = 8;
  c.label_ratio = 0.5;
  c.batch_size = 3;
  c.epochs = 2;
  c.optim.lr_encoder = 1e-4;
  c.optim.lr_decoder = 1e-3;
  c.augment.weak.resize_min = 1.0;
  c.augment.weak.resize_max = 1.25;
  vfmseg::teachers::TeacherSpec t;
  t.kind = vfmseg::teachers::TeacherKind::kMock;
  t.embed_dim = 12;
  t.patch_size = 16;
  t.seed = 3;
  c.teacher_specs.push_back(t);
  c.out_dir = (root / "out").string();
  c.checkpoint_every_epochs = 1;
  c.validate_every_epochs = 1;
  c.validate();

  REQUIRE(vfmseg::cli::cmd_split(c) == 0);
  REQUIRE(vfmseg::cli::cmd_train(c, {}) == 0);
  const auto ckpt = fs::path(c.out_dir) / "last.ckpt";
  REQUIRE(fs::exists(ckpt));
  REQUIRE(fs::exists(fs::path(c.out_dir) / "summary.json"));

  // Evaluate the checkpoint twice; reports must be identical.
  const auto eval_dir = root / "eval";
  REQUIRE(vfmseg::cli::cmd_eval(ckpt, c.val_manifest_path(), c.dataset_root,
                                "ema", "", eval_dir) == 0);
  const auto report1 =
      vfmseg::metrics::MetricsReport::from_json_file(eval_dir / "metrics.json");
  REQUIRE(vfmseg::cli::cmd_eval(ckpt, c.val_manifest_path(), c.dataset_root,
                                "student", "plain", root / "eval2") == 0);
  REQUIRE(vfmseg::cli::cmd_eval(ckpt, c.val_manifest_path(), c.dataset_root,
                                "ema", "", root / "eval3") == 0);
  const auto report3 = vfmseg::metrics::MetricsReport::from_json_file(
      root / "eval3" / "metrics.json");
  CHECK(report1.miou == report3.miou);
  CHECK(report1.kappa == report3.kappa);

  // Class-count mismatch between checkpoint and manifest is a config error.
  auto wrong = vfmseg::datapipe::DatasetManifest::load(c.val_manifest_path());
  wrong.class_names.push_back("extra");
  const auto wrong_path = root / "wrong.jsonl";
  wrong.save(wrong_path);
  CHECK_THROWS_AS(vfmseg::cli::cmd_eval(ckpt, wrong_path, c.dataset_root,
                                        "ema", "", root / "eval4"),
                  vfmseg::ConfigError);

  // Resume continues from the stored step.
  REQUIRE(vfmseg::cli::cmd_train(c, ckpt) == 0);
  fs::remove_all(root);
}

TEST_CASE("published-style values render as expected") {
  vfmseg::metrics::MetricsReport r;
  r.class_names = {"building", "lowveg", "tree", "car", "background"};
  r.iou_per_class = {0.9159, 0.7521, 0.7493, 0.8531, 0.5791};
  r.f1_per_class = {0.95, 0.85, 0.85, 0.92, 0.73};
  r.class_valid = std::vector<bool>(5, true);
  r.miou = 0.7699;
  r.mf1 = 0.8322;
  r.kappa = 0.8044;
  const auto row = r.to_csv_row();
  CHECK(row.ends_with("76.99,83.22,0.8044"));
}
