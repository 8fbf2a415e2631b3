// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point. Subcommands:
//   synth   generate the bundled synthetic dataset
//   split   build deterministic split/ratio manifests
//   train   run semi-supervised training
//   eval    score a checkpoint over a manifest
//   report  render metrics reports as a table
//   fetch   download + checksum-verify teacher weights

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vfmseg/cli/commands.hpp"
#include "vfmseg/core/error.hpp"
#include "vfmseg/kernels/kernels.hpp"
#include "vfmseg/teachers/teachers.hpp"

namespace {

using vfmseg::cli::ExperimentConfig;

struct CommonOverrides {
  std::string config_path;
  double ratio = -1.0;
  double tau = -1.0;
  double lambda_l = -1.0, lambda_u = -1.0, lambda_d = -1.0;
  double omega_s = -1.0, omega_d = -1.0;
  std::string teachers;
  std::string mode;
  std::int64_t seed = -1;
  std::string out;
};

void add_common_flags(CLI::App* cmd, CommonOverrides* o) {
  cmd->add_option("--config", o->config_path, "experiment config (JSON)");
  cmd->add_option("--ratio", o->ratio, "label ratio in (0,1]");
  cmd->add_option("--tau", o->tau, "pseudo-label confidence threshold");
  cmd->add_option("--lambda-l", o->lambda_l, "supervised loss weight");
  cmd->add_option("--lambda-u", o->lambda_u, "unsupervised loss weight");
  cmd->add_option("--lambda-d", o->lambda_d, "distillation loss weight");
  cmd->add_option("--omega-s", o->omega_s, "fusion weight for f_S");
  cmd->add_option("--omega-d", o->omega_d, "fusion weight for teachers");
  cmd->add_option("--teachers", o->teachers,
                  "comma list of teacher kinds (mock,dinov2,clip,sam)");
  cmd->add_option("--mode", o->mode, "inference mode: fused|plain");
  cmd->add_option("--seed", o->seed, "training seed");
  cmd->add_option("--out", o->out, "output directory");
}

std::vector<vfmseg::teachers::TeacherSpec> teachers_from_flag(
    const std::string& flag, int default_patch) {
  std::vector<vfmseg::teachers::TeacherSpec> specs;
  std::size_t start = 0;
  std::uint64_t index = 0;
  while (start <= flag.size()) {
    const std::size_t comma = flag.find(',', start);
    const std::string kind_name =
        flag.substr(start, comma == std::string::npos ? std::string::npos
                                                      : comma - start);
    if (!kind_name.empty()) {
      vfmseg::teachers::TeacherSpec spec;
      spec.kind = vfmseg::teachers::kind_from_name(kind_name);
      spec.patch_size = default_patch;
      spec.seed = 1000 + index;
      if (spec.kind == vfmseg::teachers::TeacherKind::kMock) {
        spec.embed_dim = 48;
      }
      specs.push_back(std::move(spec));
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
    ++index;
  }
  return specs;
}

ExperimentConfig load_config(const CommonOverrides& o) {
  ExperimentConfig config = o.config_path.empty()
                                ? ExperimentConfig{}
                                : ExperimentConfig::from_file(o.config_path);
  if (o.ratio > 0.0) config.label_ratio = o.ratio;
  if (o.tau > 0.0) config.tau = o.tau;
  if (o.lambda_l >= 0.0) config.loss_weights.lambda_l = o.lambda_l;
  if (o.lambda_u >= 0.0) config.loss_weights.lambda_u = o.lambda_u;
  if (o.lambda_d >= 0.0) config.loss_weights.lambda_d = o.lambda_d;
  if (o.omega_s >= 0.0) config.fusion.omega_s = o.omega_s;
  if (o.omega_d >= 0.0) config.fusion.omega_d = o.omega_d;
  if (!o.teachers.empty()) {
    config.teacher_specs =
        teachers_from_flag(o.teachers, config.student.patch_size);
  }
  if (!o.mode.empty()) config.inference_mode = o.mode;
  if (o.seed >= 0) config.train_seed = static_cast<std::uint64_t>(o.seed);
  if (!o.out.empty()) config.out_dir = o.out;
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"semi-supervised segmentation with frozen foundation-model "
               "teachers"};
  app.require_subcommand(1);

  bool show_backend = false;
  app.add_flag("--kernel-backend", show_backend,
               "print the selected compute backend and exit");

  CommonOverrides split_o, train_o;
  auto* split_cmd = app.add_subcommand("split", "build split manifests");
  add_common_flags(split_cmd, &split_o);

  auto* train_cmd = app.add_subcommand("train", "run training");
  add_common_flags(train_cmd, &train_o);
  std::string resume;
  train_cmd->add_option("--resume", resume, "checkpoint to resume from");

  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint");
  std::string eval_ckpt, eval_manifest, eval_data, eval_source = "ema";
  std::string eval_mode, eval_out = "eval";
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--manifest", eval_manifest)->required();
  eval_cmd->add_option("--data", eval_data, "dataset root")->required();
  eval_cmd->add_option("--model-source", eval_source, "student|ema");
  eval_cmd->add_option("--mode", eval_mode, "fused|plain");
  eval_cmd->add_option("--out", eval_out);

  auto* report_cmd = app.add_subcommand("report", "render metrics tables");
  std::vector<std::string> report_files;
  std::string report_md, report_csv;
  report_cmd->add_option("files", report_files, "metrics.json files")
      ->required();
  report_cmd->add_option("--out", report_md, "markdown output path");
  report_cmd->add_option("--csv", report_csv, "csv output path");

  auto* synth_cmd = app.add_subcommand("synth", "generate synthetic dataset");
  std::string synth_out = "data/synth";
  int synth_images = 3334;
  int synth_size = 64;
  std::uint64_t synth_seed = 7;
  synth_cmd->add_option("--out", synth_out);
  synth_cmd->add_option("--images", synth_images);
  synth_cmd->add_option("--size", synth_size);
  synth_cmd->add_option("--seed", synth_seed);

  auto* fetch_cmd = app.add_subcommand("fetch", "download teacher weights");
  std::string fetch_name, fetch_url, fetch_sha, fetch_registry, fetch_cache;
  fetch_cmd->add_option("--name", fetch_name, "registry entry name");
  fetch_cmd->add_option("--registry", fetch_registry, "registry JSON path");
  fetch_cmd->add_option("--url", fetch_url);
  fetch_cmd->add_option("--sha256", fetch_sha);
  fetch_cmd->add_option("--cache", fetch_cache,
                        "cache dir (default $VFMSEG_WEIGHTS_CACHE)");

  CLI11_PARSE(app, argc, argv);

  if (show_backend) {
    std::cout << vfmseg::kernels::active().name << "\n";
    return vfmseg::kExitOk;
  }

  try {
    if (split_cmd->parsed()) {
      return vfmseg::cli::cmd_split(load_config(split_o));
    }
    if (train_cmd->parsed()) {
      return vfmseg::cli::cmd_train(load_config(train_o), resume);
    }
    if (eval_cmd->parsed()) {
      return vfmseg::cli::cmd_eval(eval_ckpt, eval_manifest, eval_data,
                                   eval_source, eval_mode, eval_out);
    }
    if (report_cmd->parsed()) {
      std::vector<std::filesystem::path> files(report_files.begin(),
                                               report_files.end());
      return vfmseg::cli::cmd_report(files, report_md, report_csv);
    }
    if (synth_cmd->parsed()) {
      return vfmseg::cli::cmd_synth(synth_out, synth_images, synth_size,
                                    synth_seed);
    }
    if (fetch_cmd->parsed()) {
      return vfmseg::cli::cmd_fetch(fetch_name, fetch_url, fetch_sha,
                                    fetch_registry, fetch_cache);
    }
  } catch (const vfmseg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return vfmseg::kExitConfig;
  } catch (const vfmseg::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return vfmseg::kExitData;
  } catch (const vfmseg::NumericError& e) {
    std::cerr << "numeric fault: " << e.what() << "\n";
    return vfmseg::kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return vfmseg::kExitInternal;
  }
  return vfmseg::kExitOk;
}
