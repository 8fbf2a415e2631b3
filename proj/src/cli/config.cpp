// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/cli/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "vfmseg/core/error.hpp"

namespace vfmseg::cli {
namespace {

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                const std::string& context) {
  if (!j.is_object()) {
    throw ConfigError("config section '" + context + "' must be an object");
  }
  for (const auto& [key, value] : j.items()) {
    if (allowed.count(key) == 0) {
      throw ConfigError("unknown key '" + key + "' in config section '" +
                        context + "'");
    }
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::string ratio_tag(double ratio) {
  std::ostringstream os;
  os << ratio * 100.0;
  return os.str();
}

ExperimentConfig ExperimentConfig::from_file(
    const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " +
                      e.what());
  }
  return from_json(j);
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    check_keys(j,
               {"dataset", "split", "model", "teachers", "ssl", "optim",
                "augment", "io", "seed"},
               "<root>");
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      check_keys(d, {"root", "name", "tile_size", "ignore_value"}, "dataset");
      read(d, "root", c.dataset_root);
      read(d, "name", c.dataset_name);
      read(d, "tile_size", c.tile_size);
      read(d, "ignore_value", c.ignore_value);
    }
    if (j.contains("split")) {
      const auto& s = j.at("split");
      check_keys(s, {"ratios", "label_ratio", "seed"}, "split");
      if (s.contains("ratios")) {
        const auto r = s.at("ratios").get<std::vector<int>>();
        if (r.size() != 3) throw ConfigError("split.ratios needs 3 entries");
        std::copy(r.begin(), r.end(), c.split_ratios.begin());
      }
      read(s, "label_ratio", c.label_ratio);
      read(s, "seed", c.split_seed);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      check_keys(m,
                 {"embed_dim", "patch_size", "depth", "heads", "mlp_ratio",
                  "pyramid_taps", "num_classes", "decoder_channels",
                  "omega_s", "omega_d", "inference_mode", "crop_size"},
                 "model");
      read(m, "embed_dim", c.student.embed_dim);
      read(m, "patch_size", c.student.patch_size);
      read(m, "depth", c.student.depth);
      read(m, "heads", c.student.heads);
      read(m, "mlp_ratio", c.student.mlp_ratio);
      if (m.contains("pyramid_taps")) {
        const auto taps = m.at("pyramid_taps").get<std::vector<int>>();
        if (taps.size() != 4) {
          throw ConfigError("model.pyramid_taps needs 4 entries");
        }
        std::copy(taps.begin(), taps.end(), c.student.pyramid_taps.begin());
      }
      read(m, "num_classes", c.student.num_classes);
      read(m, "decoder_channels", c.student.decoder_channels);
      read(m, "omega_s", c.fusion.omega_s);
      read(m, "omega_d", c.fusion.omega_d);
      read(m, "inference_mode", c.inference_mode);
      read(m, "crop_size", c.crop_size);
    }
    if (j.contains("teachers")) {
      for (const auto& t : j.at("teachers")) {
        check_keys(t,
                   {"kind", "embed_dim", "patch_size", "weights_ref", "seed",
                    "variant"},
                   "teachers[]");
        teachers::TeacherSpec spec;
        spec.kind = teachers::kind_from_name(t.at("kind").get<std::string>());
        read(t, "embed_dim", spec.embed_dim);
        read(t, "patch_size", spec.patch_size);
        read(t, "weights_ref", spec.weights_ref);
        read(t, "seed", spec.seed);
        read(t, "variant", spec.variant);
        c.teacher_specs.push_back(std::move(spec));
      }
    }
    if (j.contains("ssl")) {
      const auto& s = j.at("ssl");
      check_keys(s,
                 {"lambda_l", "lambda_u", "lambda_d", "ema_momentum", "tau",
                  "distill_labeled"},
                 "ssl");
      read(s, "lambda_l", c.loss_weights.lambda_l);
      read(s, "lambda_u", c.loss_weights.lambda_u);
      read(s, "lambda_d", c.loss_weights.lambda_d);
      read(s, "ema_momentum", c.ema_momentum);
      read(s, "tau", c.tau);
      read(s, "distill_labeled", c.distill_labeled);
    }
    if (j.contains("optim")) {
      const auto& o = j.at("optim");
      check_keys(o,
                 {"lr_encoder", "lr_decoder", "betas", "weight_decay",
                  "batch_size", "epochs", "max_steps"},
                 "optim");
      read(o, "lr_encoder", c.optim.lr_encoder);
      read(o, "lr_decoder", c.optim.lr_decoder);
      if (o.contains("betas")) {
        const auto betas = o.at("betas").get<std::vector<double>>();
        if (betas.size() != 2) throw ConfigError("optim.betas needs 2 entries");
        c.optim.beta1 = betas[0];
        c.optim.beta2 = betas[1];
      }
      read(o, "weight_decay", c.optim.weight_decay);
      read(o, "batch_size", c.batch_size);
      read(o, "epochs", c.epochs);
      read(o, "max_steps", c.max_steps);
    }
    if (j.contains("augment")) {
      const auto& a = j.at("augment");
      check_keys(a, {"weak", "strong"}, "augment");
      if (a.contains("weak")) {
        const auto& w = a.at("weak");
        check_keys(w, {"resize_min", "resize_max", "hflip_prob"},
                   "augment.weak");
        read(w, "resize_min", c.augment.weak.resize_min);
        read(w, "resize_max", c.augment.weak.resize_max);
        read(w, "hflip_prob", c.augment.weak.hflip_prob);
      }
      if (a.contains("strong")) {
        const auto& s = a.at("strong");
        check_keys(s,
                   {"jitter_prob", "brightness", "contrast", "saturation",
                    "hue", "cutmix_prob", "cutmix_area_min",
                    "cutmix_area_max", "cutmix_aspect_min",
                    "cutmix_aspect_max"},
                   "augment.strong");
        read(s, "jitter_prob", c.augment.strong.jitter_prob);
        read(s, "brightness", c.augment.strong.brightness);
        read(s, "contrast", c.augment.strong.contrast);
        read(s, "saturation", c.augment.strong.saturation);
        read(s, "hue", c.augment.strong.hue);
        read(s, "cutmix_prob", c.augment.strong.cutmix_prob);
        read(s, "cutmix_area_min", c.augment.strong.cutmix_area_min);
        read(s, "cutmix_area_max", c.augment.strong.cutmix_area_max);
        read(s, "cutmix_aspect_min", c.augment.strong.cutmix_aspect_min);
        read(s, "cutmix_aspect_max", c.augment.strong.cutmix_aspect_max);
      }
    }
    if (j.contains("io")) {
      const auto& io = j.at("io");
      check_keys(io,
                 {"out_dir", "checkpoint_every_epochs",
                  "validate_every_epochs"},
                 "io");
      read(io, "out_dir", c.out_dir);
      read(io, "checkpoint_every_epochs", c.checkpoint_every_epochs);
      read(io, "validate_every_epochs", c.validate_every_epochs);
    }
    read(j, "seed", c.train_seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["dataset"] = {{"root", dataset_root},
                  {"name", dataset_name},
                  {"tile_size", tile_size},
                  {"ignore_value", ignore_value}};
  j["split"] = {{"ratios", split_ratios},
                {"label_ratio", label_ratio},
                {"seed", split_seed}};
  j["model"] = {{"embed_dim", student.embed_dim},
                {"patch_size", student.patch_size},
                {"depth", student.depth},
                {"heads", student.heads},
                {"mlp_ratio", student.mlp_ratio},
                {"pyramid_taps", student.pyramid_taps},
                {"num_classes", student.num_classes},
                {"decoder_channels", student.decoder_channels},
                {"omega_s", fusion.omega_s},
                {"omega_d", fusion.omega_d},
                {"inference_mode", inference_mode},
                {"crop_size", crop_size}};
  j["teachers"] = nlohmann::ordered_json::array();
  for (const auto& t : teacher_specs) {
    nlohmann::ordered_json tj;
    tj["kind"] = teachers::kind_name(t.kind);
    tj["embed_dim"] = t.embed_dim;
    tj["patch_size"] = t.patch_size;
    tj["weights_ref"] = t.weights_ref;
    tj["seed"] = t.seed;
    tj["variant"] = t.variant;
    j["teachers"].push_back(std::move(tj));
  }
  j["ssl"] = {{"lambda_l", loss_weights.lambda_l},
              {"lambda_u", loss_weights.lambda_u},
              {"lambda_d", loss_weights.lambda_d},
              {"ema_momentum", ema_momentum},
              {"tau", tau},
              {"distill_labeled", distill_labeled}};
  j["optim"] = {{"lr_encoder", optim.lr_encoder},
                {"lr_decoder", optim.lr_decoder},
                {"betas", std::array<double, 2>{optim.beta1, optim.beta2}},
                {"weight_decay", optim.weight_decay},
                {"batch_size", batch_size},
                {"epochs", epochs},
                {"max_steps", max_steps}};
  j["augment"] = {
      {"weak",
       {{"resize_min", augment.weak.resize_min},
        {"resize_max", augment.weak.resize_max},
        {"hflip_prob", augment.weak.hflip_prob}}},
      {"strong",
       {{"jitter_prob", augment.strong.jitter_prob},
        {"brightness", augment.strong.brightness},
        {"contrast", augment.strong.contrast},
        {"saturation", augment.strong.saturation},
        {"hue", augment.strong.hue},
        {"cutmix_prob", augment.strong.cutmix_prob},
        {"cutmix_area_min", augment.strong.cutmix_area_min},
        {"cutmix_area_max", augment.strong.cutmix_area_max},
        {"cutmix_aspect_min", augment.strong.cutmix_aspect_min},
        {"cutmix_aspect_max", augment.strong.cutmix_aspect_max}}}};
  j["io"] = {{"out_dir", out_dir},
             {"checkpoint_every_epochs", checkpoint_every_epochs},
             {"validate_every_epochs", validate_every_epochs}};
  j["seed"] = train_seed;
  return j;
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write config " + path.string());
  os << to_json().dump(2) << "\n";
}

void ExperimentConfig::validate() const {
  if (tile_size <= 0) throw ConfigError("dataset.tile_size must be positive");
  if (!(label_ratio > 0.0) || label_ratio > 1.0) {
    throw ConfigError("split.label_ratio must lie in (0,1]");
  }
  student.validate(crop_size);
  if (fusion.omega_s < 0.0 || fusion.omega_d < 0.0 ||
      (fusion.omega_s == 0.0 && fusion.omega_d == 0.0)) {
    throw ConfigError("fusion weights must be non-negative, not both zero");
  }
  student::mode_from_name(inference_mode);
  loss_weights.validate();
  if (ema_momentum < 0.0 || ema_momentum > 1.0) {
    throw ConfigError("ssl.ema_momentum must lie in [0,1]");
  }
  if (!(tau > 0.0) || tau > 1.0) throw ConfigError("ssl.tau must lie in (0,1]");
  if (batch_size <= 0 || epochs <= 0) {
    throw ConfigError("optim.batch_size and optim.epochs must be positive");
  }
  for (const auto& t : teacher_specs) {
    if (t.patch_size <= 0) throw ConfigError("teacher patch_size must be > 0");
    if (t.kind == teachers::TeacherKind::kMock && t.embed_dim <= 0) {
      throw ConfigError("mock teacher needs embed_dim");
    }
  }
  const auto& w = augment.weak;
  if (!(w.resize_min > 0.0) || w.resize_max < w.resize_min) {
    throw ConfigError("augment.weak resize range is invalid");
  }
  if (w.hflip_prob < 0.0 || w.hflip_prob > 1.0) {
    throw ConfigError("augment.weak.hflip_prob must lie in [0,1]");
  }
  const auto& s = augment.strong;
  for (double p : {s.jitter_prob, s.cutmix_prob}) {
    if (p < 0.0 || p > 1.0) {
      throw ConfigError("augment.strong probabilities must lie in [0,1]");
    }
  }
  if (!(s.cutmix_area_min > 0.0) || s.cutmix_area_max < s.cutmix_area_min ||
      s.cutmix_area_max > 1.0) {
    throw ConfigError("augment.strong cutmix area range is invalid");
  }
}

ssl::TrainSetup ExperimentConfig::to_train_setup() const {
  ssl::TrainSetup setup;
  setup.student_config = student;
  setup.fusion = fusion;
  setup.mode = student::mode_from_name(inference_mode);
  setup.crop_size = crop_size;
  setup.teacher_specs = teacher_specs;
  setup.ssl.loss_weights = loss_weights;
  setup.ssl.ema.momentum = ema_momentum;
  setup.ssl.tau = tau;
  setup.ssl.distill_labeled = distill_labeled;
  setup.optim = optim;
  setup.batch_size = batch_size;
  setup.epochs = epochs;
  setup.max_steps = max_steps;
  datapipe::AugmentationSpec aug = augment;
  aug.weak.crop_size = crop_size;
  setup.augment = aug;
  setup.seed = train_seed;
  setup.io.out_dir = out_dir;
  setup.io.checkpoint_every_epochs = checkpoint_every_epochs;
  setup.io.validate_every_epochs = validate_every_epochs;
  return setup;
}

std::filesystem::path ExperimentConfig::manifests_dir() const {
  return std::filesystem::path(out_dir) / "manifests";
}

std::filesystem::path ExperimentConfig::train_manifest_path() const {
  return manifests_dir() / ("train_r" + ratio_tag(label_ratio) + ".jsonl");
}

std::filesystem::path ExperimentConfig::val_manifest_path() const {
  return manifests_dir() / "val.jsonl";
}

std::filesystem::path ExperimentConfig::test_manifest_path() const {
  return manifests_dir() / "test.jsonl";
}

}  // namespace vfmseg::cli
