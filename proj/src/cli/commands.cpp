// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/cli/commands.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "vfmseg/core/error.hpp"
#include "vfmseg/datapipe/synth.hpp"
#include "vfmseg/metrics/metrics.hpp"
#include "vfmseg/teachers/fetch.hpp"

namespace vfmseg::cli {
namespace {

std::string file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Writes `content` unless the file already holds exactly these bytes.
// Returns true when the file was already up to date.
bool write_if_changed(const std::filesystem::path& path,
                      const std::string& content) {
  if (std::filesystem::exists(path) && file_bytes(path) == content) {
    return true;
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << content;
  if (!os) throw DataError("cannot write " + path.string());
  return false;
}

// Every command records what it produced under --out.
void write_artifact_list(const std::filesystem::path& out_dir,
                         const std::vector<std::filesystem::path>& files) {
  nlohmann::ordered_json j;
  j["artifacts"] = nlohmann::ordered_json::array();
  for (const auto& f : files) j["artifacts"].push_back(f.string());
  std::ofstream os(out_dir / "artifacts.json", std::ios::trunc);
  os << j.dump(2) << "\n";
}

datapipe::DatasetManifest filter_split(const datapipe::DatasetManifest& m,
                                       datapipe::Split split) {
  datapipe::DatasetManifest out = m;
  out.tiles.clear();
  for (const auto& t : m.tiles) {
    if (t.split == split) out.tiles.push_back(t);
  }
  return out;
}

}  // namespace

int cmd_split(const ExperimentConfig& config) {
  if (config.dataset_root.empty()) {
    throw ConfigError("dataset.root is required for split");
  }
  auto manifest = datapipe::build_manifest(config.dataset_root,
                                           config.tile_size,
                                           config.split_ratios,
                                           config.split_seed);
  if (manifest.class_names.empty()) {
    throw DataError("dataset.json with class_names is required under " +
                    config.dataset_root);
  }
  manifest = datapipe::partition_labeled(manifest, config.label_ratio,
                                         config.split_seed);
  std::filesystem::create_directories(config.manifests_dir());

  const auto train = filter_split(manifest, datapipe::Split::kTrain);
  const auto val = filter_split(manifest, datapipe::Split::kVal);
  const auto test = filter_split(manifest, datapipe::Split::kTest);
  bool up_to_date = true;
  up_to_date &= write_if_changed(config.train_manifest_path(),
                                 train.serialize());
  up_to_date &= write_if_changed(config.val_manifest_path(),
                                 val.serialize());
  up_to_date &= write_if_changed(config.test_manifest_path(),
                                 test.serialize());

  write_artifact_list(config.manifests_dir(),
                      {config.train_manifest_path(), config.val_manifest_path(),
                       config.test_manifest_path()});
  const std::size_t labeled = manifest.labeled_train_count();
  std::cout << "train tiles: " << train.tiles.size() << " (" << labeled
            << " labeled, " << train.tiles.size() - labeled
            << " unlabeled)\n"
            << "val tiles:   " << val.tiles.size() << "\n"
            << "test tiles:  " << test.tiles.size() << "\n";
  if (up_to_date) std::cout << "manifests up to date\n";
  return kExitOk;
}

int cmd_train(const ExperimentConfig& config,
              const std::filesystem::path& resume) {
  const auto train_path = config.train_manifest_path();
  const auto val_path = config.val_manifest_path();
  if (!std::filesystem::exists(train_path)) {
    throw DataError("train manifest missing: " + train_path.string() +
                    " (run 'vfmseg split' first)");
  }
  auto manifest = datapipe::DatasetManifest::load(train_path);
  if (std::filesystem::exists(val_path)) {
    const auto val = datapipe::DatasetManifest::load(val_path);
    manifest.tiles.insert(manifest.tiles.end(), val.tiles.begin(),
                          val.tiles.end());
  }
  ssl::Trainer trainer(config.to_train_setup(), std::move(manifest),
                       config.dataset_root);
  if (!resume.empty()) {
    trainer.load_checkpoint(resume);
    std::cout << "resumed from " << resume << " at step " << trainer.step()
              << "\n";
  }
  const auto summary = trainer.run();
  nlohmann::ordered_json j;
  j["steps"] = summary.steps;
  j["last_checkpoint"] = summary.last_checkpoint.string();
  if (summary.best_step >= 0) {
    j["best_checkpoint"] = summary.best_checkpoint.string();
    j["best_miou"] = summary.best_miou;
    j["best_step"] = summary.best_step;
  }
  if (summary.final_val.has_value()) {
    j["final_val_miou"] = summary.final_val->miou;
    j["final_val_mf1"] = summary.final_val->mf1;
    j["final_val_kappa"] = summary.final_val->kappa;
  }
  const auto summary_path =
      std::filesystem::path(config.out_dir) / "summary.json";
  {
    std::ofstream os(summary_path, std::ios::trunc);
    os << j.dump(2) << "\n";
  }
  std::vector<std::filesystem::path> artifacts{
      std::filesystem::path(config.out_dir) / "train_log.jsonl",
      summary_path, summary.last_checkpoint};
  if (summary.best_step >= 0) artifacts.push_back(summary.best_checkpoint);
  write_artifact_list(config.out_dir, artifacts);
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

int cmd_eval(const std::filesystem::path& checkpoint,
             const std::filesystem::path& manifest_path,
             const std::filesystem::path& dataset_root,
             const std::string& model_source, const std::string& mode,
             const std::filesystem::path& out_dir) {
  if (model_source != "student" && model_source != "ema") {
    throw ConfigError("--model-source must be 'student' or 'ema'");
  }
  const Archive archive = Archive::load(checkpoint);
  auto model = ssl::model_from_checkpoint(archive, model_source + ".");
  const auto manifest = datapipe::DatasetManifest::load(manifest_path);
  if (static_cast<int>(manifest.class_names.size()) !=
      model.config().num_classes) {
    throw ConfigError("checkpoint expects " +
                      std::to_string(model.config().num_classes) +
                      " classes but manifest lists " +
                      std::to_string(manifest.class_names.size()));
  }
  const auto eval_mode = mode.empty()
                             ? student::mode_from_name(
                                   archive.meta.value("mode", "fused"))
                             : student::mode_from_name(mode);
  datapipe::TileLoader loader(dataset_root, manifest.ignore_value);
  metrics::ConfusionMatrix cm(model.config().num_classes);
  NoGradGuard no_grad;
  std::vector<datapipe::SegmentationSample> batch;
  auto flush = [&]() {
    if (batch.empty()) return;
    Tensor images = ssl::stack_images(batch);
    const int h = batch[0].height;
    const int w = batch[0].width;
    Tensor logits = model.predict(images, eval_mode, h, w);
    const auto preds = ssl::argmax_logits(logits);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      cm.accumulate(
          std::span<const std::int32_t>(preds.data() + i * plane, plane),
          std::span<const std::int32_t>(batch[i].label.data(), plane),
          manifest.ignore_value);
    }
    batch.clear();
  };
  for (const auto& tile : manifest.tiles) {
    batch.push_back(loader.load(tile));
    if (batch.size() >= 8) flush();
  }
  flush();
  const auto report = metrics::summarize(cm, manifest.class_names);
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream os(out_dir / "metrics.json", std::ios::trunc);
    os << report.to_json() << "\n";
  }
  {
    std::ofstream os(out_dir / "metrics.csv", std::ios::trunc);
    os << report.csv_header() << "\n" << report.to_csv_row() << "\n";
  }
  write_artifact_list(out_dir,
                      {out_dir / "metrics.json", out_dir / "metrics.csv"});
  std::cout << report.csv_header() << "\n" << report.to_csv_row() << "\n";
  return kExitOk;
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

int cmd_report(const std::vector<std::filesystem::path>& report_files,
               const std::filesystem::path& markdown_out,
               const std::filesystem::path& csv_out) {
  if (report_files.empty()) {
    throw ConfigError("report needs at least one metrics file");
  }
  std::vector<metrics::MetricsReport> reports;
  std::vector<std::string> row_names;
  for (const auto& path : report_files) {
    reports.push_back(metrics::MetricsReport::from_json_file(path));
    row_names.push_back(path.stem().string());
  }
  const auto& classes = reports.front().class_names;
  for (const auto& r : reports) {
    if (r.class_names != classes) {
      throw DataError("metrics reports disagree on the class list");
    }
  }
  // Per-row consistency: stated mIoU must match the mean of its own
  // per-class values.
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    const double mean = metrics::mean_of_valid(r.iou_per_class, r.class_valid);
    if (std::abs(mean * 100.0 - r.miou * 100.0) > 0.005) {
      std::cerr << "warning: row '" << row_names[i]
                << "' states mIoU " << pct2(r.miou)
                << " but its per-class values average to " << pct2(mean)
                << "\n";
    }
  }

  const std::size_t cols = classes.size() + 3;
  // Best (max) value per column for Markdown bolding.
  std::vector<double> best(cols, -1.0);
  auto value_at = [&](const metrics::MetricsReport& r, std::size_t c) {
    if (c < classes.size()) return r.iou_per_class[c];
    if (c == classes.size()) return r.miou;
    if (c == classes.size() + 1) return r.mf1;
    return r.kappa;
  };
  for (const auto& r : reports) {
    for (std::size_t c = 0; c < cols; ++c) {
      best[c] = std::max(best[c], value_at(r, c));
    }
  }

  std::ostringstream md;
  md << "| model |";
  for (const auto& name : classes) md << " " << name << " |";
  md << " mIoU | mF1 | Kappa |\n|---|";
  for (std::size_t c = 0; c < cols; ++c) md << "---|";
  md << "\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    md << "| " << row_names[i] << " |";
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = value_at(reports[i], c);
      const std::string text =
          c == cols - 1 ? frac4(v) : pct2(v);
      if (v == best[c]) {
        md << " **" << text << "** |";
      } else {
        md << " " << text << " |";
      }
    }
    md << "\n";
  }

  std::ostringstream csv;
  csv << "model," << reports.front().csv_header() << "\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    csv << row_names[i] << "," << reports[i].to_csv_row() << "\n";
  }

  std::cout << md.str();
  if (!markdown_out.empty()) {
    std::ofstream os(markdown_out, std::ios::trunc);
    os << md.str();
  }
  if (!csv_out.empty()) {
    std::ofstream os(csv_out, std::ios::trunc);
    os << csv.str();
  }
  return kExitOk;
}

int cmd_synth(const std::filesystem::path& out_dir, int num_images,
              int image_size, std::uint64_t seed) {
  datapipe::SynthSpec spec;
  spec.num_images = num_images;
  spec.image_size = image_size;
  spec.seed = seed;
  datapipe::generate_synthetic_dataset(out_dir, spec);
  std::cout << "wrote " << num_images << " synthetic tiles to " << out_dir
            << "\n";
  return kExitOk;
}

int cmd_fetch(const std::string& name, const std::string& url,
              const std::string& sha256,
              const std::filesystem::path& registry_path,
              const std::filesystem::path& cache_dir) {
  std::string fetch_url = url;
  std::string fetch_sha = sha256;
  if (!name.empty()) {
    if (registry_path.empty()) {
      throw ConfigError("--name needs --registry");
    }
    bool found = false;
    for (const auto& entry : teachers::load_registry(registry_path)) {
      if (entry.name == name) {
        fetch_url = entry.url;
        fetch_sha = entry.sha256;
        found = true;
        break;
      }
    }
    if (!found) {
      throw ConfigError("registry has no entry named '" + name + "'");
    }
  }
  if (fetch_url.empty() || fetch_sha.empty()) {
    throw ConfigError("fetch needs --name+--registry or --url+--sha256");
  }
  const auto cache =
      cache_dir.empty() ? teachers::weights_cache_dir() : cache_dir;
  const auto path = teachers::fetch_weights(fetch_url, fetch_sha, cache);
  std::cout << path.string() << "\n";
  return kExitOk;
}

}  // namespace vfmseg::cli
