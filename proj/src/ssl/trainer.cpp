// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/ssl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>

#include "vfmseg/core/error.hpp"
#include "vfmseg/core/ops.hpp"

namespace vfmseg::ssl {

namespace {

std::vector<student::TeacherBinding> make_bindings(
    const std::vector<teachers::TeacherSpec>& specs) {
  std::vector<student::TeacherBinding> bindings;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    student::TeacherBinding b;
    b.key = std::to_string(i) + ":" + teachers::kind_name(specs[i].kind);
    b.kind = teachers::kind_name(specs[i].kind);
    b.dim = specs[i].embed_dim;
    bindings.push_back(std::move(b));
  }
  return bindings;
}

template <typename T>
std::vector<T> permuted(std::vector<T> items, std::uint64_t seed) {
  Rng rng(seed);
  rng.shuffle(items);
  return items;
}

}  // namespace

Tensor stack_images(std::span<const datapipe::SegmentationSample> samples) {
  if (samples.empty()) throw ContractViolation("stack_images: empty batch");
  const int h = samples[0].height;
  const int w = samples[0].width;
  Tensor out = Tensor::zeros(
      {static_cast<std::int64_t>(samples.size()), 3, h, w});
  const std::size_t per = static_cast<std::size_t>(3) * h * w;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].height != h || samples[i].width != w) {
      throw ContractViolation("stack_images: mixed sample sizes");
    }
    std::memcpy(out.data() + i * per, samples[i].image.data(),
                per * sizeof(double));
  }
  return out;
}

std::vector<std::int32_t> stack_labels(
    std::span<const datapipe::SegmentationSample> samples) {
  std::vector<std::int32_t> out;
  for (const auto& s : samples) {
    out.insert(out.end(), s.label.begin(), s.label.end());
  }
  return out;
}

std::vector<std::int32_t> argmax_logits(const Tensor& logits) {
  const std::int64_t b = logits.dim(0);
  const std::int64_t c = logits.dim(1);
  const std::int64_t hw = logits.dim(2) * logits.dim(3);
  std::vector<std::int32_t> out(static_cast<std::size_t>(b * hw));
  const double* d = logits.data();
  for (std::int64_t bi = 0; bi < b; ++bi) {
    const double* base = d + bi * c * hw;
    for (std::int64_t p = 0; p < hw; ++p) {
      double mx = base[p];
      std::int32_t arg = 0;
      for (std::int64_t ch = 1; ch < c; ++ch) {
        const double v = base[ch * hw + p];
        if (v > mx) {
          mx = v;
          arg = static_cast<std::int32_t>(ch);
        }
      }
      out[static_cast<std::size_t>(bi * hw + p)] = arg;
    }
  }
  return out;
}

Trainer::Trainer(TrainSetup setup, datapipe::DatasetManifest manifest,
                 std::filesystem::path dataset_root)
    : setup_(std::move(setup)),
      manifest_(std::move(manifest)),
      loader_(std::move(dataset_root), manifest_.ignore_value),
      student_(setup_.student_config, setup_.crop_size,
               make_bindings(setup_.teacher_specs), setup_.fusion,
               setup_.seed),
      ema_(setup_.student_config, setup_.crop_size,
           make_bindings(setup_.teacher_specs), setup_.fusion, setup_.seed),
      optimizer_(student_.params(), setup_.optim) {
  setup_.ssl.loss_weights.validate();
  setup_.ssl.ema.validate();
  if (!(setup_.ssl.tau > 0.0) || setup_.ssl.tau > 1.0) {
    throw ConfigError("tau must lie in (0,1]");
  }
  if (setup_.batch_size <= 0 || setup_.epochs <= 0) {
    throw ConfigError("batch_size and epochs must be positive");
  }
  labeled_tiles_ = datapipe::train_tiles(manifest_, true);
  unlabeled_tiles_ = datapipe::train_tiles(manifest_, false);
  val_tiles_ = datapipe::tiles_of(manifest_, datapipe::Split::kVal);
  if (labeled_tiles_.empty()) {
    throw ConfigError("manifest has no labeled train tiles");
  }
  steps_per_epoch_ = static_cast<std::int64_t>(
      (labeled_tiles_.size() + setup_.batch_size - 1) / setup_.batch_size);
  // EMA teacher starts as an exact copy of the student.
  ema_.params().copy_values_from(student_.params());
  ema_.params().set_requires_grad(false);
  for (std::size_t i = 0; i < setup_.teacher_specs.size(); ++i) {
    const auto key = std::to_string(i) + ":" +
                     teachers::kind_name(setup_.teacher_specs[i].kind);
    teachers_.emplace_back(key, teachers::load_teacher(setup_.teacher_specs[i]));
  }
}

std::int64_t Trainer::total_steps() const {
  return setup_.max_steps > 0
             ? setup_.max_steps
             : steps_per_epoch_ * static_cast<std::int64_t>(setup_.epochs);
}

LabeledBatch Trainer::make_labeled_batch(std::int64_t step) const {
  const std::int64_t epoch = step / steps_per_epoch_;
  const std::int64_t index = step % steps_per_epoch_;
  auto order = permuted(labeled_tiles_,
                        Rng::derive({setup_.seed, Rng::hash_str("labeled-order"),
                                     static_cast<std::uint64_t>(epoch)}));
  const std::size_t lo = static_cast<std::size_t>(index) *
                         static_cast<std::size_t>(setup_.batch_size);
  const std::size_t hi =
      std::min(order.size(), lo + static_cast<std::size_t>(setup_.batch_size));
  std::vector<datapipe::SegmentationSample> views;
  for (std::size_t i = lo; i < hi; ++i) {
    const auto* tile = order[i];
    Rng rng(datapipe::augment_stream_seed(setup_.seed, tile->tile_id(),
                                          static_cast<std::uint64_t>(epoch),
                                          "labeled-weak"));
    views.push_back(
        datapipe::weak_augment(loader_.load(*tile), setup_.augment.weak, rng));
  }
  LabeledBatch batch;
  batch.images = stack_images(views);
  batch.labels = stack_labels(views);
  return batch;
}

UnlabeledBatch Trainer::make_unlabeled_batch(std::int64_t step) const {
  UnlabeledBatch batch;
  if (unlabeled_tiles_.empty()) return batch;
  const std::int64_t per_pass = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(unlabeled_tiles_.size()) /
             setup_.batch_size);
  const std::int64_t pass = step / per_pass;
  const std::int64_t index = step % per_pass;
  auto order =
      permuted(unlabeled_tiles_,
               Rng::derive({setup_.seed, Rng::hash_str("unlabeled-order"),
                            static_cast<std::uint64_t>(pass)}));
  for (int k = 0; k < setup_.batch_size; ++k) {
    const std::size_t pos =
        (static_cast<std::size_t>(index) *
             static_cast<std::size_t>(setup_.batch_size) +
         static_cast<std::size_t>(k)) %
        order.size();
    const auto* tile = order[pos];
    Rng rng(datapipe::augment_stream_seed(setup_.seed, tile->tile_id(),
                                          static_cast<std::uint64_t>(step),
                                          "unlabeled-weak"));
    batch.weak_views.push_back(
        datapipe::weak_augment(loader_.load(*tile), setup_.augment.weak, rng));
    batch.strong_seeds.push_back(datapipe::augment_stream_seed(
        setup_.seed, tile->tile_id(), static_cast<std::uint64_t>(step),
        "strong"));
  }
  return batch;
}

Tensor Trainer::forward_with_mode(
    const student::EncodeResult& enc,
    std::map<std::string, teachers::TokenFeatureMap>* translated_out,
    int out_h, int out_w, student::ForwardTrace* trace) const {
  student::DecoderPyramid pyramid = enc.pyramid;
  const bool fused = setup_.mode == student::InferenceMode::kFused;
  const bool need_translate =
      translated_out != nullptr &&
      (fused || setup_.ssl.loss_weights.lambda_d > 0.0);
  std::map<std::string, teachers::TokenFeatureMap> translated;
  if (need_translate) {
    for (const auto& binding : student_.teacher_bindings()) {
      translated.emplace(binding.key,
                         student_.translate(enc.features, binding.key));
    }
  }
  if (fused) {
    std::vector<teachers::TokenFeatureMap> projected;
    projected.reserve(translated.size());
    for (const auto& binding : student_.teacher_bindings()) {
      auto it = translated.find(binding.key);
      if (it != translated.end()) {
        projected.push_back(student_.project_back(it->second, binding.key));
      }
    }
    pyramid.levels[3] = student_.fuse(enc.features, projected);
    if (trace != nullptr) trace->fused = pyramid.levels[3].data;
  }
  if (translated_out != nullptr) *translated_out = std::move(translated);
  return student_.decode(pyramid, out_h, out_w, trace);
}

std::map<std::string, teachers::TokenFeatureMap>
Trainer::extract_teacher_features(const Tensor& images, int rows,
                                  int cols) const {
  std::map<std::string, teachers::TokenFeatureMap> feats;
  for (const auto& [key, handle] : teachers_) {
    teachers::TokenFeatureMap fm = handle->extract(images);
    fm = teachers::align_token_grid(fm, rows, cols);
    fm.data = fm.data.detach();
    feats.emplace(key, std::move(fm));
  }
  return feats;
}

LossReport Trainer::train_step(const LabeledBatch& labeled,
                               const UnlabeledBatch& unlabeled) {
  const auto& weights = setup_.ssl.loss_weights;
  optimizer_.zero_grad();
  trace_ = StepTrace{};

  const int crop = setup_.crop_size;
  const bool want_unlabeled =
      (weights.lambda_u > 0.0 || weights.lambda_d > 0.0) &&
      !unlabeled.weak_views.empty();

  Tensor l_unsup = Tensor::scalar(0.0);
  DistillationResult distill;
  distill.total = Tensor::scalar(0.0);
  double coverage = 0.0;

  if (want_unlabeled) {
    const auto& weak = unlabeled.weak_views;
    const std::size_t bu = weak.size();

    // (a) EMA teacher on the weak views -> thresholded pseudo-labels.
    PseudoLabelBundle bundle;
    if (weights.lambda_u > 0.0) {
      NoGradGuard no_grad;
      Tensor weak_logits =
          ema_.predict(stack_images(weak), setup_.mode, crop, crop);
      bundle = pseudo_label(weak_logits, setup_.ssl.tau);
      coverage = bundle.coverage;
    }

    // Strong views: color jitter + CutMix against a batch neighbour; the
    // pseudo-labels ride along as the label plane so the mix applies to
    // image, labels and confidence mask identically.
    std::vector<datapipe::SegmentationSample> pre(bu);
    const std::size_t plane = static_cast<std::size_t>(crop) * crop;
    for (std::size_t i = 0; i < bu; ++i) {
      pre[i] = weak[i];
      if (weights.lambda_u > 0.0) {
        for (std::size_t p = 0; p < plane; ++p) {
          pre[i].label[p] = bundle.confidence_mask[i * plane + p] != 0
                                ? bundle.hard_labels[i * plane + p]
                                : manifest_.ignore_value;
        }
      } else {
        std::fill(pre[i].label.begin(), pre[i].label.end(),
                  manifest_.ignore_value);
      }
    }
    std::vector<datapipe::SegmentationSample> strong(bu);
    for (std::size_t i = 0; i < bu; ++i) {
      Rng rng(unlabeled.strong_seeds[i]);
      strong[i] = datapipe::strong_augment(pre[i], pre[(i + 1) % bu],
                                           setup_.augment.strong, rng);
    }
    Tensor strong_images = stack_images(strong);

    // (b) student forward on the strong view.
    student::EncodeResult enc = student_.encode(strong_images);
    std::map<std::string, teachers::TokenFeatureMap> translated;
    student::ForwardTrace* trace_ptr = tracing_ ? &trace_.forward : nullptr;
    const bool need_decode = weights.lambda_u > 0.0 || tracing_;
    Tensor strong_logits;
    if (need_decode) {
      strong_logits =
          forward_with_mode(enc, &translated, crop, crop, trace_ptr);
    } else {
      // Distillation-only path still needs the translators.
      for (const auto& binding : student_.teacher_bindings()) {
        translated.emplace(binding.key,
                           student_.translate(enc.features, binding.key));
      }
    }
    if (tracing_) {
      trace_.f_s = enc.features.data;
      trace_.from_unlabeled = true;
      trace_.valid = true;
    }

    if (weights.lambda_u > 0.0) {
      PseudoLabelBundle mixed;
      mixed.batch = static_cast<int>(bu);
      mixed.height = crop;
      mixed.width = crop;
      mixed.hard_labels.resize(bu * plane);
      mixed.confidence_mask.resize(bu * plane);
      for (std::size_t i = 0; i < bu; ++i) {
        for (std::size_t p = 0; p < plane; ++p) {
          const std::int32_t lab = strong[i].label[p];
          const bool keep = lab != manifest_.ignore_value;
          mixed.hard_labels[i * plane + p] = keep ? lab : 0;
          mixed.confidence_mask[i * plane + p] = keep ? 1 : 0;
        }
      }
      l_unsup = unsupervised_loss(strong_logits, mixed);
    }

    // (c) frozen-teacher features on the same strong view, (d) distillation.
    if (weights.lambda_d > 0.0 && !teachers_.empty()) {
      auto teacher_feats = extract_teacher_features(
          strong_images, enc.features.rows, enc.features.cols);
      distill = distillation_loss(translated, teacher_feats);
    }
  }

  // (e) labeled forward (weak-augmented batch).
  student::EncodeResult enc_l = student_.encode(labeled.images);
  std::map<std::string, teachers::TokenFeatureMap> translated_l;
  student::ForwardTrace* trace_l =
      (tracing_ && !trace_.valid) ? &trace_.forward : nullptr;
  Tensor logits_l = forward_with_mode(enc_l, &translated_l, crop, crop,
                                      trace_l);
  if (tracing_ && !trace_.valid) {
    trace_.f_s = enc_l.features.data;
    trace_.from_unlabeled = false;
    trace_.valid = true;
  }
  Tensor l_sup =
      supervised_loss(logits_l, labeled.labels, manifest_.ignore_value);

  if (setup_.ssl.distill_labeled && weights.lambda_d > 0.0 &&
      !teachers_.empty()) {
    auto teacher_feats_l = extract_teacher_features(
        labeled.images, enc_l.features.rows, enc_l.features.cols);
    DistillationResult distill_l =
        distillation_loss(translated_l, teacher_feats_l);
    // Blend the unlabeled and labeled scopes evenly.
    distill.total = ops::scale(ops::add(distill.total, distill_l.total), 0.5);
    for (auto& [key, value] : distill.per_teacher) {
      value = 0.5 * (value + distill_l.per_teacher.at(key));
    }
    if (distill.per_teacher.empty()) {
      distill.per_teacher = distill_l.per_teacher;
    }
  }

  // (f) total loss, backward, optimizer step.
  TotalLoss tl = total_loss(l_sup, l_unsup, distill, weights, coverage, step_);
  if (!std::isfinite(tl.report.total)) {
    throw NumericError("non-finite total loss at step " +
                       std::to_string(step_));
  }
  if (tl.total.requires_grad()) {
    tl.total.backward();
  }
  optimizer_.step();

  // (g) EMA teacher follows the student.
  ema_update(ema_.params(), student_.params(), setup_.ssl.ema.momentum);

  tl.report.lr_encoder = setup_.optim.lr_encoder;
  tl.report.lr_decoder = setup_.optim.lr_decoder;
  ++step_;
  tl.report.step = step_;  // 1-based: the step that just completed
  return tl.report;
}

LossReport Trainer::run_one_step() {
  return train_step(make_labeled_batch(step_), make_unlabeled_batch(step_));
}

metrics::MetricsReport Trainer::evaluate_tiles(
    const student::StudentModel& model,
    const std::vector<const datapipe::TileRecord*>& tiles) const {
  const int classes = static_cast<int>(manifest_.class_names.empty()
                                           ? setup_.student_config.num_classes
                                           : manifest_.class_names.size());
  metrics::ConfusionMatrix cm(classes);
  NoGradGuard no_grad;
  std::vector<datapipe::SegmentationSample> batch;
  auto flush = [&]() {
    if (batch.empty()) return;
    Tensor images = stack_images(batch);
    const int h = batch[0].height;
    const int w = batch[0].width;
    Tensor logits = model.predict(images, setup_.mode, h, w);
    const auto preds = argmax_logits(logits);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      cm.accumulate(
          std::span<const std::int32_t>(preds.data() + i * plane, plane),
          std::span<const std::int32_t>(batch[i].label.data(), plane),
          manifest_.ignore_value);
    }
    batch.clear();
  };
  for (const auto* tile : tiles) {
    batch.push_back(loader_.load(*tile));
    if (static_cast<int>(batch.size()) >= setup_.batch_size) flush();
  }
  flush();
  return metrics::summarize(cm, manifest_.class_names);
}

metrics::MetricsReport Trainer::validate(bool use_ema) const {
  if (val_tiles_.empty()) {
    throw DataError("manifest has no validation tiles");
  }
  return evaluate_tiles(use_ema ? ema_ : student_, val_tiles_);
}

TrainSummary Trainer::run(
    const std::function<void(const LossReport&)>& on_step) {
  std::filesystem::create_directories(setup_.io.out_dir);
  const auto log_path = setup_.io.out_dir / "train_log.jsonl";
  std::ofstream log(log_path, step_ == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw DataError("cannot open training log " + log_path.string());

  TrainSummary summary;
  summary.last_checkpoint = setup_.io.out_dir / "last.ckpt";
  summary.best_checkpoint = setup_.io.out_dir / "best.ckpt";
  const std::int64_t steps = total_steps();
  while (step_ < steps) {
    const LossReport report = run_one_step();
    log << report.to_json_line() << "\n";
    if (on_step) on_step(report);
    const bool epoch_end = step_ % steps_per_epoch_ == 0;
    const std::int64_t epoch = step_ / steps_per_epoch_;
    if (epoch_end) {
      log.flush();
      if (setup_.io.validate_every_epochs > 0 && !val_tiles_.empty() &&
          epoch % setup_.io.validate_every_epochs == 0) {
        const auto val = validate(/*use_ema=*/true);
        nlohmann::ordered_json j;
        j["type"] = "val";
        j["step"] = step_;
        j["miou"] = val.miou;
        j["mf1"] = val.mf1;
        j["oa"] = val.oa;
        j["kappa"] = val.kappa;
        j["source"] = "ema";
        log << j.dump() << "\n";
        if (val.miou > summary.best_miou) {
          summary.best_miou = val.miou;
          summary.best_step = step_;
          save_checkpoint(summary.best_checkpoint);
        }
      }
      if (setup_.io.checkpoint_every_epochs > 0 &&
          epoch % setup_.io.checkpoint_every_epochs == 0) {
        save_checkpoint(summary.last_checkpoint);
      }
    }
  }
  save_checkpoint(summary.last_checkpoint);
  if (!val_tiles_.empty()) {
    const auto val = validate(/*use_ema=*/true);
    summary.final_val = val;
    nlohmann::ordered_json j;
    j["type"] = "val";
    j["step"] = step_;
    j["miou"] = val.miou;
    j["mf1"] = val.mf1;
    j["oa"] = val.oa;
    j["kappa"] = val.kappa;
    j["source"] = "ema";
    log << j.dump() << "\n";
    if (val.miou > summary.best_miou) {
      summary.best_miou = val.miou;
      summary.best_step = step_;
      save_checkpoint(summary.best_checkpoint);
    }
  }
  summary.steps = step_;
  return summary;
}

namespace {

nlohmann::ordered_json student_config_json(const student::StudentConfig& c) {
  nlohmann::ordered_json j;
  j["embed_dim"] = c.embed_dim;
  j["patch_size"] = c.patch_size;
  j["depth"] = c.depth;
  j["heads"] = c.heads;
  j["mlp_ratio"] = c.mlp_ratio;
  j["pyramid_taps"] = c.pyramid_taps;
  j["num_classes"] = c.num_classes;
  j["decoder_channels"] = c.decoder_channels;
  return j;
}

student::StudentConfig student_config_from_json(const nlohmann::json& j) {
  student::StudentConfig c;
  c.embed_dim = j.at("embed_dim").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  const auto taps = j.at("pyramid_taps").get<std::vector<int>>();
  if (taps.size() != 4) throw DataError("pyramid_taps must have 4 entries");
  std::copy(taps.begin(), taps.end(), c.pyramid_taps.begin());
  c.num_classes = j.at("num_classes").get<int>();
  c.decoder_channels = j.at("decoder_channels").get<int>();
  return c;
}

void store_params(Archive& archive, const std::string& prefix,
                  const student::ParamStore& params) {
  for (const auto& [name, tensor] : params.all()) {
    archive.tensors[prefix + name] = tensor.clone();
  }
}

void load_params(const Archive& archive, const std::string& prefix,
                 student::ParamStore& params) {
  for (auto& [name, tensor] : params.mutable_all()) {
    auto it = archive.tensors.find(prefix + name);
    if (it == archive.tensors.end()) {
      throw DataError("checkpoint missing parameter '" + prefix + name + "'");
    }
    if (it->second.shape() != tensor.shape()) {
      throw DataError("checkpoint shape mismatch for '" + prefix + name +
                      "'");
    }
    std::memcpy(tensor.data(), it->second.data(),
                static_cast<std::size_t>(tensor.numel()) * sizeof(double));
  }
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  Archive archive;
  archive.meta["type"] = "checkpoint";
  archive.meta["step"] = step_;
  archive.meta["seed"] = setup_.seed;
  // The derived-stream design makes (seed, step) the complete RNG state.
  archive.meta["rng"] = {{"scheme", "derived-streams"},
                         {"seed", setup_.seed},
                         {"step", step_}};
  archive.meta["crop_size"] = setup_.crop_size;
  archive.meta["mode"] = student::mode_name(setup_.mode);
  archive.meta["student_config"] =
      student_config_json(setup_.student_config);
  archive.meta["fusion"] = {{"omega_s", setup_.fusion.omega_s},
                            {"omega_d", setup_.fusion.omega_d}};
  nlohmann::ordered_json bindings = nlohmann::ordered_json::array();
  for (const auto& b : student_.teacher_bindings()) {
    bindings.push_back({{"key", b.key}, {"kind", b.kind}, {"dim", b.dim}});
  }
  archive.meta["teachers"] = bindings;
  archive.meta["class_names"] = manifest_.class_names;
  archive.meta["ignore_value"] = manifest_.ignore_value;
  store_params(archive, "student.", student_.params());
  store_params(archive, "ema.", ema_.params());
  optimizer_.save_state(archive, "opt.");
  archive.save(path);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  Archive archive = Archive::load(path);
  if (archive.meta.value("type", "") != "checkpoint") {
    throw DataError(path.string() + " is not a checkpoint archive");
  }
  const auto cfg = student_config_from_json(archive.meta.at("student_config"));
  if (cfg.embed_dim != setup_.student_config.embed_dim ||
      cfg.depth != setup_.student_config.depth ||
      cfg.num_classes != setup_.student_config.num_classes ||
      cfg.patch_size != setup_.student_config.patch_size ||
      cfg.decoder_channels != setup_.student_config.decoder_channels) {
    throw ConfigError("checkpoint was written for a different student config");
  }
  load_params(archive, "student.", student_.params());
  load_params(archive, "ema.", ema_.params());
  optimizer_.load_state(archive, "opt.");
  step_ = archive.meta.at("step").get<std::int64_t>();
}

student::StudentModel model_from_checkpoint(const Archive& archive,
                                            const std::string& prefix) {
  if (archive.meta.value("type", "") != "checkpoint") {
    throw DataError("not a checkpoint archive");
  }
  const auto cfg = student_config_from_json(archive.meta.at("student_config"));
  student::FusionWeights fusion;
  fusion.omega_s = archive.meta.at("fusion").at("omega_s").get<double>();
  fusion.omega_d = archive.meta.at("fusion").at("omega_d").get<double>();
  std::vector<student::TeacherBinding> bindings;
  for (const auto& b : archive.meta.at("teachers")) {
    bindings.push_back({b.at("key").get<std::string>(),
                        b.at("kind").get<std::string>(),
                        b.at("dim").get<int>()});
  }
  const int crop = archive.meta.at("crop_size").get<int>();
  student::StudentModel model(cfg, crop, std::move(bindings), fusion, 0);
  load_params(archive, prefix, model.params());
  model.params().set_requires_grad(false);
  return model;
}

}  // namespace vfmseg::ssl
