// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Each criterion runs end to end against the library and
// prints one pass/fail line; the process exits nonzero if any fail.
//
//   1  metric oracle suite (brute-force per-pixel counting)
//   2  published-table aggregation checks
//   3  equation-fidelity suite (scalar-loop oracles)
//   4  gradient checks (finite differences; distillation scope)
//   5  frozen/EMA contracts over training steps
//   6  pseudo-labeling contracts
//   7  determinism and resume
//   8  synthetic end-to-end: SSL+distillation vs labeled-only baseline
//   9  ablation plumbing via config switches

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "vfmseg/core/error.hpp"
#include "vfmseg/core/ops.hpp"
#include "vfmseg/core/rng.hpp"
#include "vfmseg/datapipe/synth.hpp"
#include "vfmseg/metrics/metrics.hpp"
#include "vfmseg/ssl/trainer.hpp"

using vfmseg::NoGradGuard;
using vfmseg::Rng;
using vfmseg::Tensor;
namespace dp = vfmseg::datapipe;
namespace metrics = vfmseg::metrics;
namespace ops = vfmseg::ops;
namespace ssl = vfmseg::ssl;
namespace student = vfmseg::student;
namespace teachers = vfmseg::teachers;
namespace fs = std::filesystem;

namespace {

struct Harness {
  int failures = 0;

  void run(int number, const std::string& name,
           const std::function<void()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string error;
    try {
      body();
    } catch (const std::exception& e) {
      error = e.what();
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    if (error.empty()) {
      std::printf("[PASS] criterion %d: %s (%.1fs)\n", number, name.c_str(),
                  seconds);
    } else {
      ++failures;
      std::printf("[FAIL] criterion %d: %s (%.1fs)\n       %s\n", number,
                  name.c_str(), seconds, error.c_str());
    }
    std::fflush(stdout);
  }
};

void require(bool cond, const std::string& what) {
  if (!cond) throw std::runtime_error(what);
}

void require_close(double got, double want, double tol,
                   const std::string& what) {
  if (!(std::abs(got - want) <= tol)) {
    throw std::runtime_error(what + ": got " + std::to_string(got) +
                             ", want " + std::to_string(want) + " (tol " +
                             std::to_string(tol) + ")");
  }
}

void require_rel(double got, double want, double tol, const std::string& what) {
  const double scale = std::max({std::abs(got), std::abs(want), 1e-30});
  if (!(std::abs(got - want) / scale <= tol)) {
    throw std::runtime_error(what + ": got " + std::to_string(got) +
                             ", want " + std::to_string(want) +
                             " (rel tol " + std::to_string(tol) + ")");
  }
}

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "vfmseg_acceptance";
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// ---------------------------------------------------------------------------
// criterion 1: metric oracle suite

struct BruteScores {
  std::vector<double> iou, f1;
  std::vector<bool> valid;
  double miou, mf1, kappa;
};

BruteScores brute_force_metrics(const std::vector<std::int32_t>& pred,
                                const std::vector<std::int32_t>& label,
                                int classes, std::int32_t ignore) {
  std::vector<double> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  double total = 0, agree = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (label[i] == ignore) continue;
    total += 1;
    if (pred[i] == label[i]) {
      ++agree;
      ++tp[label[i]];
    } else {
      ++fp[pred[i]];
      ++fn[label[i]];
    }
  }
  BruteScores s;
  double iou_sum = 0, f1_sum = 0;
  int nvalid = 0;
  for (int c = 0; c < classes; ++c) {
    const double u = tp[c] + fp[c] + fn[c];
    const bool valid = u > 0;
    s.valid.push_back(valid);
    s.iou.push_back(valid ? tp[c] / u : 0.0);
    s.f1.push_back(valid ? 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]) : 0.0);
    if (valid) {
      iou_sum += s.iou.back();
      f1_sum += s.f1.back();
      ++nvalid;
    }
  }
  s.miou = nvalid ? iou_sum / nvalid : 0;
  s.mf1 = nvalid ? f1_sum / nvalid : 0;
  const double oa = agree / total;
  double pre = 0;
  for (int c = 0; c < classes; ++c) {
    pre += ((tp[c] + fn[c]) / total) * ((tp[c] + fp[c]) / total);
  }
  s.kappa = pre >= 1.0 ? 0.0 : (oa - pre) / (1.0 - pre);
  return s;
}

void criterion_metric_oracle() {
  Rng rng(2024);
  int done = 0;
  while (done < 50) {
    const int classes = 2 + static_cast<int>(rng.uniform_int(4));  // C <= 5
    const int h = 1 + static_cast<int>(rng.uniform_int(16));
    const int w = 1 + static_cast<int>(rng.uniform_int(16));
    std::vector<std::int32_t> pred(static_cast<std::size_t>(h) * w);
    std::vector<std::int32_t> label(pred.size());
    bool any = false;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      pred[i] = static_cast<std::int32_t>(rng.uniform_int(classes));
      if (rng.uniform() < 0.12) {
        label[i] = 255;
      } else {
        label[i] = static_cast<std::int32_t>(rng.uniform_int(classes));
        any = true;
      }
    }
    if (!any) continue;
    ++done;
    metrics::ConfusionMatrix cm(classes);
    cm.accumulate(pred, label, 255);
    const auto report = metrics::summarize(cm);
    const auto oracle = brute_force_metrics(pred, label, classes, 255);
    for (int c = 0; c < classes; ++c) {
      require_close(report.iou_per_class[c], oracle.iou[c], 1e-9, "iou");
      require_close(report.f1_per_class[c], oracle.f1[c], 1e-9, "f1");
      require(report.class_valid[c] == oracle.valid[c], "validity flag");
    }
    require_close(report.miou, oracle.miou, 1e-9, "miou");
    require_close(report.mf1, oracle.mf1, 1e-9, "mf1");
    require_close(report.kappa, oracle.kappa, 1e-9, "kappa");
  }
}

// ---------------------------------------------------------------------------
// criterion 2: published-table aggregation checks

void criterion_table_aggregation() {
  struct Row {
    std::string name;
    std::vector<double> iou_pct;
    double printed_miou;
  };
  const std::vector<Row> rows = {
      {"potsdam-1pct", {91.59, 75.21, 74.93, 85.31, 57.91}, 76.99},
      {"loveda-5pct", {55.49, 64.10, 55.96, 70.15, 33.67, 41.07, 63.81},
       54.89},
      {"deepglobe-10pct", {86.81, 87.11, 42.05, 78.38, 80.93, 65.60}, 73.48},
  };
  for (const auto& row : rows) {
    // Exercise the same mean-of-valid plumbing summarize() and the report
    // renderer use.
    std::vector<double> fractions;
    for (double v : row.iou_pct) fractions.push_back(v / 100.0);
    const std::vector<bool> valid(fractions.size(), true);
    const double mean_pct =
        metrics::mean_of_valid(fractions, valid) * 100.0;
    require_close(mean_pct, row.printed_miou, 0.005, row.name);
  }
}

// ---------------------------------------------------------------------------
// criterion 3: equation-fidelity suite

teachers::TokenFeatureMap map_of(Tensor data, int rows, int cols) {
  teachers::TokenFeatureMap fm;
  fm.data = std::move(data);
  fm.rows = rows;
  fm.cols = cols;
  return fm;
}

void criterion_equation_fidelity() {
  Rng rng(31337);
  const int b = 2, n = 16, d = 8, dt = 6;
  auto rand_tensor = [&rng](vfmseg::Shape shape, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.vec()) v = rng.uniform(-scale, scale);
    return t;
  };

  // Translator: out = W2 relu(W1 x + b1) + b2, token-wise.
  student::StudentConfig cfg;
  cfg.embed_dim = d;
  cfg.patch_size = 16;
  cfg.depth = 4;
  cfg.heads = 2;
  cfg.num_classes = 2;
  cfg.decoder_channels = 4;
  student::StudentModel model(cfg, 64, {{"0:mock", "mock", dt}}, {0.6, 0.4},
                              9001);
  const Tensor tokens = rand_tensor({b, n, d});
  const auto translated = model.translate(map_of(tokens, 4, 4), "0:mock");
  const Tensor w1 = model.params().at("translator.0:mock.w1");
  const Tensor b1 = model.params().at("translator.0:mock.b1");
  const Tensor w2 = model.params().at("translator.0:mock.w2");
  const Tensor b2 = model.params().at("translator.0:mock.b2");
  for (int t = 0; t < b * n; ++t) {
    std::vector<double> hidden(d);
    for (int hh = 0; hh < d; ++hh) {
      double acc = b1.data()[hh];
      for (int i = 0; i < d; ++i) {
        acc += tokens.data()[t * d + i] * w1.data()[i * d + hh];
      }
      hidden[hh] = acc > 0 ? acc : 0;
    }
    for (int o = 0; o < dt; ++o) {
      double acc = b2.data()[o];
      for (int hh = 0; hh < d; ++hh) acc += hidden[hh] * w2.data()[hh * dt + o];
      require_rel(translated.data.data()[t * dt + o], acc, 1e-10,
                  "translator MLP");
    }
  }

  // Fusion: omega_s f_S + omega_d sum(projected).
  const auto f_s = map_of(rand_tensor({b, n, d}), 4, 4);
  const auto p1 = map_of(rand_tensor({b, n, d}), 4, 4);
  const auto p2 = map_of(rand_tensor({b, n, d}), 4, 4);
  const auto fused = model.fuse(f_s, {p1, p2});
  for (std::int64_t i = 0; i < fused.data.numel(); ++i) {
    const double want = 0.6 * f_s.data.data()[i] +
                        0.4 * (p1.data.data()[i] + p2.data.data()[i]);
    require_rel(fused.data.data()[i], want, 1e-10, "fusion");
  }

  // Distillation: per-teacher mean over B*N of squared L2 along d; total is
  // the mean over teachers.
  std::map<std::string, teachers::TokenFeatureMap> trans, feats;
  trans.emplace("0:t", map_of(rand_tensor({b, n, d}), 4, 4));
  trans.emplace("1:t", map_of(rand_tensor({b, n, d}), 4, 4));
  feats.emplace("0:t", map_of(rand_tensor({b, n, d}), 4, 4));
  feats.emplace("1:t", map_of(rand_tensor({b, n, d}), 4, 4));
  const auto distill = ssl::distillation_loss(trans, feats);
  double total_expect = 0;
  for (const auto& key : {"0:t", "1:t"}) {
    const auto& x = trans.at(key).data;
    const auto& y = feats.at(key).data;
    double acc = 0;
    for (int t = 0; t < b * n; ++t) {
      double norm2 = 0;
      for (int k = 0; k < d; ++k) {
        const double diff = x.data()[t * d + k] - y.data()[t * d + k];
        norm2 += diff * diff;
      }
      acc += norm2;
    }
    acc /= b * n;
    require_rel(distill.per_teacher.at(key), acc, 1e-10, "per-teacher mse");
    total_expect += acc;
  }
  require_rel(distill.total.item(), total_expect / 2.0, 1e-10,
              "distillation mean");

  // Total loss: weighted composition.
  ssl::LossWeights w{0.5, 0.25, 0.25};
  const auto tl = ssl::total_loss(Tensor::scalar(1.2), Tensor::scalar(0.8),
                                  distill, w, 0.5, 3);
  require_rel(tl.report.total,
              0.5 * 1.2 + 0.25 * 0.8 + 0.25 * distill.total.item(), 1e-10,
              "total loss");

  // EMA: theta_t = m theta_{t-1} + (1-m) s, elementwise.
  student::ParamStore a, bstore;
  Tensor pa = a.create_zeros("p", {n * d});
  Tensor pb = bstore.create_zeros("p", {n * d});
  for (auto& v : pa.vec()) v = rng.uniform(-1, 1);
  for (auto& v : pb.vec()) v = rng.uniform(-1, 1);
  const auto before = pa.vec();
  ssl::ema_update(a, bstore, 0.99);
  for (std::int64_t i = 0; i < pa.numel(); ++i) {
    require_rel(pa.data()[i], 0.99 * before[i] + 0.01 * pb.data()[i], 1e-10,
                "ema update");
  }
}

// ---------------------------------------------------------------------------
// desk fixtures shared by criteria 4-9

const fs::path& desk_dataset() {
  static const fs::path root = [] {
    const fs::path dir = work_dir() / "desk-data";
    if (!fs::exists(dir / "dataset.json")) {
      dp::SynthSpec spec;
      spec.num_images = 60;
      spec.image_size = 64;
      spec.seed = 5;
      dp::generate_synthetic_dataset(dir, spec);
    }
    return dir;
  }();
  return root;
}

dp::DatasetManifest desk_manifest() {
  auto m = dp::build_manifest(desk_dataset(), 64, {6, 2, 2}, 17);
  return dp::partition_labeled(m, 0.25, 17);
}

ssl::TrainSetup desk_setup(std::uint64_t seed) {
  ssl::TrainSetup setup;
  setup.student_config.embed_dim = 32;
  setup.student_config.patch_size = 16;
  setup.student_config.depth = 4;
  setup.student_config.heads = 4;
  setup.student_config.mlp_ratio = 2.0;
  setup.student_config.num_classes = 4;
  setup.student_config.decoder_channels = 16;
  setup.crop_size = 64;
  setup.fusion = {1.0, 0.5};
  for (int i = 0; i < 2; ++i) {
    teachers::TeacherSpec t;
    t.kind = teachers::TeacherKind::kMock;
    t.embed_dim = 48;
    t.patch_size = 16;
    t.seed = 2000 + static_cast<std::uint64_t>(i);
    setup.teacher_specs.push_back(t);
  }
  setup.optim.lr_encoder = 1e-4;
  setup.optim.lr_decoder = 1e-3;
  setup.batch_size = 4;
  setup.epochs = 100;
  setup.augment.weak.resize_min = 1.0;
  setup.augment.weak.resize_max = 1.25;
  setup.augment.weak.crop_size = 64;
  setup.seed = seed;
  setup.io.out_dir = work_dir() / "desk-out";
  setup.io.checkpoint_every_epochs = 0;
  setup.io.validate_every_epochs = 0;
  return setup;
}

// ---------------------------------------------------------------------------
// criterion 4: gradient checks on the desk model

void criterion_gradient_checks() {
  // Desk model pinned by the criterion: 64x64 input, patch 16, d_s = 32,
  // two mock teachers with d_t = 48.
  student::StudentConfig cfg;
  cfg.embed_dim = 32;
  cfg.patch_size = 16;
  cfg.depth = 4;
  cfg.heads = 4;
  cfg.mlp_ratio = 2.0;
  cfg.num_classes = 4;
  cfg.decoder_channels = 16;
  student::StudentModel model(
      cfg, 64, {{"0:mock", "mock", 48}, {"1:mock", "mock", 48}}, {1.0, 0.5},
      4242);
  // Randomize the zero head so every loss term carries gradient.
  Rng head_rng(77);
  for (const char* name :
       {"decoder.head.conv2.weight", "decoder.head.conv2.bias"}) {
    Tensor t = model.params().at(name);
    for (auto& v : t.vec()) v = head_rng.uniform(-0.2, 0.2);
  }

  const auto t0 = teachers::load_teacher(
      {teachers::TeacherKind::kMock, 48, 16, "", 2000, ""});
  const auto t1 = teachers::load_teacher(
      {teachers::TeacherKind::kMock, 48, 16, "", 2001, ""});

  // Fixed batches.
  Rng rng(555);
  auto images = [&rng](int b) {
    Tensor t = Tensor::zeros({b, 3, 64, 64});
    for (auto& v : t.vec()) v = rng.uniform();
    return t;
  };
  const Tensor labeled_images = images(2);
  std::vector<std::int32_t> labels(2 * 64 * 64);
  for (auto& l : labels) l = static_cast<std::int32_t>(rng.uniform_int(4));
  const Tensor strong_images = images(2);

  // Fixed pseudo-labels: from the current model under no-grad, low tau so
  // coverage is nonzero; frozen for the whole check.
  ssl::PseudoLabelBundle bundle;
  {
    NoGradGuard no_grad;
    const Tensor weak_logits =
        model.predict(strong_images, student::InferenceMode::kFused, 64, 64);
    bundle = ssl::pseudo_label(weak_logits, 0.3);
  }
  require(bundle.coverage > 0.0, "gradient check needs nonzero coverage");

  // Fixed (detached) teacher features on the strong view.
  std::map<std::string, teachers::TokenFeatureMap> teacher_feats;
  teacher_feats.emplace("0:mock", t0->extract(strong_images));
  teacher_feats.emplace("1:mock", t1->extract(strong_images));

  const ssl::LossWeights w{1.0 / 3, 1.0 / 3, 1.0 / 3};
  auto total_loss_fn = [&]() {
    // Unlabeled strong path: encode, translate (shared by fusion and
    // distillation), fuse, decode.
    auto enc = model.encode(strong_images);
    std::map<std::string, teachers::TokenFeatureMap> translated;
    std::vector<teachers::TokenFeatureMap> projected;
    for (const auto& key : {"0:mock", "1:mock"}) {
      auto tr = model.translate(enc.features, key);
      projected.push_back(model.project_back(tr, key));
      translated.emplace(key, std::move(tr));
    }
    enc.pyramid.levels[3] = model.fuse(enc.features, projected);
    const Tensor strong_logits = model.decode(enc.pyramid, 64, 64);
    const Tensor l_unsup = ssl::unsupervised_loss(strong_logits, bundle);
    const auto distill = ssl::distillation_loss(translated, teacher_feats);
    // Labeled path.
    const Tensor logits_l =
        model.predict(labeled_images, student::InferenceMode::kFused, 64, 64);
    const Tensor l_sup = ssl::supervised_loss(logits_l, labels, 255);
    return ssl::total_loss(l_sup, l_unsup, distill, w, bundle.coverage, 0)
        .total;
  };

  model.params().zero_grads();
  Tensor loss = total_loss_fn();
  loss.backward();

  // 20 randomly chosen translator and projector parameters vs central
  // finite differences with step 1e-4, within 1e-3 relative.
  std::vector<std::string> pool;
  for (const auto& [name, t] : model.params().all()) {
    if (name.rfind("translator.", 0) == 0 || name.rfind("projector.", 0) == 0) {
      pool.push_back(name);
    }
  }
  Rng pick(999);
  int checked = 0;
  while (checked < 20) {
    const auto& pname =
        pool[static_cast<std::size_t>(pick.uniform_int(pool.size()))];
    Tensor p = model.params().at(pname);
    require(p.has_grad(), "no gradient on " + pname);
    const auto idx = static_cast<std::int64_t>(
        pick.uniform_int(static_cast<std::uint64_t>(p.numel())));
    const double analytic = p.grad().data()[idx];
    const double orig = p.data()[idx];
    const double h = 1e-4;
    double fp, fm;
    {
      NoGradGuard no_grad;
      p.data()[idx] = orig + h;
      fp = total_loss_fn().item();
      p.data()[idx] = orig - h;
      fm = total_loss_fn().item();
      p.data()[idx] = orig;
    }
    const double fd = (fp - fm) / (2 * h);
    const double scale = std::max({std::abs(fd), std::abs(analytic), 1e-8});
    if (std::abs(fd - analytic) / scale > 1e-3) {
      throw std::runtime_error("finite-difference mismatch at " + pname +
                               "[" + std::to_string(idx) + "]: analytic " +
                               std::to_string(analytic) + " vs fd " +
                               std::to_string(fd));
    }
    ++checked;
  }

  // Distillation-loss gradient w.r.t. every decoder parameter is exactly
  // absent (no buffer allocated, not merely small).
  model.params().zero_grads();
  {
    auto enc = model.encode(strong_images);
    std::map<std::string, teachers::TokenFeatureMap> translated;
    for (const auto& key : {"0:mock", "1:mock"}) {
      translated.emplace(key, model.translate(enc.features, key));
    }
    ssl::distillation_loss(translated, teacher_feats).total.backward();
  }
  for (const auto& [name, t] : model.params().all()) {
    if (name.rfind("decoder.", 0) == 0) {
      require(!t.has_grad(), "distillation leaked a gradient into " + name);
    }
  }
}

// ---------------------------------------------------------------------------
// criterion 5: frozen/EMA contracts

void criterion_frozen_ema() {
  auto setup = desk_setup(808);
  setup.ssl.ema.momentum = 0.98;
  ssl::Trainer trainer(setup, desk_manifest(), desk_dataset());
  std::vector<std::uint64_t> checksums;
  for (const auto& [key, handle] : trainer.teachers()) {
    checksums.push_back(handle->param_checksum());
  }
  for (int i = 0; i < 50; ++i) {
    trainer.run_one_step();
    std::size_t idx = 0;
    for (const auto& [key, handle] : trainer.teachers()) {
      require(handle->param_checksum() == checksums[idx++],
              "frozen teacher drifted at step " + std::to_string(i + 1));
    }
  }

  // EMA closed form under constant student parameters.
  student::StudentConfig cfg;
  cfg.embed_dim = 16;
  cfg.patch_size = 16;
  cfg.depth = 4;
  cfg.heads = 2;
  cfg.num_classes = 2;
  cfg.decoder_channels = 4;
  student::StudentModel ema(cfg, 64, {}, {}, 1);
  student::StudentModel frozen(cfg, 64, {}, {}, 2);
  std::map<std::string, std::vector<double>> theta0;
  for (const auto& [name, t] : ema.params().all()) theta0[name] = t.vec();
  const double m = 0.97;
  for (int k = 1; k <= 20; ++k) {
    ssl::ema_update(ema.params(), frozen.params(), m);
    const double mk = std::pow(m, k);
    for (const auto& [name, t] : ema.params().all()) {
      const auto& t0v = theta0.at(name);
      const auto& sv = frozen.params().at(name);
      for (std::int64_t i = 0; i < t.numel(); ++i) {
        const double want = mk * t0v[static_cast<std::size_t>(i)] +
                            (1 - mk) * sv.data()[i];
        if (std::abs(t.data()[i] - want) > 1e-10) {
          throw std::runtime_error("EMA closed form violated at step " +
                                   std::to_string(k));
        }
      }
    }
  }

  // momentum = 1 leaves the EMA teacher bit-identical through real steps.
  auto setup1 = desk_setup(809);
  setup1.ssl.ema.momentum = 1.0;
  ssl::Trainer t1(setup1, desk_manifest(), desk_dataset());
  std::vector<std::vector<double>> ema_before;
  for (const auto& [name, t] : t1.ema_model().params().all()) {
    ema_before.push_back(t.vec());
  }
  for (int i = 0; i < 5; ++i) t1.run_one_step();
  std::size_t pi = 0;
  for (const auto& [name, t] : t1.ema_model().params().all()) {
    require(t.vec() == ema_before[pi++], "momentum-1 EMA changed: " + name);
  }
}

// ---------------------------------------------------------------------------
// criterion 6: pseudo-labeling contracts

void criterion_pseudo_labeling() {
  // Coverage is non-increasing in tau on fixed logits.
  Rng rng(616);
  Tensor logits = Tensor::zeros({2, 4, 16, 16});
  for (auto& v : logits.vec()) v = rng.uniform(-3, 3);
  double prev = 1.0 + 1e-9;
  for (double tau = 0.25; tau <= 1.0; tau += 0.05) {
    const auto bundle = ssl::pseudo_label(logits, std::min(tau, 1.0));
    require(bundle.coverage <= prev + 1e-15,
            "coverage increased when tau rose to " + std::to_string(tau));
    prev = bundle.coverage;
  }

  // Uniform logits at tau 0.95: coverage 0, and a real first training step
  // completes with zero unsupervised loss (the zero head produces exactly
  // uniform class probabilities).
  Tensor uniform = Tensor::zeros({1, 4, 8, 8});
  require(ssl::pseudo_label(uniform, 0.95).coverage == 0.0,
          "uniform logits must be fully masked at tau 0.95");
  auto setup = desk_setup(606);
  ssl::Trainer trainer(setup, desk_manifest(), desk_dataset());
  const auto report = trainer.run_one_step();
  require(report.pseudo_coverage == 0.0, "first-step coverage must be 0");
  require(report.l_unsup == 0.0, "masked-out batch must cost 0");
  require(std::isfinite(report.total), "step must complete");
}

// ---------------------------------------------------------------------------
// criterion 7: determinism and resume

void criterion_determinism_resume() {
  auto setup = desk_setup(321);
  ssl::Trainer a(setup, desk_manifest(), desk_dataset());
  ssl::Trainer b(setup, desk_manifest(), desk_dataset());
  std::vector<ssl::LossReport> stream;
  for (int i = 0; i < 10; ++i) {
    const auto ra = a.run_one_step();
    const auto rb = b.run_one_step();
    require(ra.bitwise_equal(rb),
            "seeded runs diverged at step " + std::to_string(i + 1));
    stream.push_back(ra);
  }

  const int k = 5;
  ssl::Trainer first(setup, desk_manifest(), desk_dataset());
  for (int i = 0; i < k; ++i) first.run_one_step();
  const auto ckpt = work_dir() / "resume.ckpt";
  first.save_checkpoint(ckpt);
  ssl::Trainer resumed(setup, desk_manifest(), desk_dataset());
  resumed.load_checkpoint(ckpt);
  require(resumed.step() == k, "resume step counter");
  for (int i = k; i < 10; ++i) {
    const auto r = resumed.run_one_step();
    require(r.bitwise_equal(stream[static_cast<std::size_t>(i)]),
            "resumed run diverged at step " + std::to_string(i + 1));
  }
}

// ---------------------------------------------------------------------------
// criterion 8: synthetic end-to-end

ssl::TrainSetup e2e_setup(std::uint64_t seed, bool labeled_only,
                          const fs::path& out) {
  ssl::TrainSetup setup;
  setup.student_config.embed_dim = 32;
  setup.student_config.patch_size = 16;
  setup.student_config.depth = 4;
  setup.student_config.heads = 4;
  setup.student_config.mlp_ratio = 4.0;
  setup.student_config.num_classes = 4;
  setup.student_config.decoder_channels = 32;
  setup.crop_size = 64;
  setup.fusion = {1.0, 0.5};
  for (int i = 0; i < 2; ++i) {
    teachers::TeacherSpec t;
    t.kind = teachers::TeacherKind::kMock;
    t.embed_dim = 48;
    t.patch_size = 16;
    t.seed = 1000 + static_cast<std::uint64_t>(i);
    setup.teacher_specs.push_back(t);
  }
  if (labeled_only) setup.ssl.loss_weights = {1.0 / 3, 0.0, 0.0};
  // Desk-scale optimizer settings (see the training docs): the defaults
  // assume a pretrained encoder and a much longer schedule.
  setup.ssl.ema.momentum = 0.99;
  setup.optim.lr_encoder = 3e-4;
  setup.optim.lr_decoder = 1e-3;
  setup.batch_size = 8;
  setup.epochs = 40;
  setup.max_steps = 1000;
  setup.augment.weak.resize_min = 1.0;
  setup.augment.weak.resize_max = 1.25;
  setup.augment.weak.crop_size = 64;
  setup.seed = seed;
  setup.io.out_dir = out;
  setup.io.checkpoint_every_epochs = 0;
  setup.io.validate_every_epochs = 0;
  return setup;
}

void criterion_synthetic_e2e() {
  const fs::path root = work_dir() / "e2e-data";
  if (!fs::exists(root / "dataset.json")) {
    dp::SynthSpec spec;
    spec.num_images = 3334;  // 6:2:2 split yields exactly 2000 train tiles
    spec.image_size = 64;
    spec.seed = 7;
    dp::generate_synthetic_dataset(root, spec);
  }
  auto manifest = dp::partition_labeled(
      dp::build_manifest(root, 64, {6, 2, 2}, 42), 0.10, 42);
  require(manifest.count(dp::Split::kTrain) == 2000, "expected 2000 train tiles");
  require(manifest.labeled_train_count() == 200, "expected 200 labeled tiles");

  double distill_at_50 = 0.0, distill_at_1000 = 0.0;
  auto run = [&](bool labeled_only) {
    auto setup = e2e_setup(4711, labeled_only,
                           work_dir() / (labeled_only ? "e2e-base" : "e2e-mtdf"));
    ssl::Trainer trainer(setup, manifest, root);
    for (int i = 0; i < 1000; ++i) {
      const auto r = trainer.run_one_step();
      if (!labeled_only && r.step == 50) distill_at_50 = r.l_distill_total;
      if (!labeled_only && r.step == 1000) distill_at_1000 = r.l_distill_total;
    }
    return trainer.validate(/*use_ema=*/true).miou;
  };
  const double miou_mtdf = run(false);
  const double miou_base = run(true);
  std::printf("       e2e: mtdf mIoU %.2f%%, labeled-only %.2f%%, "
              "distill %.3f -> %.3f\n",
              miou_mtdf * 100, miou_base * 100, distill_at_50,
              distill_at_1000);
  // Full configuration must reach the labeled-only baseline minus one point.
  require(miou_mtdf >= miou_base - 0.01,
          "SSL+distillation run fell more than 1 point below the baseline");
  require(distill_at_50 > 0.0, "distillation loss missing at step 50");
  require(distill_at_1000 <= 0.5 * distill_at_50,
          "distillation loss failed to halve between step 50 and 1000");
}

// ---------------------------------------------------------------------------
// criterion 9: ablation plumbing

void criterion_ablation_plumbing() {
  // The three ablation rows map onto pure config switches:
  //   teacher x, fuse x : --lambda-d 0 --omega-d 0
  //   teacher o, fuse x : --omega-d 0
  //   teacher o, fuse o : defaults
  auto base = desk_setup(271);

  auto plain = base;
  plain.ssl.loss_weights = {1.0 / 3, 1.0 / 3, 0.0};
  plain.fusion = {1.0, 0.0};
  ssl::Trainer t_plain(plain, desk_manifest(), desk_dataset());
  t_plain.set_tracing(true);
  const auto r_plain = t_plain.run_one_step();
  require(r_plain.l_distill_per_teacher.empty() &&
              r_plain.l_distill_total == 0.0,
          "teacher-off run must carry no distillation terms");

  auto no_fuse = base;
  no_fuse.fusion = {1.0, 0.0};
  ssl::Trainer t_nofuse(no_fuse, desk_manifest(), desk_dataset());
  t_nofuse.set_tracing(true);
  const auto r_nofuse = t_nofuse.run_one_step();
  require(r_nofuse.l_distill_per_teacher.size() == 2 &&
              r_nofuse.l_distill_total > 0.0,
          "teacher-on run must carry per-teacher distillation losses");
  {
    const auto& tr = t_nofuse.last_trace();
    require(tr.valid, "trace missing");
    double max_diff = 0.0;
    for (std::int64_t i = 0; i < tr.forward.decoder_inputs[3].numel(); ++i) {
      max_diff = std::max(std::abs(tr.forward.decoder_inputs[3].data()[i] -
                                   tr.f_s.data()[i]),
                          max_diff);
    }
    require(max_diff == 0.0,
            "fuse-off decoder input must equal the raw student features");
  }

  ssl::Trainer t_full(base, desk_manifest(), desk_dataset());
  t_full.set_tracing(true);
  const auto r_full = t_full.run_one_step();
  require(r_full.l_distill_per_teacher.size() == 2,
          "full run must carry per-teacher distillation losses");
  {
    const auto& tr = t_full.last_trace();
    require(tr.valid && tr.forward.fused.defined(), "trace missing");
    require(tr.forward.decoder_inputs[3].impl() == tr.forward.fused.impl(),
            "decoder must consume the fused tensor");
    double max_diff = 0.0;
    for (std::int64_t i = 0; i < tr.forward.fused.numel(); ++i) {
      max_diff = std::max(
          std::abs(tr.forward.fused.data()[i] - tr.f_s.data()[i]), max_diff);
    }
    require(max_diff > 0.0,
            "fused decoder input must differ from the raw student features");
  }
}

}  // namespace

int main() {
  Harness harness;
  harness.run(1, "metric oracle suite", criterion_metric_oracle);
  harness.run(2, "published-table aggregation", criterion_table_aggregation);
  harness.run(3, "equation fidelity", criterion_equation_fidelity);
  harness.run(4, "gradient checks", criterion_gradient_checks);
  harness.run(5, "frozen/EMA contracts", criterion_frozen_ema);
  harness.run(6, "pseudo-labeling contracts", criterion_pseudo_labeling);
  harness.run(7, "determinism and resume", criterion_determinism_resume);
  harness.run(8, "synthetic end-to-end", criterion_synthetic_e2e);
  harness.run(9, "ablation plumbing", criterion_ablation_plumbing);
  if (harness.failures != 0) {
    std::printf("%d criterion(s) FAILED\n", harness.failures);
    return 1;
  }
  std::printf("all acceptance criteria passed\n");
  return 0;
}
