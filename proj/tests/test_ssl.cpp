// SPDX-License-Identifier: Apache-2.0
//
// Loss-equation fidelity against scalar oracles, pseudo-label threshold
// behaviour, EMA closed forms.

#include <doctest.h>

#include <cmath>

#include "vfmseg/core/error.hpp"
#include "vfmseg/core/ops.hpp"
#include "vfmseg/core/rng.hpp"
#include "vfmseg/ssl/losses.hpp"
#include "vfmseg/ssl/optimizer.hpp"

using vfmseg::Rng;
using vfmseg::Tensor;
namespace ssl = vfmseg::ssl;
namespace student = vfmseg::student;
namespace teachers = vfmseg::teachers;
namespace ops = vfmseg::ops;

namespace {

Tensor logits_bchw(int b, int c, int h, int w, std::uint64_t seed,
                   double scale = 2.0, bool requires_grad = false) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({b, c, h, w}, requires_grad);
  for (auto& v : t.vec()) v = rng.uniform(-scale, scale);
  return t;
}

// Scalar softmax cross-entropy for pixel (bi, i, j) of a BCHW logit block.
double pixel_ce(const Tensor& logits, int bi, int i, int j, int label) {
  const int c = static_cast<int>(logits.dim(1));
  const int h = static_cast<int>(logits.dim(2));
  const int w = static_cast<int>(logits.dim(3));
  std::vector<double> z(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    z[static_cast<std::size_t>(ch)] =
        logits.data()[((static_cast<std::size_t>(bi) * c + ch) * h + i) * w +
                      j];
  }
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double lse = 0.0;
  for (double v : z) lse += std::exp(v - mx);
  return std::log(lse) + mx - z[static_cast<std::size_t>(label)];
}

teachers::TokenFeatureMap map_of(Tensor t, int rows, int cols) {
  teachers::TokenFeatureMap fm;
  fm.data = std::move(t);
  fm.rows = rows;
  fm.cols = cols;
  return fm;
}

}  // namespace

TEST_CASE("supervised loss: certain prediction costs zero") {
  // One pixel, logits put all probability on the true class.
  Tensor logits = Tensor::from_data({1, 2, 1, 1}, {50.0, -50.0});
  std::vector<std::int32_t> labels{0};
  const Tensor loss = ssl::supervised_loss(logits, labels, 255);
  CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("supervised loss: uniform logits cost ln(C)") {
  Tensor logits = Tensor::zeros({1, 4, 2, 2});
  std::vector<std::int32_t> labels{0, 1, 2, 3};
  const Tensor loss = ssl::supervised_loss(logits, labels, 255);
  CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("supervised loss matches the scalar oracle with ignores") {
  Tensor logits = logits_bchw(1, 3, 2, 2, 5, 2.0, true);
  std::vector<std::int32_t> labels{2, 255, 0, 1};
  double expect = 0.0;
  expect += pixel_ce(logits, 0, 0, 0, 2);
  expect += pixel_ce(logits, 0, 1, 0, 0);
  expect += pixel_ce(logits, 0, 1, 1, 1);
  expect /= 3.0;  // three scored pixels
  const Tensor loss = ssl::supervised_loss(logits, labels, 255);
  CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-10));
  CHECK(loss.requires_grad());
}

TEST_CASE("supervised loss on an all-ignore batch is zero with no graph") {
  Tensor logits = logits_bchw(1, 3, 2, 2, 7, 2.0, true);
  std::vector<std::int32_t> labels{255, 255, 255, 255};
  const Tensor loss = ssl::supervised_loss(logits, labels, 255);
  CHECK(loss.item() == 0.0);
  CHECK_FALSE(loss.requires_grad());
}

TEST_CASE("pseudo labels: threshold keeps and drops as specified") {
  // Probabilities (0.96, 0.04) -> log ratio; tau 0.95 keeps.
  const double l0 = std::log(0.96), l1 = std::log(0.04);
  Tensor keep = Tensor::from_data({1, 2, 1, 1}, {l0, l1});
  const auto b1 = ssl::pseudo_label(keep, 0.95);
  CHECK(b1.hard_labels[0] == 0);
  CHECK(b1.confidence_mask[0] == 1);
  CHECK(b1.coverage == 1.0);
  // Probabilities (0.94, 0.06) -> masked out.
  Tensor drop = Tensor::from_data({1, 2, 1, 1},
                                  {std::log(0.94), std::log(0.06)});
  const auto b2 = ssl::pseudo_label(drop, 0.95);
  CHECK(b2.confidence_mask[0] == 0);
  CHECK(b2.coverage == 0.0);
  CHECK_THROWS_AS(ssl::pseudo_label(keep, 0.0), vfmseg::ConfigError);
  CHECK_THROWS_AS(ssl::pseudo_label(keep, 1.5), vfmseg::ConfigError);
}

TEST_CASE("pseudo labels carry no autograd state") {
  Tensor logits = logits_bchw(2, 3, 4, 4, 11, 2.0, true);
  const auto bundle = ssl::pseudo_label(logits, 0.5);
  CHECK(bundle.hard_labels.size() == 32);
  // Uses only plain vectors; nothing to check beyond types, but the weak
  // logits themselves must not have received gradients.
  CHECK_FALSE(logits.has_grad());
}

TEST_CASE("coverage is non-increasing in tau") {
  Tensor logits = logits_bchw(2, 4, 8, 8, 13, 3.0);
  double prev = 1.1;
  for (double tau : {0.3, 0.5, 0.7, 0.9, 0.95, 0.99, 1.0}) {
    const auto bundle = ssl::pseudo_label(logits, tau);
    CHECK(bundle.coverage <= prev + 1e-15);
    prev = bundle.coverage;
  }
}

TEST_CASE("unsupervised loss: coverage zero costs zero") {
  Tensor strong = logits_bchw(1, 3, 2, 2, 17, 2.0, true);
  Tensor uniform = Tensor::zeros({1, 3, 2, 2});
  const auto bundle = ssl::pseudo_label(uniform, 0.95);
  CHECK(bundle.coverage == 0.0);
  const Tensor loss = ssl::unsupervised_loss(strong, bundle);
  CHECK(loss.item() == 0.0);
  CHECK_FALSE(loss.requires_grad());
}

TEST_CASE("unsupervised loss: perfect agreement costs zero") {
  Tensor weak = Tensor::from_data({1, 2, 1, 2}, {9.0, -9.0, -9.0, 9.0});
  const auto bundle = ssl::pseudo_label(weak, 0.95);
  CHECK(bundle.coverage == 1.0);
  const Tensor loss = ssl::unsupervised_loss(weak, bundle);
  CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-7));
}

TEST_CASE("unsupervised loss normalizes by the full pixel population") {
  // Two pixels, one masked: loss = CE(masked-in) / 2, not / 1.
  Tensor strong = logits_bchw(1, 3, 1, 2, 19, 2.0, true);
  ssl::PseudoLabelBundle bundle;
  bundle.batch = 1;
  bundle.height = 1;
  bundle.width = 2;
  bundle.hard_labels = {1, 0};
  bundle.confidence_mask = {1, 0};
  bundle.coverage = 0.5;
  const Tensor loss = ssl::unsupervised_loss(strong, bundle);
  const double expect = pixel_ce(strong, 0, 0, 0, 1) / 2.0;
  CHECK(loss.item() == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("distillation loss closed forms") {
  // Translated equals teacher -> zero.
  Tensor a = logits_bchw(1, 1, 1, 1, 23);
  std::map<std::string, teachers::TokenFeatureMap> trans, feats;
  Tensor t1 = Tensor::from_data({1, 1, 1}, {3.0});
  trans.emplace("0:mock", map_of(t1, 1, 1));
  feats.emplace("0:mock", map_of(t1.detach(), 1, 1));
  auto r = ssl::distillation_loss(trans, feats);
  CHECK(r.total.item() == 0.0);
  // Single teacher, 1 token, 1 dim, difference 2 -> 4.
  trans.clear();
  feats.clear();
  trans.emplace("0:mock", map_of(Tensor::from_data({1, 1, 1}, {3.0}), 1, 1));
  feats.emplace("0:mock", map_of(Tensor::from_data({1, 1, 1}, {1.0}), 1, 1));
  r = ssl::distillation_loss(trans, feats);
  CHECK(r.total.item() == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(r.per_teacher.at("0:mock") == doctest::Approx(4.0));
  // Two teachers with losses 4 and 2 -> mean 3.
  trans.emplace("1:mock", map_of(Tensor::from_data({1, 1, 1}, {2.0}), 1, 1));
  feats.emplace("1:mock",
                map_of(Tensor::from_data({1, 1, 1}, {2.0 + std::sqrt(2.0)}),
                       1, 1));
  r = ssl::distillation_loss(trans, feats);
  CHECK(r.total.item() == doctest::Approx(3.0).epsilon(1e-12));
  // Mismatched teacher sets are a contract violation.
  feats.erase("1:mock");
  CHECK_THROWS_AS(ssl::distillation_loss(trans, feats),
                  vfmseg::ContractViolation);
}

TEST_CASE("distillation loss equals the Eq-style scalar oracle") {
  Rng rng(29);
  const int b = 2, n = 16, d = 8;
  Tensor pred = Tensor::zeros({b, n, d}, true);
  Tensor target = Tensor::zeros({b, n, d});
  for (auto& v : pred.vec()) v = rng.uniform(-1, 1);
  for (auto& v : target.vec()) v = rng.uniform(-1, 1);
  std::map<std::string, teachers::TokenFeatureMap> trans, feats;
  trans.emplace("0:mock", map_of(pred, 4, 4));
  feats.emplace("0:mock", map_of(target, 4, 4));
  const auto r = ssl::distillation_loss(trans, feats);
  double acc = 0.0;
  for (int i = 0; i < b * n; ++i) {
    double norm2 = 0.0;
    for (int k = 0; k < d; ++k) {
      const double diff = pred.data()[i * d + k] - target.data()[i * d + k];
      norm2 += diff * diff;
    }
    acc += norm2;
  }
  acc /= static_cast<double>(b * n);
  CHECK(r.total.item() == doctest::Approx(acc).epsilon(1e-12));
}

TEST_CASE("total loss composes exactly and reports every field") {
  ssl::LossWeights w;  // 1/3 each
  ssl::DistillationResult distill;
  distill.total = Tensor::scalar(0.3);
  distill.per_teacher["0:mock"] = 0.3;
  const auto tl = ssl::total_loss(Tensor::scalar(0.9), Tensor::scalar(0.6),
                                  distill, w, 0.25, 7);
  CHECK(tl.report.total == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(tl.total.item() == tl.report.total);
  CHECK(tl.report.l_sup == 0.9);
  CHECK(tl.report.l_unsup == 0.6);
  CHECK(tl.report.l_distill_total == 0.3);
  CHECK(tl.report.pseudo_coverage == 0.25);
  CHECK(tl.report.step == 7);
  // Composition exactness re-derived from the report's own fields.
  const double recomposed = w.lambda_l * tl.report.l_sup +
                            w.lambda_u * tl.report.l_unsup +
                            w.lambda_d * tl.report.l_distill_total;
  CHECK(std::abs(tl.report.total - recomposed) <= 1e-12);
  // Non-finite inputs fault with context.
  CHECK_THROWS_AS(ssl::total_loss(Tensor::scalar(std::nan("")),
                                  Tensor::scalar(0.0), distill, w, 0, 8),
                  vfmseg::NumericError);
  // Degenerate FixMatch form: lambda_d = 0.
  ssl::LossWeights fm{1.0, 0.5, 0.0};
  const auto tl2 = ssl::total_loss(Tensor::scalar(1.0), Tensor::scalar(2.0),
                                   distill, fm, 0, 9);
  CHECK(tl2.report.total == doctest::Approx(2.0));
}

TEST_CASE("loss report json round-trip is bitwise") {
  ssl::LossReport r;
  r.step = 12;
  r.l_sup = 0.123456789012345;
  r.l_unsup = 1e-17;
  r.l_distill_total = 3.14159;
  r.l_distill_per_teacher["0:mock"] = 1.5;
  r.l_distill_per_teacher["1:clip"] = 1.75;
  r.total = 0.5;
  r.pseudo_coverage = 0.25;
  r.lr_encoder = 5e-6;
  r.lr_decoder = 2e-4;
  const auto line = r.to_json_line();
  const auto back = ssl::LossReport::from_json_line(line);
  CHECK(back.bitwise_equal(r));
  ssl::LossReport other = r;
  other.l_sup = std::nextafter(r.l_sup, 1.0);
  CHECK_FALSE(back.bitwise_equal(other));
}

TEST_CASE("ema update boundaries and closed form") {
  student::StudentConfig cfg;
  cfg.embed_dim = 16;
  cfg.patch_size = 16;
  cfg.depth = 4;
  cfg.heads = 2;
  cfg.pyramid_taps = {0, 1, 2, 3};
  cfg.num_classes = 2;
  cfg.decoder_channels = 4;
  student::StudentModel s(cfg, 64, {}, {}, 1);
  student::StudentModel t(cfg, 64, {}, {}, 2);

  // momentum 1: teacher bit-identical.
  student::StudentModel t1(cfg, 64, {}, {}, 2);
  ssl::ema_update(t1.params(), s.params(), 1.0);
  {
    auto it = t.params().all().begin();
    auto jt = t1.params().all().begin();
    for (; it != t.params().all().end(); ++it, ++jt) {
      REQUIRE(it->second.vec() == jt->second.vec());
    }
  }
  // momentum 0: teacher copies the student.
  student::StudentModel t0(cfg, 64, {}, {}, 2);
  ssl::ema_update(t0.params(), s.params(), 0.0);
  {
    auto it = s.params().all().begin();
    auto jt = t0.params().all().begin();
    for (; it != s.params().all().end(); ++it, ++jt) {
      REQUIRE(it->second.vec() == jt->second.vec());
    }
  }
  // Scalar example: momentum 0.999, prev 1, student 0 -> 0.999.
  student::ParamStore a, b;
  Rng rng(3);
  Tensor pa = a.create_const("x", {1}, 1.0);
  Tensor pb = b.create_const("x", {1}, 0.0);
  ssl::ema_update(a, b, 0.999);
  CHECK(pa.item() == doctest::Approx(0.999).epsilon(1e-15));

  // Closed form after k steps with constant student: m^k p0 + (1-m^k) s.
  const double m = 0.9;
  student::StudentModel teacher(cfg, 64, {}, {}, 7);
  student::StudentModel frozen_student(cfg, 64, {}, {}, 8);
  const auto p0 = teacher.params().at("encoder.patch_embed.weight").clone();
  const auto sv = frozen_student.params().at("encoder.patch_embed.weight");
  for (int k = 1; k <= 20; ++k) {
    ssl::ema_update(teacher.params(), frozen_student.params(), m);
    const auto now = teacher.params().at("encoder.patch_embed.weight");
    const double mk = std::pow(m, k);
    for (std::int64_t i = 0; i < now.numel(); ++i) {
      const double want = mk * p0.data()[i] + (1 - mk) * sv.data()[i];
      REQUIRE(std::abs(now.data()[i] - want) < 1e-10);
    }
  }
}

TEST_CASE("adamw skips parameters without gradients") {
  student::ParamStore store;
  Rng rng(5);
  Tensor p1 = store.create("a", {4}, 0.1, rng);
  Tensor p2 = store.create("b", {4}, 0.1, rng);
  const auto p2_before = p2.vec();
  ssl::AdamW opt(store, {});
  // Only p1 gets a gradient.
  Tensor loss = ops::sum_all(ops::mul(p1, p1));
  loss.backward();
  opt.step();
  CHECK(p2.vec() == p2_before);
  CHECK(p1.vec() != p2_before);
}

TEST_CASE("adamw lr groups split encoder from the rest") {
  student::ParamStore store;
  Rng rng(5);
  store.create("encoder.w", {1}, 0.1, rng);
  store.create("decoder.w", {1}, 0.1, rng);
  ssl::AdamWConfig cfg;
  cfg.lr_encoder = 5e-6;
  cfg.lr_decoder = 2e-4;
  ssl::AdamW opt(store, cfg);
  CHECK(opt.lr_for("encoder.w") == 5e-6);
  CHECK(opt.lr_for("decoder.w") == 2e-4);
  CHECK(opt.lr_for("translator.0:mock.w1") == 2e-4);
  CHECK(opt.lr_for("projector.0:mock.weight") == 2e-4);
}

TEST_CASE("adamw matches a hand-stepped scalar update") {
  student::ParamStore store;
  Tensor p = store.create_const("decoder.w", {1}, 0.5);
  ssl::AdamWConfig cfg;
  cfg.lr_decoder = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.99;
  cfg.eps = 1e-8;
  cfg.weight_decay = 0.01;
  ssl::AdamW opt(store, cfg);
  Tensor loss = ops::scale(p, 3.0);  // dL/dp = 3
  loss.backward();
  opt.step();
  // m=0.3, v=0.09; mhat=3, vhat=9 -> update = 3/(3+1e-8) + 0.01*0.5
  const double expect = 0.5 - 0.1 * (3.0 / (3.0 + 1e-8) + 0.01 * 0.5);
  CHECK(p.item() == doctest::Approx(expect).epsilon(1e-12));
}
