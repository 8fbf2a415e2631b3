// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/student/student.hpp"

#include <cmath>
#include <cstring>

#include "vfmseg/core/error.hpp"
#include "vfmseg/core/ops.hpp"

namespace vfmseg::student {

void StudentConfig::validate(int crop_size) const {
  if (embed_dim <= 0 || depth <= 0 || heads <= 0 || num_classes <= 0 ||
      decoder_channels <= 0 || patch_size <= 0) {
    throw ConfigError("student config fields must be positive");
  }
  if (embed_dim % heads != 0) {
    throw ConfigError("embed_dim must be divisible by heads");
  }
  for (int i = 1; i < 4; ++i) {
    if (pyramid_taps[static_cast<std::size_t>(i)] <=
        pyramid_taps[static_cast<std::size_t>(i - 1)]) {
      throw ConfigError("pyramid_taps must be strictly increasing");
    }
  }
  if (pyramid_taps[0] < 0 || pyramid_taps[3] != depth - 1) {
    throw ConfigError("last pyramid tap must be the final encoder block");
  }
  if (crop_size % patch_size != 0) {
    throw ConfigError("patch_size must divide the crop size");
  }
}

InferenceMode mode_from_name(const std::string& name) {
  if (name == "fused") return InferenceMode::kFused;
  if (name == "plain") return InferenceMode::kPlain;
  throw ConfigError("unknown inference mode '" + name + "'");
}

std::string mode_name(InferenceMode mode) {
  return mode == InferenceMode::kFused ? "fused" : "plain";
}

Tensor ParamStore::create(const std::string& name, Shape shape,
                          double init_std, Rng& rng) {
  if (params_.count(name) != 0) {
    throw ContractViolation("duplicate parameter '" + name + "'");
  }
  Tensor t = init_std > 0.0
                 ? Tensor::randn_trunc(std::move(shape), init_std, rng, true)
                 : Tensor::zeros(std::move(shape), true);
  params_.emplace(name, t);
  return t;
}

Tensor ParamStore::create_zeros(const std::string& name, Shape shape) {
  if (params_.count(name) != 0) {
    throw ContractViolation("duplicate parameter '" + name + "'");
  }
  Tensor t = Tensor::zeros(std::move(shape), true);
  params_.emplace(name, t);
  return t;
}

Tensor ParamStore::create_const(const std::string& name, Shape shape,
                                double value) {
  if (params_.count(name) != 0) {
    throw ContractViolation("duplicate parameter '" + name + "'");
  }
  Tensor t = Tensor::full(std::move(shape), value, true);
  params_.emplace(name, t);
  return t;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) {
    throw ContractViolation("unknown parameter '" + name + "'");
  }
  return it->second;
}

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void ParamStore::copy_values_from(const ParamStore& other) {
  if (other.params_.size() != params_.size()) {
    throw ContractViolation("param store size mismatch");
  }
  auto it = params_.begin();
  auto ot = other.params_.begin();
  for (; it != params_.end(); ++it, ++ot) {
    if (it->first != ot->first || it->second.numel() != ot->second.numel()) {
      throw ContractViolation("param store layout mismatch at '" + it->first +
                              "'");
    }
    std::memcpy(it->second.data(), ot->second.data(),
                static_cast<std::size_t>(it->second.numel()) * sizeof(double));
  }
}

void ParamStore::set_requires_grad(bool value) {
  for (auto& [name, t] : params_) t.set_requires_grad(value);
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

StudentModel::StudentModel(const StudentConfig& config, int crop_size,
                           std::vector<TeacherBinding> teachers,
                           FusionWeights fusion, std::uint64_t init_seed)
    : config_(config),
      crop_size_(crop_size),
      teachers_(std::move(teachers)),
      fusion_(fusion) {
  config_.validate(crop_size);
  if (fusion_.omega_s < 0.0 || fusion_.omega_d < 0.0 ||
      (fusion_.omega_s == 0.0 && fusion_.omega_d == 0.0)) {
    throw ConfigError("fusion weights must be non-negative, not both zero");
  }
  Rng rng(Rng::derive({init_seed, Rng::hash_str("student-init")}));
  const std::int64_t d = config_.embed_dim;
  const std::int64_t pd =
      static_cast<std::int64_t>(3) * config_.patch_size * config_.patch_size;
  const std::int64_t hidden =
      static_cast<std::int64_t>(std::lround(config_.mlp_ratio * d));
  const int grid = crop_size_ / config_.patch_size;
  constexpr double kStd = 0.02;

  params_.create("encoder.patch_embed.weight", {pd, d}, kStd, rng);
  params_.create_zeros("encoder.patch_embed.bias", {d});
  params_.create("encoder.pos_embed",
                 {static_cast<std::int64_t>(grid) * grid, d}, kStd, rng);
  for (int i = 0; i < config_.depth; ++i) {
    const std::string p = "encoder.blocks." + std::to_string(i) + ".";
    params_.create_const(p + "ln1.gamma", {d}, 1.0);
    params_.create_zeros(p + "ln1.beta", {d});
    params_.create(p + "attn.wq", {d, d}, kStd, rng);
    params_.create_zeros(p + "attn.bq", {d});
    params_.create(p + "attn.wk", {d, d}, kStd, rng);
    params_.create_zeros(p + "attn.bk", {d});
    params_.create(p + "attn.wv", {d, d}, kStd, rng);
    params_.create_zeros(p + "attn.bv", {d});
    params_.create(p + "attn.wo", {d, d}, kStd, rng);
    params_.create_zeros(p + "attn.bo", {d});
    params_.create_const(p + "ln2.gamma", {d}, 1.0);
    params_.create_zeros(p + "ln2.beta", {d});
    params_.create(p + "mlp.w1", {d, hidden}, kStd, rng);
    params_.create_zeros(p + "mlp.b1", {hidden});
    params_.create(p + "mlp.w2", {hidden, d}, kStd, rng);
    params_.create_zeros(p + "mlp.b2", {d});
  }
  params_.create_const("encoder.norm.gamma", {d}, 1.0);
  params_.create_zeros("encoder.norm.beta", {d});

  for (const auto& binding : teachers_) {
    if (binding.dim <= 0) {
      throw ConfigError("teacher binding '" + binding.key +
                        "' has no embed dim");
    }
    const std::string tp = "translator." + binding.key + ".";
    // Hidden width equals d_s (square first layer).
    params_.create(tp + "w1", {d, d}, kStd, rng);
    params_.create_zeros(tp + "b1", {d});
    params_.create(tp + "w2", {d, binding.dim}, kStd, rng);
    params_.create_zeros(tp + "b2", {binding.dim});
    const std::string pp = "projector." + binding.key + ".";
    params_.create(pp + "weight", {binding.dim, d}, kStd, rng);
    params_.create_zeros(pp + "bias", {d});
  }

  const std::int64_t ch = config_.decoder_channels;
  for (int i = 0; i < 4; ++i) {
    const std::string p = "decoder.reassemble." + std::to_string(i) + ".";
    params_.create(p + "proj.weight", {ch, d, 1, 1}, kStd, rng);
    params_.create_zeros(p + "proj.bias", {ch});
    params_.create(p + "up.weight", {ch, ch, 2, 2}, kStd, rng);
    params_.create_zeros(p + "up.bias", {ch});
  }
  for (int i = 0; i < 4; ++i) {
    const std::string p = "decoder.fusion." + std::to_string(i) + ".";
    params_.create(p + "conv1.weight", {ch, ch, 3, 3}, kStd, rng);
    params_.create_zeros(p + "conv1.bias", {ch});
    params_.create(p + "conv2.weight", {ch, ch, 3, 3}, kStd, rng);
    params_.create_zeros(p + "conv2.bias", {ch});
  }
  params_.create("decoder.head.conv1.weight", {ch, ch, 3, 3}, kStd, rng);
  params_.create_zeros("decoder.head.conv1.bias", {ch});
  // Zero head: constant logits at init keep early pseudo-labels fully masked.
  params_.create_zeros("decoder.head.conv2.weight",
                       {static_cast<std::int64_t>(config_.num_classes), ch, 1,
                        1});
  params_.create_zeros("decoder.head.conv2.bias",
                       {static_cast<std::int64_t>(config_.num_classes)});
}

Tensor StudentModel::pos_for_grid(int rows, int cols) const {
  const int native = crop_size_ / config_.patch_size;
  const Tensor& pos = params_.at("encoder.pos_embed");
  if (rows == native && cols == native) return pos;
  // Bilinear-resample the table to the requested grid (no grad to the
  // resampled copy; non-native grids only occur at evaluation time).
  const int d = config_.embed_dim;
  std::vector<double> chw(static_cast<std::size_t>(d) * native * native);
  const double* src = pos.data();
  for (int t = 0; t < native * native; ++t) {
    for (int ch = 0; ch < d; ++ch) {
      chw[static_cast<std::size_t>(ch) * native * native + t] =
          src[static_cast<std::size_t>(t) * d + ch];
    }
  }
  const auto resized =
      ops::raw::bilinear_chw(chw.data(), d, native, native, rows, cols, true);
  Tensor out = Tensor::zeros({static_cast<std::int64_t>(rows) * cols, d});
  double* dst = out.data();
  for (int t = 0; t < rows * cols; ++t) {
    for (int ch = 0; ch < d; ++ch) {
      dst[static_cast<std::size_t>(t) * d + ch] =
          resized[static_cast<std::size_t>(ch) * rows * cols + t];
    }
  }
  return out;
}

namespace {

// [B,3,H,W] -> [B, N, 3*p*p]
Tensor patchify(const Tensor& images, int patch) {
  const std::int64_t b = images.dim(0);
  const int h = static_cast<int>(images.dim(2));
  const int w = static_cast<int>(images.dim(3));
  const int gr = h / patch;
  const int gc = w / patch;
  const std::int64_t n = static_cast<std::int64_t>(gr) * gc;
  const std::int64_t pd = static_cast<std::int64_t>(3) * patch * patch;
  Tensor out = Tensor::zeros({b, n, pd});
  const double* src = images.data();
  double* dst = out.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::int64_t bi = 0; bi < b; ++bi) {
    const double* img = src + static_cast<std::size_t>(bi) * 3 * plane;
    for (int ti = 0; ti < gr; ++ti) {
      for (int tj = 0; tj < gc; ++tj) {
        double* tok = dst + ((static_cast<std::size_t>(bi) * n) +
                             static_cast<std::size_t>(ti) * gc + tj) *
                                pd;
        std::size_t o = 0;
        for (int ch = 0; ch < 3; ++ch) {
          for (int pi = 0; pi < patch; ++pi) {
            const double* row = img + static_cast<std::size_t>(ch) * plane +
                                (static_cast<std::size_t>(ti) * patch + pi) * w +
                                static_cast<std::size_t>(tj) * patch;
            for (int pj = 0; pj < patch; ++pj) tok[o++] = row[pj];
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

Tensor StudentModel::encoder_block(const Tensor& x, int index) const {
  const std::string p = "encoder.blocks." + std::to_string(index) + ".";
  const std::int64_t b = x.dim(0);
  const std::int64_t n = x.dim(1);
  const std::int64_t d = x.dim(2);
  const std::int64_t heads = config_.heads;
  const std::int64_t dh = d / heads;
  Tensor h = ops::layer_norm(x, params_.at(p + "ln1.gamma"),
                             params_.at(p + "ln1.beta"));
  auto split = [&](const Tensor& t) {
    return ops::reshape(
        ops::permute(ops::reshape(t, {b, n, heads, dh}), {0, 2, 1, 3}),
        {b * heads, n, dh});
  };
  Tensor q = split(ops::add_rowvec(ops::linear(h, params_.at(p + "attn.wq")),
                                   params_.at(p + "attn.bq")));
  Tensor k = split(ops::add_rowvec(ops::linear(h, params_.at(p + "attn.wk")),
                                   params_.at(p + "attn.bk")));
  Tensor v = split(ops::add_rowvec(ops::linear(h, params_.at(p + "attn.wv")),
                                   params_.at(p + "attn.bv")));
  Tensor scores = ops::scale(ops::bmm(q, k, /*trans_b=*/true),
                             1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor ctx = ops::bmm(ops::softmax_lastdim(scores), v);
  ctx = ops::reshape(
      ops::permute(ops::reshape(ctx, {b, heads, n, dh}), {0, 2, 1, 3}),
      {b, n, d});
  Tensor attn_out = ops::add_rowvec(ops::linear(ctx, params_.at(p + "attn.wo")),
                                    params_.at(p + "attn.bo"));
  Tensor y = ops::add(x, attn_out);
  Tensor m = ops::layer_norm(y, params_.at(p + "ln2.gamma"),
                             params_.at(p + "ln2.beta"));
  m = ops::gelu(ops::add_rowvec(ops::linear(m, params_.at(p + "mlp.w1")),
                                params_.at(p + "mlp.b1")));
  m = ops::add_rowvec(ops::linear(m, params_.at(p + "mlp.w2")),
                      params_.at(p + "mlp.b2"));
  return ops::add(y, m);
}

EncodeResult StudentModel::encode(const Tensor& images) const {
  if (images.ndim() != 4 || images.dim(1) != 3) {
    throw ContractViolation("encode: expects images [B,3,H,W]");
  }
  const int h = static_cast<int>(images.dim(2));
  const int w = static_cast<int>(images.dim(3));
  if (h % config_.patch_size != 0 || w % config_.patch_size != 0) {
    throw ContractViolation("encode: input size not divisible by patch size");
  }
  const int rows = h / config_.patch_size;
  const int cols = w / config_.patch_size;
  Tensor x = ops::add_rowvec(ops::linear(patchify(images, config_.patch_size),
                                         params_.at("encoder.patch_embed.weight")),
                             params_.at("encoder.patch_embed.bias"));
  x = ops::add_broadcast_batch(x, pos_for_grid(rows, cols));

  EncodeResult result;
  int tap_slot = 0;
  for (int i = 0; i < config_.depth; ++i) {
    x = encoder_block(x, i);
    while (tap_slot < 3 &&
           config_.pyramid_taps[static_cast<std::size_t>(tap_slot)] == i) {
      auto& level = result.pyramid.levels[static_cast<std::size_t>(tap_slot)];
      level.data = x;
      level.rows = rows;
      level.cols = cols;
      level.source = "student";
      ++tap_slot;
    }
  }
  // The deepest tap is the final block, normalized; f_S aliases it.
  Tensor f_s = ops::layer_norm(x, params_.at("encoder.norm.gamma"),
                               params_.at("encoder.norm.beta"));
  auto& deepest = result.pyramid.levels[3];
  deepest.data = f_s;
  deepest.rows = rows;
  deepest.cols = cols;
  deepest.source = "student";
  result.features = deepest;
  return result;
}

teachers::TokenFeatureMap StudentModel::translate(
    const teachers::TokenFeatureMap& f_s, const std::string& key) const {
  const std::string p = "translator." + key + ".";
  bool known = false;
  for (const auto& b : teachers_) known = known || b.key == key;
  if (!known) {
    throw ConfigError("translate: unknown teacher '" + key + "'");
  }
  if (f_s.data.dim(-1) != config_.embed_dim) {
    throw ContractViolation("translate: input dim is not d_s");
  }
  Tensor hidden = ops::relu(ops::add_rowvec(
      ops::linear(f_s.data, params_.at(p + "w1")), params_.at(p + "b1")));
  Tensor out = ops::add_rowvec(ops::linear(hidden, params_.at(p + "w2")),
                               params_.at(p + "b2"));
  teachers::TokenFeatureMap fm = f_s;
  fm.data = out;
  return fm;
}

teachers::TokenFeatureMap StudentModel::project_back(
    const teachers::TokenFeatureMap& translated, const std::string& key) const {
  const std::string p = "projector." + key + ".";
  const Tensor& w = params_.at(p + "weight");
  if (translated.data.dim(-1) != w.dim(0)) {
    throw ContractViolation("project_back: input dim does not match teacher '" +
                            key + "'");
  }
  Tensor out = ops::add_rowvec(ops::linear(translated.data, w),
                               params_.at(p + "bias"));
  teachers::TokenFeatureMap fm = translated;
  fm.data = out;
  fm.source = "student";
  return fm;
}

teachers::TokenFeatureMap StudentModel::fuse(
    const teachers::TokenFeatureMap& f_s,
    const std::vector<teachers::TokenFeatureMap>& projected) const {
  Tensor acc;
  for (const auto& fm : projected) {
    if (fm.data.shape() != f_s.data.shape()) {
      throw ContractViolation("fuse: projected map shape mismatch");
    }
    acc = acc.defined() ? ops::add(acc, fm.data) : fm.data;
  }
  Tensor out = ops::scale(f_s.data, fusion_.omega_s);
  if (acc.defined() && fusion_.omega_d != 0.0) {
    out = ops::add(out, ops::scale(acc, fusion_.omega_d));
  }
  teachers::TokenFeatureMap fm = f_s;
  fm.data = out;
  return fm;
}

Tensor StudentModel::reassemble(const Tensor& tokens, int rows, int cols,
                                int tap) const {
  const std::string p = "decoder.reassemble." + std::to_string(tap) + ".";
  const std::int64_t b = tokens.dim(0);
  const std::int64_t d = tokens.dim(2);
  // [B,N,d] -> [B,d,rows,cols]
  Tensor grid = ops::permute(
      ops::reshape(tokens, {b, rows, cols, d}), {0, 3, 1, 2});
  Tensor x = ops::conv2d(grid, params_.at(p + "proj.weight"),
                         params_.at(p + "proj.bias"), 0);
  return ops::conv_transpose2d_k2s2(x, params_.at(p + "up.weight"),
                                    params_.at(p + "up.bias"));
}

Tensor StudentModel::residual_unit(const Tensor& x, int index) const {
  const std::string p = "decoder.fusion." + std::to_string(index) + ".";
  Tensor h = ops::conv2d(ops::relu(x), params_.at(p + "conv1.weight"),
                         params_.at(p + "conv1.bias"), 1);
  h = ops::conv2d(ops::relu(h), params_.at(p + "conv2.weight"),
                  params_.at(p + "conv2.bias"), 1);
  return ops::add(x, h);
}

Tensor StudentModel::decode(const DecoderPyramid& pyramid, int out_h,
                            int out_w, ForwardTrace* trace) const {
  const auto& deepest = pyramid.levels[3];
  const int rows = deepest.rows;
  const int cols = deepest.cols;
  for (const auto& level : pyramid.levels) {
    if (level.rows != rows || level.cols != cols ||
        level.data.dim(0) != deepest.data.dim(0)) {
      throw ContractViolation("decode: pyramid levels disagree on B or grid");
    }
  }
  if (out_h % rows != 0 || out_w % cols != 0) {
    throw ConfigError("decode: out size " + std::to_string(out_h) + "x" +
                      std::to_string(out_w) +
                      " is not a multiple of the token grid");
  }
  if (trace != nullptr) {
    for (int i = 0; i < 4; ++i) {
      trace->decoder_inputs[static_cast<std::size_t>(i)] =
          pyramid.levels[static_cast<std::size_t>(i)].data;
    }
  }
  // All taps are projected and upsampled to one unified resolution (twice
  // the token grid), then refined deep-to-shallow through residual units.
  std::array<Tensor, 4> unified;
  for (int i = 0; i < 4; ++i) {
    unified[static_cast<std::size_t>(i)] = reassemble(
        pyramid.levels[static_cast<std::size_t>(i)].data, rows, cols, i);
  }
  Tensor x = residual_unit(unified[3], 0);
  x = residual_unit(ops::add(x, unified[2]), 1);
  x = residual_unit(ops::add(x, unified[1]), 2);
  x = residual_unit(ops::add(x, unified[0]), 3);
  x = ops::relu(ops::conv2d(x, params_.at("decoder.head.conv1.weight"),
                            params_.at("decoder.head.conv1.bias"), 1));
  x = ops::conv2d(x, params_.at("decoder.head.conv2.weight"),
                  params_.at("decoder.head.conv2.bias"), 0);
  return ops::upsample_bilinear(x, out_h, out_w, false);
}

Tensor StudentModel::predict(const Tensor& images, InferenceMode mode,
                             int out_h, int out_w, ForwardTrace* trace) const {
  EncodeResult enc = encode(images);
  if (mode == InferenceMode::kFused) {
    std::vector<teachers::TokenFeatureMap> projected;
    projected.reserve(teachers_.size());
    for (const auto& binding : teachers_) {
      projected.push_back(
          project_back(translate(enc.features, binding.key), binding.key));
    }
    teachers::TokenFeatureMap fused = fuse(enc.features, projected);
    enc.pyramid.levels[3] = fused;
    if (trace != nullptr) trace->fused = fused.data;
  }
  return decode(enc.pyramid, out_h, out_w, trace);
}

}  // namespace vfmseg::student
