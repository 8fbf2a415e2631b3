// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/teachers/teachers.hpp"

#include <cmath>
#include <cstring>

#include "vfmseg/core/archive.hpp"
#include "vfmseg/core/error.hpp"
#include "vfmseg/core/ops.hpp"
#include "vfmseg/core/rng.hpp"

namespace vfmseg::teachers {

TeacherKind kind_from_name(const std::string& name) {
  if (name == "dinov2") return TeacherKind::kDinov2;
  if (name == "clip") return TeacherKind::kClip;
  if (name == "sam") return TeacherKind::kSam;
  if (name == "mock") return TeacherKind::kMock;
  throw ConfigError("unknown teacher kind '" + name + "'");
}

std::string kind_name(TeacherKind kind) {
  switch (kind) {
    case TeacherKind::kDinov2: return "dinov2";
    case TeacherKind::kClip: return "clip";
    case TeacherKind::kSam: return "sam";
    case TeacherKind::kMock: return "mock";
  }
  return "mock";
}

std::uint64_t checksum_tensors(const std::vector<Tensor>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const Tensor& t : params) {
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(t.data());
    const std::size_t n = static_cast<std::size_t>(t.numel()) * sizeof(double);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

namespace {

void check_finite_input(const Tensor& images) {
  const double* d = images.data();
  const auto n = static_cast<std::size_t>(images.numel());
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(d[i])) {
      throw DataError("teacher input contains non-finite values");
    }
  }
}

// Resizes [B,3,H,W] to the nearest patch-divisible size (at least one patch).
Tensor resize_to_patch_multiple(const Tensor& images, int patch, int* out_h,
                                int* out_w) {
  const int h = static_cast<int>(images.dim(2));
  const int w = static_cast<int>(images.dim(3));
  const int th = std::max(patch, static_cast<int>(std::lround(
                                     static_cast<double>(h) / patch)) *
                                     patch);
  const int tw = std::max(patch, static_cast<int>(std::lround(
                                     static_cast<double>(w) / patch)) *
                                     patch);
  *out_h = th;
  *out_w = tw;
  if (th == h && tw == w) return images;
  return ops::upsample_bilinear(images, th, tw, false);
}

// [B,3,H,W] -> [B, N, 3*p*p] patch flattening.
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

Tensor normalize_images(const Tensor& images, const std::array<double, 3>& mean,
                        const std::array<double, 3>& std_dev) {
  Tensor out = images.clone();
  const std::int64_t b = images.dim(0);
  const std::size_t plane =
      static_cast<std::size_t>(images.dim(2)) * images.dim(3);
  double* d = out.data();
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (int ch = 0; ch < 3; ++ch) {
      double* p = d + (static_cast<std::size_t>(bi) * 3 +
                       static_cast<std::size_t>(ch)) *
                          plane;
      const double mu = mean[static_cast<std::size_t>(ch)];
      const double inv = 1.0 / std_dev[static_cast<std::size_t>(ch)];
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mu) * inv;
    }
  }
  return out;
}

/// Frozen random linear patch embedding followed by one frozen random
/// channel-mixing layer with tanh. A pure function of (seed, input); gives
/// hermetic tests a teacher with nontrivial, input-dependent features.
class MockTeacher final : public TeacherHandle {
 public:
  MockTeacher(int embed_dim, int patch, std::uint64_t seed)
      : dim_(embed_dim), patch_(patch) {
    const std::int64_t pd = static_cast<std::int64_t>(3) * patch * patch;
    Rng rng(Rng::derive({seed, Rng::hash_str("mock-teacher")}));
    embed_ = randn(rng, {pd, dim_}, 1.0 / std::sqrt(static_cast<double>(pd)));
    mix_w_ = randn(rng, {static_cast<std::int64_t>(dim_), dim_},
                   1.0 / std::sqrt(static_cast<double>(dim_)));
    mix_b_ = randn(rng, {static_cast<std::int64_t>(dim_)}, 0.1);
  }

  TokenFeatureMap extract(const Tensor& images) const override {
    check_finite_input(images);
    NoGradGuard no_grad;
    int h = 0, w = 0;
    Tensor x = resize_to_patch_multiple(images, patch_, &h, &w);
    x = normalize_images(x, {0.5, 0.5, 0.5}, {0.5, 0.5, 0.5});
    Tensor tokens = ops::linear(patchify(x, patch_), embed_);
    tokens = ops::tanh_op(ops::add_rowvec(ops::linear(tokens, mix_w_), mix_b_));
    TokenFeatureMap fm;
    fm.data = tokens;
    fm.rows = h / patch_;
    fm.cols = w / patch_;
    fm.source = "teacher:mock";
    return fm;
  }

  std::uint64_t param_checksum() const override {
    return checksum_tensors({embed_, mix_w_, mix_b_});
  }

  int embed_dim() const override { return dim_; }
  int patch_size() const override { return patch_; }
  TeacherKind kind() const override { return TeacherKind::kMock; }

 private:
  static Tensor randn(Rng& rng, Shape shape, double stddev) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.vec()) v = rng.normal() * stddev;
    return t;
  }

  int dim_;
  int patch_;
  Tensor embed_, mix_w_, mix_b_;
};

struct VitBlockParams {
  Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b, w1, b1, w2, b2;
};

/// Pre-norm ViT encoder restored from a weight archive. Covers the
/// foundation-model adapter kinds; the archive metadata pins the
/// architecture and the normalization statistics of the pretraining recipe.
class VitTeacher final : public TeacherHandle {
 public:
  VitTeacher(TeacherKind kind, VitArchConfig cfg, Archive archive)
      : kind_(kind), cfg_(cfg) {
    patch_embed_w_ = take(archive, "patch_embed.weight");
    patch_embed_b_ = take(archive, "patch_embed.bias");
    pos_ = take(archive, "pos_embed");
    if (cfg_.class_token) cls_ = take(archive, "cls_token");
    for (int i = 0; i < cfg_.depth; ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      VitBlockParams blk;
      blk.ln1_g = take(archive, p + "ln1.gamma");
      blk.ln1_b = take(archive, p + "ln1.beta");
      blk.wq = take(archive, p + "attn.wq");
      blk.bq = take(archive, p + "attn.bq");
      blk.wk = take(archive, p + "attn.wk");
      blk.bk = take(archive, p + "attn.bk");
      blk.wv = take(archive, p + "attn.wv");
      blk.bv = take(archive, p + "attn.bv");
      blk.wo = take(archive, p + "attn.wo");
      blk.bo = take(archive, p + "attn.bo");
      blk.ln2_g = take(archive, p + "ln2.gamma");
      blk.ln2_b = take(archive, p + "ln2.beta");
      blk.w1 = take(archive, p + "mlp.w1");
      blk.b1 = take(archive, p + "mlp.b1");
      blk.w2 = take(archive, p + "mlp.w2");
      blk.b2 = take(archive, p + "mlp.b2");
      blocks_.push_back(std::move(blk));
    }
    lnf_g_ = take(archive, "norm.gamma");
    lnf_b_ = take(archive, "norm.beta");
    if (patch_embed_w_.dim(1) != cfg_.embed_dim) {
      throw DataError("teacher archive embed dim " +
                      std::to_string(patch_embed_w_.dim(1)) +
                      " does not match declared " +
                      std::to_string(cfg_.embed_dim));
    }
  }

  TokenFeatureMap extract(const Tensor& images) const override {
    check_finite_input(images);
    NoGradGuard no_grad;
    int h = 0, w = 0;
    Tensor x = resize_to_patch_multiple(images, cfg_.patch_size, &h, &w);
    x = normalize_images(x, cfg_.img_mean, cfg_.img_std);
    const int gr = h / cfg_.patch_size;
    const int gc = w / cfg_.patch_size;
    Tensor tokens =
        ops::add_rowvec(ops::linear(patchify(x, cfg_.patch_size),
                                    patch_embed_w_),
                        patch_embed_b_);
    const std::int64_t b = tokens.dim(0);
    const std::int64_t n = tokens.dim(1);
    tokens = ops::add_broadcast_batch(tokens, pos_for_grid(gr, gc));
    if (cfg_.class_token) {
      Tensor with_cls = Tensor::zeros({b, n + 1, cfg_.embed_dim});
      const std::size_t d = static_cast<std::size_t>(cfg_.embed_dim);
      for (std::int64_t bi = 0; bi < b; ++bi) {
        std::memcpy(with_cls.data() + static_cast<std::size_t>(bi) * (n + 1) * d,
                    cls_.data(), d * sizeof(double));
        std::memcpy(
            with_cls.data() + (static_cast<std::size_t>(bi) * (n + 1) + 1) * d,
            tokens.data() + static_cast<std::size_t>(bi) * n * d,
            static_cast<std::size_t>(n) * d * sizeof(double));
      }
      tokens = with_cls;
    }
    for (const auto& blk : blocks_) {
      tokens = block_forward(tokens, blk);
    }
    tokens = ops::layer_norm(tokens, lnf_g_, lnf_b_);
    if (cfg_.class_token) {
      // Drop the class token; only patch tokens leave the adapter.
      Tensor patches = Tensor::zeros({b, n, cfg_.embed_dim});
      const std::size_t d = static_cast<std::size_t>(cfg_.embed_dim);
      for (std::int64_t bi = 0; bi < b; ++bi) {
        std::memcpy(
            patches.data() + static_cast<std::size_t>(bi) * n * d,
            tokens.data() + (static_cast<std::size_t>(bi) * (n + 1) + 1) * d,
            static_cast<std::size_t>(n) * d * sizeof(double));
      }
      tokens = patches;
    }
    TokenFeatureMap fm;
    fm.data = tokens;
    fm.rows = gr;
    fm.cols = gc;
    fm.source = "teacher:" + kind_name(kind_);
    return fm;
  }

  std::uint64_t param_checksum() const override {
    std::vector<Tensor> all{patch_embed_w_, patch_embed_b_, pos_, lnf_g_,
                            lnf_b_};
    if (cfg_.class_token) all.push_back(cls_);
    for (const auto& blk : blocks_) {
      for (const Tensor* t :
           {&blk.ln1_g, &blk.ln1_b, &blk.wq, &blk.bq, &blk.wk, &blk.bk,
            &blk.wv, &blk.bv, &blk.wo, &blk.bo, &blk.ln2_g, &blk.ln2_b,
            &blk.w1, &blk.b1, &blk.w2, &blk.b2}) {
        all.push_back(*t);
      }
    }
    return checksum_tensors(all);
  }

  int embed_dim() const override { return cfg_.embed_dim; }
  int patch_size() const override { return cfg_.patch_size; }
  TeacherKind kind() const override { return kind_; }

 private:
  static Tensor take(Archive& archive, const std::string& name) {
    auto it = archive.tensors.find(name);
    if (it == archive.tensors.end()) {
      throw DataError("teacher archive missing tensor '" + name + "'");
    }
    return it->second;
  }

  Tensor block_forward(const Tensor& x, const VitBlockParams& blk) const {
    const std::int64_t b = x.dim(0);
    const std::int64_t n = x.dim(1);
    const std::int64_t d = x.dim(2);
    const std::int64_t heads = cfg_.heads;
    const std::int64_t dh = d / heads;
    Tensor h = ops::layer_norm(x, blk.ln1_g, blk.ln1_b);
    auto split = [&](const Tensor& t) {
      return ops::reshape(
          ops::permute(ops::reshape(t, {b, n, heads, dh}), {0, 2, 1, 3}),
          {b * heads, n, dh});
    };
    Tensor q = split(ops::add_rowvec(ops::linear(h, blk.wq), blk.bq));
    Tensor k = split(ops::add_rowvec(ops::linear(h, blk.wk), blk.bk));
    Tensor v = split(ops::add_rowvec(ops::linear(h, blk.wv), blk.bv));
    Tensor scores =
        ops::scale(ops::bmm(q, k, /*trans_b=*/true),
                   1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor ctx = ops::bmm(ops::softmax_lastdim(scores), v);
    ctx = ops::reshape(
        ops::permute(ops::reshape(ctx, {b, heads, n, dh}), {0, 2, 1, 3}),
        {b, n, d});
    Tensor attn_out = ops::add_rowvec(ops::linear(ctx, blk.wo), blk.bo);
    Tensor y = ops::add(x, attn_out);
    Tensor m = ops::layer_norm(y, blk.ln2_g, blk.ln2_b);
    m = ops::gelu(ops::add_rowvec(ops::linear(m, blk.w1), blk.b1));
    m = ops::add_rowvec(ops::linear(m, blk.w2), blk.b2);
    return ops::add(y, m);
  }

  Tensor pos_for_grid(int gr, int gc) const {
    if (gr == cfg_.pos_grid && gc == cfg_.pos_grid) return pos_;
    // Interpolate the stored positional table to the current grid.
    const int d = cfg_.embed_dim;
    std::vector<double> chw(static_cast<std::size_t>(d) * cfg_.pos_grid *
                            cfg_.pos_grid);
    const double* src = pos_.data();
    for (int t = 0; t < cfg_.pos_grid * cfg_.pos_grid; ++t) {
      for (int ch = 0; ch < d; ++ch) {
        chw[static_cast<std::size_t>(ch) * cfg_.pos_grid * cfg_.pos_grid + t] =
            src[static_cast<std::size_t>(t) * d + ch];
      }
    }
    const auto resized = ops::raw::bilinear_chw(
        chw.data(), d, cfg_.pos_grid, cfg_.pos_grid, gr, gc, true);
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(gr) * gc, d});
    double* dst = out.data();
    for (int t = 0; t < gr * gc; ++t) {
      for (int ch = 0; ch < d; ++ch) {
        dst[static_cast<std::size_t>(t) * d + ch] =
            resized[static_cast<std::size_t>(ch) * gr * gc + t];
      }
    }
    return out;
  }

  TeacherKind kind_;
  VitArchConfig cfg_;
  Tensor patch_embed_w_, patch_embed_b_, pos_, cls_, lnf_g_, lnf_b_;
  std::vector<VitBlockParams> blocks_;
};

VitArchConfig arch_from_meta(const nlohmann::ordered_json& meta) {
  VitArchConfig cfg;
  try {
    cfg.embed_dim = meta.at("embed_dim").get<int>();
    cfg.patch_size = meta.at("patch_size").get<int>();
    cfg.depth = meta.at("depth").get<int>();
    cfg.heads = meta.at("heads").get<int>();
    cfg.mlp_ratio = meta.value("mlp_ratio", 4.0);
    cfg.class_token = meta.value("class_token", true);
    cfg.pos_grid = meta.at("pos_grid").get<int>();
    if (meta.contains("img_mean")) {
      const auto m = meta.at("img_mean").get<std::vector<double>>();
      const auto s = meta.at("img_std").get<std::vector<double>>();
      if (m.size() != 3 || s.size() != 3) {
        throw DataError("teacher archive: img_mean/img_std need 3 entries");
      }
      std::copy(m.begin(), m.end(), cfg.img_mean.begin());
      std::copy(s.begin(), s.end(), cfg.img_std.begin());
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("teacher archive metadata: ") + e.what());
  }
  return cfg;
}

}  // namespace

TeacherPtr load_teacher(const TeacherSpec& spec) {
  if (spec.kind == TeacherKind::kMock) {
    if (spec.embed_dim <= 0) {
      throw ConfigError("mock teacher needs a positive embed_dim");
    }
    return std::make_shared<MockTeacher>(spec.embed_dim, spec.patch_size,
                                         spec.seed);
  }
  if (spec.weights_ref.empty()) {
    throw ConfigError("teacher kind '" + kind_name(spec.kind) +
                      "' needs weights_ref");
  }
  Archive archive;
  try {
    archive = Archive::load(spec.weights_ref);
  } catch (const DataError& e) {
    throw DataError("cannot load teacher weights from '" + spec.weights_ref +
                    "': " + e.what());
  }
  VitArchConfig cfg = arch_from_meta(archive.meta);
  if (spec.embed_dim > 0 && spec.embed_dim != cfg.embed_dim) {
    throw DataError("teacher '" + kind_name(spec.kind) + "' declares embed_dim " +
                    std::to_string(spec.embed_dim) + " but weights carry " +
                    std::to_string(cfg.embed_dim));
  }
  if (spec.patch_size > 0 && spec.patch_size != cfg.patch_size) {
    throw DataError("teacher patch_size mismatch with weights (" +
                    std::to_string(spec.patch_size) + " vs " +
                    std::to_string(cfg.patch_size) + ")");
  }
  return std::make_shared<VitTeacher>(spec.kind, cfg, std::move(archive));
}

TokenFeatureMap align_token_grid(const TokenFeatureMap& features,
                                 int target_rows, int target_cols) {
  if (target_rows <= 0 || target_cols <= 0) {
    throw ContractViolation("align_token_grid: target grid must be positive");
  }
  if (features.rows * features.cols != features.tokens() ||
      features.data.dim(1) != features.tokens()) {
    throw ContractViolation("align_token_grid: grid does not match tokens");
  }
  if (features.rows == target_rows && features.cols == target_cols) {
    TokenFeatureMap out = features;
    return out;
  }
  const std::int64_t b = features.data.dim(0);
  const std::int64_t d = features.data.dim(2);
  TokenFeatureMap out;
  out.rows = target_rows;
  out.cols = target_cols;
  out.source = features.source;
  out.data = Tensor::zeros({b, static_cast<std::int64_t>(target_rows) * target_cols, d});
  // Per (batch, channel) plane bilinear resample, corner-aligned.
  std::vector<double> plane(static_cast<std::size_t>(features.rows) *
                            features.cols);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t ch = 0; ch < d; ++ch) {
      const double* src = features.data.data() +
                          static_cast<std::size_t>(bi) * features.tokens() * d;
      for (std::int64_t t = 0; t < features.tokens(); ++t) {
        plane[static_cast<std::size_t>(t)] = src[t * d + ch];
      }
      const auto resized = ops::raw::bilinear_chw(
          plane.data(), 1, features.rows, features.cols, target_rows,
          target_cols, true);
      double* dst = out.data.data() +
                    static_cast<std::size_t>(bi) * out.tokens() * d;
      for (std::int64_t t = 0; t < out.tokens(); ++t) {
        dst[t * d + ch] = resized[static_cast<std::size_t>(t)];
      }
    }
  }
  return out;
}

void write_vit_archive(const std::filesystem::path& path,
                       const VitArchConfig& config, TeacherKind kind,
                       std::uint64_t seed) {
  Rng rng(Rng::derive({seed, Rng::hash_str("vit-archive")}));
  Archive archive;
  archive.meta["kind"] = kind_name(kind);
  archive.meta["embed_dim"] = config.embed_dim;
  archive.meta["patch_size"] = config.patch_size;
  archive.meta["depth"] = config.depth;
  archive.meta["heads"] = config.heads;
  archive.meta["mlp_ratio"] = config.mlp_ratio;
  archive.meta["class_token"] = config.class_token;
  archive.meta["pos_grid"] = config.pos_grid;
  archive.meta["img_mean"] = config.img_mean;
  archive.meta["img_std"] = config.img_std;
  const std::int64_t d = config.embed_dim;
  const std::int64_t pd =
      static_cast<std::int64_t>(3) * config.patch_size * config.patch_size;
  const std::int64_t hidden =
      static_cast<std::int64_t>(std::lround(config.mlp_ratio * d));
  auto randn = [&rng](Shape shape, double stddev) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.vec()) v = rng.normal() * stddev;
    return t;
  };
  auto ones = [](Shape shape) { return Tensor::full(std::move(shape), 1.0); };
  archive.tensors["patch_embed.weight"] =
      randn({pd, d}, 1.0 / std::sqrt(static_cast<double>(pd)));
  archive.tensors["patch_embed.bias"] = Tensor::zeros({d});
  archive.tensors["pos_embed"] = randn(
      {static_cast<std::int64_t>(config.pos_grid) * config.pos_grid, d}, 0.02);
  if (config.class_token) {
    archive.tensors["cls_token"] = randn({d}, 0.02);
  }
  for (int i = 0; i < config.depth; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    const double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
    archive.tensors[p + "ln1.gamma"] = ones({d});
    archive.tensors[p + "ln1.beta"] = Tensor::zeros({d});
    archive.tensors[p + "attn.wq"] = randn({d, d}, attn_std);
    archive.tensors[p + "attn.bq"] = Tensor::zeros({d});
    archive.tensors[p + "attn.wk"] = randn({d, d}, attn_std);
    archive.tensors[p + "attn.bk"] = Tensor::zeros({d});
    archive.tensors[p + "attn.wv"] = randn({d, d}, attn_std);
    archive.tensors[p + "attn.bv"] = Tensor::zeros({d});
    archive.tensors[p + "attn.wo"] = randn({d, d}, attn_std);
    archive.tensors[p + "attn.bo"] = Tensor::zeros({d});
    archive.tensors[p + "ln2.gamma"] = ones({d});
    archive.tensors[p + "ln2.beta"] = Tensor::zeros({d});
    archive.tensors[p + "mlp.w1"] =
        randn({d, hidden}, 1.0 / std::sqrt(static_cast<double>(d)));
    archive.tensors[p + "mlp.b1"] = Tensor::zeros({hidden});
    archive.tensors[p + "mlp.w2"] =
        randn({hidden, d}, 1.0 / std::sqrt(static_cast<double>(hidden)));
    archive.tensors[p + "mlp.b2"] = Tensor::zeros({d});
  }
  archive.tensors["norm.gamma"] = ones({d});
  archive.tensors["norm.beta"] = Tensor::zeros({d});
  archive.save(path);
}

}  // namespace vfmseg::teachers
