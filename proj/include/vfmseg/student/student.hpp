// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "vfmseg/core/rng.hpp"
#include "vfmseg/core/tensor.hpp"
#include "vfmseg/teachers/teachers.hpp"

namespace vfmseg::student {

struct StudentConfig {
  int embed_dim = 32;  // d_s
  int patch_size = 16;
  int depth = 4;
  int heads = 4;
  double mlp_ratio = 4.0;
  /// Block indices (0-based) whose outputs feed the decoder, shallow to
  /// deep; the last tap must be the final block.
  std::array<int, 4> pyramid_taps{0, 1, 2, 3};
  int num_classes = 4;
  int decoder_channels = 32;

  void validate(int crop_size) const;
};

struct FusionWeights {
  double omega_s = 1.0;
  double omega_d = 0.5;
};

enum class InferenceMode { kFused, kPlain };
InferenceMode mode_from_name(const std::string& name);
std::string mode_name(InferenceMode mode);

/// A teacher slot the student owns translator/projector parameters for.
struct TeacherBinding {
  std::string key;   // unique per slot, e.g. "0:mock"
  std::string kind;  // teacher kind name
  int dim = 0;       // that teacher's embed dim d_t
};

/// Ordered named parameter table. Iteration order is the map order, which
/// makes checkpoints and optimizer traversal deterministic.
class ParamStore {
 public:
  Tensor create(const std::string& name, Shape shape, double init_std,
                Rng& rng);
  Tensor create_zeros(const std::string& name, Shape shape);
  Tensor create_const(const std::string& name, Shape shape, double value);

  const Tensor& at(const std::string& name) const;
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& mutable_all() { return params_; }
  std::int64_t total_elements() const;

  /// Copies values elementwise from a congruent store.
  void copy_values_from(const ParamStore& other);
  void set_requires_grad(bool value);
  void zero_grads();

 private:
  std::map<std::string, Tensor> params_;
};

/// Four token maps feeding the decoder, shallow to deep. The deepest slot
/// holds f_S after encode() and may be replaced by a fused map.
struct DecoderPyramid {
  std::array<teachers::TokenFeatureMap, 4> levels;
};

struct EncodeResult {
  DecoderPyramid pyramid;
  teachers::TokenFeatureMap features;  // f_S; aliases pyramid.levels[3].data
};

/// What the decoder actually consumed on the last traced forward.
struct ForwardTrace {
  std::array<Tensor, 4> decoder_inputs;
  Tensor fused;  // defined only in fused mode
};

/// The trainable segmentation network: ViT-style encoder, per-teacher
/// feature translators and back-projectors, weighted feature fusion and a
/// hierarchical convolutional decoder.
class StudentModel {
 public:
  StudentModel(const StudentConfig& config, int crop_size,
               std::vector<TeacherBinding> teachers, FusionWeights fusion,
               std::uint64_t init_seed);

  /// Runs the encoder. Input [B, 3, H, W] with H, W divisible by
  /// patch_size. The deepest pyramid entry and `features` share one tensor.
  EncodeResult encode(const Tensor& images) const;

  /// Token-wise two-layer MLP into teacher `key`'s embedding space.
  teachers::TokenFeatureMap translate(const teachers::TokenFeatureMap& f_s,
                                      const std::string& key) const;

  /// Linear map from teacher `key`'s space back to d_s.
  teachers::TokenFeatureMap project_back(
      const teachers::TokenFeatureMap& translated,
      const std::string& key) const;

  /// omega_s * f_s + omega_d * sum(projected).
  teachers::TokenFeatureMap fuse(
      const teachers::TokenFeatureMap& f_s,
      const std::vector<teachers::TokenFeatureMap>& projected) const;

  /// Decodes the pyramid to logits [B, C, out_h, out_w]. out_h/out_w must be
  /// multiples of the token grid.
  Tensor decode(const DecoderPyramid& pyramid, int out_h, int out_w,
                ForwardTrace* trace = nullptr) const;

  /// encode -> (translate -> project_back -> fuse ->) decode. Fused mode
  /// needs no teacher at all: translators read only student features.
  Tensor predict(const Tensor& images, InferenceMode mode, int out_h,
                 int out_w, ForwardTrace* trace = nullptr) const;

  const StudentConfig& config() const { return config_; }
  const FusionWeights& fusion_weights() const { return fusion_; }
  void set_fusion_weights(FusionWeights fw) { fusion_ = fw; }
  const std::vector<TeacherBinding>& teacher_bindings() const {
    return teachers_;
  }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  int crop_size() const { return crop_size_; }

 private:
  Tensor pos_for_grid(int rows, int cols) const;
  Tensor encoder_block(const Tensor& x, int index) const;
  Tensor reassemble(const Tensor& tokens, int rows, int cols, int tap) const;
  Tensor residual_unit(const Tensor& x, int index) const;

  StudentConfig config_;
  int crop_size_;
  std::vector<TeacherBinding> teachers_;
  FusionWeights fusion_;
  ParamStore params_;
};

}  // namespace vfmseg::student
