#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "medicat/random.hpp"
#include "medicat/tensor.hpp"

namespace medicat {

// Geometry and width of the encoder. Defaults are the desk-scale model:
// 28x28 inputs cut into 7x7 patches give 16 patch tokens plus CLS.
struct ViTConfig {
  std::size_t image_side = 28;
  std::size_t channels = 1;
  std::size_t patch_side = 7;
  std::size_t hidden_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 4;
  double layer_norm_eps = 1e-5;

  std::size_t grid_side() const { return image_side / patch_side; }
  std::size_t num_patches() const { return grid_side() * grid_side(); }
  std::size_t num_tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_side * patch_side * channels; }

  // Throws ConfigError naming the first violated constraint.
  void validate() const;

  bool operator==(const ViTConfig&) const = default;
};

// Encoder outputs for one image.
template <typename Real>
struct EncoderOutput {
  Tensor<Real> cls_repr;          // [d]
  Tensor<Real> patch_embeddings;  // [p x d], last hidden state of the patch tokens
  Tensor<Real> logits;            // [C]
};

// Batched encoder outputs; row i of each tensor belongs to image i.
template <typename Real>
struct EncoderBatch {
  std::size_t batch = 0;
  Tensor<Real> logits;            // [b x C]
  Tensor<Real> cls_repr;          // [b x d]
  Tensor<Real> patch_embeddings;  // [b x p x d]

  EncoderOutput<Real> at(std::size_t i) const;
};

template <typename Real>
struct NamedParameter {
  std::string name;
  Tensor<Real> tensor;
};

// Rows are patches in raster order; each row is one patch flattened as
// (channel, row, column). Accepts one image [C x H x W] (-> [p x P*P*C]) or a
// batch [b x C x H x W] (-> [b*p x P*P*C]). Differentiable w.r.t. the pixels.
template <typename Real>
Tensor<Real> patchify(const Tensor<Real>& images, const ViTConfig& cfg);

// Arithmetic mean over the patch axis: [p x d] -> [d] or [b x p x d] -> [b x d].
template <typename Real>
Tensor<Real> mean_pool_patches(const Tensor<Real>& patch_embeddings);

// Pre-norm ViT: linear patch projection, prepended CLS token, learned
// position embeddings, transformer blocks, final layer norm, linear head on CLS.
template <typename Real>
class VisionTransformer {
 public:
  VisionTransformer(const ViTConfig& cfg, std::uint64_t seed);

  const ViTConfig& config() const { return cfg_; }

  // images: [b x C x H x W] normalised pixels.
  EncoderBatch<Real> encode(const Tensor<Real>& images) const;

  std::vector<NamedParameter<Real>>& parameters() { return params_; }
  const std::vector<NamedParameter<Real>>& parameters() const { return params_; }
  const Tensor<Real>& parameter(std::string_view name) const;
  std::size_t parameter_count() const;

 private:
  struct Block {
    Tensor<Real> norm1_gamma, norm1_beta, qkv_w, qkv_b, proj_w, proj_b;
    Tensor<Real> norm2_gamma, norm2_beta, fc1_w, fc1_b, fc2_w, fc2_b;
  };

  enum class Init { trunc_normal, zeros, ones };
  Tensor<Real> add_param(std::string name, Shape shape, Init init);

  ViTConfig cfg_;
  Rng rng_;
  std::vector<NamedParameter<Real>> params_;
  Tensor<Real> patch_w_, patch_b_, cls_token_, pos_embed_;
  std::vector<Block> blocks_;
  Tensor<Real> norm_gamma_, norm_beta_, head_w_, head_b_;
};

}  // namespace medicat
