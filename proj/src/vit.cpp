#include "medicat/vit.hpp"

#include <string>

#include "medicat/error.hpp"

namespace medicat {

void ViTConfig::validate() const {
  if (image_side == 0) throw ConfigError("image_side", "must be positive");
  if (channels == 0) throw ConfigError("channels", "must be positive");
  if (patch_side == 0 || image_side % patch_side != 0)
    throw ConfigError("patch_side", "patch side " + std::to_string(patch_side) +
                                        " must divide image side " + std::to_string(image_side));
  if (hidden_dim == 0) throw ConfigError("hidden_dim", "must be positive");
  if (num_heads == 0 || hidden_dim % num_heads != 0)
    throw ConfigError("num_heads", "hidden dim " + std::to_string(hidden_dim) +
                                       " must be divisible by " + std::to_string(num_heads) +
                                       " heads");
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio", "must be positive");
  if (num_classes < 2) throw ConfigError("num_classes", "need at least 2 classes");
  if (!(layer_norm_eps > 0)) throw ConfigError("layer_norm_eps", "must be positive");
}

template <typename Real>
EncoderOutput<Real> EncoderBatch<Real>::at(std::size_t i) const {
  if (i >= batch)
    throw DimensionError("encoder output " + std::to_string(i) + " out of range for batch of " +
                         std::to_string(batch));
  const std::size_t d = cls_repr.dim(1);
  const std::size_t p = patch_embeddings.dim(1);
  const std::size_t c = logits.dim(1);
  return {reshape(gather_rows(cls_repr, {i}), {d}),
          reshape(gather_rows(patch_embeddings, {i}), {p, d}),
          reshape(gather_rows(logits, {i}), {c})};
}

template <typename Real>
Tensor<Real> patchify(const Tensor<Real>& images, const ViTConfig& cfg) {
  const bool single = images.rank() == 3;
  if (!single && images.rank() != 4)
    throw ConfigError("images", "expected [C x H x W] or [b x C x H x W], got " +
                                    shape_str(images.shape()));
  const std::size_t off = single ? 0 : 1;
  if (images.dim(off) != cfg.channels || images.dim(off + 1) != cfg.image_side ||
      images.dim(off + 2) != cfg.image_side)
    throw ConfigError("images", "shape " + shape_str(images.shape()) + " does not match a " +
                                    std::to_string(cfg.channels) + "x" +
                                    std::to_string(cfg.image_side) + "x" +
                                    std::to_string(cfg.image_side) + " configuration");
  const std::size_t batch = single ? 1 : images.dim(0);
  const std::size_t C = cfg.channels, S = cfg.image_side, P = cfg.patch_side;
  const std::size_t G = cfg.grid_side(), p = cfg.num_patches(), pd = cfg.patch_dim();

  // source[k] = flat pixel index feeding output element k
  std::vector<std::size_t> source(batch * p * pd);
  std::size_t k = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < G; ++gy)
      for (std::size_t gx = 0; gx < G; ++gx)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t dy = 0; dy < P; ++dy)
            for (std::size_t dx = 0; dx < P; ++dx)
              source[k++] = ((b * C + c) * S + gy * P + dy) * S + gx * P + dx;

  std::vector<Real> out(source.size());
  const auto xv = images.values();
  for (std::size_t i = 0; i < source.size(); ++i) out[i] = xv[source[i]];
  Shape shape = {batch * p, pd};
  return make_result<Real>("patchify", std::move(shape), std::move(out), {images},
                           [source = std::move(source)](Node<Real>& self) {
                             Real* d = self.parents[0]->grad_buffer();
                             for (std::size_t i = 0; i < source.size(); ++i)
                               d[source[i]] += self.grad[i];
                           });
}

template <typename Real>
Tensor<Real> mean_pool_patches(const Tensor<Real>& patch_embeddings) {
  if (patch_embeddings.rank() != 2 && patch_embeddings.rank() != 3)
    throw DimensionError("mean_pool_patches: expected [p x d] or [b x p x d], got " +
                         shape_str(patch_embeddings.shape()));
  return mean(patch_embeddings, -2);
}

template <typename Real>
VisionTransformer<Real>::VisionTransformer(const ViTConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), rng_(seed) {
  cfg_.validate();
  const std::size_t d = cfg_.hidden_dim, hidden = d * cfg_.mlp_ratio;
  patch_w_ = add_param("patch_embed.weight", {cfg_.patch_dim(), d}, Init::trunc_normal);
  patch_b_ = add_param("patch_embed.bias", {d}, Init::zeros);
  cls_token_ = add_param("cls_token", {1, d}, Init::trunc_normal);
  pos_embed_ = add_param("pos_embed", {cfg_.num_tokens(), d}, Init::trunc_normal);
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string pre = "blocks." + std::to_string(l) + ".";
    Block blk;
    blk.norm1_gamma = add_param(pre + "norm1.gamma", {d}, Init::ones);
    blk.norm1_beta = add_param(pre + "norm1.beta", {d}, Init::zeros);
    blk.qkv_w = add_param(pre + "attn.qkv.weight", {d, 3 * d}, Init::trunc_normal);
    blk.qkv_b = add_param(pre + "attn.qkv.bias", {3 * d}, Init::zeros);
    blk.proj_w = add_param(pre + "attn.proj.weight", {d, d}, Init::trunc_normal);
    blk.proj_b = add_param(pre + "attn.proj.bias", {d}, Init::zeros);
    blk.norm2_gamma = add_param(pre + "norm2.gamma", {d}, Init::ones);
    blk.norm2_beta = add_param(pre + "norm2.beta", {d}, Init::zeros);
    blk.fc1_w = add_param(pre + "mlp.fc1.weight", {d, hidden}, Init::trunc_normal);
    blk.fc1_b = add_param(pre + "mlp.fc1.bias", {hidden}, Init::zeros);
    blk.fc2_w = add_param(pre + "mlp.fc2.weight", {hidden, d}, Init::trunc_normal);
    blk.fc2_b = add_param(pre + "mlp.fc2.bias", {d}, Init::zeros);
    blocks_.push_back(std::move(blk));
  }
  norm_gamma_ = add_param("norm.gamma", {d}, Init::ones);
  norm_beta_ = add_param("norm.beta", {d}, Init::zeros);
  head_w_ = add_param("head.weight", {d, cfg_.num_classes}, Init::trunc_normal);
  head_b_ = add_param("head.bias", {cfg_.num_classes}, Init::zeros);
}

template <typename Real>
Tensor<Real> VisionTransformer<Real>::add_param(std::string name, Shape shape, Init init) {
  std::vector<Real> values(shape_numel(shape));
  for (auto& v : values) {
    switch (init) {
      case Init::trunc_normal: v = static_cast<Real>(rng_.truncated_normal(0.02)); break;
      case Init::zeros: v = Real(0); break;
      case Init::ones: v = Real(1); break;
    }
  }
  auto t = Tensor<Real>::from(std::move(shape), std::move(values), true);
  params_.push_back({std::move(name), t});
  return t;
}

template <typename Real>
const Tensor<Real>& VisionTransformer<Real>::parameter(std::string_view name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw ContractError("no parameter named '" + std::string(name) + "'");
}

template <typename Real>
std::size_t VisionTransformer<Real>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename Real>
EncoderBatch<Real> VisionTransformer<Real>::encode(const Tensor<Real>& images) const {
  if (images.rank() != 4)
    throw ConfigError("images", "expected [b x C x H x W], got " + shape_str(images.shape()));
  const std::size_t b = images.dim(0);
  const std::size_t p = cfg_.num_patches(), T = cfg_.num_tokens(), d = cfg_.hidden_dim;
  const Real eps = static_cast<Real>(cfg_.layer_norm_eps);

  auto emb = add_bias(matmul(patchify(images, cfg_), patch_w_), patch_b_);  // [b*p x d]
  auto table = concat_rows(cls_token_, emb);                                // [1 + b*p x d]

  std::vector<std::size_t> token_rows(b * T), pos_rows(b * T);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < T; ++t) {
      token_rows[i * T + t] = t == 0 ? 0 : 1 + i * p + (t - 1);
      pos_rows[i * T + t] = t;
    }
  auto x = add(gather_rows(table, std::move(token_rows)), gather_rows(pos_embed_, std::move(pos_rows)));

  for (const auto& blk : blocks_) {
    auto h = layer_norm(x, blk.norm1_gamma, blk.norm1_beta, eps);
    auto qkv = add_bias(matmul(h, blk.qkv_w), blk.qkv_b);
    auto attn = self_attention(qkv, b, T, cfg_.num_heads);
    x = add(x, add_bias(matmul(attn, blk.proj_w), blk.proj_b));
    h = layer_norm(x, blk.norm2_gamma, blk.norm2_beta, eps);
    auto mlp = gelu(add_bias(matmul(h, blk.fc1_w), blk.fc1_b));
    x = add(x, add_bias(matmul(mlp, blk.fc2_w), blk.fc2_b));
  }
  x = layer_norm(x, norm_gamma_, norm_beta_, eps);

  std::vector<std::size_t> cls_rows(b), patch_rows;
  patch_rows.reserve(b * p);
  for (std::size_t i = 0; i < b; ++i) {
    cls_rows[i] = i * T;
    for (std::size_t t = 1; t < T; ++t) patch_rows.push_back(i * T + t);
  }
  EncoderBatch<Real> out;
  out.batch = b;
  out.cls_repr = gather_rows(x, std::move(cls_rows));
  out.patch_embeddings = reshape(gather_rows(x, std::move(patch_rows)), {b, p, d});
  out.logits = add_bias(matmul(out.cls_repr, head_w_), head_b_);
  return out;
}

template struct EncoderBatch<float>;
template struct EncoderBatch<double>;
template class VisionTransformer<float>;
template class VisionTransformer<double>;
template Tensor<float> patchify<float>(const Tensor<float>&, const ViTConfig&);
template Tensor<double> patchify<double>(const Tensor<double>&, const ViTConfig&);
template Tensor<float> mean_pool_patches<float>(const Tensor<float>&);
template Tensor<double> mean_pool_patches<double>(const Tensor<double>&);

}  // namespace medicat
