#include "medicat/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "medicat/error.hpp"
#include "medicat/objectives.hpp"

namespace medicat {

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon))
    throw ConfigError("epsilon", "must be a finite nonnegative number, got " + std::to_string(epsilon));
  if (clamp && !(clamp_min < clamp_max))
    throw ConfigError("clamp", "clamp range is empty");
}

template <typename Real>
std::vector<Real> fgsm_from_gradient(std::span<const Real> input_grad, const AttackConfig& atk) {
  atk.validate();
  std::vector<Real> eta(input_grad.size(), Real(0));
  if (atk.epsilon == 0.0) return eta;
  const Real step = static_cast<Real>(atk.direction == AttackDirection::ascend ? atk.epsilon : -atk.epsilon);
  for (std::size_t i = 0; i < eta.size(); ++i) {
    const Real g = input_grad[i];
    eta[i] = g > 0 ? step : (g < 0 ? -step : Real(0));
  }
  return eta;
}

template <typename Real>
Tensor<Real> fgsm_perturbation(const Batch<Real>& batch, const VisionTransformer<Real>& model,
                               const AttackConfig& atk) {
  atk.validate();
  const auto& shape = batch.images.shape();
  if (atk.epsilon == 0.0) return Tensor<Real>::zeros(shape);
  auto images = Tensor<Real>::from(shape, {batch.images.values().begin(), batch.images.values().end()}, true);
  const auto enc = model.encode(images);
  const auto loss = cross_entropy(enc.logits, batch.labels);
  const Tensor<Real> targets[] = {images};
  backward(loss, std::span<const Tensor<Real>>(targets));
  return Tensor<Real>::from(shape, fgsm_from_gradient<Real>(images.grad(), atk));
}

template <typename Real>
Batch<Real> make_adversarial_batch(const Batch<Real>& batch, std::span<const Real> eta,
                                   const AttackConfig& atk) {
  const auto x = batch.images.values();
  if (eta.size() != x.size())
    throw ContractError("make_adversarial_batch: perturbation has " + std::to_string(eta.size()) +
                        " values for " + std::to_string(x.size()) + " pixels");
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + eta[i];
  if (atk.clamp) {
    const Real lo = static_cast<Real>(atk.clamp_min), hi = static_cast<Real>(atk.clamp_max);
    for (auto& v : out) v = std::clamp(v, lo, hi);
  }
  Batch<Real> adv;
  adv.images = Tensor<Real>::from(batch.images.shape(), std::move(out));
  adv.labels = batch.labels;
  return adv;
}

#define MEDICAT_INSTANTIATE(R)                                                                \
  template std::vector<R> fgsm_from_gradient<R>(std::span<const R>, const AttackConfig&);     \
  template Tensor<R> fgsm_perturbation<R>(const Batch<R>&, const VisionTransformer<R>&,       \
                                          const AttackConfig&);                               \
  template Batch<R> make_adversarial_batch<R>(const Batch<R>&, std::span<const R>,            \
                                              const AttackConfig&);

MEDICAT_INSTANTIATE(float)
MEDICAT_INSTANTIATE(double)

#undef MEDICAT_INSTANTIATE

}  // namespace medicat
