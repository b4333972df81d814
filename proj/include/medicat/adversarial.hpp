#pragma once

#include <span>
#include <vector>

#include "medicat/data.hpp"
#include "medicat/tensor.hpp"
#include "medicat/vit.hpp"

namespace medicat {

enum class AttackDirection {
  descend,  // eta = -eps * sign(grad): the training default
  ascend,   // eta = +eps * sign(grad): loss-increasing, classic FGSM
};

struct AttackConfig {
  double epsilon = 0.001;  // in normalised-pixel units
  AttackDirection direction = AttackDirection::descend;
  bool clamp = false;
  // Normalised pixel range, used only when clamp is set.
  double clamp_min = -1.0;
  double clamp_max = 1.0;

  void validate() const;
};

// eta_k = s * eps * sign(grad_k) with sign(0) = 0; s = -1 (descend) or +1 (ascend).
template <typename Real>
std::vector<Real> fgsm_from_gradient(std::span<const Real> input_grad, const AttackConfig& atk);

// Runs a clean forward pass and a backward pass to the pixels of `batch`,
// then applies fgsm_from_gradient. Parameter gradients are left untouched.
template <typename Real>
Tensor<Real> fgsm_perturbation(const Batch<Real>& batch, const VisionTransformer<Real>& model,
                               const AttackConfig& atk);

// images + eta as a fresh leaf (no tape history), labels copied. Clamps to
// [clamp_min, clamp_max] when atk.clamp is set.
template <typename Real>
Batch<Real> make_adversarial_batch(const Batch<Real>& batch, std::span<const Real> eta,
                                   const AttackConfig& atk = {});

}  // namespace medicat
