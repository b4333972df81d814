#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "medicat/tensor.hpp"
#include "medicat/vit.hpp"

namespace medicat {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const;
};

// Adam with decoupled weight decay:
//   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//   theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)
// Gradients are read, never cleared; pair every step() with zero_grads().
template <typename Real>
class AdamW {
 public:
  AdamW(const AdamWConfig& cfg, std::span<const NamedParameter<Real>> params);

  void step(std::span<const NamedParameter<Real>> params);

  std::uint64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  // Moment buffers, index-aligned with the parameter list.
  const std::vector<std::vector<Real>>& first_moments() const { return m_; }
  const std::vector<std::vector<Real>>& second_moments() const { return v_; }
  // Restores serialized state; shapes must match the parameter list.
  void restore(std::uint64_t step, std::vector<std::vector<Real>> m, std::vector<std::vector<Real>> v);

 private:
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<Real>> m_, v_;
};

template <typename Real>
void zero_grads(std::span<const NamedParameter<Real>> params);

}  // namespace medicat
