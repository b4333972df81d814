#include "medicat/optimizer.hpp"

#include <cmath>
#include <string>

#include "medicat/error.hpp"

namespace medicat {

void AdamWConfig::validate() const {
  if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr", "must be positive, got " + std::to_string(lr));
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2", "must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("adam_eps", "must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay", "must be nonnegative");
}

template <typename Real>
AdamW<Real>::AdamW(const AdamWConfig& cfg, std::span<const NamedParameter<Real>> params) : cfg_(cfg) {
  cfg_.validate();
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.numel(), Real(0));
    v_.emplace_back(p.tensor.numel(), Real(0));
  }
}

template <typename Real>
void AdamW<Real>::step(std::span<const NamedParameter<Real>> params) {
  if (params.size() != m_.size())
    throw ContractError("AdamW::step: optimizer tracks " + std::to_string(m_.size()) +
                        " parameters, got " + std::to_string(params.size()));
  for (const auto& p : params)
    if (p.tensor.requires_grad() && !p.tensor.has_grad())
      throw ContractError("AdamW::step: parameter '" + p.name + "' has no gradient");

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const Real b1 = static_cast<Real>(cfg_.beta1), b2 = static_cast<Real>(cfg_.beta2);
  const Real lr = static_cast<Real>(cfg_.lr), wd = static_cast<Real>(cfg_.weight_decay);
  const Real eps = static_cast<Real>(cfg_.eps);
  const Real inv_bc1 = static_cast<Real>(1.0 / bc1), inv_bc2 = static_cast<Real>(1.0 / bc2);

  for (std::size_t k = 0; k < params.size(); ++k) {
    auto tensor = params[k].tensor;
    if (!tensor.requires_grad()) continue;
    auto theta = tensor.mutable_values();
    const auto g = tensor.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    if (m.size() != theta.size())
      throw ContractError("AdamW::step: parameter '" + params[k].name + "' changed shape");
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = b1 * m[i] + (Real(1) - b1) * g[i];
      v[i] = b2 * v[i] + (Real(1) - b2) * g[i] * g[i];
      const Real m_hat = m[i] * inv_bc1;
      const Real v_hat = v[i] * inv_bc2;
      theta[i] = theta[i] - lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * theta[i]);
    }
  }
}

template <typename Real>
void AdamW<Real>::restore(std::uint64_t step, std::vector<std::vector<Real>> m,
                          std::vector<std::vector<Real>> v) {
  if (m.size() != m_.size() || v.size() != v_.size())
    throw ContractError("AdamW::restore: moment count mismatch");
  for (std::size_t k = 0; k < m.size(); ++k)
    if (m[k].size() != m_[k].size() || v[k].size() != v_[k].size())
      throw ContractError("AdamW::restore: moment shape mismatch at parameter " + std::to_string(k));
  t_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

template <typename Real>
void zero_grads(std::span<const NamedParameter<Real>> params) {
  for (const auto& p : params) {
    auto t = p.tensor;
    t.zero_grad();
  }
}

template class AdamW<float>;
template class AdamW<double>;
template void zero_grads<float>(std::span<const NamedParameter<float>>);
template void zero_grads<double>(std::span<const NamedParameter<double>>);

}  // namespace medicat
