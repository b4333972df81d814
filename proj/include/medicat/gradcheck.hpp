#pragma once

// Central finite-difference checks of the reverse pass.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "medicat/tensor.hpp"

namespace medicat {

template <typename Real>
using ScalarFn = std::function<Tensor<Real>(const std::vector<Tensor<Real>>&)>;

// Largest per-input error ||analytic - numeric||_inf / max(||analytic||_inf,
// ||numeric||_inf) of d f / d inputs. `inputs` must be requires_grad leaves;
// their values are perturbed in place and restored.
template <typename Real>
double gradcheck_error(const ScalarFn<Real>& f, const std::vector<Tensor<Real>>& inputs, double step);

// sum(y * w) for a fixed pseudo-random w drawn from `seed`; turns any tensor
// into a scalar with a generic upstream gradient.
template <typename Real>
Tensor<Real> weighted_sum(const Tensor<Real>& y, std::uint64_t seed);

struct GradcheckOptions {
  std::size_t seeds = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
};

struct GradcheckReport {
  std::string op;
  double max_error = 0;
  std::size_t seeds = 0;
  bool passed = false;
};

// Every differentiable op, the objectives and the full encoder, in double.
std::vector<GradcheckReport> run_gradcheck_suite(const GradcheckOptions& opts = {});
std::string format_gradcheck(const std::vector<GradcheckReport>& reports);

}  // namespace medicat
