#include "medicat/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "medicat/error.hpp"

namespace medicat {

void ContrastiveConfig::validate() const {
  if (!(lambda >= 0) || !std::isfinite(lambda))
    throw ConfigError("lambda", "must be a finite nonnegative number, got " + std::to_string(lambda));
  if (use_projection) throw ConfigError("use_projection", "projection networks are not supported");
}

template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size())
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  for (std::size_t i = 0; i < N; ++i)
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C)
      throw DataError(DataErrorKind::label_range,
                      "cross_entropy: label " + std::to_string(labels[i]) + " at index " +
                          std::to_string(i) + " outside [0, " + std::to_string(C) + ")");

  auto probs = std::make_shared<std::vector<Real>>(N * C);
  std::vector<int> targets(labels.begin(), labels.end());
  const auto x = logits.values();
  Real total = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const Real* row = x.data() + i * C;
    const Real mx = *std::max_element(row, row + C);
    Real z = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const Real e = std::exp(row[c] - mx);
      (*probs)[i * C + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < C; ++c) (*probs)[i * C + c] /= z;
    total += (mx + std::log(z)) - row[targets[i]];
  }
  return make_result<Real>("cross_entropy", {1}, {total / Real(N)}, {logits},
                           [probs, targets = std::move(targets), N, C](Node<Real>& self) {
                             Real* d = self.parents[0]->grad_buffer();
                             const Real g = self.grad[0] / Real(N);
                             for (std::size_t i = 0; i < N; ++i)
                               for (std::size_t c = 0; c < C; ++c) {
                                 const Real onehot = static_cast<int>(c) == targets[i] ? 1 : 0;
                                 d[i * C + c] += g * ((*probs)[i * C + c] - onehot);
                               }
                           });
}

template <typename Real>
Tensor<Real> normalize_columns(const Tensor<Real>& e) {
  if (e.rank() != 2) throw DimensionError("normalize_columns: expected [b x d], got " + shape_str(e.shape()));
  const std::size_t B = e.dim(0), D = e.dim(1);
  const auto x = e.values();
  auto norms = std::make_shared<std::vector<Real>>(D, Real(0));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < D; ++j) (*norms)[j] += x[b * D + j] * x[b * D + j];
  for (std::size_t j = 0; j < D; ++j) {
    (*norms)[j] = std::sqrt((*norms)[j]);
    if (!((*norms)[j] > 0) || !std::isfinite((*norms)[j]))
      throw DegenerateInputError("embedding column " + std::to_string(j) +
                                 " has zero or non-finite norm (collapsed representation)");
  }
  std::vector<Real> out(B * D);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < D; ++j) out[b * D + j] = x[b * D + j] / (*norms)[j];
  return make_result<Real>("normalize_columns", e.shape(), std::move(out), {e},
                           [norms, B, D](Node<Real>& self) {
                             Real* d = self.parents[0]->grad_buffer();
                             const Real* y = self.value.data();
                             const Real* g = self.grad.data();
                             for (std::size_t j = 0; j < D; ++j) {
                               Real dot = 0;
                               for (std::size_t b = 0; b < B; ++b) dot += y[b * D + j] * g[b * D + j];
                               for (std::size_t b = 0; b < B; ++b)
                                 d[b * D + j] += (g[b * D + j] - y[b * D + j] * dot) / (*norms)[j];
                             }
                           });
}

template <typename Real>
Tensor<Real> cross_correlation(const EmbeddingPair<Real>& pair, CorrelationVariant variant) {
  const auto& c = pair.clean;
  const auto& p = pair.perturbed;
  if (c.rank() != 2 || c.shape() != p.shape())
    throw DimensionError("cross_correlation: embeddings " + shape_str(c.shape()) + " and " +
                         shape_str(p.shape()) + " must be equal [b x d] matrices");
  const auto cn = normalize_columns(c);
  const auto pn = normalize_columns(p);
  if (variant == CorrelationVariant::cross) return matmul(transpose(cn), pn);

  const std::size_t B = c.dim(0), D = c.dim(1);
  auto diag = matmul(Tensor<Real>::full({1, B}, Real(1)), mul(cn, pn));  // [1 x d]
  return matmul(transpose(diag), Tensor<Real>::full({1, D}, Real(1)));
}

template <typename Real>
Tensor<Real> barlow_twins_loss(const EmbeddingPair<Real>& pair, const ContrastiveConfig& cfg) {
  cfg.validate();
  const auto X = cross_correlation(pair, cfg.variant);
  const std::size_t D = X.dim(0);
  std::vector<Real> eye(D * D, Real(0)), weight(D * D, static_cast<Real>(cfg.lambda));
  for (std::size_t i = 0; i < D; ++i) {
    eye[i * D + i] = Real(1);
    weight[i * D + i] = Real(1);
  }
  const auto diff = sub(X, Tensor<Real>::from({D, D}, std::move(eye)));
  return sum(mul(Tensor<Real>::from({D, D}, std::move(weight)), mul(diff, diff)));
}

namespace {

void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ConfigError("alpha", "must lie in [0, 1], got " + std::to_string(alpha));
}

}  // namespace

template <typename Real>
Tensor<Real> combined_loss(const Tensor<Real>& ce_clean, const Tensor<Real>& ce_adv,
                           const Tensor<Real>& ctr, double alpha) {
  check_alpha(alpha);
  if (ce_clean.numel() != 1 || ce_adv.numel() != 1 || ctr.numel() != 1)
    throw DimensionError("combined_loss: all three terms must be scalars");
  const Real ce_weight = static_cast<Real>((1.0 - alpha) / 2.0);
  return add(scale(add(ce_clean, ce_adv), ce_weight), scale(ctr, static_cast<Real>(alpha)));
}

double combined_loss_value(double ce_clean, double ce_adv, double ctr, double alpha) {
  check_alpha(alpha);
  return (1.0 - alpha) / 2.0 * (ce_clean + ce_adv) + alpha * ctr;
}

#define MEDICAT_INSTANTIATE(R)                                                                  \
  template Tensor<R> cross_entropy<R>(const Tensor<R>&, std::span<const int>);                  \
  template Tensor<R> normalize_columns<R>(const Tensor<R>&);                                    \
  template Tensor<R> cross_correlation<R>(const EmbeddingPair<R>&, CorrelationVariant);         \
  template Tensor<R> barlow_twins_loss<R>(const EmbeddingPair<R>&, const ContrastiveConfig&);   \
  template Tensor<R> combined_loss<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&,     \
                                      double);

MEDICAT_INSTANTIATE(float)
MEDICAT_INSTANTIATE(double)

#undef MEDICAT_INSTANTIATE

}  // namespace medicat
