#pragma once

#include <span>

#include "medicat/tensor.hpp"

namespace medicat {

// Numerator pairing for the cross-correlation matrix.
enum class CorrelationVariant {
  // X_ij pairs clean column i with perturbed column j.
  cross,
  // Compatibility mode: both factors use column i, so every row of X is
  // constant and the off-diagonal penalty only sees the diagonal values.
  printed_diagonal,
};

struct ContrastiveConfig {
  double lambda = 0.005;
  bool use_projection = false;  // must stay false: pooled embeddings feed the loss directly
  CorrelationVariant variant = CorrelationVariant::cross;

  void validate() const;
};

// Clean and perturbed pooled embeddings, one row per batch example.
template <typename Real>
struct EmbeddingPair {
  Tensor<Real> clean;      // [b x d]
  Tensor<Real> perturbed;  // [b x d]
};

// Mean over the batch of -log softmax(logits)[label]. logits: [N x C].
// Throws DataError(label_range) for a label outside [0, C).
template <typename Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, std::span<const int> labels);

// Divides every column of e [b x d] by its L2 norm. A zero-norm column throws
// DegenerateInputError naming the column.
template <typename Real>
Tensor<Real> normalize_columns(const Tensor<Real>& e);

// X_ij = sum_b c[b,i] p[b,j] / (||c[:,i]|| ||p[:,j]||), no mean-centering.
template <typename Real>
Tensor<Real> cross_correlation(const EmbeddingPair<Real>& pair,
                               CorrelationVariant variant = CorrelationVariant::cross);

// sum_i (1 - X_ii)^2 + lambda * sum_{i != j} X_ij^2
template <typename Real>
Tensor<Real> barlow_twins_loss(const EmbeddingPair<Real>& pair, const ContrastiveConfig& cfg);

// ((1 - alpha) / 2) (ce_clean + ce_adv) + alpha * ctr. alpha must be in [0, 1].
template <typename Real>
Tensor<Real> combined_loss(const Tensor<Real>& ce_clean, const Tensor<Real>& ce_adv,
                           const Tensor<Real>& ctr, double alpha);

double combined_loss_value(double ce_clean, double ce_adv, double ctr, double alpha);

}  // namespace medicat
