#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <utility>

#include "medicat/error.hpp"
#include "medicat/kernels.hpp"
#include "medicat/tensor.hpp"

namespace medicat {

namespace {

// Reductions finish in a local buffer and land in the gradient with one add
// per element, so a tensor reached from several graph paths sums whole
// per-path contributions.
template <typename Real>
void add_into(Real* grad, const std::vector<Real>& acc) {
  for (std::size_t i = 0; i < acc.size(); ++i) grad[i] += acc[i];
}

template <typename Real>
void require_same_shape(const char* op, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

std::size_t resolve_axis(const char* op, std::ptrdiff_t axis, std::size_t rank) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(rank);
  if (axis < -r || axis >= r)
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename Real>
Node<Real>& parent(Node<Real>& self, std::size_t i) {
  return *self.parents[i];
}

}  // namespace

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(m * n);
  kernels::gemm(m, n, k, a.values().data(), b.values().data(), out.data(), false);
  return make_result<Real>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<Real>& self) {
    auto& A = parent(self, 0);
    auto& B = parent(self, 1);
    const Real* g = self.grad.data();
    if (A.active) {
      std::vector<Real> bt(k * n);
      kernels::transpose(k, n, B.value.data(), bt.data());
      kernels::gemm(m, k, n, g, bt.data(), A.grad_buffer(), true);
    }
    if (B.active) {
      std::vector<Real> at(m * k);
      kernels::transpose(m, k, A.value.data(), at.data());
      kernels::gemm(k, n, m, at.data(), g, B.grad_buffer(), true);
    }
  });
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape("add", a, b);
  std::vector<Real> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return make_result<Real>("add", a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      auto& P = parent(self, p);
      if (!P.active) continue;
      Real* d = P.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
  });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape("sub", a, b);
  std::vector<Real> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result<Real>("sub", a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
    auto& A = parent(self, 0);
    auto& B = parent(self, 1);
    if (A.active) {
      Real* d = A.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
    }
    if (B.active) {
      Real* d = B.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] -= self.grad[i];
    }
  });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape("mul", a, b);
  std::vector<Real> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result<Real>("mul", a.shape(), std::move(out), {a, b}, [](Node<Real>& self) {
    auto& A = parent(self, 0);
    auto& B = parent(self, 1);
    if (A.active) {
      Real* d = A.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * B.value[i];
    }
    if (B.active) {
      Real* d = B.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * A.value[i];
    }
  });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor) {
  std::vector<Real> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return make_result<Real>("scale", a.shape(), std::move(out), {a}, [factor](Node<Real>& self) {
    Real* d = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * factor;
  });
}

template <typename Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias) {
  const std::size_t n = x.shape().back();
  if (bias.rank() != 1 || bias.dim(0) != n)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  const std::size_t rows = x.numel() / n;
  std::vector<Real> out(x.numel());
  const auto xv = x.values(), bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] + bv[c];
  return make_result<Real>("add_bias", x.shape(), std::move(out), {x, bias},
                           [rows, n](Node<Real>& self) {
                             auto& X = parent(self, 0);
                             auto& B = parent(self, 1);
                             const Real* g = self.grad.data();
                             if (X.active) {
                               Real* d = X.grad_buffer();
                               for (std::size_t i = 0; i < rows * n; ++i) d[i] += g[i];
                             }
                             if (B.active) {
                               std::vector<Real> acc(n, Real(0));
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t c = 0; c < n; ++c) acc[c] += g[r * n + c];
                               add_into(B.grad_buffer(), acc);
                             }
                           });
}

template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  std::vector<Real> out(x.numel());
  kernels::gelu_forward(out.size(), x.values().data(), out.data());
  return make_result<Real>("gelu", x.shape(), std::move(out), {x}, [](Node<Real>& self) {
    auto& X = parent(self, 0);
    kernels::gelu_backward(self.grad.size(), X.value.data(), self.grad.data(), X.grad_buffer());
  });
}

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Real eps) {
  const std::size_t cols = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != cols || beta.rank() != 1 || beta.dim(0) != cols)
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                         shape_str(beta.shape()) + " do not match " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / cols;
  std::vector<Real> out(x.numel());
  auto xhat = std::make_shared<std::vector<Real>>(x.numel());
  auto rstd = std::make_shared<std::vector<Real>>(rows);
  kernels::layer_norm_forward(rows, cols, x.values().data(), gamma.values().data(),
                              beta.values().data(), eps, out.data(), xhat->data(), rstd->data());
  return make_result<Real>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, cols, xhat, rstd](Node<Real>& self) {
        auto& X = parent(self, 0);
        auto& G = parent(self, 1);
        auto& B = parent(self, 2);
        const Real* g = self.grad.data();
        if (X.active)
          kernels::layer_norm_backward(rows, cols, g, G.value.data(), xhat->data(), rstd->data(),
                                       X.grad_buffer());
        if (G.active) {
          std::vector<Real> acc(cols, Real(0));
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) acc[c] += g[r * cols + c] * (*xhat)[r * cols + c];
          add_into(G.grad_buffer(), acc);
        }
        if (B.active) {
          std::vector<Real> acc(cols, Real(0));
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) acc[c] += g[r * cols + c];
          add_into(B.grad_buffer(), acc);
        }
      });
}

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::ptrdiff_t axis) {
  const auto s = split_at(x.shape(), resolve_axis("softmax", axis, x.rank()));
  std::vector<Real> out(x.numel());
  const auto xv = x.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      Real mx = -INFINITY;
      for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
      Real z = 0;
      for (std::size_t k = 0; k < s.extent; ++k) {
        const Real e = std::exp(xv[base + k * s.inner] - mx);
        out[base + k * s.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= z;
    }
  return make_result<Real>("softmax", x.shape(), std::move(out), {x}, [s](Node<Real>& self) {
    Real* d = parent(self, 0).grad_buffer();
    const Real* y = self.value.data();
    const Real* g = self.grad.data();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        Real dot = 0;
        for (std::size_t k = 0; k < s.extent; ++k)
          dot += g[base + k * s.inner] * y[base + k * s.inner];
        for (std::size_t k = 0; k < s.extent; ++k) {
          const std::size_t at = base + k * s.inner;
          d[at] += y[at] * (g[at] - dot);
        }
      }
  });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x, std::ptrdiff_t axis) {
  const std::size_t ax = resolve_axis("mean", axis, x.rank());
  const auto s = split_at(x.shape(), ax);
  Shape shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != ax) shape.push_back(x.dim(i));
  if (shape.empty()) shape.push_back(1);
  std::vector<Real> out(s.outer * s.inner, Real(0));
  const auto xv = x.values();
  const Real inv = Real(1) / Real(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      Real acc = 0;
      for (std::size_t k = 0; k < s.extent; ++k) acc += xv[(o * s.extent + k) * s.inner + i];
      out[o * s.inner + i] = acc * inv;
    }
  return make_result<Real>("mean", std::move(shape), std::move(out), {x},
                           [s, inv](Node<Real>& self) {
                             Real* d = parent(self, 0).grad_buffer();
                             for (std::size_t o = 0; o < s.outer; ++o)
                               for (std::size_t k = 0; k < s.extent; ++k)
                                 for (std::size_t i = 0; i < s.inner; ++i)
                                   d[(o * s.extent + k) * s.inner + i] +=
                                       self.grad[o * s.inner + i] * inv;
                           });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real acc = 0;
  for (auto v : x.values()) acc += v;
  return make_result<Real>("sum", {1}, {acc}, {x}, [](Node<Real>& self) {
    auto& X = parent(self, 0);
    Real* d = X.grad_buffer();
    const Real g = self.grad[0];
    for (std::size_t i = 0; i < X.value.size(); ++i) d[i] += g;
  });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  std::vector<Real> out(x.values().begin(), x.values().end());
  return make_result<Real>("reshape", std::move(shape), std::move(out), {x}, [](Node<Real>& self) {
    Real* d = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
  });
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& x) {
  if (x.rank() != 2)
    throw DimensionError("transpose: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<Real> out(x.numel());
  kernels::transpose(r, c, x.values().data(), out.data());
  return make_result<Real>("transpose", {c, r}, std::move(out), {x}, [r, c](Node<Real>& self) {
    Real* d = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) d[i * c + j] += self.grad[j * r + i];
  });
}

template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, std::vector<std::size_t> rows) {
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t n_rows = x.dim(0);
  const std::size_t width = x.numel() / n_rows;
  for (auto r : rows)
    if (r >= n_rows)
      throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range for " +
                           shape_str(x.shape()));
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<Real> out(rows.size() * width);
  const auto xv = x.values();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  return make_result<Real>("gather_rows", std::move(shape), std::move(out), {x},
                           [rows = std::move(rows), width](Node<Real>& self) {
                             auto& X = parent(self, 0);
                             std::vector<Real> acc(X.value.size(), Real(0));
                             for (std::size_t i = 0; i < rows.size(); ++i)
                               for (std::size_t c = 0; c < width; ++c)
                                 acc[rows[i] * width + c] += self.grad[i * width + c];
                             add_into(X.grad_buffer(), acc);
                           });
}

template <typename Real>
Tensor<Real> concat_rows(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1))
    throw DimensionError("concat_rows: trailing shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<Real> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const std::size_t split = a.numel();
  return make_result<Real>("concat_rows", std::move(shape), std::move(out), {a, b},
                           [split](Node<Real>& self) {
                             auto& A = parent(self, 0);
                             auto& B = parent(self, 1);
                             if (A.active) {
                               Real* d = A.grad_buffer();
                               for (std::size_t i = 0; i < split; ++i) d[i] += self.grad[i];
                             }
                             if (B.active) {
                               Real* d = B.grad_buffer();
                               for (std::size_t i = split; i < self.grad.size(); ++i)
                                 d[i - split] += self.grad[i];
                             }
                           });
}

template <typename Real>
Tensor<Real> self_attention(const Tensor<Real>& qkv, std::size_t batch, std::size_t tokens,
                            std::size_t heads) {
  if (qkv.rank() != 2 || qkv.dim(0) != batch * tokens || qkv.dim(1) % 3 != 0 || heads == 0 ||
      (qkv.dim(1) / 3) % heads != 0)
    throw DimensionError("self_attention: qkv " + shape_str(qkv.shape()) + " incompatible with " +
                         std::to_string(batch) + " x " + std::to_string(tokens) + " tokens, " +
                         std::to_string(heads) + " heads");
  kernels::AttentionShape s{batch, tokens, heads, qkv.dim(1) / 3 / heads};
  std::vector<Real> out(batch * tokens * s.model_dim());
  auto probs = std::make_shared<std::vector<Real>>(s.prob_count());
  kernels::attention_forward(s, qkv.values().data(), out.data(), probs->data());
  return make_result<Real>("self_attention", {batch * tokens, s.model_dim()}, std::move(out),
                           {qkv}, [s, probs](Node<Real>& self) {
                             auto& Q = parent(self, 0);
                             kernels::attention_backward(s, Q.value.data(), probs->data(),
                                                         self.grad.data(), Q.grad_buffer());
                           });
}

#define MEDICAT_INSTANTIATE(R)                                                                 \
  template Tensor<R> matmul<R>(const Tensor<R>&, const Tensor<R>&);                            \
  template Tensor<R> add<R>(const Tensor<R>&, const Tensor<R>&);                               \
  template Tensor<R> sub<R>(const Tensor<R>&, const Tensor<R>&);                               \
  template Tensor<R> mul<R>(const Tensor<R>&, const Tensor<R>&);                               \
  template Tensor<R> scale<R>(const Tensor<R>&, R);                                            \
  template Tensor<R> add_bias<R>(const Tensor<R>&, const Tensor<R>&);                          \
  template Tensor<R> gelu<R>(const Tensor<R>&);                                                \
  template Tensor<R> layer_norm<R>(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&, R);   \
  template Tensor<R> softmax<R>(const Tensor<R>&, std::ptrdiff_t);                             \
  template Tensor<R> mean<R>(const Tensor<R>&, std::ptrdiff_t);                                \
  template Tensor<R> sum<R>(const Tensor<R>&);                                                 \
  template Tensor<R> reshape<R>(const Tensor<R>&, Shape);                                      \
  template Tensor<R> transpose<R>(const Tensor<R>&);                                           \
  template Tensor<R> gather_rows<R>(const Tensor<R>&, std::vector<std::size_t>);               \
  template Tensor<R> concat_rows<R>(const Tensor<R>&, const Tensor<R>&);                       \
  template Tensor<R> self_attention<R>(const Tensor<R>&, std::size_t, std::size_t, std::size_t);

MEDICAT_INSTANTIATE(float)
MEDICAT_INSTANTIATE(double)

#undef MEDICAT_INSTANTIATE

}  // namespace medicat
