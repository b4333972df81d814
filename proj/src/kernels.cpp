#include "medicat/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <vector>

namespace medicat::kernels {

namespace {

std::atomic<Backend> g_backend{Backend::parallel};

template <typename R>
R gelu_value(R x) {
  return R(0.5) * x * (R(1) + std::erf(x * R(M_SQRT1_2)));
}

template <typename R>
R gelu_slope(R x) {
  const R cdf = R(0.5) * (R(1) + std::erf(x * R(M_SQRT1_2)));
  const R pdf = std::exp(R(-0.5) * x * x) * R(0.3989422804014327);  // 1/sqrt(2*pi)
  return cdf + x * pdf;
}

// Parallel regions only pay off above this many multiply-adds.
constexpr std::size_t kParallelWork = 1u << 15;

}  // namespace

void set_backend(Backend b) noexcept { g_backend.store(b, std::memory_order_relaxed); }
Backend backend() noexcept { return g_backend.load(std::memory_order_relaxed); }

template <typename R>
void transpose(std::size_t rows, std::size_t cols, const R* src, R* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock) {
    const std::size_t i1 = std::min(rows, i0 + kBlock);
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock) {
      const std::size_t j1 = std::min(cols, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  }
}

// ---------------------------------------------------------------------------
// serial reference
// ---------------------------------------------------------------------------
namespace serial {

template <typename R>
void gemm(std::size_t m, std::size_t n, std::size_t k, const R* a, const R* b, R* c,
          bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      R s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

template <typename R>
void attention_forward(const AttentionShape& s, const R* qkv, R* out, R* probs) {
  const std::size_t T = s.tokens, D = s.model_dim(), dh = s.head_dim, stride = 3 * D;
  const R scale = R(1) / std::sqrt(R(dh));
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t h = 0; h < s.heads; ++h) {
      R* P = probs + (b * s.heads + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        const R* q = qkv + (b * T + i) * stride + h * dh;
        R mx = -INFINITY;
        for (std::size_t j = 0; j < T; ++j) {
          const R* kk = qkv + (b * T + j) * stride + D + h * dh;
          R dot = 0;
          for (std::size_t c = 0; c < dh; ++c) dot += q[c] * kk[c];
          P[i * T + j] = dot * scale;
          mx = std::max(mx, P[i * T + j]);
        }
        R z = 0;
        for (std::size_t j = 0; j < T; ++j) {
          P[i * T + j] = std::exp(P[i * T + j] - mx);
          z += P[i * T + j];
        }
        for (std::size_t j = 0; j < T; ++j) P[i * T + j] /= z;
        R* o = out + (b * T + i) * D + h * dh;
        for (std::size_t c = 0; c < dh; ++c) {
          R acc = 0;
          for (std::size_t j = 0; j < T; ++j)
            acc += P[i * T + j] * qkv[(b * T + j) * stride + 2 * D + h * dh + c];
          o[c] = acc;
        }
      }
    }
  }
}

template <typename R>
void attention_backward(const AttentionShape& s, const R* qkv, const R* probs, const R* dout,
                        R* dqkv) {
  const std::size_t T = s.tokens, D = s.model_dim(), dh = s.head_dim, stride = 3 * D;
  const R scale = R(1) / std::sqrt(R(dh));
  std::vector<R> dS(T * T);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t h = 0; h < s.heads; ++h) {
      const R* P = probs + (b * s.heads + h) * T * T;
      auto q_at = [&](std::size_t t, std::size_t c) { return qkv[(b * T + t) * stride + h * dh + c]; };
      auto k_at = [&](std::size_t t, std::size_t c) { return qkv[(b * T + t) * stride + D + h * dh + c]; };
      auto v_at = [&](std::size_t t, std::size_t c) { return qkv[(b * T + t) * stride + 2 * D + h * dh + c]; };
      auto do_at = [&](std::size_t t, std::size_t c) { return dout[(b * T + t) * D + h * dh + c]; };
      auto dq = [&](std::size_t t, std::size_t c) -> R& { return dqkv[(b * T + t) * stride + h * dh + c]; };
      auto dk = [&](std::size_t t, std::size_t c) -> R& { return dqkv[(b * T + t) * stride + D + h * dh + c]; };
      auto dv = [&](std::size_t t, std::size_t c) -> R& { return dqkv[(b * T + t) * stride + 2 * D + h * dh + c]; };

      for (std::size_t j = 0; j < T; ++j)
        for (std::size_t c = 0; c < dh; ++c) {
          R acc = 0;
          for (std::size_t i = 0; i < T; ++i) acc += P[i * T + j] * do_at(i, c);
          dv(j, c) += acc;
        }
      for (std::size_t i = 0; i < T; ++i) {
        R row = 0;
        for (std::size_t j = 0; j < T; ++j) {
          R dp = 0;
          for (std::size_t c = 0; c < dh; ++c) dp += do_at(i, c) * v_at(j, c);
          dS[i * T + j] = dp;
          row += dp * P[i * T + j];
        }
        for (std::size_t j = 0; j < T; ++j) dS[i * T + j] = P[i * T + j] * (dS[i * T + j] - row);
      }
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t c = 0; c < dh; ++c) {
          R acc = 0;
          for (std::size_t j = 0; j < T; ++j) acc += dS[i * T + j] * k_at(j, c);
          dq(i, c) += acc * scale;
        }
      for (std::size_t j = 0; j < T; ++j)
        for (std::size_t c = 0; c < dh; ++c) {
          R acc = 0;
          for (std::size_t i = 0; i < T; ++i) acc += dS[i * T + j] * q_at(i, c);
          dk(j, c) += acc * scale;
        }
    }
  }
}

template <typename R>
void layer_norm_forward(std::size_t rows, std::size_t cols, const R* x, const R* gamma,
                        const R* beta, R eps, R* y, R* xhat, R* rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    const R* xr = x + r * cols;
    R mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= R(cols);
    R var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= R(cols);
    const R rs = R(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) {
      const R xh = (xr[c] - mean) * rs;
      xhat[r * cols + c] = xh;
      y[r * cols + c] = gamma[c] * xh + beta[c];
    }
  }
}

template <typename R>
void layer_norm_backward(std::size_t rows, std::size_t cols, const R* dy, const R* gamma,
                         const R* xhat, const R* rstd, R* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    R m1 = 0, m2 = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      const R g = dy[r * cols + c] * gamma[c];
      m1 += g;
      m2 += g * xhat[r * cols + c];
    }
    m1 /= R(cols);
    m2 /= R(cols);
    for (std::size_t c = 0; c < cols; ++c) {
      const R g = dy[r * cols + c] * gamma[c];
      dx[r * cols + c] += rstd[r] * (g - m1 - xhat[r * cols + c] * m2);
    }
  }
}

template <typename R>
void gelu_forward(std::size_t n, const R* x, R* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = gelu_value(x[i]);
}

template <typename R>
void gelu_backward(std::size_t n, const R* x, const R* dy, R* dx) {
  for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * gelu_slope(x[i]);
}

}  // namespace serial

// ---------------------------------------------------------------------------
// parallel
// ---------------------------------------------------------------------------
namespace parallel {

namespace {

// Register tile: MR rows of a against an NR-wide panel of b.
template <typename R, std::size_t MR, std::size_t NR>
inline void gemm_tile(std::size_t n, std::size_t k, const R* a, const R* b, R* c,
                      bool accumulate) {
  R sum[MR][NR] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const R* brow = b + p * n;
    for (std::size_t r = 0; r < MR; ++r) {
      const R av = a[r * k + p];
      for (std::size_t q = 0; q < NR; ++q) sum[r][q] += av * brow[q];
    }
  }
  for (std::size_t r = 0; r < MR; ++r)
    for (std::size_t q = 0; q < NR; ++q)
      c[r * n + q] = accumulate ? c[r * n + q] + sum[r][q] : sum[r][q];
}

template <typename R>
inline void gemm_edge(std::size_t rows, std::size_t cols, std::size_t n, std::size_t k,
                      const R* a, const R* b, R* c, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t q = 0; q < cols; ++q) {
      R s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[r * k + p] * b[p * n + q];
      c[r * n + q] = accumulate ? c[r * n + q] + s : s;
    }
}

}  // namespace

template <typename R>
void gemm(std::size_t m, std::size_t n, std::size_t k, const R* a, const R* b, R* c,
          bool accumulate) {
  constexpr std::size_t MR = 4;
  constexpr std::size_t NR = 32;
  const std::ptrdiff_t blocks = static_cast<std::ptrdiff_t>((m + MR - 1) / MR);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelWork)
  for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
    const std::size_t i0 = static_cast<std::size_t>(blk) * MR;
    const std::size_t rows = std::min(MR, m - i0);
    const R* ab = a + i0 * k;
    R* cb = c + i0 * n;
    std::size_t j0 = 0;
    for (; j0 + NR <= n; j0 += NR) {
      if (rows == MR) {
        gemm_tile<R, MR, NR>(n, k, ab, b + j0, cb + j0, accumulate);
      } else {
        for (std::size_t r = 0; r < rows; ++r)
          gemm_tile<R, 1, NR>(n, k, ab + r * k, b + j0, cb + r * n + j0, accumulate);
      }
    }
    if (j0 < n) gemm_edge(rows, n - j0, n, k, ab, b + j0, cb + j0, accumulate);
  }
}

template <typename R>
void attention_forward(const AttentionShape& s, const R* qkv, R* out, R* probs) {
  const std::size_t T = s.tokens, D = s.model_dim(), dh = s.head_dim, stride = 3 * D;
  const R scale = R(1) / std::sqrt(R(dh));
  const std::ptrdiff_t jobs = static_cast<std::ptrdiff_t>(s.batch * s.heads);
#pragma omp parallel if (s.batch * s.heads > 1)
  {
    std::vector<R> kt(dh * T), v(T * dh);
#pragma omp for schedule(static)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
      const std::size_t b = static_cast<std::size_t>(job) / s.heads;
      const std::size_t h = static_cast<std::size_t>(job) % s.heads;
      for (std::size_t t = 0; t < T; ++t) {
        const R* row = qkv + (b * T + t) * stride;
        for (std::size_t c = 0; c < dh; ++c) {
          kt[c * T + t] = row[D + h * dh + c];
          v[t * dh + c] = row[2 * D + h * dh + c];
        }
      }
      R* P = probs + static_cast<std::size_t>(job) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        const R* q = qkv + (b * T + i) * stride + h * dh;
        R* pr = P + i * T;
        for (std::size_t j = 0; j < T; ++j) pr[j] = 0;
        for (std::size_t c = 0; c < dh; ++c) {
          const R qc = q[c];
          const R* kr = kt.data() + c * T;
          for (std::size_t j = 0; j < T; ++j) pr[j] += qc * kr[j];
        }
        R mx = -INFINITY;
        for (std::size_t j = 0; j < T; ++j) {
          pr[j] *= scale;
          mx = std::max(mx, pr[j]);
        }
        R z = 0;
        for (std::size_t j = 0; j < T; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          z += pr[j];
        }
        const R inv = R(1) / z;
        for (std::size_t j = 0; j < T; ++j) pr[j] *= inv;
        R* o = out + (b * T + i) * D + h * dh;
        for (std::size_t c = 0; c < dh; ++c) o[c] = 0;
        for (std::size_t j = 0; j < T; ++j) {
          const R pj = pr[j];
          const R* vr = v.data() + j * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += pj * vr[c];
        }
      }
    }
  }
}

template <typename R>
void attention_backward(const AttentionShape& s, const R* qkv, const R* probs, const R* dout,
                        R* dqkv) {
  const std::size_t T = s.tokens, D = s.model_dim(), dh = s.head_dim, stride = 3 * D;
  const R scale = R(1) / std::sqrt(R(dh));
  const std::ptrdiff_t jobs = static_cast<std::ptrdiff_t>(s.batch * s.heads);
#pragma omp parallel if (s.batch * s.heads > 1)
  {
    std::vector<R> q(T * dh), k(T * dh), v(T * dh), dO(T * dh), dS(T * T);
    std::vector<R> dq(T * dh), dk(T * dh), dv(T * dh);
#pragma omp for schedule(static)
    for (std::ptrdiff_t job = 0; job < jobs; ++job) {
      const std::size_t b = static_cast<std::size_t>(job) / s.heads;
      const std::size_t h = static_cast<std::size_t>(job) % s.heads;
      for (std::size_t t = 0; t < T; ++t) {
        const R* row = qkv + (b * T + t) * stride;
        const R* drow = dout + (b * T + t) * D + h * dh;
        for (std::size_t c = 0; c < dh; ++c) {
          q[t * dh + c] = row[h * dh + c];
          k[t * dh + c] = row[D + h * dh + c];
          v[t * dh + c] = row[2 * D + h * dh + c];
          dO[t * dh + c] = drow[c];
        }
      }
      const R* P = probs + static_cast<std::size_t>(job) * T * T;
      std::fill(dq.begin(), dq.end(), R(0));
      std::fill(dk.begin(), dk.end(), R(0));
      std::fill(dv.begin(), dv.end(), R(0));
      // dV = P^T dO
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j) {
          const R pij = P[i * T + j];
          for (std::size_t c = 0; c < dh; ++c) dv[j * dh + c] += pij * dO[i * dh + c];
        }
      // dS = P * (dO V^T - rowsum)
      for (std::size_t i = 0; i < T; ++i) {
        R row = 0;
        for (std::size_t j = 0; j < T; ++j) {
          R dp = 0;
          for (std::size_t c = 0; c < dh; ++c) dp += dO[i * dh + c] * v[j * dh + c];
          dS[i * T + j] = dp;
          row += dp * P[i * T + j];
        }
        for (std::size_t j = 0; j < T; ++j) dS[i * T + j] = P[i * T + j] * (dS[i * T + j] - row);
      }
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j) {
          const R g = dS[i * T + j];
          for (std::size_t c = 0; c < dh; ++c) {
            dq[i * dh + c] += g * k[j * dh + c];
            dk[j * dh + c] += g * q[i * dh + c];
          }
        }
      for (std::size_t t = 0; t < T; ++t) {
        R* row = dqkv + (b * T + t) * stride;
        for (std::size_t c = 0; c < dh; ++c) {
          row[h * dh + c] += dq[t * dh + c] * scale;
          row[D + h * dh + c] += dk[t * dh + c] * scale;
          row[2 * D + h * dh + c] += dv[t * dh + c];
        }
      }
    }
  }
}

template <typename R>
void layer_norm_forward(std::size_t rows, std::size_t cols, const R* x, const R* gamma,
                        const R* beta, R eps, R* y, R* xhat, R* rstd) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r)
    serial::layer_norm_forward<R>(1, cols, x + r * cols, gamma, beta, eps, y + r * cols,
                                  xhat + r * cols, rstd + r);
}

template <typename R>
void layer_norm_backward(std::size_t rows, std::size_t cols, const R* dy, const R* gamma,
                         const R* xhat, const R* rstd, R* dx) {
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
  for (std::ptrdiff_t r = 0; r < n; ++r)
    serial::layer_norm_backward<R>(1, cols, dy + r * cols, gamma, xhat + r * cols, rstd + r,
                                   dx + r * cols);
}

template <typename R>
void gelu_forward(std::size_t n, const R* x, R* y) {
  const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for simd schedule(static) if (n > kParallelWork)
  for (std::ptrdiff_t i = 0; i < len; ++i) y[i] = gelu_value(x[i]);
}

template <typename R>
void gelu_backward(std::size_t n, const R* x, const R* dy, R* dx) {
  const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for simd schedule(static) if (n > kParallelWork)
  for (std::ptrdiff_t i = 0; i < len; ++i) dx[i] += dy[i] * gelu_slope(x[i]);
}

}  // namespace parallel

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

#define MEDICAT_DISPATCH(name, ...)                                         \
  if (backend() == Backend::serial) return serial::name<R>(__VA_ARGS__);    \
  return parallel::name<R>(__VA_ARGS__);

template <typename R>
void gemm(std::size_t m, std::size_t n, std::size_t k, const R* a, const R* b, R* c,
          bool accumulate) {
  MEDICAT_DISPATCH(gemm, m, n, k, a, b, c, accumulate)
}

template <typename R>
void attention_forward(const AttentionShape& s, const R* qkv, R* out, R* probs) {
  MEDICAT_DISPATCH(attention_forward, s, qkv, out, probs)
}

template <typename R>
void attention_backward(const AttentionShape& s, const R* qkv, const R* probs, const R* dout,
                        R* dqkv) {
  MEDICAT_DISPATCH(attention_backward, s, qkv, probs, dout, dqkv)
}

template <typename R>
void layer_norm_forward(std::size_t rows, std::size_t cols, const R* x, const R* gamma,
                        const R* beta, R eps, R* y, R* xhat, R* rstd) {
  MEDICAT_DISPATCH(layer_norm_forward, rows, cols, x, gamma, beta, eps, y, xhat, rstd)
}

template <typename R>
void layer_norm_backward(std::size_t rows, std::size_t cols, const R* dy, const R* gamma,
                         const R* xhat, const R* rstd, R* dx) {
  MEDICAT_DISPATCH(layer_norm_backward, rows, cols, dy, gamma, xhat, rstd, dx)
}

template <typename R>
void gelu_forward(std::size_t n, const R* x, R* y) {
  MEDICAT_DISPATCH(gelu_forward, n, x, y)
}

template <typename R>
void gelu_backward(std::size_t n, const R* x, const R* dy, R* dx) {
  MEDICAT_DISPATCH(gelu_backward, n, x, dy, dx)
}

#undef MEDICAT_DISPATCH

#define MEDICAT_INSTANTIATE(NS, R)                                                            \
  template void NS gemm<R>(std::size_t, std::size_t, std::size_t, const R*, const R*, R*,    \
                           bool);                                                            \
  template void NS attention_forward<R>(const AttentionShape&, const R*, R*, R*);            \
  template void NS attention_backward<R>(const AttentionShape&, const R*, const R*,          \
                                         const R*, R*);                                      \
  template void NS layer_norm_forward<R>(std::size_t, std::size_t, const R*, const R*,       \
                                         const R*, R, R*, R*, R*);                           \
  template void NS layer_norm_backward<R>(std::size_t, std::size_t, const R*, const R*,      \
                                          const R*, const R*, R*);                           \
  template void NS gelu_forward<R>(std::size_t, const R*, R*);                               \
  template void NS gelu_backward<R>(std::size_t, const R*, const R*, R*);

MEDICAT_INSTANTIATE(serial::, float)
MEDICAT_INSTANTIATE(serial::, double)
MEDICAT_INSTANTIATE(parallel::, float)
MEDICAT_INSTANTIATE(parallel::, double)
MEDICAT_INSTANTIATE(, float)
MEDICAT_INSTANTIATE(, double)

#undef MEDICAT_INSTANTIATE

template void transpose<float>(std::size_t, std::size_t, const float*, float*);
template void transpose<double>(std::size_t, std::size_t, const double*, double*);

}  // namespace medicat::kernels
