#pragma once

// Dense kernels behind the tensor ops. Every kernel exists twice:
//   serial::   straightforward loops, the reference the tests compare against
//   parallel:: blocked / OpenMP version used for training
// Parallel kernels split work over independent output blocks only, so the
// floating-point evaluation order of any single output never depends on the
// thread count. Training runs stay bitwise reproducible with OMP_NUM_THREADS.

#include <cstddef>

namespace medicat::kernels {

enum class Backend { serial, parallel };

void set_backend(Backend backend) noexcept;
Backend backend() noexcept;

class ScopedBackend {
 public:
  explicit ScopedBackend(Backend b) : saved_(backend()) { set_backend(b); }
  ~ScopedBackend() { set_backend(saved_); }
  ScopedBackend(const ScopedBackend&) = delete;
  ScopedBackend& operator=(const ScopedBackend&) = delete;

 private:
  Backend saved_;
};

// Multi-head self-attention over a packed qkv matrix. Row (b * tokens + t)
// holds [q | k | v], each `heads * head_dim` wide; head h owns columns
// [h * head_dim, (h + 1) * head_dim) of each block.
struct AttentionShape {
  std::size_t batch = 0;
  std::size_t tokens = 0;
  std::size_t heads = 0;
  std::size_t head_dim = 0;

  std::size_t model_dim() const { return heads * head_dim; }
  std::size_t prob_count() const { return batch * heads * tokens * tokens; }
};

#define MEDICAT_KERNEL_DECLS                                                                    \
  /* c = a[m x k] * b[k x n]; with accumulate, c += a * b. Row-major, contiguous. */           \
  template <typename R>                                                                        \
  void gemm(std::size_t m, std::size_t n, std::size_t k, const R* a, const R* b, R* c,         \
            bool accumulate);                                                                  \
  template <typename R>                                                                        \
  void attention_forward(const AttentionShape& s, const R* qkv, R* out, R* probs);             \
  /* dqkv accumulates. */                                                                      \
  template <typename R>                                                                        \
  void attention_backward(const AttentionShape& s, const R* qkv, const R* probs,               \
                          const R* dout, R* dqkv);                                             \
  template <typename R>                                                                        \
  void layer_norm_forward(std::size_t rows, std::size_t cols, const R* x, const R* gamma,      \
                          const R* beta, R eps, R* y, R* xhat, R* rstd);                       \
  /* dx accumulates; gamma/beta gradients are reduced by the caller. */                        \
  template <typename R>                                                                        \
  void layer_norm_backward(std::size_t rows, std::size_t cols, const R* dy, const R* gamma,    \
                           const R* xhat, const R* rstd, R* dx);                               \
  template <typename R>                                                                        \
  void gelu_forward(std::size_t n, const R* x, R* y);                                          \
  template <typename R>                                                                        \
  void gelu_backward(std::size_t n, const R* x, const R* dy, R* dx);

namespace serial {
MEDICAT_KERNEL_DECLS
}  // namespace serial

namespace parallel {
MEDICAT_KERNEL_DECLS
}  // namespace parallel

// Dispatch on backend().
MEDICAT_KERNEL_DECLS

#undef MEDICAT_KERNEL_DECLS

// dst[cols x rows] = src[rows x cols]^T
template <typename R>
void transpose(std::size_t rows, std::size_t cols, const R* src, R* dst);

}  // namespace medicat::kernels
