#pragma once

// Dense compute kernels. Each kernel has a serial reference implementation and
// an OpenMP implementation. The parallel versions partition work over output
// rows (or over (sequence, head) pairs for attention) and keep the per-element
// accumulation order of the serial code, so both produce bit-identical results.

#include <cstddef>
#include <cstdint>
#include <span>

namespace tcl::kernels {

enum class Backend { serial, parallel };

void set_backend(Backend b);
Backend backend();

// Caps the OpenMP team size. Reads TCL_THREADS when called with 0.
void configure_threads(int threads = 0);

// Shapes for one batched multi-head attention call. Q has batch*q_len rows,
// K and V have batch*k_len rows, all with `dim` columns split into `heads`.
struct AttentionShape {
  std::size_t batch = 1;
  std::size_t q_len = 1;
  std::size_t k_len = 1;
  std::size_t dim = 1;
  std::size_t heads = 1;
};

#define TCL_KERNEL_DECLS                                                                     \
  /* C(m,n) (+)= A(m,k) * B(k,n) */                                                          \
  void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,    \
               std::size_t n, bool accumulate);                                              \
  /* C(m,n) (+)= A(m,k) * B(n,k)^T */                                                        \
  void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,    \
               std::size_t n, bool accumulate);                                              \
  /* C(m,n) (+)= A(k,m)^T * B(k,n) */                                                        \
  void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,    \
               std::size_t n, bool accumulate);                                              \
  /* probs: batch*heads*q_len*k_len; key_valid: batch*k_len or empty */                      \
  void attention_forward(const double* q, const double* k, const double* v, double* out,     \
                         double* probs, std::span<const std::uint8_t> key_valid,             \
                         const AttentionShape& s);                                           \
  /* accumulates into dq, dk, dv (any may be null) */                                        \
  void attention_backward(const double* q, const double* k, const double* v,                 \
                          const double* probs, const double* dout, double* dq, double* dk,   \
                          double* dv, const AttentionShape& s);

namespace serial {
TCL_KERNEL_DECLS
}
namespace parallel {
TCL_KERNEL_DECLS
}

#undef TCL_KERNEL_DECLS

// Dispatch to the active backend.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate);
void attention_forward(const double* q, const double* k, const double* v, double* out,
                       double* probs, std::span<const std::uint8_t> key_valid,
                       const AttentionShape& s);
void attention_backward(const double* q, const double* k, const double* v, const double* probs,
                        const double* dout, double* dq, double* dk, double* dv,
                        const AttentionShape& s);

}  // namespace tcl::kernels
