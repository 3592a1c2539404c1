#pragma once

#include <cstddef>
#include <cstdint>

#include "tokmem/common.hpp"

// OpenMP-parallel numeric kernels for the transformer core.
//
// Determinism contract: every output element is produced by exactly one
// thread and its reduction runs in a fixed serial order, so results are
// bitwise identical for any thread count. Parallel loops only ever split
// across independent output elements, never across a single reduction.
//
// Weight matrices are row-major [N x K] holding one output row per output
// feature, i.e. out = x * W^T + b. `ldo`/`ldx` are leading dimensions so
// callers can write into column slices of a wider buffer (the extended
// logit head does this).

namespace tokmem::kern {

template <class S>
void matmul_nt(S* out, int ldo, const S* x, int ldx, const S* w, const S* bias,
               int t_rows, int n_out, int k_in);

// dx[t,:] += sum_n dout[t,n] * w[n,:]
template <class S>
void matmul_nt_bwd_x(S* dx, int lddx, const S* dout, int ldo, const S* w,
                     int t_rows, int n_out, int k_in);

// dw[n,:] += sum_t dout[t,n] * x[t,:]; db[n] += sum_t dout[t,n]
template <class S>
void matmul_nt_bwd_w(S* dw, S* db, const S* dout, int ldo, const S* x, int ldx,
                     int t_rows, int n_out, int k_in);

template <class S>
void layernorm_fwd(S* out, S* mean, S* rstd, const S* x, const S* gamma, const S* beta,
                   int t_rows, int dim);

template <class S>
void layernorm_bwd(S* dx, S* dgamma, S* dbeta, const S* dout, const S* x, const S* mean,
                   const S* rstd, const S* gamma, int t_rows, int dim);

template <class S>
void gelu_fwd(S* out, const S* x, size_t n);

template <class S>
void gelu_bwd(S* dx, const S* dout, const S* x, size_t n);

// Multi-head causal self-attention on one sequence. q/k/v/y are [T x D]
// with head h occupying columns [h*hd, (h+1)*hd). att is [H x T x T],
// rows past the causal frontier left as written (zero-initialised by the
// caller). Scores are scaled by 1/sqrt(hd).
template <class S>
void attention_fwd(S* y, S* att, const S* q, const S* k, const S* v,
                   int t_rows, int heads, int head_dim);

template <class S>
void attention_bwd(S* dq, S* dk, S* dv, S* datt, const S* dy, const S* att,
                   const S* q, const S* k, const S* v, int t_rows, int heads, int head_dim);

template <class S>
void add_inplace(S* dst, const S* src, size_t n);

// Cross-entropy over rows of `logits` ([T x width]) at positions with
// mask != 0. Writes per-position NLL (in nats, computed in double) for
// masked rows, fills dlogits with (softmax - onehot) * inv_count on masked
// rows and zero elsewhere, and returns the summed NLL. dlogits may be null
// when only the forward value is needed.
template <class S>
double masked_xent(S* dlogits, double* nll, const S* logits, const TokenId* targets,
                   const uint8_t* mask, int t_rows, int width, S inv_count);

#define TOKMEM_EXTERN_KERNELS(S)                                                              \
    extern template void matmul_nt<S>(S*, int, const S*, int, const S*, const S*, int, int,  \
                                      int);                                                   \
    extern template void matmul_nt_bwd_x<S>(S*, int, const S*, int, const S*, int, int, int); \
    extern template void matmul_nt_bwd_w<S>(S*, S*, const S*, int, const S*, int, int, int,  \
                                            int);                                             \
    extern template void layernorm_fwd<S>(S*, S*, S*, const S*, const S*, const S*, int, int); \
    extern template void layernorm_bwd<S>(S*, S*, S*, const S*, const S*, const S*, const S*, \
                                          const S*, int, int);                                \
    extern template void gelu_fwd<S>(S*, const S*, size_t);                                   \
    extern template void gelu_bwd<S>(S*, const S*, const S*, size_t);                         \
    extern template void attention_fwd<S>(S*, S*, const S*, const S*, const S*, int, int,     \
                                          int);                                               \
    extern template void attention_bwd<S>(S*, S*, S*, S*, const S*, const S*, const S*,       \
                                          const S*, const S*, int, int, int);                 \
    extern template void add_inplace<S>(S*, const S*, size_t);                                \
    extern template double masked_xent<S>(S*, double*, const S*, const TokenId*,              \
                                          const uint8_t*, int, int, S);

TOKMEM_EXTERN_KERNELS(float)
TOKMEM_EXTERN_KERNELS(double)
#undef TOKMEM_EXTERN_KERNELS

}  // namespace tokmem::kern
