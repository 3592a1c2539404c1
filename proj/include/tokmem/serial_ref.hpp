#pragma once

#include <cmath>
#include <limits>

#include "tokmem/common.hpp"

// Straight-line serial reference implementations of the parallel kernels.
// Tests check the OpenMP kernels against these; the benchmark target
// compares their throughput. No pragmas, textbook loop order.

namespace tokmem::ref {

template <class S>
void matmul_nt(S* out, int ldo, const S* x, int ldx, const S* w, const S* bias,
               int t_rows, int n_out, int k_in) {
    for (int t = 0; t < t_rows; ++t) {
        for (int n = 0; n < n_out; ++n) {
            S acc = bias ? bias[n] : S(0);
            for (int k = 0; k < k_in; ++k) {
                acc += x[static_cast<size_t>(t) * ldx + k] * w[static_cast<size_t>(n) * k_in + k];
            }
            out[static_cast<size_t>(t) * ldo + n] = acc;
        }
    }
}

template <class S>
void layernorm_fwd(S* out, const S* x, const S* gamma, const S* beta, int t_rows, int dim) {
    const S eps = S(1e-5);
    for (int t = 0; t < t_rows; ++t) {
        const S* xt = x + static_cast<size_t>(t) * dim;
        S mean = S(0);
        for (int i = 0; i < dim; ++i) mean += xt[i];
        mean /= S(dim);
        S var = S(0);
        for (int i = 0; i < dim; ++i) var += (xt[i] - mean) * (xt[i] - mean);
        var /= S(dim);
        const S rstd = S(1) / std::sqrt(var + eps);
        for (int i = 0; i < dim; ++i) {
            out[static_cast<size_t>(t) * dim + i] = (xt[i] - mean) * rstd * gamma[i] + beta[i];
        }
    }
}

template <class S>
void gelu_fwd(S* out, const S* x, size_t n) {
    for (size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(x[i]);
        out[i] = S(v * 0.5 * (1.0 + std::erf(v * 0.70710678118654752440)));
    }
}

template <class S>
void attention_fwd(S* y, const S* q, const S* k, const S* v, int t_rows, int heads,
                   int head_dim) {
    const int dim = heads * head_dim;
    const S scale = S(1) / std::sqrt(S(head_dim));
    std::vector<S> row(static_cast<size_t>(t_rows));
    for (int h = 0; h < heads; ++h) {
        const size_t off = static_cast<size_t>(h) * head_dim;
        for (int t = 0; t < t_rows; ++t) {
            S maxv = std::numeric_limits<S>::lowest();
            for (int u = 0; u <= t; ++u) {
                S s = S(0);
                for (int i = 0; i < head_dim; ++i) {
                    s += q[static_cast<size_t>(t) * dim + off + i] *
                         k[static_cast<size_t>(u) * dim + off + i];
                }
                row[u] = s * scale;
                maxv = std::max(maxv, row[u]);
            }
            S denom = S(0);
            for (int u = 0; u <= t; ++u) {
                row[u] = std::exp(row[u] - maxv);
                denom += row[u];
            }
            for (int i = 0; i < head_dim; ++i) {
                S acc = S(0);
                for (int u = 0; u <= t; ++u) {
                    acc += (row[u] / denom) * v[static_cast<size_t>(u) * dim + off + i];
                }
                y[static_cast<size_t>(t) * dim + off + i] = acc;
            }
        }
    }
}

}  // namespace tokmem::ref
