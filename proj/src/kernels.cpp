#include "tokmem/kernels.hpp"

#include <algorithm>
#include <limits>
#include <vector>
#include <cmath>

namespace tokmem::kern {

template <class S>
void matmul_nt(S* out, int ldo, const S* x, int ldx, const S* w, const S* bias,
               int t_rows, int n_out, int k_in) {
#pragma omp parallel for schedule(static)
    for (int t = 0; t < t_rows; ++t) {
        const S* xt = x + static_cast<size_t>(t) * ldx;
        S* ot = out + static_cast<size_t>(t) * ldo;
        for (int n = 0; n < n_out; ++n) {
            const S* wn = w + static_cast<size_t>(n) * k_in;
            S acc = bias ? bias[n] : S(0);
            for (int k = 0; k < k_in; ++k) acc += xt[k] * wn[k];
            ot[n] = acc;
        }
    }
}

template <class S>
void matmul_nt_bwd_x(S* dx, int lddx, const S* dout, int ldo, const S* w,
                     int t_rows, int n_out, int k_in) {
#pragma omp parallel for schedule(static)
    for (int t = 0; t < t_rows; ++t) {
        const S* dot_ = dout + static_cast<size_t>(t) * ldo;
        S* dxt = dx + static_cast<size_t>(t) * lddx;
        for (int n = 0; n < n_out; ++n) {
            const S g = dot_[n];
            if (g == S(0)) continue;
            const S* wn = w + static_cast<size_t>(n) * k_in;
            for (int k = 0; k < k_in; ++k) dxt[k] += g * wn[k];
        }
    }
}

template <class S>
void matmul_nt_bwd_w(S* dw, S* db, const S* dout, int ldo, const S* x, int ldx,
                     int t_rows, int n_out, int k_in) {
#pragma omp parallel for schedule(static)
    for (int n = 0; n < n_out; ++n) {
        S* dwn = dw + static_cast<size_t>(n) * k_in;
        S dbn = S(0);
        for (int t = 0; t < t_rows; ++t) {
            const S g = dout[static_cast<size_t>(t) * ldo + n];
            dbn += g;
            if (g == S(0)) continue;
            const S* xt = x + static_cast<size_t>(t) * ldx;
            for (int k = 0; k < k_in; ++k) dwn[k] += g * xt[k];
        }
        if (db) db[n] += dbn;
    }
}

template <class S>
void layernorm_fwd(S* out, S* mean, S* rstd, const S* x, const S* gamma, const S* beta,
                   int t_rows, int dim) {
    const S eps = S(1e-5);
#pragma omp parallel for schedule(static)
    for (int t = 0; t < t_rows; ++t) {
        const S* xt = x + static_cast<size_t>(t) * dim;
        S* ot = out + static_cast<size_t>(t) * dim;
        S m = S(0);
        for (int i = 0; i < dim; ++i) m += xt[i];
        m /= S(dim);
        S var = S(0);
        for (int i = 0; i < dim; ++i) {
            const S d = xt[i] - m;
            var += d * d;
        }
        var /= S(dim);
        const S rs = S(1) / std::sqrt(var + eps);
        mean[t] = m;
        rstd[t] = rs;
        for (int i = 0; i < dim; ++i) ot[i] = (xt[i] - m) * rs * gamma[i] + beta[i];
    }
}

template <class S>
void layernorm_bwd(S* dx, S* dgamma, S* dbeta, const S* dout, const S* x, const S* mean,
                   const S* rstd, const S* gamma, int t_rows, int dim) {
#pragma omp parallel for schedule(static)
    for (int t = 0; t < t_rows; ++t) {
        const S* xt = x + static_cast<size_t>(t) * dim;
        const S* dot_ = dout + static_cast<size_t>(t) * dim;
        S* dxt = dx + static_cast<size_t>(t) * dim;
        const S m = mean[t];
        const S rs = rstd[t];
        S sum_dg = S(0);
        S sum_dgx = S(0);
        for (int i = 0; i < dim; ++i) {
            const S xhat = (xt[i] - m) * rs;
            const S dg = dot_[i] * gamma[i];
            sum_dg += dg;
            sum_dgx += dg * xhat;
        }
        sum_dg /= S(dim);
        sum_dgx /= S(dim);
        for (int i = 0; i < dim; ++i) {
            const S xhat = (xt[i] - m) * rs;
            const S dg = dot_[i] * gamma[i];
            dxt[i] += (dg - sum_dg - xhat * sum_dgx) * rs;
        }
    }
    // Parameter grads reduce over rows; parallelise across columns instead.
#pragma omp parallel for schedule(static)
    for (int i = 0; i < dim; ++i) {
        S dgi = S(0);
        S dbi = S(0);
        for (int t = 0; t < t_rows; ++t) {
            const S xhat = (x[static_cast<size_t>(t) * dim + i] - mean[t]) * rstd[t];
            const S g = dout[static_cast<size_t>(t) * dim + i];
            dgi += g * xhat;
            dbi += g;
        }
        dgamma[i] += dgi;
        dbeta[i] += dbi;
    }
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

template <class S>
void gelu_fwd(S* out, const S* x, size_t n) {
#pragma omp parallel for schedule(static)
    for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i) {
        const S v = x[i];
        out[i] = v * S(0.5) * (S(1) + S(std::erf(static_cast<double>(v) * kInvSqrt2)));
    }
}

template <class S>
void gelu_bwd(S* dx, const S* dout, const S* x, size_t n) {
#pragma omp parallel for schedule(static)
    for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i) {
        const double v = static_cast<double>(x[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        dx[i] += dout[i] * S(cdf + v * pdf);
    }
}

template <class S>
void attention_fwd(S* y, S* att, const S* q, const S* k, const S* v,
                   int t_rows, int heads, int head_dim) {
    const int dim = heads * head_dim;
    const S scale = S(1) / std::sqrt(S(head_dim));
#pragma omp parallel for collapse(2) schedule(static)
    for (int h = 0; h < heads; ++h) {
        for (int t = 0; t < t_rows; ++t) {
            const size_t off = static_cast<size_t>(h) * head_dim;
            const S* qt = q + static_cast<size_t>(t) * dim + off;
            S* att_row = att + (static_cast<size_t>(h) * t_rows + t) * t_rows;
            S maxv = std::numeric_limits<S>::lowest();
            for (int u = 0; u <= t; ++u) {
                const S* ku = k + static_cast<size_t>(u) * dim + off;
                S s = S(0);
                for (int i = 0; i < head_dim; ++i) s += qt[i] * ku[i];
                s *= scale;
                att_row[u] = s;
                maxv = std::max(maxv, s);
            }
            S denom = S(0);
            for (int u = 0; u <= t; ++u) {
                const S e = std::exp(att_row[u] - maxv);
                att_row[u] = e;
                denom += e;
            }
            const S inv = S(1) / denom;
            for (int u = 0; u <= t; ++u) att_row[u] *= inv;
            S* yt = y + static_cast<size_t>(t) * dim + off;
            for (int i = 0; i < head_dim; ++i) yt[i] = S(0);
            for (int u = 0; u <= t; ++u) {
                const S w = att_row[u];
                const S* vu = v + static_cast<size_t>(u) * dim + off;
                for (int i = 0; i < head_dim; ++i) yt[i] += w * vu[i];
            }
        }
    }
}

template <class S>
void attention_bwd(S* dq, S* dk, S* dv, S* datt, const S* dy, const S* att,
                   const S* q, const S* k, const S* v, int t_rows, int heads, int head_dim) {
    const int dim = heads * head_dim;
    const S scale = S(1) / std::sqrt(S(head_dim));
    // Stage 1: datt (post-softmax-to-pre-softmax) and dq. One (h, t) pair
    // per thread keeps every reduction order fixed.
#pragma omp parallel for collapse(2) schedule(static)
    for (int h = 0; h < heads; ++h) {
        for (int t = 0; t < t_rows; ++t) {
            const size_t off = static_cast<size_t>(h) * head_dim;
            const S* dyt = dy + static_cast<size_t>(t) * dim + off;
            const S* att_row = att + (static_cast<size_t>(h) * t_rows + t) * t_rows;
            S* datt_row = datt + (static_cast<size_t>(h) * t_rows + t) * t_rows;
            // d(att weights) from the weighted value sum.
            S dot_sum = S(0);
            for (int u = 0; u <= t; ++u) {
                const S* vu = v + static_cast<size_t>(u) * dim + off;
                S s = S(0);
                for (int i = 0; i < head_dim; ++i) s += dyt[i] * vu[i];
                datt_row[u] = s;
                dot_sum += s * att_row[u];
            }
            // Softmax backward, then the 1/sqrt(hd) score scale.
            for (int u = 0; u <= t; ++u) {
                datt_row[u] = att_row[u] * (datt_row[u] - dot_sum) * scale;
            }
            S* dqt = dq + static_cast<size_t>(t) * dim + off;
            for (int u = 0; u <= t; ++u) {
                const S g = datt_row[u];
                const S* ku = k + static_cast<size_t>(u) * dim + off;
                for (int i = 0; i < head_dim; ++i) dqt[i] += g * ku[i];
            }
        }
    }
    // Stage 2: dk/dv accumulate over the causal future of each position.
#pragma omp parallel for collapse(2) schedule(static)
    for (int h = 0; h < heads; ++h) {
        for (int u = 0; u < t_rows; ++u) {
            const size_t off = static_cast<size_t>(h) * head_dim;
            S* dku = dk + static_cast<size_t>(u) * dim + off;
            S* dvu = dv + static_cast<size_t>(u) * dim + off;
            for (int t = u; t < t_rows; ++t) {
                const S g = datt[(static_cast<size_t>(h) * t_rows + t) * t_rows + u];
                const S w = att[(static_cast<size_t>(h) * t_rows + t) * t_rows + u];
                const S* qt = q + static_cast<size_t>(t) * dim + off;
                const S* dyt = dy + static_cast<size_t>(t) * dim + off;
                for (int i = 0; i < head_dim; ++i) {
                    dku[i] += g * qt[i];
                    dvu[i] += w * dyt[i];
                }
            }
        }
    }
}

template <class S>
void add_inplace(S* dst, const S* src, size_t n) {
#pragma omp parallel for schedule(static)
    for (ptrdiff_t i = 0; i < static_cast<ptrdiff_t>(n); ++i) dst[i] += src[i];
}

template <class S>
double masked_xent(S* dlogits, double* nll, const S* logits, const TokenId* targets,
                   const uint8_t* mask, int t_rows, int width, S inv_count) {
    std::vector<double> local;
    double* per_pos = nll;
    if (!per_pos) {
        local.assign(static_cast<size_t>(t_rows), 0.0);
        per_pos = local.data();
    }
#pragma omp parallel for schedule(static)
    for (int t = 0; t < t_rows; ++t) {
        const S* lt = logits + static_cast<size_t>(t) * width;
        S* dt = dlogits ? dlogits + static_cast<size_t>(t) * width : nullptr;
        if (!mask[t]) {
            if (dt) std::fill(dt, dt + width, S(0));
            per_pos[t] = 0.0;
            continue;
        }
        S maxv = lt[0];
        for (int i = 1; i < width; ++i) maxv = std::max(maxv, lt[i]);
        double denom = 0.0;
        for (int i = 0; i < width; ++i) denom += std::exp(static_cast<double>(lt[i] - maxv));
        const TokenId tgt = targets[t];
        per_pos[t] = -(static_cast<double>(lt[tgt] - maxv) - std::log(denom));
        if (dt) {
            const double inv_denom = 1.0 / denom;
            for (int i = 0; i < width; ++i) {
                const double p = std::exp(static_cast<double>(lt[i] - maxv)) * inv_denom;
                dt[i] = S(p) * inv_count;
            }
            dt[tgt] -= inv_count;
        }
    }
    // Serial sum keeps the returned loss independent of the thread count.
    double total = 0.0;
    for (int t = 0; t < t_rows; ++t) total += per_pos[t];
    return total;
}

#define TOKMEM_INST_KERNELS(S)                                                             \
    template void matmul_nt<S>(S*, int, const S*, int, const S*, const S*, int, int, int); \
    template void matmul_nt_bwd_x<S>(S*, int, const S*, int, const S*, int, int, int);     \
    template void matmul_nt_bwd_w<S>(S*, S*, const S*, int, const S*, int, int, int, int); \
    template void layernorm_fwd<S>(S*, S*, S*, const S*, const S*, const S*, int, int);    \
    template void layernorm_bwd<S>(S*, S*, S*, const S*, const S*, const S*, const S*,     \
                                   const S*, int, int);                                    \
    template void gelu_fwd<S>(S*, const S*, size_t);                                       \
    template void gelu_bwd<S>(S*, const S*, const S*, size_t);                             \
    template void attention_fwd<S>(S*, S*, const S*, const S*, const S*, int, int, int);   \
    template void attention_bwd<S>(S*, S*, S*, S*, const S*, const S*, const S*, const S*, \
                                   const S*, int, int, int);                               \
    template void add_inplace<S>(S*, const S*, size_t);                                    \
    template double masked_xent<S>(S*, double*, const S*, const TokenId*, const uint8_t*,  \
                                   int, int, S);

TOKMEM_INST_KERNELS(float)
TOKMEM_INST_KERNELS(double)
#undef TOKMEM_INST_KERNELS

}  // namespace tokmem::kern
