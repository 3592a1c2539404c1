#include "tokmem/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "tokmem/io_util.hpp"
#include "tokmem/kernels.hpp"

namespace tokmem {

namespace {

// Single source of truth for parameter order (checkpoint layout, optimizer
// groups and checksums all iterate through here).
template <class B, class F>
void for_each_backbone_tensor(B& b, bool include_adapters, F&& visit) {
    visit(b.tok_embed.a);
    visit(b.pos_embed.a);
    for (auto& layer : b.layers) {
        visit(layer.ln1_g);
        visit(layer.ln1_b);
        visit(layer.wq.a);
        visit(layer.bq);
        visit(layer.wk.a);
        visit(layer.bk);
        visit(layer.wv.a);
        visit(layer.bv);
        visit(layer.wo.a);
        visit(layer.bo);
        visit(layer.ln2_g);
        visit(layer.ln2_b);
        visit(layer.w_fc.a);
        visit(layer.b_fc);
        visit(layer.w_proj.a);
        visit(layer.b_proj);
    }
    visit(b.lnf_g);
    visit(b.lnf_b);
    if (include_adapters && b.adapters) {
        for (auto& layer : b.adapters->layers) {
            visit(layer.q.down.a);
            visit(layer.q.up.a);
            visit(layer.k.down.a);
            visit(layer.k.up.a);
        }
    }
}

template <class S>
void fill_normal(std::vector<S>& v, uint64_t seed, uint64_t salt, double stddev) {
    Rng rng(mix_seed(seed, salt));
    for (auto& x : v) x = S(stddev * rng.normal());
}

}  // namespace

template <class S>
std::vector<std::span<S>> backbone_param_spans(Backbone<S>& b, bool include_adapters) {
    std::vector<std::span<S>> out;
    for_each_backbone_tensor(b, include_adapters,
                             [&](std::vector<S>& t) { out.emplace_back(t.data(), t.size()); });
    return out;
}

template <class S>
std::vector<std::span<S>> adapter_param_spans(AdapterSet<S>& a) {
    std::vector<std::span<S>> out;
    for (auto& layer : a.layers) {
        out.emplace_back(layer.q.down.a.data(), layer.q.down.a.size());
        out.emplace_back(layer.q.up.a.data(), layer.q.up.a.size());
        out.emplace_back(layer.k.down.a.data(), layer.k.down.a.size());
        out.emplace_back(layer.k.up.a.data(), layer.k.up.a.size());
    }
    return out;
}

template <class S>
Backbone<S> init_backbone(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    const int d = cfg.d_model;
    Backbone<S> b;
    b.cfg = cfg;
    b.cfg.seed = seed;
    b.tok_embed = Mat<S>(cfg.vocab_size, d);
    b.pos_embed = Mat<S>(cfg.max_seq_len, d);
    b.layers.resize(static_cast<size_t>(cfg.n_layers));
    const double base_std = 0.02;
    // Residual-output projections are damped with depth, the usual recipe
    // for stable pre-norm stacks.
    const double out_std = base_std / std::sqrt(2.0 * cfg.n_layers);
    uint64_t salt = 1;
    fill_normal(b.tok_embed.a, seed, salt++, base_std);
    fill_normal(b.pos_embed.a, seed, salt++, base_std);
    for (auto& layer : b.layers) {
        layer.ln1_g.assign(static_cast<size_t>(d), S(1));
        layer.ln1_b.assign(static_cast<size_t>(d), S(0));
        layer.ln2_g.assign(static_cast<size_t>(d), S(1));
        layer.ln2_b.assign(static_cast<size_t>(d), S(0));
        layer.wq = Mat<S>(d, d);
        layer.wk = Mat<S>(d, d);
        layer.wv = Mat<S>(d, d);
        layer.wo = Mat<S>(d, d);
        layer.bq.assign(static_cast<size_t>(d), S(0));
        layer.bk.assign(static_cast<size_t>(d), S(0));
        layer.bv.assign(static_cast<size_t>(d), S(0));
        layer.bo.assign(static_cast<size_t>(d), S(0));
        layer.w_fc = Mat<S>(4 * d, d);
        layer.b_fc.assign(static_cast<size_t>(4 * d), S(0));
        layer.w_proj = Mat<S>(d, 4 * d);
        layer.b_proj.assign(static_cast<size_t>(d), S(0));
        fill_normal(layer.wq.a, seed, salt++, base_std);
        fill_normal(layer.wk.a, seed, salt++, base_std);
        fill_normal(layer.wv.a, seed, salt++, base_std);
        fill_normal(layer.wo.a, seed, salt++, out_std);
        fill_normal(layer.w_fc.a, seed, salt++, base_std);
        fill_normal(layer.w_proj.a, seed, salt++, out_std);
    }
    b.lnf_g.assign(static_cast<size_t>(d), S(1));
    b.lnf_b.assign(static_cast<size_t>(d), S(0));
    b.frozen = false;
    return b;
}

template <class S>
void attach_adapters(Backbone<S>& backbone, int rank, uint64_t seed) {
    if (rank <= 0) throw ConfigError("attach_adapters: rank must be positive");
    const int d = backbone.cfg.d_model;
    AdapterSet<S> set;
    set.rank = rank;
    set.layers.resize(backbone.layers.size());
    uint64_t salt = 0x4000;
    for (auto& layer : set.layers) {
        layer.q.down = Mat<S>(rank, d);
        layer.q.up = Mat<S>(d, rank);
        layer.k.down = Mat<S>(rank, d);
        layer.k.up = Mat<S>(d, rank);
        fill_normal(layer.q.down.a, seed, salt++, 0.02);
        fill_normal(layer.k.down.a, seed, salt++, 0.02);
        // up stays zero: a fresh adapter must be an exact no-op.
    }
    backbone.adapters = std::move(set);
}

template <class S>
Backbone<S> merge_adapters(const Backbone<S>& backbone) {
    Backbone<S> out = backbone;
    if (!out.adapters) return out;
    const int d = out.cfg.d_model;
    const int r = out.adapters->rank;
    for (size_t li = 0; li < out.layers.size(); ++li) {
        const auto& ad = out.adapters->layers[li];
        if (ad.q.down.rows != r || ad.q.down.cols != d || ad.q.up.rows != d || ad.q.up.cols != r)
            throw InputError("merge_adapters: adapter shape mismatch");
        auto fold = [&](Mat<S>& w, const AdapterPair<S>& pair) {
            for (int n = 0; n < d; ++n) {
                for (int k = 0; k < d; ++k) {
                    S acc = S(0);
                    for (int j = 0; j < r; ++j) acc += pair.up.at(n, j) * pair.down.at(j, k);
                    w.at(n, k) += acc;
                }
            }
        };
        fold(out.layers[li].wq, ad.q);
        fold(out.layers[li].wk, ad.k);
    }
    out.adapters.reset();
    return out;
}

// ----------------------------- forward -----------------------------

namespace {

template <class S>
struct LayerActs {
    Mat<S> x_in, ln1_out, q, k, v, aq_mid, ak_mid, att, atty, x_mid, ln2_out, fc, gelu;
    std::vector<S> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
};

template <class S>
struct SeqActs {
    int T = 0;
    Mat<S> x0;
    std::vector<LayerActs<S>> layers;
    Mat<S> x_final, lnf_out;
    std::vector<S> lnf_mean, lnf_rstd;
    Mat<S> logits;
};

template <class S>
void validate_sequence(const Backbone<S>& b, const MemoryBank<S>* bank,
                       const TrainingSequence& seq) {
    const int l = bank ? bank->size() : 0;
    if (seq.ids.empty()) throw InputError("forward: empty sequence");
    if (seq.length() > b.cfg.max_seq_len)
        throw InputError("forward: sequence of length " + std::to_string(seq.length()) +
                         " exceeds max_seq_len " + std::to_string(b.cfg.max_seq_len));
    for (TokenId id : seq.ids) {
        if (id < 0 || id >= b.cfg.vocab_size + l)
            throw InputError("forward: token id " + std::to_string(id) + " out of range");
    }
}

template <class S>
void forward_seq(const Backbone<S>& b, const MemoryBank<S>* bank, const TrainingSequence& seq,
                 SeqActs<S>& acts) {
    const int T = seq.length();
    const int d = b.cfg.d_model;
    const int V = b.cfg.vocab_size;
    const int H = b.cfg.n_heads;
    const int hd = d / H;
    const int l = bank ? bank->size() : 0;
    const int width = V + l;
    const bool has_ad = b.adapters.has_value();
    const int r = has_ad ? b.adapters->rank : 0;

    acts.T = T;
    acts.x0 = Mat<S>(T, d);
    for (int t = 0; t < T; ++t) {
        const TokenId id = seq.ids[t];
        const S* e = id < V ? b.tok_embed.row(id) : bank->steer_row(id - V);
        const S* p = b.pos_embed.row(t);
        S* x = acts.x0.row(t);
        for (int i = 0; i < d; ++i) x[i] = e[i] + p[i];
    }

    acts.layers.resize(b.layers.size());
    Mat<S> x = acts.x0;
    for (size_t li = 0; li < b.layers.size(); ++li) {
        const auto& L = b.layers[li];
        auto& A = acts.layers[li];
        A.x_in = x;
        A.ln1_out = Mat<S>(T, d);
        A.ln1_mean.resize(T);
        A.ln1_rstd.resize(T);
        kern::layernorm_fwd(A.ln1_out.a.data(), A.ln1_mean.data(), A.ln1_rstd.data(),
                            A.x_in.a.data(), L.ln1_g.data(), L.ln1_b.data(), T, d);
        A.q = Mat<S>(T, d);
        A.k = Mat<S>(T, d);
        A.v = Mat<S>(T, d);
        kern::matmul_nt(A.q.a.data(), d, A.ln1_out.a.data(), d, L.wq.a.data(), L.bq.data(), T, d, d);
        kern::matmul_nt(A.k.a.data(), d, A.ln1_out.a.data(), d, L.wk.a.data(), L.bk.data(), T, d, d);
        kern::matmul_nt(A.v.a.data(), d, A.ln1_out.a.data(), d, L.wv.a.data(), L.bv.data(), T, d, d);
        if (has_ad) {
            const auto& ad = b.adapters->layers[li];
            A.aq_mid = Mat<S>(T, r);
            A.ak_mid = Mat<S>(T, r);
            Mat<S> delta(T, d);
            kern::matmul_nt(A.aq_mid.a.data(), r, A.ln1_out.a.data(), d, ad.q.down.a.data(),
                            static_cast<const S*>(nullptr), T, r, d);
            kern::matmul_nt(delta.a.data(), d, A.aq_mid.a.data(), r, ad.q.up.a.data(), static_cast<const S*>(nullptr), T,
                            d, r);
            kern::add_inplace(A.q.a.data(), delta.a.data(), delta.size());
            kern::matmul_nt(A.ak_mid.a.data(), r, A.ln1_out.a.data(), d, ad.k.down.a.data(),
                            static_cast<const S*>(nullptr), T, r, d);
            kern::matmul_nt(delta.a.data(), d, A.ak_mid.a.data(), r, ad.k.up.a.data(), static_cast<const S*>(nullptr), T,
                            d, r);
            kern::add_inplace(A.k.a.data(), delta.a.data(), delta.size());
        }
        A.att = Mat<S>(H * T, T);
        A.atty = Mat<S>(T, d);
        kern::attention_fwd(A.atty.a.data(), A.att.a.data(), A.q.a.data(), A.k.a.data(),
                            A.v.a.data(), T, H, hd);
        Mat<S> attproj(T, d);
        kern::matmul_nt(attproj.a.data(), d, A.atty.a.data(), d, L.wo.a.data(), L.bo.data(), T, d,
                        d);
        A.x_mid = A.x_in;
        kern::add_inplace(A.x_mid.a.data(), attproj.a.data(), attproj.size());

        A.ln2_out = Mat<S>(T, d);
        A.ln2_mean.resize(T);
        A.ln2_rstd.resize(T);
        kern::layernorm_fwd(A.ln2_out.a.data(), A.ln2_mean.data(), A.ln2_rstd.data(),
                            A.x_mid.a.data(), L.ln2_g.data(), L.ln2_b.data(), T, d);
        A.fc = Mat<S>(T, 4 * d);
        kern::matmul_nt(A.fc.a.data(), 4 * d, A.ln2_out.a.data(), d, L.w_fc.a.data(),
                        L.b_fc.data(), T, 4 * d, d);
        A.gelu = Mat<S>(T, 4 * d);
        kern::gelu_fwd(A.gelu.a.data(), A.fc.a.data(), A.fc.size());
        Mat<S> proj(T, d);
        kern::matmul_nt(proj.a.data(), d, A.gelu.a.data(), 4 * d, L.w_proj.a.data(),
                        L.b_proj.data(), T, d, 4 * d);
        x = A.x_mid;
        kern::add_inplace(x.a.data(), proj.a.data(), proj.size());
    }
    acts.x_final = x;
    acts.lnf_out = Mat<S>(T, d);
    acts.lnf_mean.resize(T);
    acts.lnf_rstd.resize(T);
    kern::layernorm_fwd(acts.lnf_out.a.data(), acts.lnf_mean.data(), acts.lnf_rstd.data(),
                        acts.x_final.a.data(), b.lnf_g.data(), b.lnf_b.data(), T, d);
    acts.logits = Mat<S>(T, width);
    kern::matmul_nt(acts.logits.a.data(), width, acts.lnf_out.a.data(), d, b.tok_embed.a.data(),
                    static_cast<const S*>(nullptr), T, V, d);
    if (l > 0) {
        kern::matmul_nt(acts.logits.a.data() + V, width, acts.lnf_out.a.data(), d,
                        bank->rows.a.data(), static_cast<const S*>(nullptr), T, l, d);
    }
}

struct GradFlags {
    bool bank = false;
    bool adapters = false;
    bool backbone = false;
};

// Accumulates this sequence's parameter gradients. `scratch` mirrors the
// backbone and always receives the backbone-side grads; callers ignore it
// unless the selector wants them.
template <class S>
void backward_seq(const Backbone<S>& b, const MemoryBank<S>* bank, const TrainingSequence& seq,
                  const SeqActs<S>& acts, const Mat<S>& dlogits, const GradFlags& flags,
                  Gradients<S>& grads, Backbone<S>& scratch, AdapterSet<S>* adapter_grads) {
    const int T = acts.T;
    const int d = b.cfg.d_model;
    const int V = b.cfg.vocab_size;
    const int H = b.cfg.n_heads;
    const int hd = d / H;
    const int l = bank ? bank->size() : 0;
    const int width = V + l;
    const bool has_ad = b.adapters.has_value();
    const int r = has_ad ? b.adapters->rank : 0;

    Mat<S> dlnf(T, d);
    kern::matmul_nt_bwd_x(dlnf.a.data(), d, dlogits.a.data(), width, b.tok_embed.a.data(), T, V,
                          d);
    if (l > 0) {
        kern::matmul_nt_bwd_x(dlnf.a.data(), d, dlogits.a.data() + V, width, bank->rows.a.data(),
                              T, l, d);
    }
    if (flags.backbone) {
        kern::matmul_nt_bwd_w(scratch.tok_embed.a.data(), static_cast<S*>(nullptr),
                              dlogits.a.data(), width, acts.lnf_out.a.data(), d, T, V, d);
    }
    if (flags.bank && l > 0) {
        kern::matmul_nt_bwd_w(grads.bank_rows.a.data(), static_cast<S*>(nullptr),
                              dlogits.a.data() + V, width, acts.lnf_out.a.data(), d, T, l, d);
    }

    Mat<S> dx(T, d);
    kern::layernorm_bwd(dx.a.data(), scratch.lnf_g.data(), scratch.lnf_b.data(), dlnf.a.data(),
                        acts.x_final.a.data(), acts.lnf_mean.data(), acts.lnf_rstd.data(),
                        b.lnf_g.data(), T, d);

    for (int li = static_cast<int>(b.layers.size()) - 1; li >= 0; --li) {
        const auto& L = b.layers[li];
        const auto& A = acts.layers[li];
        auto& G = scratch.layers[li];

        // MLP block; dx holds the gradient wrt the block output.
        Mat<S> dgelu(T, 4 * d);
        kern::matmul_nt_bwd_x(dgelu.a.data(), 4 * d, dx.a.data(), d, L.w_proj.a.data(), T, d,
                              4 * d);
        kern::matmul_nt_bwd_w(G.w_proj.a.data(), G.b_proj.data(), dx.a.data(), d,
                              A.gelu.a.data(), 4 * d, T, d, 4 * d);
        Mat<S> dfc(T, 4 * d);
        kern::gelu_bwd(dfc.a.data(), dgelu.a.data(), A.fc.a.data(), A.fc.size());
        Mat<S> dln2(T, d);
        kern::matmul_nt_bwd_x(dln2.a.data(), d, dfc.a.data(), 4 * d, L.w_fc.a.data(), T, 4 * d, d);
        kern::matmul_nt_bwd_w(G.w_fc.a.data(), G.b_fc.data(), dfc.a.data(), 4 * d,
                              A.ln2_out.a.data(), d, T, 4 * d, d);
        kern::layernorm_bwd(dx.a.data(), G.ln2_g.data(), G.ln2_b.data(), dln2.a.data(),
                            A.x_mid.a.data(), A.ln2_mean.data(), A.ln2_rstd.data(), L.ln2_g.data(),
                            T, d);

        // Attention block; dx now holds the gradient wrt x_mid.
        Mat<S> datty(T, d);
        kern::matmul_nt_bwd_x(datty.a.data(), d, dx.a.data(), d, L.wo.a.data(), T, d, d);
        kern::matmul_nt_bwd_w(G.wo.a.data(), G.bo.data(), dx.a.data(), d, A.atty.a.data(), d, T,
                              d, d);
        Mat<S> dq(T, d), dk(T, d), dv(T, d), datt(H * T, T);
        kern::attention_bwd(dq.a.data(), dk.a.data(), dv.a.data(), datt.a.data(), datty.a.data(),
                            A.att.a.data(), A.q.a.data(), A.k.a.data(), A.v.a.data(), T, H, hd);
        Mat<S> dln1(T, d);
        kern::matmul_nt_bwd_x(dln1.a.data(), d, dq.a.data(), d, L.wq.a.data(), T, d, d);
        kern::matmul_nt_bwd_x(dln1.a.data(), d, dk.a.data(), d, L.wk.a.data(), T, d, d);
        kern::matmul_nt_bwd_x(dln1.a.data(), d, dv.a.data(), d, L.wv.a.data(), T, d, d);
        kern::matmul_nt_bwd_w(G.wq.a.data(), G.bq.data(), dq.a.data(), d, A.ln1_out.a.data(), d,
                              T, d, d);
        kern::matmul_nt_bwd_w(G.wk.a.data(), G.bk.data(), dk.a.data(), d, A.ln1_out.a.data(), d,
                              T, d, d);
        kern::matmul_nt_bwd_w(G.wv.a.data(), G.bv.data(), dv.a.data(), d, A.ln1_out.a.data(), d,
                              T, d, d);
        if (has_ad) {
            const auto& ad = b.adapters->layers[li];
            Mat<S> dmid(T, r);
            kern::matmul_nt_bwd_x(dmid.a.data(), r, dq.a.data(), d, ad.q.up.a.data(), T, d, r);
            if (adapter_grads) {
                auto& ag = adapter_grads->layers[li];
                kern::matmul_nt_bwd_w(ag.q.up.a.data(), static_cast<S*>(nullptr), dq.a.data(), d,
                                      A.aq_mid.a.data(), r, T, d, r);
                kern::matmul_nt_bwd_w(ag.q.down.a.data(), static_cast<S*>(nullptr), dmid.a.data(),
                                      r, A.ln1_out.a.data(), d, T, r, d);
            }
            kern::matmul_nt_bwd_x(dln1.a.data(), d, dmid.a.data(), r, ad.q.down.a.data(), T, r, d);
            dmid.zero();
            kern::matmul_nt_bwd_x(dmid.a.data(), r, dk.a.data(), d, ad.k.up.a.data(), T, d, r);
            if (adapter_grads) {
                auto& ag = adapter_grads->layers[li];
                kern::matmul_nt_bwd_w(ag.k.up.a.data(), static_cast<S*>(nullptr), dk.a.data(), d,
                                      A.ak_mid.a.data(), r, T, d, r);
                kern::matmul_nt_bwd_w(ag.k.down.a.data(), static_cast<S*>(nullptr), dmid.a.data(),
                                      r, A.ln1_out.a.data(), d, T, r, d);
            }
            kern::matmul_nt_bwd_x(dln1.a.data(), d, dmid.a.data(), r, ad.k.down.a.data(), T, r, d);
        }
        kern::layernorm_bwd(dx.a.data(), G.ln1_g.data(), G.ln1_b.data(), dln1.a.data(),
                            A.x_in.a.data(), A.ln1_mean.data(), A.ln1_rstd.data(), L.ln1_g.data(),
                            T, d);
    }

    // Embedding backward: route residual-stream grads to the token table,
    // the position table, and the bank's steer rows. Column-parallel so
    // repeated ids accumulate in a fixed order.
    if (flags.backbone) {
        for (int t = 0; t < T; ++t) {
            kern::add_inplace(scratch.pos_embed.row(t), dx.row(t), static_cast<size_t>(d));
        }
    }
    const bool coupled = bank && bank->variant == BankVariant::Coupled;
    Mat<S>* dsteer = nullptr;
    if (flags.bank && l > 0) dsteer = coupled ? &grads.bank_rows : &grads.bank_steer;
#pragma omp parallel for schedule(static)
    for (int j = 0; j < d; ++j) {
        for (int t = 0; t < T; ++t) {
            const TokenId id = seq.ids[t];
            if (id < V) {
                if (flags.backbone) scratch.tok_embed.at(id, j) += dx.at(t, j);
            } else if (dsteer) {
                dsteer->at(id - V, j) += dx.at(t, j);
            }
        }
    }
}

template <class S>
AdapterSet<S> zero_like(const AdapterSet<S>& a) {
    AdapterSet<S> z;
    z.rank = a.rank;
    z.layers.resize(a.layers.size());
    for (size_t i = 0; i < a.layers.size(); ++i) {
        z.layers[i].q.down = Mat<S>(a.layers[i].q.down.rows, a.layers[i].q.down.cols);
        z.layers[i].q.up = Mat<S>(a.layers[i].q.up.rows, a.layers[i].q.up.cols);
        z.layers[i].k.down = Mat<S>(a.layers[i].k.down.rows, a.layers[i].k.down.cols);
        z.layers[i].k.up = Mat<S>(a.layers[i].k.up.rows, a.layers[i].k.up.cols);
    }
    return z;
}

template <class S>
Backbone<S> zero_like(const Backbone<S>& b) {
    Backbone<S> z = b;
    for_each_backbone_tensor(z, true, [](std::vector<S>& t) { std::fill(t.begin(), t.end(), S(0)); });
    return z;
}

}  // namespace

template <class S>
std::vector<Mat<S>> forward(const Backbone<S>& backbone, const MemoryBank<S>* bank,
                            std::span<const TrainingSequence> batch) {
    std::vector<Mat<S>> out;
    out.reserve(batch.size());
    for (const auto& seq : batch) {
        validate_sequence(backbone, bank, seq);
        SeqActs<S> acts;
        forward_seq(backbone, bank, seq, acts);
        out.push_back(std::move(acts.logits));
    }
    return out;
}

template <class S>
double loss_and_grad(const Backbone<S>& backbone, const MemoryBank<S>* bank,
                     std::span<const TrainingSequence> batch, ParamSelector selector,
                     Gradients<S>& grads, std::vector<double>* per_position_nll) {
    const int l = bank ? bank->size() : 0;
    const int d = backbone.cfg.d_model;
    GradFlags flags;
    flags.bank = selector == ParamSelector::BankOnly || selector == ParamSelector::BankAndBackbone ||
                 selector == ParamSelector::BankAndAdapters;
    flags.adapters =
        selector == ParamSelector::AdaptersOnly || selector == ParamSelector::BankAndAdapters;
    flags.backbone = selector == ParamSelector::BankAndBackbone;
    if (flags.adapters && !backbone.adapters)
        throw InputError("loss_and_grad: adapter selector without attached adapters");
    if (flags.bank && !bank) throw InputError("loss_and_grad: bank selector without a bank");

    // (Re)shape the gradient holder.
    if (flags.bank) {
        grads.bank_rows = Mat<S>(l, d);
        grads.bank_steer = bank->variant == BankVariant::Decoupled ? Mat<S>(l, d) : Mat<S>();
    } else {
        grads.bank_rows = Mat<S>();
        grads.bank_steer = Mat<S>();
    }
    if (flags.adapters) {
        grads.adapters = zero_like(*backbone.adapters);
    } else {
        grads.adapters.reset();
    }
    Backbone<S> scratch = zero_like(backbone);
    grads.backbone.reset();

    size_t total_masked = 0;
    for (const auto& seq : batch) {
        validate_sequence(backbone, bank, seq);
        if (seq.mask.size() != seq.ids.size() || seq.targets.size() != seq.ids.size())
            throw InputError("loss_and_grad: mask/target size mismatch");
        for (size_t j = 1; j < seq.mask.size(); ++j) {
            if (seq.mask[j]) ++total_masked;
        }
    }
    if (total_masked == 0) throw InputError("loss_and_grad: loss mask empty across batch");
    const S inv_count = S(1) / S(static_cast<double>(total_masked));

    if (per_position_nll) per_position_nll->clear();
    double total_nll = 0.0;
    for (const auto& seq : batch) {
        SeqActs<S> acts;
        forward_seq(backbone, bank, seq, acts);
        const int T = acts.T;
        const int width = backbone.cfg.vocab_size + l;
        std::vector<uint8_t> mask(seq.mask);
        mask[0] = 0;  // nothing predicts position 0
        Mat<S> dlogits(T, width);
        std::vector<double> nll(static_cast<size_t>(T), 0.0);
        total_nll += kern::masked_xent(dlogits.a.data(), nll.data(), acts.logits.a.data(),
                                       seq.targets.data(), mask.data(), T, width, inv_count);
        if (per_position_nll)
            per_position_nll->insert(per_position_nll->end(), nll.begin(), nll.end());
        AdapterSet<S>* ag = flags.adapters ? &*grads.adapters : nullptr;
        backward_seq(backbone, bank, seq, acts, dlogits, flags, grads, scratch, ag);
    }
    if (flags.backbone) grads.backbone = std::move(scratch);
    return total_nll / static_cast<double>(total_masked);
}

template <class S>
double masked_loss(const Backbone<S>& backbone, const MemoryBank<S>* bank,
                   std::span<const TrainingSequence> batch, std::vector<double>* per_position_nll) {
    const int l = bank ? bank->size() : 0;
    size_t total_masked = 0;
    for (const auto& seq : batch) {
        validate_sequence(backbone, bank, seq);
        for (size_t j = 1; j < seq.mask.size(); ++j) {
            if (seq.mask[j]) ++total_masked;
        }
    }
    if (total_masked == 0) throw InputError("masked_loss: loss mask empty across batch");
    if (per_position_nll) per_position_nll->clear();
    double total_nll = 0.0;
    for (const auto& seq : batch) {
        SeqActs<S> acts;
        forward_seq(backbone, bank, seq, acts);
        std::vector<uint8_t> mask(seq.mask);
        mask[0] = 0;
        std::vector<double> nll(static_cast<size_t>(acts.T), 0.0);
        total_nll += kern::masked_xent(static_cast<S*>(nullptr), nll.data(),
                                       acts.logits.a.data(), seq.targets.data(), mask.data(),
                                       acts.T, backbone.cfg.vocab_size + l, S(1));
        if (per_position_nll)
            per_position_nll->insert(per_position_nll->end(), nll.begin(), nll.end());
    }
    return total_nll / static_cast<double>(total_masked);
}

template <class S>
GenerationTrace generate(const Backbone<S>& backbone, const MemoryBank<S>* bank,
                         const std::vector<TokenId>& query, const GenerateOptions& opts) {
    if (query.empty()) throw InputError("generate: empty query");
    if (query.back() == kEos) throw InputError("generate: query must not end with EOS");
    const int V = backbone.cfg.vocab_size;
    const int l = bank ? bank->size() : 0;
    GenerationTrace trace;
    TrainingSequence seq;
    seq.ids = query;
    seq.query_len = static_cast<int>(query.size());
    while (static_cast<int>(trace.tokens.size()) < opts.max_len) {
        if (seq.length() >= backbone.cfg.max_seq_len) {
            trace.stop = StopReason::MaxLen;
            return trace;
        }
        seq.targets.assign(seq.ids.size(), 0);
        seq.mask.assign(seq.ids.size(), 0);
        validate_sequence(backbone, bank, seq);
        SeqActs<S> acts;
        forward_seq(backbone, bank, seq, acts);
        const S* row = acts.logits.row(acts.T - 1);
        TokenId best = 0;
        S best_v = row[0];
        for (int i = 1; i < V + l; ++i) {
            if (row[i] > best_v) {
                best_v = row[i];
                best = i;
            }
        }
        const int position = static_cast<int>(trace.tokens.size());
        trace.tokens.push_back(best);
        if (best >= V) trace.events.push_back({position, best});
        seq.ids.push_back(best);
        if (best == kEos) {
            trace.stop = StopReason::Eos;
            return trace;
        }
    }
    trace.stop = StopReason::MaxLen;
    return trace;
}

// ----------------------------- persistence -----------------------------

namespace {
constexpr char kCkptMagic[8] = {'T', 'K', 'M', 'C', 'K', 'P', 'T', '\0'};
constexpr uint32_t kCkptVersion = 1;
}  // namespace

uint64_t backbone_checksum(const Backbone<float>& backbone) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto& b = const_cast<Backbone<float>&>(backbone);
    for_each_backbone_tensor(b, true, [&](std::vector<float>& t) {
        h = fnv1a(t.data(), t.size() * sizeof(float), h);
    });
    return h;
}

void write_checkpoint(const Backbone<float>& backbone, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_checkpoint: cannot open " + path);
    f.write(kCkptMagic, sizeof(kCkptMagic));
    io::put_u32(f, kCkptVersion);
    io::put_u32(f, static_cast<uint32_t>(backbone.cfg.vocab_size));
    io::put_u32(f, static_cast<uint32_t>(backbone.cfg.d_model));
    io::put_u32(f, static_cast<uint32_t>(backbone.cfg.n_layers));
    io::put_u32(f, static_cast<uint32_t>(backbone.cfg.n_heads));
    io::put_u32(f, static_cast<uint32_t>(backbone.cfg.max_seq_len));
    io::put_u64(f, backbone.cfg.seed);
    io::put_u32(f, backbone.frozen ? 1u : 0u);
    io::put_u32(f, backbone.adapters ? static_cast<uint32_t>(backbone.adapters->rank) : 0u);
    auto& b = const_cast<Backbone<float>&>(backbone);
    for_each_backbone_tensor(b, true, [&](std::vector<float>& t) {
        io::put_f32_array(f, t.data(), t.size());
    });
    if (!f) throw IoError("write_checkpoint: write failed for " + path);
}

Backbone<float> read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
        throw FormatError("read_checkpoint: bad magic in " + path);
    const uint32_t version = io::get_u32(f);
    if (version != kCkptVersion)
        throw FormatError("read_checkpoint: unsupported version " + std::to_string(version));
    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(io::get_u32(f));
    cfg.d_model = static_cast<int>(io::get_u32(f));
    cfg.n_layers = static_cast<int>(io::get_u32(f));
    cfg.n_heads = static_cast<int>(io::get_u32(f));
    cfg.max_seq_len = static_cast<int>(io::get_u32(f));
    cfg.seed = io::get_u64(f);
    const uint32_t frozen = io::get_u32(f);
    const uint32_t rank = io::get_u32(f);
    Backbone<float> b = init_backbone<float>(cfg, cfg.seed);
    if (rank > 0) attach_adapters(b, static_cast<int>(rank), cfg.seed);
    for_each_backbone_tensor(b, true, [&](std::vector<float>& t) {
        io::get_f32_array(f, t.data(), t.size());
    });
    b.frozen = frozen != 0;
    if (!f) throw FormatError("read_checkpoint: truncated file " + path);
    return b;
}

#define TOKMEM_INST_MODEL(S)                                                            \
    template struct Backbone<S>;                                                        \
    template Backbone<S> init_backbone<S>(const ModelConfig&, uint64_t);                \
    template void attach_adapters<S>(Backbone<S>&, int, uint64_t);                      \
    template Backbone<S> merge_adapters<S>(const Backbone<S>&);                         \
    template std::vector<Mat<S>> forward<S>(const Backbone<S>&, const MemoryBank<S>*,   \
                                            std::span<const TrainingSequence>);         \
    template double loss_and_grad<S>(const Backbone<S>&, const MemoryBank<S>*,          \
                                     std::span<const TrainingSequence>, ParamSelector,  \
                                     Gradients<S>&, std::vector<double>*);              \
    template double masked_loss<S>(const Backbone<S>&, const MemoryBank<S>*,            \
                                   std::span<const TrainingSequence>,                   \
                                   std::vector<double>*);                               \
    template GenerationTrace generate<S>(const Backbone<S>&, const MemoryBank<S>*,      \
                                         const std::vector<TokenId>&,                   \
                                         const GenerateOptions&);                       \
    template std::vector<std::span<S>> backbone_param_spans<S>(Backbone<S>&, bool);     \
    template std::vector<std::span<S>> adapter_param_spans<S>(AdapterSet<S>&);

TOKMEM_INST_MODEL(float)
TOKMEM_INST_MODEL(double)
#undef TOKMEM_INST_MODEL

}  // namespace tokmem
