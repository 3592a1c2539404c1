#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokmem/bank.hpp"
#include "tokmem/common.hpp"
#include "tokmem/sequence.hpp"

namespace tokmem {

struct ModelConfig {
    int vocab_size = kToyVocabSize;
    int d_model = 128;
    int n_layers = 2;
    int n_heads = 4;
    int max_seq_len = 64;
    uint64_t seed = 0;

    void validate() const {
        if (vocab_size < 4) throw ConfigError("ModelConfig: vocab_size must reserve the specials");
        if (d_model <= 0 || n_layers <= 0 || n_heads <= 0)
            throw ConfigError("ModelConfig: non-positive dimension");
        if (d_model % n_heads != 0)
            throw ConfigError("ModelConfig: d_model (" + std::to_string(d_model) +
                              ") not divisible by n_heads (" + std::to_string(n_heads) + ")");
        if (max_seq_len < 8) throw ConfigError("ModelConfig: max_seq_len must be at least 8");
    }
    bool operator==(const ModelConfig&) const = default;
};

// Low-rank pair added to a host projection: delta(x) = up * (down * x).
// The up matrix starts at zero so a fresh adapter is an exact no-op.
template <class S>
struct AdapterPair {
    Mat<S> down;  // r x d
    Mat<S> up;    // d x r
};

template <class S>
struct LayerAdapters {
    AdapterPair<S> q;
    AdapterPair<S> k;
};

template <class S>
struct AdapterSet {
    int rank = 0;
    std::vector<LayerAdapters<S>> layers;
};

template <class S>
struct LayerParams {
    std::vector<S> ln1_g, ln1_b;
    Mat<S> wq, wk, wv, wo;            // d x d
    std::vector<S> bq, bk, bv, bo;
    std::vector<S> ln2_g, ln2_b;
    Mat<S> w_fc;                      // 4d x d
    std::vector<S> b_fc;
    Mat<S> w_proj;                    // d x 4d
    std::vector<S> b_proj;
};

// Pre-norm decoder-only transformer with learned positions and the output
// head tied to the embedding table for base tokens. Memory-token logits are
// inner products of the final hidden state with the bank's address rows.
template <class S>
struct Backbone {
    ModelConfig cfg;
    Mat<S> tok_embed;  // V x d
    Mat<S> pos_embed;  // max_seq_len x d
    std::vector<LayerParams<S>> layers;
    std::vector<S> lnf_g, lnf_b;
    bool frozen = false;
    std::optional<AdapterSet<S>> adapters;
};

// BankAndAdapters is the joint group the adaptation phase trains (temporary
// memory plus the low-rank projections).
enum class ParamSelector : uint8_t { BankOnly, AdaptersOnly, BankAndBackbone, BankAndAdapters };

// Gradient holder; only the parts implied by the selector are allocated.
template <class S>
struct Gradients {
    Mat<S> bank_rows;               // address rows (and steer when coupled)
    Mat<S> bank_steer;              // decoupled input rows
    std::optional<AdapterSet<S>> adapters;
    std::optional<Backbone<S>> backbone;  // same shapes, used as a zeroed mirror
};

struct MemoryEvent {
    int position = 0;    // index into the emitted tokens
    TokenId token = 0;   // emitted id, >= vocab_size
};

enum class StopReason : uint8_t { Eos = 0, MaxLen = 1 };

struct GenerationTrace {
    std::vector<TokenId> tokens;  // emitted tokens, EOS included when hit
    std::vector<MemoryEvent> events;
    StopReason stop = StopReason::MaxLen;
};

struct GenerateOptions {
    int max_len = 64;  // emission budget
};

template <class S>
Backbone<S> init_backbone(const ModelConfig& cfg, uint64_t seed);

template <class S>
Backbone<S> init_backbone(const ModelConfig& cfg) {
    return init_backbone<S>(cfg, cfg.seed);
}

template <class S>
void attach_adapters(Backbone<S>& backbone, int rank, uint64_t seed);

// Folds W += up*down into the q/k projections and drops the adapters.
// Always returns a fresh copy; calling it on an adapter-free backbone is a
// no-op copy.
template <class S>
Backbone<S> merge_adapters(const Backbone<S>& backbone);

// Per-sequence logits over vocab_size + bank rows. `bank` may be null for a
// plain transformer.
template <class S>
std::vector<Mat<S>> forward(const Backbone<S>& backbone, const MemoryBank<S>* bank,
                            std::span<const TrainingSequence> batch);

// Masked mean NLL over the batch plus gradients for the selected parameter
// group. Optionally reports the per-position NLLs (zero at unmasked
// positions), concatenated in batch order.
template <class S>
double loss_and_grad(const Backbone<S>& backbone, const MemoryBank<S>* bank,
                     std::span<const TrainingSequence> batch, ParamSelector selector,
                     Gradients<S>& grads, std::vector<double>* per_position_nll = nullptr);

// Forward-only masked mean NLL (used by evaluation).
template <class S>
double masked_loss(const Backbone<S>& backbone, const MemoryBank<S>* bank,
                   std::span<const TrainingSequence> batch,
                   std::vector<double>* per_position_nll = nullptr);

// Greedy decoding over the extended vocabulary. Emitted memory ids feed
// their steer row as the next input embedding.
template <class S>
GenerationTrace generate(const Backbone<S>& backbone, const MemoryBank<S>* bank,
                         const std::vector<TokenId>& query, const GenerateOptions& opts);

uint64_t backbone_checksum(const Backbone<float>& backbone);

// TKMCKPT container. Tensor order: tok_embed, pos_embed, per layer [ln1_g,
// ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w_fc, b_fc, w_proj,
// b_proj], lnf_g, lnf_b, then per layer [q.down, q.up, k.down, k.up] when
// adapters are attached. Little-endian float32 throughout.
void write_checkpoint(const Backbone<float>& backbone, const std::string& path);
Backbone<float> read_checkpoint(const std::string& path);

// Convenience wrappers matching the bank initialisation contract: rows are
// the mean of the backbone's base embedding rows plus deterministic jitter.
template <class S>
MemoryBank<S> create_bank(int d, int n, const Backbone<S>& init_source, uint64_t seed,
                          BankVariant variant, double jitter_scale = 1e-3) {
    if (init_source.tok_embed.cols != d) throw InputError("create_bank: width mismatch");
    return create_bank<S>(d, n, init_source.tok_embed, seed, variant,
                          static_cast<TokenId>(init_source.cfg.vocab_size), jitter_scale);
}

template <class S>
std::vector<TokenId> extend_bank(MemoryBank<S>& bank, int n_new, const Backbone<S>& init_source) {
    return extend_bank<S>(bank, n_new, init_source.tok_embed);
}

#define TOKMEM_EXTERN_MODEL(S)                                                                 \
    extern template struct Backbone<S>;                                                        \
    extern template Backbone<S> init_backbone<S>(const ModelConfig&, uint64_t);                \
    extern template void attach_adapters<S>(Backbone<S>&, int, uint64_t);                      \
    extern template Backbone<S> merge_adapters<S>(const Backbone<S>&);                         \
    extern template std::vector<Mat<S>> forward<S>(const Backbone<S>&, const MemoryBank<S>*,   \
                                                   std::span<const TrainingSequence>);         \
    extern template double loss_and_grad<S>(const Backbone<S>&, const MemoryBank<S>*,          \
                                            std::span<const TrainingSequence>, ParamSelector,  \
                                            Gradients<S>&, std::vector<double>*);              \
    extern template double masked_loss<S>(const Backbone<S>&, const MemoryBank<S>*,            \
                                          std::span<const TrainingSequence>,                   \
                                          std::vector<double>*);                               \
    extern template GenerationTrace generate<S>(const Backbone<S>&, const MemoryBank<S>*,      \
                                                const std::vector<TokenId>&,                   \
                                                const GenerateOptions&);

TOKMEM_EXTERN_MODEL(float)
TOKMEM_EXTERN_MODEL(double)
#undef TOKMEM_EXTERN_MODEL

// Flat parameter enumeration in checkpoint order; used by the optimizer for
// whole-backbone parameter groups and by the checkpoint writer.
template <class S>
std::vector<std::span<S>> backbone_param_spans(Backbone<S>& b, bool include_adapters);

template <class S>
std::vector<std::span<S>> adapter_param_spans(AdapterSet<S>& a);

#define TOKMEM_EXTERN_SPANS(S)                                                            \
    extern template std::vector<std::span<S>> backbone_param_spans<S>(Backbone<S>&, bool); \
    extern template std::vector<std::span<S>> adapter_param_spans<S>(AdapterSet<S>&);

TOKMEM_EXTERN_SPANS(float)
TOKMEM_EXTERN_SPANS(double)
#undef TOKMEM_EXTERN_SPANS

}  // namespace tokmem
