#pragma once

#include <span>
#include <string>
#include <vector>

#include "tokmem/metrics.hpp"
#include "tokmem/model.hpp"
#include "tokmem/taskgen.hpp"

namespace tokmem {

struct OptimHyper {
    double lr = 5e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int batch_size = 4;
    int epochs = 1;
    int max_steps = 0;      // 0 = uncapped
    double clip_norm = 1.0;  // 0 disables clipping

    // memory-token training: lr 5e-3, no decay
    static OptimHyper tokmem_defaults() { return OptimHyper{}; }
    // adapter fine-tuning: lr 5e-5, decay 1e-2
    static OptimHyper finetune_defaults() {
        OptimHyper h;
        h.lr = 5e-5;
        h.weight_decay = 1e-2;
        return h;
    }

    void validate() const {
        if (lr <= 0) throw ConfigError("OptimHyper: learning rate must be positive");
        if (batch_size <= 0) throw ConfigError("OptimHyper: batch size must be positive");
    }
};

struct AdamWState {
    std::vector<float> m;
    std::vector<float> v;
    int64_t step = 0;
};

// One decoupled-weight-decay update with bias correction, in place over a
// flat span. State is lazily sized on first use.
void adamw_step(std::span<float> params, std::span<const float> grads, AdamWState& state,
                const OptimHyper& hyper);

// Group version: spans are updated in order against one shared state.
void adamw_step_group(const std::vector<std::span<float>>& params,
                      const std::vector<std::span<float>>& grads, AdamWState& state,
                      const OptimHyper& hyper);

// Global-norm clip across the group; returns the pre-clip norm.
double clip_gradients(const std::vector<std::span<float>>& grads, double max_norm);

// ----------------------------- replay -----------------------------

struct ReplayBuffer {
    size_t capacity = 500;
    int refresh_period = 10;  // tasks between refreshes
    double ratio = 0.2;
    std::vector<TrainingSequence> store;

    // Full uniform resample from the pool of all seen examples.
    void refresh(const std::vector<TrainingSequence>& pool, Rng& rng);
};

// round(ratio * batch) leading slots replaced by uniform draws from the
// buffer; empty buffers pass the batch through untouched.
std::vector<TrainingSequence> replay_mix(const ReplayBuffer& buffer,
                                         const std::vector<TrainingSequence>& fresh, double ratio,
                                         Rng& rng);

// ----------------------------- continual runs -----------------------------

enum class TrainMode : uint8_t { TokMem, Lora, Replay, TokMemUnfrozen };

std::string train_mode_name(TrainMode m);

struct ContinualSchedule {
    std::vector<std::vector<int>> groups;  // task indices per round, in arrival order
    TrainMode mode = TrainMode::TokMem;
    bool renormalize = true;
    BankVariant variant = BankVariant::Coupled;
    int adapter_rank = 8;

    void validate(size_t n_tasks) const;
};

struct RunResult {
    std::vector<MetricsReport> reports;             // one per checkpoint (group boundary)
    std::vector<uint64_t> backbone_checksums;       // after each round
    std::vector<MemoryBank<float>> bank_snapshots;  // tokmem modes only
    std::vector<Backbone<float>> backbone_snapshots;
    std::vector<std::pair<int, double>> loss_curve;  // (global step, batch loss)
    std::vector<TokenId> task_memory_ids;            // task index -> memory token id
    Backbone<float> final_backbone;
    MemoryBank<float> final_bank;
    bool has_bank = false;
};

// Sequential continual run over task groups. TokMem modes extend the bank by
// one row per task each round and train only the active rows (the backbone
// stays bitwise frozen); Lora/Replay train rank-r adapters on the query/key
// projections; TokMemUnfrozen updates bank and backbone jointly. After each
// round the model is evaluated on every group, seen or not.
RunResult train_run(const Backbone<float>& primed, const std::vector<ProcedureSpec>& tasks,
                    const ContinualSchedule& schedule, const OptimHyper& hyper, uint64_t seed);

// Evaluation of one checkpoint over all task groups. Unseen groups are
// scored too (flagged); in memory mode their perplexity falls back to the
// separator layout since their memory rows do not exist yet.
MetricsReport continual_evaluate(const Backbone<float>& backbone, const MemoryBank<float>* bank,
                                 const std::vector<ProcedureSpec>& tasks,
                                 const std::vector<std::vector<int>>& groups, int seen_groups,
                                 TrainMode mode, const std::vector<TokenId>& task_memory_ids,
                                 const std::string& checkpoint_label);

// ----------------------------- adaptation -----------------------------

struct AdaptationConfig {
    double backbone_lr = 1e-3;  // eta_theta, applied to the adapters
    double memory_lr = 5e-3;    // eta_M, applied to the temporary bank
    int epochs = 1;
    int batch_size = 4;
    int adapter_rank = 8;
    int max_steps = 0;
    double clip_norm = 1.0;
    uint64_t seed = 0;
};

// Joint adapter + temporary-memory training on an auxiliary tool set; the
// adapters are merged, the temporary bank is discarded and the returned
// backbone is frozen.
Backbone<float> adaptation_phase(const Backbone<float>& backbone, const ToolDataset& aux,
                                 const AdaptationConfig& cfg);

// Aux and evaluation tool sets must not share cues.
void validate_disjoint_tools(const ToolDataset& aux, const ToolDataset& eval);

// ----------------------------- priming -----------------------------

struct PrimingConfig {
    int markers_per_behavior = 4;
    int examples_per_task = 16;
    int epochs = 2;
    int batch_size = 16;
    double lr = 1e-3;
    int noise_lm_sequences = 0;  // long uniform sequences; train positions
    int max_steps = 0;
    double clip_norm = 1.0;
    uint64_t seed = 1;
};

// Stands in for a pretrained model: joint training of the backbone with a
// throwaway memory bank on the full behavior pool, in both the memory-token
// and the separator layouts. The bank is discarded and the result frozen.
Backbone<float> prime_backbone(const ModelConfig& cfg, const PrimingConfig& pcfg);

// ----------------------------- tool training/eval -----------------------------

struct ToolTrainOptions {
    OptimHyper hyper = OptimHyper::tokmem_defaults();
    bool renormalize = false;  // single-round banks have no inactive rows
    uint64_t seed = 0;
};

// Trains a fresh coupled bank (one row per tool) on memory-layout sequences
// built from the given queries. Returns the bank; the backbone is untouched.
MemoryBank<float> train_tool_bank(const Backbone<float>& backbone, const ToolDataset& tools,
                                  const std::vector<ToolQuery>& train_queries,
                                  const ToolTrainOptions& opts);

// Adapter fine-tuning on the text layout (cue + args responses).
Backbone<float> train_tool_adapters(const Backbone<float>& backbone, const ToolDataset& tools,
                                    const std::vector<ToolQuery>& train_queries,
                                    const OptimHyper& hyper, int adapter_rank, uint64_t seed);

struct ToolEvalScores {
    double tool_f1 = 0.0;
    double arg_f1 = 0.0;
    double routing_acc = 0.0;
    double exact_match = 0.0;
};

// Memory-mode when bank != nullptr (parse calls from memory events),
// text-mode otherwise (prompt with SEP, parse cue patterns).
ToolEvalScores evaluate_tool_queries(const Backbone<float>& backbone,
                                     const MemoryBank<float>* bank, const ToolDataset& tools,
                                     const std::vector<ToolQuery>& queries);

// ----------------------------- placement study -----------------------------

struct PlacementRunConfig {
    Placement placement = Placement::Infix;
    int n_memory_tokens = 1;
    int steps = 400;
    int eval_interval = 25;
    int query_len = 4;
    OptimHyper hyper = OptimHyper::tokmem_defaults();
    uint64_t seed = 0;
};

struct PlacementRunResult {
    PPLCurve curve;
    double final_ppl = 0.0;
    int steps_to_target = 0;
};

// Memorization run: a shared block of trainable tokens (prefix or infix
// placement), loss on response positions only, perplexity of the corpus
// recorded every eval_interval steps.
PlacementRunResult train_placement(const Backbone<float>& backbone,
                                   const std::vector<std::vector<TokenId>>& corpus,
                                   const PlacementRunConfig& cfg);

// ----------------------------- shared helpers -----------------------------

std::vector<TrainingSequence> atomic_memory_sequences(const ProcedureSpec& task, TokenId memory_id,
                                                      TokenId vocab_size, int max_seq_len,
                                                      bool train_split);
std::vector<TrainingSequence> atomic_text_sequences(const ProcedureSpec& task, TokenId vocab_size,
                                                    int max_seq_len, bool train_split);
TrainingSequence tool_memory_sequence(const ToolQuery& q, const std::vector<TokenId>& tool_tokens,
                                      TokenId vocab_size, int max_seq_len);
TrainingSequence tool_text_sequence(const ToolQuery& q, const ToolDataset& tools,
                                    TokenId vocab_size, int max_seq_len);

}  // namespace tokmem
