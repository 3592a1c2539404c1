#pragma once

#include <string>
#include <vector>

#include "tokmem/common.hpp"
#include "tokmem/metrics.hpp"

namespace tokmem {

// Atomic procedure families. Every family is a deterministic map from the
// query payload (alphabet tokens) to the gold response. External marks
// tasks ingested from JSONL, whose responses come from the file.
enum class Family : uint8_t {
    Reverse,
    SortAscending,
    ShiftByKey,
    TakeEveryJth,
    Duplicate,
    MapThroughPermutation,
    External,
};

struct Behavior {
    Family family = Family::Reverse;
    int param = 0;
};

// The fixed universe of distinguishable behaviors; generation capacity is
// its size.
const std::vector<Behavior>& behavior_pool();

std::string family_name(Family f);

// Applies a family to alphabet tokens (responses exclude EOS).
std::vector<TokenId> apply_family(Family f, int param, const std::vector<TokenId>& payload);

struct Example {
    std::vector<TokenId> query;     // marker tokens + payload
    std::vector<TokenId> response;  // gold ids, no EOS
};

struct ProcedureSpec {
    int id = 0;
    std::string label;
    Family family = Family::Reverse;
    int param = 0;
    std::vector<TokenId> marker;
    std::vector<Example> train;
    std::vector<Example> test;
};

// Marker classes partition the 2-token marker space so that priming data,
// continual-phase tasks and the two tool universes can never collide.
enum class MarkerSpace : uint8_t { AtomicPriming = 0, AtomicEval = 1, ToolEval = 2, ToolAux = 3 };

// Queries are a 2-token task marker followed by 4..12 uniform payload
// tokens; the response applies the task's behavior to the payload.
// Behaviors are drawn without replacement from behavior_pool(), so any two
// generated tasks differ on some probe query (asserted during generation).
std::vector<ProcedureSpec> gen_atomic_tasks(int n_tasks, int train_per_task, int test_per_task,
                                            uint64_t seed);

// Priming corpus: every pool behavior repeated under several distinct
// markers from the AtomicPriming space. Stands in for the broad competence
// a pretrained backbone would bring.
std::vector<ProcedureSpec> gen_priming_tasks(int markers_per_behavior, int train_per_task,
                                             uint64_t seed);

// ----------------------------- tools -----------------------------

enum class ToolOp : uint8_t { AddMod, MulMod, Max, Min, NegateMod, Successor, DoubleMod };

int tool_op_arity(ToolOp op);

// Semantics over alphabet symbols; unused by scoring (calls are compared
// structurally) but kept so tools stay honest functions.
TokenId apply_tool_op(ToolOp op, const std::vector<TokenId>& args);

struct ToolSpec {
    int id = 0;
    std::string label;
    ToolOp op = ToolOp::AddMod;
    int arity = 1;
    std::vector<TokenId> cue;  // 2-token marker introducing the call in a query
};

struct ToolQuery {
    std::vector<TokenId> query;
    std::vector<ToolCall> gold;  // ordered; tool_id indexes ToolDataset::tools
    int call_count = 0;
};

struct ToolDataset {
    std::vector<ToolSpec> tools;
    std::vector<ToolQuery> train;
    std::vector<ToolQuery> test;
};

// Queries serialise 1..4 calls as [cue, args...] segments over distinct
// tools; gold arguments are literal query tokens. call_counts picks which
// chain lengths appear (subset of {1,2,3,4}).
ToolDataset gen_tool_tasks(int n_tools, const std::vector<int>& call_counts, int n_train,
                           int n_test, uint64_t seed, MarkerSpace space = MarkerSpace::ToolEval);

// Decoders from generated token streams back to calls, used by evaluation.
// Memory-mode responses are (memory token, args...) chains; text-mode
// responses repeat the cue tokens instead.
std::vector<ToolCall> parse_calls_from_trace(const GenerationTrace& trace, TokenId first_memory_id,
                                             const std::vector<ToolSpec>& tools);
std::vector<ToolCall> parse_calls_from_text(const std::vector<TokenId>& tokens,
                                            const std::vector<ToolSpec>& tools);

// ----------------------------- memorization -----------------------------

// Uniform random alphabet-token sequences (a stand-in for post-pretraining
// novel text); marker queries are attached at layout time.
std::vector<std::vector<TokenId>> gen_memorization_corpus(int n_sequences, int seq_len,
                                                          uint64_t seed);

// ----------------------------- ingestion -----------------------------

// Whitespace tokenizer over the toy alphabet: decimal literals in [0, 64)
// map to their alphabet token, anything else falls back to bytes encoded as
// high/low nibble token pairs.
std::vector<TokenId> tokenize_string(const std::string& text);

// One JSON object per line: {"task_id", "label", "train": [{"query",
// "response"}], "test": [...]}; query/response are id arrays or strings.
std::vector<ProcedureSpec> load_tasks_jsonl(const std::string& path);
void export_tasks_jsonl(const std::string& path, const std::vector<ProcedureSpec>& specs);

}  // namespace tokmem
