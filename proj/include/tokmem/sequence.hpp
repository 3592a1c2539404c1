#pragma once

#include <vector>

#include "tokmem/common.hpp"

namespace tokmem {

enum class Placement : uint8_t { Infix = 0, Prefix = 1 };

// One teacher-forced training example. `ids` are the inputs; position j > 0
// is scored against `targets[j]` whenever `mask[j]` is set. Targets default
// to the inputs shifted by one (targets[j] == ids[j]) but are stored
// separately so masked-out labels can be perturbed without touching the
// conditioning stream.
struct TrainingSequence {
    std::vector<TokenId> ids;
    std::vector<TokenId> targets;
    std::vector<uint8_t> mask;
    int query_len = 0;
    std::vector<int> memory_positions;
    Placement placement = Placement::Infix;

    int length() const { return static_cast<int>(ids.size()); }
};

// A procedure invocation inside a training sequence: the memory token id
// followed by its response tokens. The final pair of a sequence must end
// with EOS (the builders append it when missing).
struct ProcedurePair {
    TokenId memory_id = 0;
    std::vector<TokenId> response;
};

// query + (memory, response)* with the loss on every position after the
// query, memory tokens included — routing is trained.
TrainingSequence build_infix_sequence(const std::vector<TokenId>& query,
                                      const std::vector<ProcedurePair>& pairs,
                                      TokenId vocab_size, int max_seq_len);

// memory tokens + query + response; loss on response positions only (the
// classic soft-prompt layout — prefix tokens are inputs, never targets).
TrainingSequence build_prefix_sequence(const std::vector<TokenId>& memory_ids,
                                       const std::vector<TokenId>& query,
                                       const std::vector<TokenId>& response,
                                       TokenId vocab_size, int max_seq_len);

// query + memory tokens + response with the same response-only masking as
// build_prefix_sequence; used by the placement study so the two layouts
// differ only in where the trainable tokens sit.
TrainingSequence build_infix_prompt_sequence(const std::vector<TokenId>& memory_ids,
                                             const std::vector<TokenId>& query,
                                             const std::vector<TokenId>& response,
                                             TokenId vocab_size, int max_seq_len);

// query + SEP + response with the loss on the response; the layout used by
// the plain fine-tuning baselines, which carry no memory tokens. At
// generation time the SEP is fed as part of the prompt.
TrainingSequence build_separated_sequence(const std::vector<TokenId>& query,
                                          const std::vector<TokenId>& response,
                                          TokenId vocab_size, int max_seq_len);

// Exact inverse of build_infix_sequence.
struct ParsedInfix {
    std::vector<TokenId> query;
    std::vector<ProcedurePair> pairs;
};
ParsedInfix parse_infix_sequence(const TrainingSequence& seq, TokenId vocab_size);

}  // namespace tokmem
