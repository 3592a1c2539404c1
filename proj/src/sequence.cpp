#include "tokmem/sequence.hpp"

#include <string>

namespace tokmem {

namespace {

void finalize(TrainingSequence& seq, int mask_from, TokenId vocab_size, int max_seq_len,
              const char* what) {
    if (seq.ids.empty()) throw InputError(std::string(what) + ": empty sequence");
    if (static_cast<int>(seq.ids.size()) > max_seq_len) {
        throw LengthError(std::string(what) + ": sequence of length " +
                          std::to_string(seq.ids.size()) + " exceeds max_seq_len " +
                          std::to_string(max_seq_len));
    }
    seq.targets = seq.ids;
    seq.mask.assign(seq.ids.size(), 0);
    for (size_t j = std::max(1, mask_from); j < seq.ids.size(); ++j) seq.mask[j] = 1;
    seq.memory_positions.clear();
    for (size_t j = 0; j < seq.ids.size(); ++j) {
        if (seq.ids[j] >= vocab_size) seq.memory_positions.push_back(static_cast<int>(j));
    }
}

}  // namespace

TrainingSequence build_infix_sequence(const std::vector<TokenId>& query,
                                      const std::vector<ProcedurePair>& pairs,
                                      TokenId vocab_size, int max_seq_len) {
    if (pairs.empty()) throw InputError("build_infix_sequence: no procedure pairs");
    if (query.empty()) throw InputError("build_infix_sequence: empty query");
    for (TokenId q : query) {
        if (q >= vocab_size) throw InputError("build_infix_sequence: memory id inside query");
    }
    TrainingSequence seq;
    seq.placement = Placement::Infix;
    seq.query_len = static_cast<int>(query.size());
    seq.ids = query;
    for (size_t p = 0; p < pairs.size(); ++p) {
        const auto& pair = pairs[p];
        if (pair.memory_id < vocab_size)
            throw InputError("build_infix_sequence: pair memory id below vocab_size");
        if (pair.response.empty())
            throw InputError("build_infix_sequence: empty response in pair " + std::to_string(p));
        seq.ids.push_back(pair.memory_id);
        seq.ids.insert(seq.ids.end(), pair.response.begin(), pair.response.end());
        if (static_cast<int>(seq.ids.size()) > max_seq_len) {
            throw LengthError("build_infix_sequence: overflow at pair " + std::to_string(p) +
                              " (memory id " + std::to_string(pair.memory_id) + ")");
        }
    }
    if (seq.ids.back() != kEos) seq.ids.push_back(kEos);
    finalize(seq, seq.query_len, vocab_size, max_seq_len, "build_infix_sequence");
    return seq;
}

TrainingSequence build_prefix_sequence(const std::vector<TokenId>& memory_ids,
                                       const std::vector<TokenId>& query,
                                       const std::vector<TokenId>& response,
                                       TokenId vocab_size, int max_seq_len) {
    TrainingSequence seq;
    seq.placement = Placement::Prefix;
    seq.query_len = static_cast<int>(query.size());
    seq.ids = memory_ids;
    seq.ids.insert(seq.ids.end(), query.begin(), query.end());
    const int mask_from = static_cast<int>(seq.ids.size());
    seq.ids.insert(seq.ids.end(), response.begin(), response.end());
    if (seq.ids.empty() || seq.ids.back() != kEos) seq.ids.push_back(kEos);
    finalize(seq, mask_from, vocab_size, max_seq_len, "build_prefix_sequence");
    return seq;
}

TrainingSequence build_infix_prompt_sequence(const std::vector<TokenId>& memory_ids,
                                             const std::vector<TokenId>& query,
                                             const std::vector<TokenId>& response,
                                             TokenId vocab_size, int max_seq_len) {
    TrainingSequence seq;
    seq.placement = Placement::Infix;
    seq.query_len = static_cast<int>(query.size());
    seq.ids = query;
    seq.ids.insert(seq.ids.end(), memory_ids.begin(), memory_ids.end());
    const int mask_from = static_cast<int>(seq.ids.size());
    seq.ids.insert(seq.ids.end(), response.begin(), response.end());
    if (seq.ids.empty() || seq.ids.back() != kEos) seq.ids.push_back(kEos);
    finalize(seq, mask_from, vocab_size, max_seq_len, "build_infix_prompt_sequence");
    return seq;
}

TrainingSequence build_separated_sequence(const std::vector<TokenId>& query,
                                          const std::vector<TokenId>& response,
                                          TokenId vocab_size, int max_seq_len) {
    if (query.empty()) throw InputError("build_separated_sequence: empty query");
    TrainingSequence seq;
    seq.placement = Placement::Infix;
    seq.query_len = static_cast<int>(query.size());
    seq.ids = query;
    seq.ids.push_back(kSep);
    const int mask_from = static_cast<int>(seq.ids.size());
    seq.ids.insert(seq.ids.end(), response.begin(), response.end());
    if (seq.ids.back() != kEos) seq.ids.push_back(kEos);
    finalize(seq, mask_from, vocab_size, max_seq_len, "build_separated_sequence");
    return seq;
}

ParsedInfix parse_infix_sequence(const TrainingSequence& seq, TokenId vocab_size) {
    ParsedInfix out;
    if (seq.memory_positions.empty())
        throw InputError("parse_infix_sequence: no memory positions");
    const int first_mem = seq.memory_positions.front();
    if (first_mem != seq.query_len)
        throw InputError("parse_infix_sequence: query length does not meet first memory token");
    out.query.assign(seq.ids.begin(), seq.ids.begin() + first_mem);
    for (size_t e = 0; e < seq.memory_positions.size(); ++e) {
        const int begin = seq.memory_positions[e];
        const int end = e + 1 < seq.memory_positions.size() ? seq.memory_positions[e + 1]
                                                            : seq.length();
        ProcedurePair pair;
        pair.memory_id = seq.ids[begin];
        if (pair.memory_id < vocab_size)
            throw InputError("parse_infix_sequence: base token recorded as memory position");
        pair.response.assign(seq.ids.begin() + begin + 1, seq.ids.begin() + end);
        out.pairs.push_back(std::move(pair));
    }
    return out;
}

}  // namespace tokmem
