#pragma once

#include <map>
#include <string>
#include <vector>

#include "tokmem/common.hpp"
#include "tokmem/model.hpp"

namespace tokmem {

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f = 0.0;
};

// LCS-based Rouge-L on token ids. Empty prediction or reference scores zero.
RougeScore rouge_l(const std::vector<TokenId>& pred, const std::vector<TokenId>& gold);

// Fraction of traces whose first memory event matches the gold id; traces
// without a memory event count as wrong.
double routing_accuracy(const std::vector<GenerationTrace>& traces,
                        const std::vector<TokenId>& gold_first_memory_ids);

struct ToolCall {
    int tool_id = 0;
    std::vector<TokenId> args;
    bool operator==(const ToolCall&) const = default;
    bool operator<(const ToolCall& o) const {
        return tool_id != o.tool_id ? tool_id < o.tool_id : args < o.args;
    }
};

struct CallF1 {
    double tool_f1 = 0.0;  // multiset F1 over tool ids
    double arg_f1 = 0.0;   // multiset F1 over whole (tool, args) calls
};

CallF1 call_f1(const std::vector<ToolCall>& pred, const std::vector<ToolCall>& gold);

// exp(mean NLL) over masked positions.
double perplexity(const std::vector<double>& masked_nlls);

struct PPLCurve {
    int interval = 100;
    std::vector<std::pair<int, double>> points;  // (step, ppl), steps strictly increasing
};

// Earliest recorded step whose perplexity reaches best/fraction.
int steps_at_target(const PPLCurve& curve, double fraction = 0.9);

struct GroupScores {
    double rouge_l = 0.0;
    double exact_match = 0.0;
    double routing_acc = 0.0;
    double tool_f1 = 0.0;
    double arg_f1 = 0.0;
    double ppl = 1.0;
    bool seen = false;
};

struct MetricsReport {
    std::string checkpoint_label;
    std::map<std::string, GroupScores> groups;
};

struct ForgettingMatrix {
    std::vector<std::string> checkpoint_labels;  // rows
    std::vector<std::string> group_labels;       // columns
    std::vector<std::vector<double>> scores;     // [round][group]
    std::vector<std::vector<bool>> seen;
};

enum class ScoreKind : uint8_t { ExactMatch, RougeL, ArgF1, ToolF1 };

// Row r, column g = score of group g at checkpoint r; cells for groups the
// checkpoint has not trained on are flagged unseen.
ForgettingMatrix forgetting_matrix(const std::vector<MetricsReport>& reports,
                                   ScoreKind kind = ScoreKind::ExactMatch);

}  // namespace tokmem
