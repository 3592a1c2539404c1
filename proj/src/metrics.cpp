#include "tokmem/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace tokmem {

RougeScore rouge_l(const std::vector<TokenId>& pred, const std::vector<TokenId>& gold) {
    RougeScore s;
    if (pred.empty() || gold.empty()) return s;
    const size_t n = pred.size();
    const size_t m = gold.size();
    // Two-row LCS table.
    std::vector<int> prev(m + 1, 0), cur(m + 1, 0);
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            cur[j] = pred[i - 1] == gold[j - 1] ? prev[j - 1] + 1
                                                : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    const double lcs = prev[m];
    s.precision = lcs / static_cast<double>(n);
    s.recall = lcs / static_cast<double>(m);
    s.f = lcs == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

double routing_accuracy(const std::vector<GenerationTrace>& traces,
                        const std::vector<TokenId>& gold_first_memory_ids) {
    if (traces.size() != gold_first_memory_ids.size())
        throw InputError("routing_accuracy: traces/gold length mismatch");
    if (traces.empty()) return 0.0;
    size_t hit = 0;
    for (size_t i = 0; i < traces.size(); ++i) {
        if (!traces[i].events.empty() && traces[i].events.front().token == gold_first_memory_ids[i])
            ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(traces.size());
}

namespace {

template <class Key>
double multiset_f1(const std::vector<Key>& pred, const std::vector<Key>& gold) {
    if (pred.empty() && gold.empty()) return 1.0;
    if (pred.empty() || gold.empty()) return 0.0;
    std::map<Key, int> want;
    for (const auto& g : gold) ++want[g];
    int tp = 0;
    for (const auto& p : pred) {
        auto it = want.find(p);
        if (it != want.end() && it->second > 0) {
            --it->second;
            ++tp;
        }
    }
    if (tp == 0) return 0.0;
    const double precision = static_cast<double>(tp) / static_cast<double>(pred.size());
    const double recall = static_cast<double>(tp) / static_cast<double>(gold.size());
    return 2.0 * precision * recall / (precision + recall);
}

}  // namespace

CallF1 call_f1(const std::vector<ToolCall>& pred, const std::vector<ToolCall>& gold) {
    CallF1 out;
    std::vector<int> pred_tools, gold_tools;
    for (const auto& c : pred) pred_tools.push_back(c.tool_id);
    for (const auto& c : gold) gold_tools.push_back(c.tool_id);
    out.tool_f1 = multiset_f1(pred_tools, gold_tools);
    out.arg_f1 = multiset_f1(pred, gold);
    return out;
}

double perplexity(const std::vector<double>& masked_nlls) {
    if (masked_nlls.empty()) throw InputError("perplexity: no masked positions");
    double acc = 0.0;
    for (double v : masked_nlls) acc += v;
    return std::exp(acc / static_cast<double>(masked_nlls.size()));
}

int steps_at_target(const PPLCurve& curve, double fraction) {
    if (curve.points.empty()) throw InputError("steps_at_target: empty curve");
    if (fraction <= 0.0) throw InputError("steps_at_target: fraction must be positive");
    double best = curve.points.front().second;
    for (const auto& [step, ppl] : curve.points) best = std::min(best, ppl);
    const double threshold = best / fraction;
    for (const auto& [step, ppl] : curve.points) {
        if (ppl <= threshold) return step;
    }
    return curve.points.back().first;  // unreachable: best always meets its own threshold
}

ForgettingMatrix forgetting_matrix(const std::vector<MetricsReport>& reports, ScoreKind kind) {
    ForgettingMatrix m;
    if (reports.empty()) return m;
    std::set<std::string> universe;
    for (const auto& r : reports) {
        for (const auto& [g, _] : r.groups) universe.insert(g);
    }
    for (const auto& r : reports) {
        if (r.groups.size() != universe.size())
            throw InputError("forgetting_matrix: reports disagree on the task-group universe");
        for (const auto& g : universe) {
            if (!r.groups.count(g))
                throw InputError("forgetting_matrix: report " + r.checkpoint_label +
                                 " missing group " + g);
        }
    }
    m.group_labels.assign(universe.begin(), universe.end());
    for (const auto& r : reports) {
        m.checkpoint_labels.push_back(r.checkpoint_label);
        std::vector<double> row;
        std::vector<bool> seen_row;
        for (const auto& g : m.group_labels) {
            const auto& s = r.groups.at(g);
            double v = 0.0;
            switch (kind) {
                case ScoreKind::ExactMatch: v = s.exact_match; break;
                case ScoreKind::RougeL: v = s.rouge_l; break;
                case ScoreKind::ArgF1: v = s.arg_f1; break;
                case ScoreKind::ToolF1: v = s.tool_f1; break;
            }
            row.push_back(v);
            seen_row.push_back(s.seen);
        }
        m.scores.push_back(std::move(row));
        m.seen.push_back(std::move(seen_row));
    }
    return m;
}

}  // namespace tokmem
