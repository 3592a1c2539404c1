#include "tokmem/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace tokmem {

namespace {

constexpr int kNumPermTables = 24;
constexpr int kNumShiftKeys = 39;
constexpr uint64_t kPermTableSeed = 0x7e57ab1eu;  // global, independent of task seeds

const std::vector<std::vector<int>>& perm_tables() {
    static const std::vector<std::vector<int>> tables = [] {
        std::vector<std::vector<int>> t;
        for (int i = 0; i < kNumPermTables; ++i) {
            std::vector<int> p(kAlphabetSize);
            std::iota(p.begin(), p.end(), 0);
            Rng rng(mix_seed(kPermTableSeed, static_cast<uint64_t>(i)));
            rng.shuffle(p);
            t.push_back(std::move(p));
        }
        return t;
    }();
    return tables;
}

std::vector<TokenId> marker_universe(MarkerSpace space, uint64_t seed) {
    // Flattened (a, b) pairs with (a + b) % 4 equal to the space tag,
    // shuffled deterministically; consumers take consecutive pairs.
    std::vector<int> pairs;
    for (int a = 0; a < kAlphabetSize; ++a) {
        for (int b = 0; b < kAlphabetSize; ++b) {
            if ((a + b) % 4 == static_cast<int>(space)) pairs.push_back(a * kAlphabetSize + b);
        }
    }
    Rng rng(mix_seed(seed, 0xFACADEull + static_cast<uint64_t>(space)));
    rng.shuffle(pairs);
    std::vector<TokenId> flat;
    for (int p : pairs) {
        flat.push_back(alpha_token(p / kAlphabetSize));
        flat.push_back(alpha_token(p % kAlphabetSize));
    }
    return flat;
}

std::vector<TokenId> random_payload(Rng& rng, int min_len = 4, int max_len = 12) {
    const int len = min_len + static_cast<int>(rng.u64_below(max_len - min_len + 1));
    std::vector<TokenId> p(static_cast<size_t>(len));
    for (auto& t : p) t = alpha_token(static_cast<int>(rng.u64_below(kAlphabetSize)));
    return p;
}

}  // namespace

const std::vector<Behavior>& behavior_pool() {
    static const std::vector<Behavior> pool = [] {
        std::vector<Behavior> p;
        p.push_back({Family::Reverse, 0});
        p.push_back({Family::SortAscending, 0});
        p.push_back({Family::Duplicate, 0});
        for (int j = 2; j <= 4; ++j) p.push_back({Family::TakeEveryJth, j});
        for (int k = 1; k <= kNumShiftKeys; ++k) p.push_back({Family::ShiftByKey, k});
        for (int t = 0; t < kNumPermTables; ++t) p.push_back({Family::MapThroughPermutation, t});
        return p;
    }();
    return pool;
}

std::string family_name(Family f) {
    switch (f) {
        case Family::Reverse: return "reverse";
        case Family::SortAscending: return "sort-ascending";
        case Family::ShiftByKey: return "shift-by-key";
        case Family::TakeEveryJth: return "take-every-jth";
        case Family::Duplicate: return "duplicate";
        case Family::MapThroughPermutation: return "map-through-permutation";
        case Family::External: return "external";
    }
    return "?";
}

std::vector<TokenId> apply_family(Family f, int param, const std::vector<TokenId>& payload) {
    for (TokenId t : payload) {
        if (t < kNumSpecials || t >= kToyVocabSize)
            throw InputError("apply_family: payload token outside the alphabet");
    }
    std::vector<TokenId> out;
    switch (f) {
        case Family::Reverse:
            out.assign(payload.rbegin(), payload.rend());
            break;
        case Family::SortAscending:
            out = payload;
            std::sort(out.begin(), out.end());
            break;
        case Family::ShiftByKey:
            for (TokenId t : payload) {
                out.push_back(alpha_token((alpha_symbol(t) + param) % kAlphabetSize));
            }
            break;
        case Family::TakeEveryJth:
            if (param < 1) throw InputError("apply_family: take-every-jth needs param >= 1");
            for (size_t i = 0; i < payload.size(); i += static_cast<size_t>(param)) {
                out.push_back(payload[i]);
            }
            break;
        case Family::Duplicate:
            out = payload;
            out.insert(out.end(), payload.begin(), payload.end());
            break;
        case Family::MapThroughPermutation: {
            const auto& tables = perm_tables();
            if (param < 0 || param >= static_cast<int>(tables.size()))
                throw InputError("apply_family: permutation table index out of range");
            for (TokenId t : payload) out.push_back(alpha_token(tables[param][alpha_symbol(t)]));
            break;
        }
        case Family::External:
            throw InputError("apply_family: external tasks carry explicit responses");
    }
    return out;
}

namespace {

std::vector<ProcedureSpec> gen_tasks_impl(int n_tasks, int train_per_task, int test_per_task,
                                          uint64_t seed, MarkerSpace space,
                                          bool behaviors_with_replacement,
                                          int markers_per_behavior) {
    const auto& pool = behavior_pool();
    std::vector<ProcedureSpec> specs;
    std::vector<Behavior> chosen;
    if (behaviors_with_replacement) {
        for (int m = 0; m < markers_per_behavior; ++m) {
            chosen.insert(chosen.end(), pool.begin(), pool.end());
        }
    } else {
        if (n_tasks > static_cast<int>(pool.size())) {
            throw CapacityError("gen_atomic_tasks: " + std::to_string(n_tasks) +
                                " tasks exceed the behavior capacity of " +
                                std::to_string(pool.size()));
        }
        std::vector<int> order(pool.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(mix_seed(seed, 0xBEA7));
        rng.shuffle(order);
        for (int i = 0; i < n_tasks; ++i) chosen.push_back(pool[order[i]]);
    }

    const auto markers = marker_universe(space, seed);
    if (chosen.size() * 2 > markers.size())
        throw CapacityError("task generation: marker space exhausted");

    for (size_t ti = 0; ti < chosen.size(); ++ti) {
        ProcedureSpec spec;
        spec.id = static_cast<int>(ti);
        spec.family = chosen[ti].family;
        spec.param = chosen[ti].param;
        spec.marker = {markers[2 * ti], markers[2 * ti + 1]};
        spec.label = family_name(spec.family) + "-" + std::to_string(spec.param) + "-m" +
                     std::to_string(alpha_symbol(spec.marker[0])) + "." +
                     std::to_string(alpha_symbol(spec.marker[1]));
        Rng rng(mix_seed(seed, 0x7A5Cull * (ti + 1)));
        std::set<std::vector<TokenId>> used;
        auto draw = [&](std::vector<Example>& dst, int count) {
            while (static_cast<int>(dst.size()) < count) {
                auto payload = random_payload(rng);
                if (!used.insert(payload).second) continue;
                Example ex;
                ex.query = spec.marker;
                ex.query.insert(ex.query.end(), payload.begin(), payload.end());
                ex.response = apply_family(spec.family, spec.param, payload);
                dst.push_back(std::move(ex));
            }
        };
        draw(spec.train, train_per_task);
        draw(spec.test, test_per_task);
        specs.push_back(std::move(spec));
    }
    return specs;
}

}  // namespace

std::vector<ProcedureSpec> gen_atomic_tasks(int n_tasks, int train_per_task, int test_per_task,
                                            uint64_t seed) {
    if (n_tasks < 1) throw InputError("gen_atomic_tasks: n_tasks must be >= 1");
    auto specs = gen_tasks_impl(n_tasks, train_per_task, test_per_task, seed,
                                MarkerSpace::AtomicEval, false, 0);
    // Separability: distinct behaviors must disagree on at least one probe.
    Rng probe_rng(mix_seed(seed, 0x980BE));
    std::vector<std::vector<TokenId>> probes;
    for (int i = 0; i < 8; ++i) probes.push_back(random_payload(probe_rng, 6, 6));
    for (size_t a = 0; a < specs.size(); ++a) {
        for (size_t b = a + 1; b < specs.size(); ++b) {
            bool differ = false;
            for (const auto& p : probes) {
                if (apply_family(specs[a].family, specs[a].param, p) !=
                    apply_family(specs[b].family, specs[b].param, p)) {
                    differ = true;
                    break;
                }
            }
            if (!differ) {
                throw ValidationError("gen_atomic_tasks: tasks " + specs[a].label + " and " +
                                      specs[b].label + " are behaviorally identical on probes");
            }
        }
    }
    return specs;
}

std::vector<ProcedureSpec> gen_priming_tasks(int markers_per_behavior, int train_per_task,
                                             uint64_t seed) {
    if (markers_per_behavior < 1)
        throw InputError("gen_priming_tasks: markers_per_behavior must be >= 1");
    return gen_tasks_impl(0, train_per_task, 0, seed, MarkerSpace::AtomicPriming, true,
                          markers_per_behavior);
}

// ----------------------------- tools -----------------------------

int tool_op_arity(ToolOp op) {
    switch (op) {
        case ToolOp::AddMod:
        case ToolOp::MulMod:
        case ToolOp::Max:
        case ToolOp::Min:
            return 2;
        case ToolOp::NegateMod:
        case ToolOp::Successor:
        case ToolOp::DoubleMod:
            return 1;
    }
    return 1;
}

TokenId apply_tool_op(ToolOp op, const std::vector<TokenId>& args) {
    if (static_cast<int>(args.size()) != tool_op_arity(op))
        throw InputError("apply_tool_op: arity mismatch");
    std::vector<int> s;
    for (TokenId a : args) s.push_back(alpha_symbol(a));
    int v = 0;
    switch (op) {
        case ToolOp::AddMod: v = (s[0] + s[1]) % kAlphabetSize; break;
        case ToolOp::MulMod: v = (s[0] * s[1]) % kAlphabetSize; break;
        case ToolOp::Max: v = std::max(s[0], s[1]); break;
        case ToolOp::Min: v = std::min(s[0], s[1]); break;
        case ToolOp::NegateMod: v = (kAlphabetSize - s[0]) % kAlphabetSize; break;
        case ToolOp::Successor: v = (s[0] + 1) % kAlphabetSize; break;
        case ToolOp::DoubleMod: v = (2 * s[0]) % kAlphabetSize; break;
    }
    return alpha_token(v);
}

namespace {
const char* tool_op_name(ToolOp op) {
    switch (op) {
        case ToolOp::AddMod: return "add-mod";
        case ToolOp::MulMod: return "mul-mod";
        case ToolOp::Max: return "max";
        case ToolOp::Min: return "min";
        case ToolOp::NegateMod: return "negate-mod";
        case ToolOp::Successor: return "successor";
        case ToolOp::DoubleMod: return "double-mod";
    }
    return "?";
}
}  // namespace

ToolDataset gen_tool_tasks(int n_tools, const std::vector<int>& call_counts, int n_train,
                           int n_test, uint64_t seed, MarkerSpace space) {
    if (n_tools < 1) throw InputError("gen_tool_tasks: n_tools must be >= 1");
    if (call_counts.empty()) throw InputError("gen_tool_tasks: empty call_counts");
    int max_calls = 0;
    for (int c : call_counts) {
        if (c < 1 || c > 4) throw InputError("gen_tool_tasks: call counts must be in 1..4");
        max_calls = std::max(max_calls, c);
    }
    if (n_tools < max_calls)
        throw CapacityError("gen_tool_tasks: need at least as many tools as calls per query");

    ToolDataset ds;
    const auto markers = marker_universe(space, seed);
    if (static_cast<size_t>(n_tools) * 2 > markers.size())
        throw CapacityError("gen_tool_tasks: marker space exhausted");
    const ToolOp ops[] = {ToolOp::AddMod,     ToolOp::NegateMod, ToolOp::MulMod, ToolOp::Successor,
                          ToolOp::Max,        ToolOp::DoubleMod, ToolOp::Min};
    for (int i = 0; i < n_tools; ++i) {
        ToolSpec t;
        t.id = i;
        t.op = ops[i % (sizeof(ops) / sizeof(ops[0]))];
        t.arity = tool_op_arity(t.op);
        t.cue = {markers[2 * i], markers[2 * i + 1]};
        t.label = std::string(tool_op_name(t.op)) + "-" + std::to_string(i);
        ds.tools.push_back(std::move(t));
    }

    Rng rng(mix_seed(seed, 0x70015));
    std::set<std::vector<TokenId>> used;
    auto draw = [&](std::vector<ToolQuery>& dst, int count) {
        int attempts = 0;
        while (static_cast<int>(dst.size()) < count) {
            if (++attempts > count * 200 + 1000)
                throw CapacityError("gen_tool_tasks: cannot draw enough distinct queries");
            ToolQuery q;
            q.call_count = call_counts[rng.index(call_counts.size())];
            std::vector<int> order(ds.tools.size());
            std::iota(order.begin(), order.end(), 0);
            rng.shuffle(order);
            for (int c = 0; c < q.call_count; ++c) {
                const ToolSpec& tool = ds.tools[order[c]];
                ToolCall call;
                call.tool_id = tool.id;
                for (int a = 0; a < tool.arity; ++a) {
                    call.args.push_back(alpha_token(static_cast<int>(rng.u64_below(kAlphabetSize))));
                }
                q.query.insert(q.query.end(), tool.cue.begin(), tool.cue.end());
                q.query.insert(q.query.end(), call.args.begin(), call.args.end());
                q.gold.push_back(std::move(call));
            }
            if (!used.insert(q.query).second) continue;
            dst.push_back(std::move(q));
        }
    };
    draw(ds.train, n_train);
    draw(ds.test, n_test);
    return ds;
}

std::vector<ToolCall> parse_calls_from_trace(const GenerationTrace& trace, TokenId first_memory_id,
                                             const std::vector<ToolSpec>& tools) {
    std::vector<ToolCall> calls;
    for (size_t e = 0; e < trace.events.size(); ++e) {
        const int tool_row = static_cast<int>(trace.events[e].token - first_memory_id);
        if (tool_row < 0 || tool_row >= static_cast<int>(tools.size())) continue;
        const size_t begin = static_cast<size_t>(trace.events[e].position) + 1;
        const size_t end = e + 1 < trace.events.size()
                               ? static_cast<size_t>(trace.events[e + 1].position)
                               : trace.tokens.size();
        ToolCall call;
        call.tool_id = tools[tool_row].id;
        for (size_t i = begin; i < end && i < trace.tokens.size(); ++i) {
            const TokenId t = trace.tokens[i];
            if (t == kEos) break;
            call.args.push_back(t);
        }
        calls.push_back(std::move(call));
    }
    return calls;
}

std::vector<ToolCall> parse_calls_from_text(const std::vector<TokenId>& tokens,
                                            const std::vector<ToolSpec>& tools) {
    std::vector<ToolCall> calls;
    size_t i = 0;
    while (i < tokens.size()) {
        if (tokens[i] == kEos) break;
        bool matched = false;
        for (const auto& tool : tools) {
            if (i + 1 < tokens.size() && tokens[i] == tool.cue[0] && tokens[i + 1] == tool.cue[1]) {
                ToolCall call;
                call.tool_id = tool.id;
                size_t j = i + 2;
                for (int a = 0; a < tool.arity && j < tokens.size() && tokens[j] != kEos;
                     ++a, ++j) {
                    call.args.push_back(tokens[j]);
                }
                calls.push_back(std::move(call));
                i = j;
                matched = true;
                break;
            }
        }
        if (!matched) ++i;
    }
    return calls;
}

// ----------------------------- memorization -----------------------------

std::vector<std::vector<TokenId>> gen_memorization_corpus(int n_sequences, int seq_len,
                                                          uint64_t seed) {
    if (n_sequences < 1 || seq_len < 1)
        throw InputError("gen_memorization_corpus: non-positive shape");
    std::vector<std::vector<TokenId>> corpus;
    for (int s = 0; s < n_sequences; ++s) {
        Rng rng(mix_seed(seed, 0x3E9ull * (s + 1)));
        std::vector<TokenId> seq(static_cast<size_t>(seq_len));
        for (auto& t : seq) t = alpha_token(static_cast<int>(rng.u64_below(kAlphabetSize)));
        corpus.push_back(std::move(seq));
    }
    return corpus;
}

// ----------------------------- ingestion -----------------------------

std::vector<TokenId> tokenize_string(const std::string& text) {
    std::vector<TokenId> out;
    std::istringstream ss(text);
    std::string word;
    while (ss >> word) {
        bool numeric = !word.empty() && word.size() <= 2;
        for (char c : word) numeric = numeric && c >= '0' && c <= '9';
        if (numeric) {
            const int v = std::stoi(word);
            if (v < kAlphabetSize) {
                out.push_back(alpha_token(v));
                continue;
            }
        }
        // Byte fallback: two nibble tokens per byte.
        for (unsigned char c : word) {
            out.push_back(alpha_token(c >> 4));
            out.push_back(alpha_token(c & 0xF));
        }
    }
    return out;
}

namespace {

std::vector<TokenId> ids_from_json(const nlohmann::json& j, const char* what, int line_no) {
    std::vector<TokenId> ids;
    if (j.is_string()) {
        ids = tokenize_string(j.get<std::string>());
    } else if (j.is_array()) {
        for (const auto& v : j) {
            if (!v.is_number_integer())
                throw ParseError("line " + std::to_string(line_no) + ": non-integer id in " + what);
            ids.push_back(v.get<TokenId>());
        }
    } else {
        throw ParseError("line " + std::to_string(line_no) + ": " + what +
                         " must be a string or id array");
    }
    for (TokenId t : ids) {
        if (t < 0 || t >= kToyVocabSize)
            throw ParseError("line " + std::to_string(line_no) + ": id " + std::to_string(t) +
                             " outside the toy vocabulary in " + what);
    }
    return ids;
}

std::vector<Example> examples_from_json(const nlohmann::json& j, const char* what, int line_no) {
    if (!j.is_array())
        throw ParseError("line " + std::to_string(line_no) + ": \"" + what + "\" must be a list");
    std::vector<Example> out;
    for (const auto& e : j) {
        if (!e.contains("query"))
            throw ParseError("line " + std::to_string(line_no) + ": example missing \"query\"");
        if (!e.contains("response"))
            throw ParseError("line " + std::to_string(line_no) + ": example missing \"response\"");
        Example ex;
        ex.query = ids_from_json(e["query"], "query", line_no);
        ex.response = ids_from_json(e["response"], "response", line_no);
        out.push_back(std::move(ex));
    }
    return out;
}

}  // namespace

std::vector<ProcedureSpec> load_tasks_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("load_tasks_jsonl: cannot open " + path);
    std::vector<ProcedureSpec> specs;
    std::set<int> seen_ids;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        for (const char* field : {"task_id", "label", "train", "test"}) {
            if (!j.contains(field)) {
                throw ParseError("line " + std::to_string(line_no) + ": missing field \"" +
                                 field + "\"");
            }
        }
        ProcedureSpec spec;
        spec.family = Family::External;
        if (!j["task_id"].is_number_integer())
            throw ParseError("line " + std::to_string(line_no) + ": task_id must be an integer");
        spec.id = j["task_id"].get<int>();
        if (!seen_ids.insert(spec.id).second)
            throw ValidationError("load_tasks_jsonl: duplicate task_id " +
                                  std::to_string(spec.id));
        spec.label = j["label"].get<std::string>();
        spec.train = examples_from_json(j["train"], "train", line_no);
        spec.test = examples_from_json(j["test"], "test", line_no);
        specs.push_back(std::move(spec));
    }
    return specs;
}

void export_tasks_jsonl(const std::string& path, const std::vector<ProcedureSpec>& specs) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("export_tasks_jsonl: cannot open " + path);
    for (const auto& spec : specs) {
        nlohmann::json j;
        j["task_id"] = spec.id;
        j["label"] = spec.label;
        auto dump = [](const std::vector<Example>& exs) {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& e : exs) {
                arr.push_back({{"query", e.query}, {"response", e.response}});
            }
            return arr;
        };
        j["train"] = dump(spec.train);
        j["test"] = dump(spec.test);
        f << j.dump() << "\n";
    }
    if (!f) throw IoError("export_tasks_jsonl: write failed for " + path);
}

}  // namespace tokmem
