#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <set>

#include "tokmem/taskgen.hpp"

using namespace tokmem;

namespace {
std::vector<TokenId> alpha(std::initializer_list<int> symbols) {
    std::vector<TokenId> out;
    for (int s : symbols) out.push_back(alpha_token(s));
    return out;
}
}  // namespace

TEST_CASE("family semantics") {
    CHECK(apply_family(Family::Reverse, 0, alpha({5, 9, 2})) == alpha({2, 9, 5}));
    CHECK(apply_family(Family::SortAscending, 0, alpha({5, 9, 2})) == alpha({2, 5, 9}));
    CHECK(apply_family(Family::ShiftByKey, 3, alpha({0, 63})) == alpha({3, 2}));
    CHECK(apply_family(Family::TakeEveryJth, 2, alpha({1, 2, 3, 4, 5})) == alpha({1, 3, 5}));
    CHECK(apply_family(Family::Duplicate, 0, alpha({7, 8})) == alpha({7, 8, 7, 8}));
    // permutation tables are bijections
    auto mapped = apply_family(Family::MapThroughPermutation, 0, alpha({0, 1, 2, 3}));
    std::set<TokenId> uniq(mapped.begin(), mapped.end());
    CHECK(uniq.size() == 4);
}

TEST_CASE("gen_atomic_tasks") {
    auto tasks = gen_atomic_tasks(50, 8, 4, 42);
    REQUIRE(tasks.size() == 50);

    SUBCASE("deterministic in the seed") {
        auto again = gen_atomic_tasks(50, 8, 4, 42);
        for (size_t i = 0; i < tasks.size(); ++i) {
            CHECK(tasks[i].marker == again[i].marker);
            CHECK(tasks[i].train[0].query == again[i].train[0].query);
            CHECK(tasks[i].train[0].response == again[i].train[0].response);
        }
        auto other = gen_atomic_tasks(50, 8, 4, 43);
        bool differ = false;
        for (size_t i = 0; i < tasks.size(); ++i) {
            differ = differ || tasks[i].train[0].query != other[i].train[0].query;
        }
        CHECK(differ);
    }
    SUBCASE("markers are unique and responses deterministic") {
        std::set<std::vector<TokenId>> markers;
        for (const auto& t : tasks) {
            markers.insert(t.marker);
            for (const auto& ex : t.train) {
                std::vector<TokenId> payload(ex.query.begin() + 2, ex.query.end());
                CHECK(ex.response == apply_family(t.family, t.param, payload));
            }
            CHECK(static_cast<int>(t.train.size()) == 8);
            CHECK(static_cast<int>(t.test.size()) == 4);
        }
        CHECK(markers.size() == tasks.size());
    }
    SUBCASE("train/test splits are disjoint") {
        for (const auto& t : tasks) {
            std::set<std::vector<TokenId>> train_q;
            for (const auto& ex : t.train) train_q.insert(ex.query);
            for (const auto& ex : t.test) CHECK(train_q.count(ex.query) == 0);
        }
    }
    SUBCASE("capacity error beyond the behavior pool") {
        CHECK_THROWS_AS(gen_atomic_tasks(1000, 2, 1, 1), CapacityError);
    }
}

TEST_CASE("priming tasks use a disjoint marker class") {
    auto prim = gen_priming_tasks(2, 4, 7);
    auto eval = gen_atomic_tasks(50, 4, 2, 7);
    CHECK(prim.size() == 2 * behavior_pool().size());
    std::set<std::vector<TokenId>> prim_markers;
    for (const auto& t : prim) prim_markers.insert(t.marker);
    for (const auto& t : eval) CHECK(prim_markers.count(t.marker) == 0);
}

TEST_CASE("gen_tool_tasks") {
    auto ds = gen_tool_tasks(10, {1, 2, 3}, 60, 20, 99);
    REQUIRE(ds.tools.size() == 10);
    CHECK(ds.train.size() == 60);
    CHECK(ds.test.size() == 20);

    SUBCASE("gold args are literal query tokens in order") {
        for (const auto& q : ds.train) {
            CHECK(q.call_count == static_cast<int>(q.gold.size()));
            CHECK(q.call_count >= 1);
            CHECK(q.call_count <= 3);
            size_t cursor = 0;
            for (const auto& call : q.gold) {
                const auto& tool = ds.tools[call.tool_id];
                REQUIRE(cursor + 2 + call.args.size() <= q.query.size());
                CHECK(q.query[cursor] == tool.cue[0]);
                CHECK(q.query[cursor + 1] == tool.cue[1]);
                for (size_t a = 0; a < call.args.size(); ++a) {
                    CHECK(q.query[cursor + 2 + a] == call.args[a]);
                }
                cursor += 2 + call.args.size();
                CHECK(static_cast<int>(call.args.size()) == tool.arity);
            }
            CHECK(cursor == q.query.size());
        }
    }
    SUBCASE("single-call subsets are isolable") {
        auto ones = gen_tool_tasks(10, {1}, 30, 10, 99);
        for (const auto& q : ones.train) CHECK(q.call_count == 1);
    }
    SUBCASE("deterministic and parseable back from text") {
        auto again = gen_tool_tasks(10, {1, 2, 3}, 60, 20, 99);
        CHECK(again.train[0].query == ds.train[0].query);
        for (const auto& q : ds.test) {
            // a gold text response is [cue args]*; the parser must recover it
            std::vector<TokenId> text;
            for (const auto& call : q.gold) {
                const auto& tool = ds.tools[call.tool_id];
                text.insert(text.end(), tool.cue.begin(), tool.cue.end());
                text.insert(text.end(), call.args.begin(), call.args.end());
            }
            text.push_back(kEos);
            auto parsed = parse_calls_from_text(text, ds.tools);
            CHECK(parsed == q.gold);
        }
    }
    SUBCASE("infeasible requests raise capacity errors") {
        CHECK_THROWS_AS(gen_tool_tasks(2, {4}, 10, 5, 1), CapacityError);
    }
    SUBCASE("tool semantics are deterministic functions") {
        for (const auto& tool : ds.tools) {
            std::vector<TokenId> args(static_cast<size_t>(tool.arity), alpha_token(3));
            CHECK(apply_tool_op(tool.op, args) == apply_tool_op(tool.op, args));
        }
        CHECK(apply_tool_op(ToolOp::AddMod, alpha({2, 3})) == alpha_token(5));
        CHECK(apply_tool_op(ToolOp::NegateMod, alpha({1})) == alpha_token(63));
    }
}

TEST_CASE("memorization corpus shapes and determinism") {
    auto a = gen_memorization_corpus(8, 128, 5);
    REQUIRE(a.size() == 8);
    int total = 0;
    for (const auto& s : a) total += static_cast<int>(s.size());
    CHECK(total == 1024);
    auto b32 = gen_memorization_corpus(32, 128, 5);
    total = 0;
    for (const auto& s : b32) total += static_cast<int>(s.size());
    CHECK(total == 4096);
    auto again = gen_memorization_corpus(8, 128, 5);
    CHECK(a == again);
}

TEST_CASE("jsonl ingestion") {
    const char* path = "test_tasks.jsonl";

    SUBCASE("empty file gives an empty list") {
        std::ofstream(path).close();
        CHECK(load_tasks_jsonl(path).empty());
        std::remove(path);
    }
    SUBCASE("missing test field is a parse error naming the field") {
        std::ofstream f(path);
        f << R"({"task_id": 1, "label": "x", "train": []})" << "\n";
        f.close();
        try {
            load_tasks_jsonl(path);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("test") != std::string::npos);
        }
        std::remove(path);
    }
    SUBCASE("duplicate task ids are a validation error") {
        std::ofstream f(path);
        f << R"({"task_id": 1, "label": "a", "train": [], "test": []})" << "\n";
        f << R"({"task_id": 1, "label": "b", "train": [], "test": []})" << "\n";
        f.close();
        CHECK_THROWS_AS(load_tasks_jsonl(path), ValidationError);
        std::remove(path);
    }
    SUBCASE("export/import round-trips generated tasks") {
        auto tasks = gen_atomic_tasks(5, 3, 2, 77);
        export_tasks_jsonl(path, tasks);
        auto loaded = load_tasks_jsonl(path);
        REQUIRE(loaded.size() == tasks.size());
        for (size_t i = 0; i < tasks.size(); ++i) {
            CHECK(loaded[i].id == tasks[i].id);
            CHECK(loaded[i].label == tasks[i].label);
            REQUIRE(loaded[i].train.size() == tasks[i].train.size());
            for (size_t e = 0; e < tasks[i].train.size(); ++e) {
                CHECK(loaded[i].train[e].query == tasks[i].train[e].query);
                CHECK(loaded[i].train[e].response == tasks[i].train[e].response);
            }
            REQUIRE(loaded[i].test.size() == tasks[i].test.size());
        }
        std::remove(path);
    }
    SUBCASE("string payloads go through the toy tokenizer") {
        std::ofstream f(path);
        f << R"({"task_id": 3, "label": "s", "train": [{"query": "5 12 63", "response": "1"}], "test": []})"
          << "\n";
        f.close();
        auto loaded = load_tasks_jsonl(path);
        REQUIRE(loaded.size() == 1);
        CHECK(loaded[0].train[0].query == std::vector<TokenId>{alpha_token(5), alpha_token(12),
                                                               alpha_token(63)});
        std::remove(path);
    }
}

TEST_CASE("toy tokenizer byte fallback") {
    auto ids = tokenize_string("7 hi");
    REQUIRE(ids.size() == 5);  // "7" + two bytes as nibble pairs
    CHECK(ids[0] == alpha_token(7));
    CHECK(ids[1] == alpha_token('h' >> 4));
    CHECK(ids[2] == alpha_token('h' & 0xF));
    CHECK(ids[3] == alpha_token('i' >> 4));
    CHECK(ids[4] == alpha_token('i' & 0xF));
}
