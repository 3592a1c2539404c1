#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "tokmem/model.hpp"

using namespace tokmem;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 20;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.max_seq_len = 16;
    cfg.seed = 5;
    return cfg;
}

TrainingSequence make_seq(std::vector<TokenId> ids, int query_len) {
    TrainingSequence s;
    s.ids = std::move(ids);
    s.targets = s.ids;
    s.mask.assign(s.ids.size(), 0);
    for (size_t j = std::max(1, query_len); j < s.ids.size(); ++j) s.mask[j] = 1;
    s.query_len = query_len;
    return s;
}

template <class S>
uint64_t full_checksum(Backbone<S>& b) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (auto span : backbone_param_spans(b, true)) {
        h = fnv1a(span.data(), span.size() * sizeof(S), h);
    }
    return h;
}

}  // namespace

TEST_CASE("init_backbone is deterministic in the seed") {
    auto cfg = tiny_config();
    auto a = init_backbone<float>(cfg, 7);
    auto b = init_backbone<float>(cfg, 7);
    auto c = init_backbone<float>(cfg, 8);
    CHECK(full_checksum(a) == full_checksum(b));
    CHECK(full_checksum(a) != full_checksum(c));
    CHECK_FALSE(a.frozen);
}

TEST_CASE("invalid configs are rejected") {
    auto cfg = tiny_config();
    cfg.d_model = 128;
    cfg.n_heads = 3;
    CHECK_THROWS_AS(init_backbone<float>(cfg, 1), ConfigError);
    cfg = tiny_config();
    cfg.vocab_size = 3;
    CHECK_THROWS_AS(init_backbone<float>(cfg, 1), ConfigError);
    cfg = tiny_config();
    cfg.max_seq_len = 4;
    CHECK_THROWS_AS(init_backbone<float>(cfg, 1), ConfigError);
}

TEST_CASE("empty bank forward equals the plain transformer") {
    auto cfg = tiny_config();
    auto b = init_backbone<float>(cfg, 3);
    auto bank = create_bank<float>(cfg.d_model, 0, b, 11, BankVariant::Coupled);
    auto seq = make_seq({4, 5, 6, 7}, 2);
    auto with_bank = forward<float>(b, &bank, std::span(&seq, 1));
    auto without = forward<float>(b, nullptr, std::span(&seq, 1));
    CHECK(with_bank[0].cols == cfg.vocab_size);
    CHECK(with_bank[0].a == without[0].a);
}

TEST_CASE("extending the bank leaves pre-existing logits bitwise unchanged") {
    auto cfg = tiny_config();
    auto b = init_backbone<float>(cfg, 3);
    auto bank = create_bank<float>(cfg.d_model, 2, b, 11, BankVariant::Coupled);
    auto seq = make_seq({4, 5, static_cast<TokenId>(cfg.vocab_size + 1), 7}, 2);
    auto before = forward<float>(b, &bank, std::span(&seq, 1));
    extend_bank(bank, 3, b);
    auto after = forward<float>(b, &bank, std::span(&seq, 1));
    CHECK(after[0].cols == cfg.vocab_size + 5);
    for (int t = 0; t < before[0].rows; ++t) {
        for (int v = 0; v < before[0].cols; ++v) {
            CHECK(before[0].at(t, v) == after[0].at(t, v));
        }
    }
}

TEST_CASE("causality: changing position t never changes logits before t") {
    auto cfg = tiny_config();
    auto b = init_backbone<float>(cfg, 9);
    auto s1 = make_seq({4, 5, 6, 7, 8, 9}, 2);
    auto s2 = s1;
    s2.ids[4] = 15;
    auto l1 = forward<float>(b, nullptr, std::span(&s1, 1));
    auto l2 = forward<float>(b, nullptr, std::span(&s2, 1));
    for (int t = 0; t < 4; ++t) {
        for (int v = 0; v < cfg.vocab_size; ++v) CHECK(l1[0].at(t, v) == l2[0].at(t, v));
    }
    // and position 4 onward does change
    bool any = false;
    for (int v = 0; v < cfg.vocab_size; ++v) any = any || l1[0].at(4, v) != l2[0].at(4, v);
    CHECK(any);
}

TEST_CASE("batch order does not affect per-sequence logits") {
    auto cfg = tiny_config();
    auto b = init_backbone<float>(cfg, 13);
    std::vector<TrainingSequence> batch = {make_seq({4, 5, 6}, 1), make_seq({7, 8, 9, 10}, 2)};
    auto l = forward<float>(b, nullptr, batch);
    std::vector<TrainingSequence> rev = {batch[1], batch[0]};
    auto lr = forward<float>(b, nullptr, rev);
    CHECK(l[0].a == lr[1].a);
    CHECK(l[1].a == lr[0].a);
}

TEST_CASE("input validation") {
    auto cfg = tiny_config();
    auto b = init_backbone<float>(cfg, 13);
    auto too_long = make_seq(std::vector<TokenId>(cfg.max_seq_len + 1, 4), 2);
    CHECK_THROWS_AS(forward<float>(b, nullptr, std::span(&too_long, 1)), InputError);
    auto bad_id = make_seq({4, static_cast<TokenId>(cfg.vocab_size)}, 1);
    CHECK_THROWS_AS(forward<float>(b, nullptr, std::span(&bad_id, 1)), InputError);
    Gradients<float> g;
    auto all_false = make_seq({4, 5, 6}, 1);
    all_false.mask.assign(3, 0);
    CHECK_THROWS_AS(
        loss_and_grad<float>(b, nullptr, std::span(&all_false, 1), ParamSelector::BankOnly, g),
        InputError);
}

TEST_CASE("masked-out target labels do not touch the loss") {
    auto cfg = tiny_config();
    auto b = init_backbone<float>(cfg, 21);
    auto bank = create_bank<float>(cfg.d_model, 3, b, 1, BankVariant::Coupled);
    auto seq = make_seq({4, 5, 6, static_cast<TokenId>(cfg.vocab_size), 8, 9, kEos}, 3);
    Gradients<float> g;
    const double base = loss_and_grad<float>(b, &bank, std::span(&seq, 1), ParamSelector::BankOnly, g);
    auto scrambled = seq;
    scrambled.targets[1] = 17;  // query position, mask false
    scrambled.targets[2] = 12;
    const double same =
        loss_and_grad<float>(b, &bank, std::span(&scrambled, 1), ParamSelector::BankOnly, g);
    CHECK(base == same);
}

TEST_CASE("selector contract: bank-only grads hold exactly l rows of width d") {
    auto cfg = tiny_config();
    auto b = init_backbone<float>(cfg, 21);
    auto bank = create_bank<float>(cfg.d_model, 3, b, 1, BankVariant::Coupled);
    auto seq = make_seq({4, 5, static_cast<TokenId>(cfg.vocab_size + 1), 8, kEos}, 2);
    Gradients<float> g;
    loss_and_grad<float>(b, &bank, std::span(&seq, 1), ParamSelector::BankOnly, g);
    CHECK(g.bank_rows.rows == 3);
    CHECK(g.bank_rows.cols == cfg.d_model);
    CHECK(g.bank_steer.size() == 0);
    CHECK_FALSE(g.adapters.has_value());
    CHECK_FALSE(g.backbone.has_value());
}

// Central finite differences on the double instantiation. The float path is
// identical code, so this checks the backward math at full precision.
namespace {

template <class GetSet>
void check_fd(Backbone<double>& b, MemoryBank<double>* bank,
              const std::vector<TrainingSequence>& batch, ParamSelector sel, GetSet&& param,
              Mat<double>& analytic, const char* what) {
    Gradients<double> g;
    loss_and_grad<double>(b, bank, batch, sel, g);
    const double h = 1e-3;
    int checked = 0;
    for (int r = 0; r < analytic.rows; ++r) {
        for (int c = 0; c < analytic.cols; c += 7) {
            double& p = param(r, c);
            const double saved = p;
            p = saved + h;
            Gradients<double> tmp;
            const double up = loss_and_grad<double>(b, bank, batch, sel, tmp);
            p = saved - h;
            const double down = loss_and_grad<double>(b, bank, batch, sel, tmp);
            p = saved;
            const double fd = (up - down) / (2 * h);
            const double an = analytic.at(r, c);
            const double rel = std::abs(fd - an) / std::max(1e-8, std::abs(fd));
            INFO(what << " row " << r << " col " << c << " fd=" << fd << " an=" << an);
            CHECK(rel < 1e-3);
            ++checked;
        }
    }
    CHECK(checked > 0);
}

}  // namespace

TEST_CASE("analytic gradients match central finite differences") {
    ModelConfig cfg = tiny_config();
    auto b = init_backbone<double>(cfg, 33);
    attach_adapters(b, 4, 77);
    // give the zero-init up matrices some mass so their grads are generic
    for (auto& layer : b.adapters->layers) {
        Rng rng(99);
        for (auto& v : layer.q.up.a) v = 0.01 * rng.normal();
        for (auto& v : layer.k.up.a) v = 0.01 * rng.normal();
    }
    auto bank = create_bank<double>(cfg.d_model, 3, b, 55, BankVariant::Decoupled);
    const TokenId m0 = bank.token_of_row(0);
    const TokenId m2 = bank.token_of_row(2);
    std::vector<TrainingSequence> batch = {
        make_seq({4, 5, 6, m0, 8, 9, kEos}, 3),
        make_seq({7, 9, m2, 10, m0, 11, kEos}, 2),
    };

    SUBCASE("address rows") {
        Gradients<double> g;
        loss_and_grad<double>(b, &bank, batch, ParamSelector::BankOnly, g);
        auto an = g.bank_rows;
        check_fd(b, &bank, batch, ParamSelector::BankOnly,
                 [&](int r, int c) -> double& { return bank.rows.at(r, c); }, an, "addr");
    }
    SUBCASE("steer rows") {
        Gradients<double> g;
        loss_and_grad<double>(b, &bank, batch, ParamSelector::BankOnly, g);
        auto an = g.bank_steer;
        check_fd(b, &bank, batch, ParamSelector::BankOnly,
                 [&](int r, int c) -> double& { return bank.steer.at(r, c); }, an, "steer");
    }
    SUBCASE("coupled rows") {
        auto coupled = create_bank<double>(cfg.d_model, 3, b, 56, BankVariant::Coupled);
        std::vector<TrainingSequence> cb = {
            make_seq({4, 5, 6, coupled.token_of_row(1), 8, 9, kEos}, 3)};
        Gradients<double> g;
        loss_and_grad<double>(b, &coupled, cb, ParamSelector::BankOnly, g);
        auto an = g.bank_rows;
        check_fd(b, &coupled, cb, ParamSelector::BankOnly,
                 [&](int r, int c) -> double& { return coupled.rows.at(r, c); }, an, "coupled");
    }
    SUBCASE("adapter matrices") {
        Gradients<double> g;
        loss_and_grad<double>(b, &bank, batch, ParamSelector::AdaptersOnly, g);
        auto an_up = g.adapters->layers[0].q.up;
        check_fd(b, &bank, batch, ParamSelector::AdaptersOnly,
                 [&](int r, int c) -> double& { return b.adapters->layers[0].q.up.at(r, c); },
                 an_up, "q.up[0]");
        auto an_down = g.adapters->layers[1].k.down;
        check_fd(b, &bank, batch, ParamSelector::AdaptersOnly,
                 [&](int r, int c) -> double& { return b.adapters->layers[1].k.down.at(r, c); },
                 an_down, "k.down[1]");
    }
    SUBCASE("backbone weights") {
        Gradients<double> g;
        loss_and_grad<double>(b, &bank, batch, ParamSelector::BankAndBackbone, g);
        auto an = g.backbone->layers[0].wv;
        check_fd(b, &bank, batch, ParamSelector::BankAndBackbone,
                 [&](int r, int c) -> double& { return b.layers[0].wv.at(r, c); }, an, "wv[0]");
        auto an_e = g.backbone->tok_embed;
        check_fd(b, &bank, batch, ParamSelector::BankAndBackbone,
                 [&](int r, int c) -> double& { return b.tok_embed.at(r, c); }, an_e, "tok_embed");
    }
}

TEST_CASE("merge_adapters") {
    auto cfg = tiny_config();
    auto b = init_backbone<float>(cfg, 41);
    attach_adapters(b, 8, 42);
    auto seq = make_seq({4, 5, 6, 7, 8}, 2);

    SUBCASE("zero up-matrix merges to the original weights") {
        auto merged = merge_adapters(b);
        CHECK_FALSE(merged.adapters.has_value());
        auto l1 = forward<float>(b, nullptr, std::span(&seq, 1));
        auto l2 = forward<float>(merged, nullptr, std::span(&seq, 1));
        for (size_t i = 0; i < l1[0].a.size(); ++i) {
            CHECK(std::abs(l1[0].a[i] - l2[0].a[i]) < 1e-6);
        }
    }
    SUBCASE("random adapter: logits agree pre/post merge") {
        Rng rng(4242);
        for (auto& layer : b.adapters->layers) {
            for (auto& v : layer.q.up.a) v = float(0.05 * rng.normal());
            for (auto& v : layer.k.up.a) v = float(0.05 * rng.normal());
        }
        auto merged = merge_adapters(b);
        auto l1 = forward<float>(b, nullptr, std::span(&seq, 1));
        auto l2 = forward<float>(merged, nullptr, std::span(&seq, 1));
        double max_diff = 0.0;
        for (size_t i = 0; i < l1[0].a.size(); ++i) {
            max_diff = std::max(max_diff, std::abs(double(l1[0].a[i]) - double(l2[0].a[i])));
        }
        CHECK(max_diff < 1e-4);
        // merging twice is a no-op
        auto merged2 = merge_adapters(merged);
        auto l3 = forward<float>(merged2, nullptr, std::span(&seq, 1));
        CHECK(l2[0].a == l3[0].a);
    }
}

TEST_CASE("generate") {
    auto cfg = tiny_config();
    auto b = init_backbone<float>(cfg, 51);
    auto bank = create_bank<float>(cfg.d_model, 2, b, 1, BankVariant::Coupled);

    SUBCASE("max_len 1 stops with budget exhaustion") {
        auto trace = generate<float>(b, &bank, {4, 5}, {.max_len = 1});
        CHECK(trace.tokens.size() == 1);
        CHECK(trace.stop == StopReason::MaxLen);
    }
    SUBCASE("identical banks give identical traces") {
        auto bank2 = bank;
        auto t1 = generate<float>(b, &bank, {4, 5, 6}, {.max_len = 8});
        auto t2 = generate<float>(b, &bank2, {4, 5, 6}, {.max_len = 8});
        CHECK(t1.tokens == t2.tokens);
        CHECK(t1.events.size() == t2.events.size());
    }
    SUBCASE("empty query is an input error") {
        CHECK_THROWS_AS(generate<float>(b, &bank, {}, {.max_len = 4}), InputError);
    }
    SUBCASE("memory events record exactly the emitted out-of-vocab ids") {
        auto trace = generate<float>(b, &bank, {4, 5, 6}, {.max_len = 12});
        size_t ev = 0;
        for (size_t i = 0; i < trace.tokens.size(); ++i) {
            if (trace.tokens[i] >= cfg.vocab_size) {
                REQUIRE(ev < trace.events.size());
                CHECK(trace.events[ev].position == static_cast<int>(i));
                CHECK(trace.events[ev].token == trace.tokens[i]);
                ++ev;
            }
        }
        CHECK(ev == trace.events.size());
    }
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    auto cfg = tiny_config();
    auto b = init_backbone<float>(cfg, 61);
    attach_adapters(b, 4, 62);
    b.frozen = true;
    const char* path = "test_ckpt.bin";
    write_checkpoint(b, path);
    auto r = read_checkpoint(path);
    CHECK(r.cfg == b.cfg);
    CHECK(r.frozen == b.frozen);
    CHECK(full_checksum(r) == full_checksum(b));
    CHECK(backbone_checksum(r) == backbone_checksum(b));
    std::remove(path);
}
