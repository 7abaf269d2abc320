#include <random>

#include "doctest.h"
#include "hfl/errors.hpp"
#include "hfl/federation.hpp"
#include "test_util.hpp"

using namespace hfl;

namespace {

// Small, fast fixture shared by the round-level tests.
FederationState small_state(FederationConfig cfg, std::uint64_t data_seed = 11) {
    const auto ds = synth_flows(4, 60, 32, 12, 0.9, data_seed);
    ModelSpec spec;
    spec.d_model = 16;
    cfg.rank_policy.r_min = 2;
    cfg.rank_policy.r_max = 8;
    return setup_federation(cfg, spec, split_dataset(ds, {}, data_seed));
}

// Two well separated classes: tokens from disjoint halves of the vocabulary.
ClientShard separable_shard(std::size_t n, std::mt19937_64& rng) {
    ClientShard s;
    s.client_id = 0;
    std::uniform_int_distribution<int> lo(0, 7), hi(8, 15);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = static_cast<int>(i % 2);
        FlowRecord r{{}, y};
        for (int t = 0; t < 6; ++t) r.tokens.push_back(y == 0 ? lo(rng) : hi(rng));
        s.records.push_back(std::move(r));
    }
    s.label_histogram = label_histogram(s.records, 2);
    return s;
}

PartitionedModel small_model(int vocab, int classes, std::uint64_t seed) {
    ModelSpec spec;
    spec.d_model = 12;
    return transform_model(spec, vocab, classes, seed);
}

}  // namespace

TEST_CASE("sample_clients examples") {
    CHECK(sample_clients(10, 10, 3, 1) == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
    const auto a = sample_clients(10, 3, 5, 9);
    CHECK(a == sample_clients(10, 3, 5, 9));
    CHECK(a.size() == 3);
    CHECK(std::is_sorted(a.begin(), a.end()));
    CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
    CHECK_THROWS_AS(sample_clients(10, 11, 0, 1), ConfigError);
    CHECK_THROWS_AS(sample_clients(10, 0, 0, 1), ConfigError);
}

TEST_CASE("sample_clients is uniform over 1000 rounds") {
    std::vector<int> hits(10, 0);
    for (int round = 0; round < 1000; ++round)
        for (int id : sample_clients(10, 3, round, 2024)) ++hits[static_cast<std::size_t>(id)];
    for (int h : hits) {
        CHECK(h / 1000.0 >= 0.25);
        CHECK(h / 1000.0 <= 0.35);
    }
}

TEST_CASE("client_update with zero epochs is a no-op") {
    std::mt19937_64 rng(1);
    const auto model = small_model(16, 2, 1);
    FederationConfig cfg;
    cfg.local_epochs = 0;
    const auto u = client_update(model, separable_shard(20, rng), 4, cfg, 0);
    CHECK(u.sample_count == 20);
    CHECK(u.adapters.rank == 4);
    CHECK(u.adapters.adapters.size() == 2 * model.classifier.size());
    for (const auto& [t, ad] : u.adapters.adapters) CHECK(max_abs(ad.delta()) == 0.0);
    CHECK(max_abs(u.head_delta.weight) == 0.0);
    CHECK(max_abs(u.head_delta.bias) == 0.0);
}

TEST_CASE("client_update never touches the broadcast weights") {
    std::mt19937_64 rng(2);
    const auto model = small_model(16, 2, 2);
    const auto snapshot = model;
    FederationConfig cfg;
    cfg.local_epochs = 3;
    cfg.learning_rate = 1e-2;
    const auto u = client_update(model, separable_shard(40, rng), 4, cfg, 1);
    CHECK(model.embedding.bit_equal(snapshot.embedding));
    CHECK(model.extractor == snapshot.extractor);
    CHECK(model.classifier == snapshot.classifier);
    CHECK(model.head == snapshot.head);
    CHECK(max_abs(u.head_delta.weight) > 0.0);
    for (const auto& [t, ad] : u.adapters.adapters) CHECK(max_abs(ad.b) > 0.0);
    CHECK_THROWS_AS(client_update(model, separable_shard(4, rng), 13, cfg, 0), RankError);
}

TEST_CASE("local loss decreases on a separable shard") {
    std::mt19937_64 rng(3);
    const auto model = small_model(16, 2, 3);
    FederationConfig cfg;
    cfg.local_epochs = 5;
    cfg.learning_rate = 5e-3;
    cfg.batch_size = 8;
    const auto u = client_update(model, separable_shard(64, rng), 4, cfg, 0);
    REQUIRE(u.epoch_losses.size() == 5);
    CHECK(u.epoch_losses.back() < u.epoch_losses.front());
}

TEST_CASE("client_update is deterministic per (seed, client, round)") {
    std::mt19937_64 rng(4);
    const auto model = small_model(16, 2, 4);
    const auto shard = separable_shard(30, rng);
    FederationConfig cfg;
    const auto a = client_update(model, shard, 2, cfg, 3);
    const auto b = client_update(model, shard, 2, cfg, 3);
    const auto c = client_update(model, shard, 2, cfg, 4);
    for (const auto& [t, ad] : a.adapters.adapters) {
        CHECK(ad.a.bit_equal(b.adapters.adapters.at(t).a));
        CHECK(ad.b.bit_equal(b.adapters.adapters.at(t).b));
        CHECK_FALSE(ad.a.bit_equal(c.adapters.adapters.at(t).a));
    }
}

TEST_CASE("a round of zero updates leaves metrics unchanged") {
    FederationConfig cfg;
    cfg.rounds = 2;
    cfg.local_epochs = 0;
    auto state = small_state(cfg);
    const auto before = evaluate(state.global, state.test);
    run_federation(state);
    REQUIRE(state.history.size() == 2);
    for (const auto& m : state.history) {
        CHECK(m.test.confusion.counts == before.confusion.counts);
        for (const auto& [t, f] : m.delta_fro) CHECK(f == 0.0);
    }
}

TEST_CASE("extractor stays bit-identical across a run") {
    FederationConfig cfg;
    cfg.rounds = 3;
    cfg.learning_rate = 1e-2;
    auto state = small_state(cfg);
    const auto initial = state.global;
    run_federation(state);
    CHECK(state.global.embedding.bit_equal(initial.embedding));
    CHECK(state.global.extractor == initial.extractor);
    CHECK(state.global.classifier == initial.classifier);
    CHECK_FALSE(state.global.merged.empty());
    CHECK_FALSE(state.global.head == initial.head);
}

TEST_CASE("stacking and reference strategies agree") {
    FederationConfig cfg;
    cfg.rounds = 3;
    cfg.learning_rate = 1e-2;
    cfg.strategy = Strategy::Stacking;
    auto stack = small_state(cfg);
    cfg.strategy = Strategy::Reference;
    auto ref = small_state(cfg);
    run_federation(stack);
    run_federation(ref);
    for (const auto& [name, m] : stack.global.merged) CHECK(max_abs_diff(m, ref.global.merged.at(name)) <= 1e-9);
    for (std::size_t r = 0; r < stack.history.size(); ++r)
        CHECK(stack.history[r].test.confusion.counts == ref.history[r].test.confusion.counts);
}

TEST_CASE("worker count does not change results") {
    FederationConfig cfg;
    cfg.rounds = 2;
    cfg.learning_rate = 1e-2;
    cfg.workers = 1;
    auto one = small_state(cfg);
    cfg.workers = 4;
    auto four = small_state(cfg);
    run_federation(one);
    run_federation(four);
    REQUIRE(one.global.merged.size() == four.global.merged.size());
    for (const auto& [name, m] : one.global.merged) CHECK(m.bit_equal(four.global.merged.at(name)));
    CHECK(one.global.head == four.global.head);
}

TEST_CASE("setup_federation rejects infeasible configurations") {
    FederationConfig cfg;
    cfg.clients_per_round = 12;
    try {
        small_state(cfg);
        FAIL("expected a config error");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("per_round") != std::string::npos);
    }
    cfg = {};
    cfg.strategy = Strategy::Naive;
    CHECK_THROWS_AS(small_state(cfg), ConfigError);

    const auto ds = synth_flows(4, 60, 32, 12, 0.9, 1);
    ModelSpec spec;
    spec.d_model = 16;
    FederationConfig big;  // rmax 64 > d_model 16
    CHECK_THROWS_AS(setup_federation(big, spec, split_dataset(ds, {}, 1)), ConfigError);
}

TEST_CASE("metrics from a binary confusion matrix") {
    ConfusionMatrix cm(2);
    cm.counts = {{50, 10}, {5, 35}};
    const auto m = metrics_from_confusion(cm);
    CHECK(m.acc == doctest::Approx(0.85));
    CHECK(m.per_class_pr[0] == doctest::Approx(50.0 / 55.0));
    CHECK(m.per_class_rc[0] == doctest::Approx(50.0 / 60.0));
    CHECK(m.per_class_pr[1] == doctest::Approx(35.0 / 45.0));
    CHECK(m.per_class_rc[1] == doctest::Approx(35.0 / 40.0));
    // Per-class F1 = 2TP / (2TP + FP + FN): 100/115 and 70/85.
    const double oracle = 0.5 * (100.0 / 115.0 + 70.0 / 85.0);
    CHECK(m.macro_f1 == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(m.macro_f1 == doctest::Approx(0.846547).epsilon(1e-6));
}

TEST_CASE("metrics edge cases") {
    const std::vector<int> truth{0, 1, 2, 0};
    const auto perfect = evaluate_predictions(truth, truth, 3);
    CHECK(perfect.acc == 1.0);
    CHECK(perfect.macro_pr == 1.0);
    CHECK(perfect.macro_rc == 1.0);
    CHECK(perfect.macro_f1 == 1.0);

    // Class 2 never appears and is never predicted: excluded from the macro average.
    const std::vector<int> t2{0, 0, 1, 1}, p2{0, 1, 1, 1};
    const auto m = evaluate_predictions(t2, p2, 3);
    CHECK(m.classes_present == std::vector<int>{0, 1});
    CHECK(m.macro_rc == doctest::Approx(0.75));
    CHECK(m.macro_pr == doctest::Approx((1.0 + 2.0 / 3.0) / 2));

    // Predicting only class 0: class 1 gets PR = 0 (0/0), F1 = 0.
    const std::vector<int> p3{0, 0, 0, 0};
    const auto z = evaluate_predictions(t2, p3, 2);
    CHECK(z.per_class_pr[1] == 0.0);
    CHECK(z.per_class_f1[1] == 0.0);

    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<int> cls(0, 3);
        std::vector<int> t(50), p(50);
        for (auto& v : t) v = cls(rng);
        for (auto& v : p) v = cls(rng);
        const auto r = evaluate_predictions(t, p, 4);
        std::size_t row_total = 0;
        for (std::size_t c = 0; c < 4; ++c) {
            std::size_t row = 0;
            for (auto v : r.confusion.counts[c]) row += v;
            CHECK(row == static_cast<std::size_t>(std::count(t.begin(), t.end(), static_cast<int>(c))));
            row_total += row;
        }
        CHECK(row_total == 50);
    }
}

TEST_CASE("check_convergence") {
    CHECK_FALSE(check_convergence({0.5, 0.5}, 3, 0.001, 10));
    CHECK(check_convergence({0.5, 0.5, 0.5, 0.5}, 3, 0.001, 10));
    CHECK_FALSE(check_convergence({0.1, 0.2, 0.3, 0.4, 0.5}, 3, 0.001, 10));
    CHECK(check_convergence({0.1, 0.2, 0.3}, 3, 0.001, 3));
    CHECK_FALSE(check_convergence({0.5, 0.5, 0.5, 0.5}, 0, 0.001, 10));
    CHECK_THROWS_AS(check_convergence({}, 3, 0.001, 10), InputError);
}
