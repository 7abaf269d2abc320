#include <algorithm>
#include <numeric>
#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "hfl/errors.hpp"
#include "hfl/federation.hpp"
#include "hfl/flowdata.hpp"
#include "test_util.hpp"

using namespace hfl;

namespace {

std::filesystem::path write_file(const std::string& name, const std::string& body) {
    const auto path = test::temp_dir("flowdata") / name;
    std::ofstream(path) << body;
    return path;
}

ClientShard shard_from_histogram(std::vector<std::size_t> hist) {
    ClientShard s;
    for (std::size_t c = 0; c < hist.size(); ++c)
        for (std::size_t i = 0; i < hist[c]; ++i) s.records.push_back({{0}, static_cast<int>(c)});
    s.label_histogram = std::move(hist);
    return s;
}

std::vector<FlowRecord> sorted_records(std::vector<FlowRecord> v) {
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
        return std::tie(a.label, a.tokens) < std::tie(b.label, b.tokens);
    });
    return v;
}

}  // namespace

TEST_CASE("ingest_dataset maps labels in first-seen order") {
    const auto path = write_file("ok.jsonl",
                                 "{\"tokens\": [1, 2, 3], \"label\": \"benign\"}\n"
                                 "{\"tokens\": [4, 5], \"label\": \"botnet\"}\n"
                                 "{\"tokens\": [0], \"label\": \"benign\"}\n");
    const auto ds = ingest_dataset(path);
    CHECK(ds.size() == 3);
    CHECK(ds.num_classes == 2);
    CHECK(ds.vocab_size == 6);
    CHECK(ds.label_names == std::vector<std::string>{"benign", "botnet"});
    CHECK(ds.records[1].label == 1);
    CHECK(ds.records[2].label == 0);
    CHECK_NOTHROW(ds.validate());
}

TEST_CASE("ingest_dataset accepts integer labels and custom field names") {
    const auto path = write_file("ints.jsonl",
                                 "{\"seq\": [3], \"y\": 7}\n{\"seq\": [1, 1], \"y\": 2}\n");
    IngestSchema schema;
    schema.tokens_field = "seq";
    schema.label_field = "y";
    schema.vocab_size = 10;
    const auto ds = ingest_dataset(path, schema);
    CHECK(ds.vocab_size == 10);
    CHECK(ds.label_names == std::vector<std::string>{"7", "2"});
}

TEST_CASE("ingest_dataset errors") {
    CHECK_THROWS_AS(ingest_dataset(write_file("empty.jsonl", "")), EmptyDatasetError);

    const auto neg = write_file("neg.jsonl",
                                "{\"tokens\": [1], \"label\": \"a\"}\n{\"tokens\": [-3], \"label\": \"b\"}\n");
    try {
        ingest_dataset(neg);
        FAIL("expected a validation error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }

    const auto bad = write_file("bad.jsonl", "{\"tokens\": [1], \"label\": \"a\"}\n{not json\n");
    try {
        ingest_dataset(bad);
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line() == 2);
    }

    IngestSchema small;
    small.vocab_size = 4;
    const auto big = write_file("big.jsonl", "{\"tokens\": [1, 4], \"label\": \"a\"}\n");
    CHECK_THROWS_AS(ingest_dataset(big, small), ValidationError);
    CHECK_THROWS_AS(ingest_dataset(write_file("missing.jsonl", "{\"label\": \"a\"}\n")), ParseError);
}

TEST_CASE("synth_flows counts, determinism and configuration errors") {
    const auto a = synth_flows(6, 200, 64, 32, 0.9, 7);
    CHECK(a.size() == 1200);
    for (auto c : a.class_counts()) CHECK(c == 200);
    CHECK_NOTHROW(a.validate());
    CHECK(a == synth_flows(6, 200, 64, 32, 0.9, 7));
    CHECK_FALSE(a == synth_flows(6, 200, 64, 32, 0.9, 8));
    CHECK_THROWS_AS(synth_flows(6, 10, 5, 8, 0.9, 1), ConfigError);
    CHECK_THROWS_AS(synth_flows(2, 10, 8, 8, 0.0, 1), ConfigError);
}

TEST_CASE("synth_flows at full separation is centrally learnable") {
    // Separability oracle: train the head and adapters on the pooled data
    // with a single client and plenty of epochs.
    const auto ds = synth_flows(6, 200, 64, 32, 1.0, 3);
    const auto splits = split_dataset(ds, {}, 3);
    ModelSpec spec;
    auto model = transform_model(spec, ds.vocab_size, ds.num_classes, 3);
    FederationConfig cfg;
    cfg.local_epochs = 20;
    cfg.learning_rate = 1e-2;
    ClientShard all;
    all.records = splits.train.records;
    const auto update = client_update(model, all, 8, cfg, 0);
    for (const auto& [target, ad] : update.adapters.adapters) model.merged[target] = ad.delta();
    model.head.weight += update.head_delta.weight;
    model.head.bias += update.head_delta.bias;
    CHECK(evaluate(model, splits.test).macro_f1 >= 0.99);
}

TEST_CASE("split_dataset sizes follow the rounding rule") {
    const auto ds1000 = synth_flows(4, 250, 16, 4, 0.5, 1);
    auto s = split_dataset(ds1000, {0.8, 0.1, 0.1}, 1);
    CHECK(s.train.size() == 800);
    CHECK(s.val.size() == 100);
    CHECK(s.test.size() == 100);

    auto ds1001 = ds1000;
    ds1001.records.push_back(ds1000.records.front());
    s = split_dataset(ds1001, {0.8, 0.1, 0.1}, 1);
    CHECK(s.train.size() == 801);
    CHECK(s.val.size() == 100);
    CHECK(s.test.size() == 100);
}

TEST_CASE("split_dataset partitions its input and stratifies") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto ds = synth_flows(3, 40 + static_cast<int>(seed) * 7, 12, 3, 0.6, seed);
        const auto s = split_dataset(ds, {0.7, 0.15, 0.15}, seed);
        std::vector<FlowRecord> joined = s.train.records;
        joined.insert(joined.end(), s.val.records.begin(), s.val.records.end());
        joined.insert(joined.end(), s.test.records.begin(), s.test.records.end());
        CHECK(sorted_records(joined) == sorted_records(ds.records));
        for (auto c : s.val.class_counts()) CHECK(c >= 1);
    }
}

TEST_CASE("split_dataset errors") {
    auto ds = synth_flows(3, 10, 12, 3, 0.6, 1);
    std::erase_if(ds.records, [n = 0](const FlowRecord& r) mutable { return r.label == 2 && n++ < 8; });
    CHECK_THROWS_AS(split_dataset(ds, {}, 1), StratificationError);
    CHECK_THROWS_AS(split_dataset(synth_flows(2, 10, 4, 2, 0.5, 1), {0.5, 0.5, 0.1}, 1), ConfigError);
    CHECK_THROWS_AS(split_dataset(synth_flows(2, 4, 4, 2, 0.5, 1), {}, 1), ConfigError);
}

TEST_CASE("dirichlet_partition degenerate and conservation cases") {
    const auto train = synth_flows(6, 200, 64, 8, 0.9, 2);
    const auto one = dirichlet_partition(train, 1, 0.3, 5);
    REQUIRE(one.size() == 1);
    CHECK(one[0].size() == train.size());

    const auto ten = dirichlet_partition(train, 10, 0.2, 5);
    std::size_t total = 0;
    for (const auto& s : ten) {
        total += s.size();
        CHECK(s.size() >= 1);
        CHECK(s.label_histogram == label_histogram(s.records, train.num_classes));
    }
    CHECK(total == 1200);

    const auto again = dirichlet_partition(train, 10, 0.2, 5);
    for (std::size_t k = 0; k < ten.size(); ++k) CHECK(ten[k].record_indices == again[k].record_indices);

    CHECK_THROWS_AS(dirichlet_partition(synth_flows(2, 2, 4, 2, 0.5, 1), 5, 0.2, 1), PartitionError);
}

TEST_CASE("dirichlet_partition conserves records for random K, sigma, seed") {
    std::mt19937_64 rng(99);
    const auto train = synth_flows(5, 30, 20, 4, 0.7, 4);
    for (int trial = 0; trial < 30; ++trial) {
        const int k = std::uniform_int_distribution<int>(1, 20)(rng);
        const double sigma = std::exp(std::uniform_real_distribution<double>(std::log(0.01), std::log(10.0))(rng));
        const auto shards = dirichlet_partition(train, k, sigma, rng());
        std::vector<std::size_t> seen;
        for (const auto& s : shards) {
            CHECK(s.size() >= 1);
            seen.insert(seen.end(), s.record_indices.begin(), s.record_indices.end());
        }
        std::sort(seen.begin(), seen.end());
        std::vector<std::size_t> expect(train.size());
        std::iota(expect.begin(), expect.end(), std::size_t{0});
        CHECK(seen == expect);
    }
}

TEST_CASE("smaller sigma gives more label skew") {
    const auto train = synth_flows(6, 200, 64, 4, 0.9, 2);
    auto mean_skew = [&](double sigma) {
        double acc = 0.0;
        for (std::uint64_t seed = 0; seed < 20; ++seed) acc += label_skew(dirichlet_partition(train, 10, sigma, seed));
        return acc / 20.0;
    };
    const double tight = mean_skew(0.05), mid = mean_skew(0.2), loose = mean_skew(0.5);
    CHECK(tight > loose);
    CHECK(tight > mid);
    CHECK(mid > loose);
}

TEST_CASE("label_entropy") {
    CHECK(label_entropy(shard_from_histogram({5, 5, 5, 5})) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(label_entropy(shard_from_histogram({0, 9, 0})) == 0.0);
    CHECK(label_entropy(shard_from_histogram({2, 1, 1})) == doctest::Approx(1.5).epsilon(1e-15));
    CHECK_THROWS_AS(label_entropy(shard_from_histogram({0, 0})), DomainError);

    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::size_t> hist(6);
        for (auto& h : hist) h = std::uniform_int_distribution<std::size_t>(0, 20)(rng);
        hist[0] += 1;
        const double h = label_entropy(shard_from_histogram(hist));
        CHECK(h >= 0.0);
        CHECK(h <= std::log2(6.0) + 1e-12);
    }
}

TEST_CASE("partition manifest round-trips") {
    const auto train = synth_flows(3, 20, 9, 3, 0.8, 1);
    const auto shards = dirichlet_partition(train, 4, 0.5, 1);
    const auto path = test::temp_dir("manifest") / "partition.jsonl";
    write_partition_manifest(path, shards);
    const auto back = read_partition_manifest(path);
    REQUIRE(back.size() == shards.size());
    for (std::size_t k = 0; k < shards.size(); ++k) CHECK(back[k] == shards[k].record_indices);
}
