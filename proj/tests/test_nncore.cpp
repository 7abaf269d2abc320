#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "hfl/errors.hpp"
#include "hfl/nncore.hpp"
#include "test_util.hpp"

using namespace hfl;

namespace {

// Small fully trainable network: embedding, two blocks, head, and a LoRA pair
// on every block weight.
ParamSet toy_params(const ArchSpec& arch, std::mt19937_64& rng, bool with_lora = true) {
    const auto d = static_cast<std::size_t>(arch.d_model);
    ParamSet p;
    p.add(names::kEmbed, test::random_matrix(static_cast<std::size_t>(arch.vocab_size), d, rng));
    for (std::size_t i = 0; i < static_cast<std::size_t>(arch.num_blocks); ++i) {
        for (const char* w : {"w1", "w2"}) {
            const auto name = names::block(i, w);
            p.add(name, test::random_matrix(d, d, rng, 0.4));
            if (with_lora) {
                p.add(name + names::kLoraB, test::random_matrix(d, 2, rng, 0.2));
                p.add(name + names::kLoraA, test::random_matrix(2, d, rng, 0.2));
            }
        }
        p.add(names::block(i, "b1"), test::random_matrix(1, d, rng, 0.1));
        p.add(names::block(i, "b2"), test::random_matrix(1, d, rng, 0.1));
    }
    p.add(names::kHeadW, test::random_matrix(d, static_cast<std::size_t>(arch.num_classes), rng, 0.5));
    p.add(names::kHeadB, test::random_matrix(1, static_cast<std::size_t>(arch.num_classes), rng, 0.1));
    return p;
}

std::vector<std::vector<int>> random_tokens(std::size_t n, int vocab, std::mt19937_64& rng) {
    std::vector<std::vector<int>> out(n);
    std::uniform_int_distribution<int> tok(0, vocab - 1), len(1, 6);
    for (auto& seq : out) {
        seq.resize(static_cast<std::size_t>(len(rng)));
        for (auto& t : seq) t = tok(rng);
    }
    return out;
}

}  // namespace

TEST_CASE("zero head gives zero logits of the right shape") {
    std::mt19937_64 rng(1);
    const ArchSpec arch{10, 5, 2, 6};
    auto p = toy_params(arch, rng);
    p.mutable_value(names::kHeadW) = Matrix(5, 6);
    p.mutable_value(names::kHeadB) = Matrix(1, 6);
    const auto tokens = random_tokens(4, arch.vocab_size, rng);
    const auto logits = forward(p, arch, tokens);
    CHECK(logits.rows() == 4);
    CHECK(logits.cols() == 6);
    CHECK(max_abs(logits) == 0.0);
    const std::vector<int> labels{0, 3, 5, 1};
    CHECK(cross_entropy(logits, labels) == doctest::Approx(std::log(6.0)).epsilon(1e-12));
}

TEST_CASE("forward is row-wise: permuting the batch permutes the logits") {
    std::mt19937_64 rng(2);
    const ArchSpec arch{12, 6, 2, 3};
    const auto p = toy_params(arch, rng);
    auto tokens = random_tokens(7, arch.vocab_size, rng);
    const auto base = forward(p, arch, tokens);
    std::vector<std::size_t> perm(tokens.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<int>> shuffled;
    for (auto i : perm) shuffled.push_back(tokens[i]);
    const auto out = forward(p, arch, shuffled);
    for (std::size_t r = 0; r < perm.size(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) CHECK(out(r, c) == base(perm[r], c));
}

TEST_CASE("forward input errors") {
    std::mt19937_64 rng(3);
    const ArchSpec arch{5, 3, 1, 2};
    const auto p = toy_params(arch, rng);
    const std::vector<std::vector<int>> bad_token{{1, 5}};
    CHECK_THROWS_AS(forward(p, arch, bad_token), InputError);
    const std::vector<std::vector<int>> empty_seq{{}};
    CHECK_THROWS_AS(forward(p, arch, empty_seq), InputError);
}

TEST_CASE("analytic gradients match central finite differences") {
    std::mt19937_64 rng(4);
    const ArchSpec arch{9, 4, 2, 3};
    auto p = toy_params(arch, rng);
    const auto tokens = random_tokens(5, arch.vocab_size, rng);
    const std::vector<int> labels{0, 2, 1, 1, 0};
    const auto analytic = loss_and_grads(p, arch, tokens, labels);
    CHECK(analytic.grads.size() == p.size());

    const double eps = 1e-5;
    for (const auto& [name, g] : analytic.grads) {
        auto& w = p.mutable_value(name);
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double keep = w.values()[k];
            w.values()[k] = keep + eps;
            const double up = cross_entropy(forward(p, arch, tokens), labels);
            w.values()[k] = keep - eps;
            const double down = cross_entropy(forward(p, arch, tokens), labels);
            w.values()[k] = keep;
            const double numeric = (up - down) / (2.0 * eps);
            const double exact = g.values()[k];
            const double rel = std::abs(numeric - exact) / std::max(1e-6, std::abs(numeric) + std::abs(exact));
            INFO(name << "[" << k << "] numeric " << numeric << " analytic " << exact);
            CHECK(rel < 1e-4);
        }
    }
}

TEST_CASE("gradients only cover trainable parameters") {
    std::mt19937_64 rng(5);
    const ArchSpec arch{9, 4, 3, 3};
    auto p = toy_params(arch, rng);
    for (const auto& name : p.trainable_names()) p.set_frozen(name, true);
    for (const char* n : {".lora_b", ".lora_a"}) p.set_frozen(names::block(2, "w1") + n, false);
    p.set_frozen(names::kHeadW, false);
    const auto tokens = random_tokens(3, arch.vocab_size, rng);
    const std::vector<int> labels{0, 1, 2};
    const auto out = loss_and_grads(p, arch, tokens, labels);
    CHECK(out.grads.size() == 3);
    CHECK(out.grads.count(names::kHeadW) == 1);
    CHECK(out.grads.count(names::block(2, "w1") + names::kLoraB) == 1);

    for (const auto& name : p.trainable_names()) p.set_frozen(name, true);
    CHECK_THROWS_AS(loss_and_grads(p, arch, tokens, labels), NoTrainableParametersError);
}

TEST_CASE("duplicating a batch leaves the mean-loss gradient unchanged") {
    std::mt19937_64 rng(6);
    const ArchSpec arch{9, 4, 2, 3};
    const auto p = toy_params(arch, rng);
    const auto tokens = random_tokens(4, arch.vocab_size, rng);
    const std::vector<int> labels{0, 1, 2, 1};
    auto twice = tokens;
    twice.insert(twice.end(), tokens.begin(), tokens.end());
    auto labels2 = labels;
    labels2.insert(labels2.end(), labels.begin(), labels.end());
    const auto a = loss_and_grads(p, arch, tokens, labels);
    const auto b = loss_and_grads(p, arch, twice, labels2);
    CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-12));
    for (const auto& [name, g] : a.grads) CHECK(max_abs_diff(g, b.grads.at(name)) <= 1e-12);
}

TEST_CASE("gradients from cached hidden states match the full path") {
    std::mt19937_64 rng(7);
    const ArchSpec arch{9, 4, 3, 3};
    auto p = toy_params(arch, rng);
    for (const auto& name : p.trainable_names())
        if (!name.starts_with("blocks.2") && !name.starts_with("head")) p.set_frozen(name, true);
    const auto tokens = random_tokens(6, arch.vocab_size, rng);
    const std::vector<int> labels{0, 1, 2, 0, 1, 2};
    const auto full = loss_and_grads(p, arch, tokens, labels);
    const auto hidden = run_blocks(p, embed_pool(p, arch, tokens), 0, 2);
    const auto cached = loss_and_grads_from_hidden(p, arch, hidden, 2, labels);
    CHECK(full.loss == cached.loss);
    REQUIRE(full.grads.size() == cached.grads.size());
    for (const auto& [name, g] : full.grads) CHECK(g.bit_equal(cached.grads.at(name)));

    p.set_frozen(names::block(0, "b1"), false);
    CHECK_THROWS_AS(loss_and_grads_from_hidden(p, arch, hidden, 2, labels), InputError);
}

TEST_CASE("non-finite activations raise NumericError") {
    std::mt19937_64 rng(8);
    const ArchSpec arch{5, 3, 1, 2};
    auto p = toy_params(arch, rng);
    p.mutable_value(names::block(0, "b2"))(0, 1) = std::numeric_limits<double>::infinity();
    const std::vector<std::vector<int>> tokens{{1, 2}};
    CHECK_THROWS_AS(forward(p, arch, tokens), NumericError);
}

TEST_CASE("Adam step") {
    ParamSet p;
    p.add("w", Matrix{{1.0}});
    p.add("frozen", Matrix{{2.0}}, true);
    OptimizerState state(AdamConfig{0.1, 0.9, 0.999, 1e-8});

    opt_step(state, p, {{"w", Matrix{{1.0}}}});
    CHECK(p.at("w")(0, 0) == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(p.at("frozen")(0, 0) == 2.0);

    ParamSet q;
    q.add("w", Matrix{{0.5, -0.25}});
    OptimizerState s2;
    opt_step(s2, q, {{"w", Matrix(1, 2)}});
    CHECK(q.at("w") == Matrix{{0.5, -0.25}});

    CHECK_THROWS_AS(opt_step(state, p, {{"w", Matrix{{1.0}}}, {"frozen", Matrix{{1.0}}}}), AlignmentError);
    CHECK_THROWS_AS(opt_step(state, p, {{"w", Matrix{{1.0}}}, {"ghost", Matrix{{1.0}}}}), AlignmentError);
    CHECK_THROWS_AS(opt_step(state, p, {{"w", Matrix(1, 2)}}), AlignmentError);
    CHECK_THROWS_AS(opt_step(state, p, {}), AlignmentError);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    std::mt19937_64 rng(9);
    const ArchSpec arch{7, 3, 2, 4};
    auto p = toy_params(arch, rng);
    p.set_frozen(names::kEmbed, true);
    p.mutable_value(names::kHeadB)(0, 0) = -0.0;
    p.mutable_value(names::kHeadB)(0, 1) = std::numeric_limits<double>::denorm_min();

    const auto path = test::temp_dir("ckpt") / "p.ckpt";
    save_checkpoint(path, to_checkpoint(p, {{"note", "x"}}));
    const auto ck = load_checkpoint(path);
    CHECK(ck.meta.at("note") == "x");
    const auto back = params_from_checkpoint(ck);
    REQUIRE(back.size() == p.size());
    for (const auto& [name, param] : p) {
        CHECK(back.at(name).bit_equal(param.value));
        CHECK(back.is_frozen(name) == param.frozen);
    }
    CHECK(encode_checkpoint(ck) == encode_checkpoint(to_checkpoint(p, {{"note", "x"}})));

    auto bytes = encode_checkpoint(ck);
    bytes[0] = 'X';
    CHECK_THROWS(decode_checkpoint(bytes));
    bytes = encode_checkpoint(ck);
    bytes.resize(bytes.size() - 3);
    CHECK_THROWS(decode_checkpoint(bytes));
}
