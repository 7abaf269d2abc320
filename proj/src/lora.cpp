#include "hfl/lora.hpp"

#include <algorithm>
#include <random>

#include "hfl/errors.hpp"
#include "hfl/kernels.hpp"
#include "hfl/rng.hpp"

namespace hfl {

Matrix LoraAdapter::delta() const { return kernels::matmul(b, a); }

void AdapterSet::validate() const {
    for (const auto& [target, ad] : adapters) {
        if (ad.target != target) throw ShapeError("adapter keyed as " + target + " targets " + ad.target);
        if (ad.b.cols() != ad.a.rows())
            throw ShapeError("adapter " + target + ": B columns != A rows");
        if (ad.rank() != rank)
            throw RankError("adapter " + target + " has rank " + std::to_string(ad.rank()) +
                            ", set rank is " + std::to_string(rank));
    }
}

AdapterSet init_adapter_set(std::span<const AdaptPoint> points, std::size_t rank, std::uint64_t seed,
                            int client_id) {
    if (rank < 1) throw RankError("LoRA rank must be >= 1");
    for (const auto& p : points)
        if (rank > std::min(p.rows, p.cols))
            throw RankError("rank " + std::to_string(rank) + " exceeds min dimension " +
                            std::to_string(std::min(p.rows, p.cols)) + " of " + p.name);

    Rng rng(derive_seed(seed, {stream::kAdapter}));
    std::normal_distribution<double> dist(0.0, kLoraInitStd);
    AdapterSet set;
    set.client_id = client_id;
    set.rank = rank;
    for (const auto& p : points) {
        LoraAdapter ad{p.name, Matrix(p.rows, rank), Matrix(rank, p.cols)};
        for (auto& v : ad.a.values()) v = dist(rng);
        set.adapters.emplace(p.name, std::move(ad));
    }
    return set;
}

Matrix apply_adapter(const Matrix& weight, const LoraAdapter& adapter) {
    if (adapter.b.rows() != weight.rows() || adapter.a.cols() != weight.cols() ||
        adapter.b.cols() != adapter.a.rows())
        throw ShapeError("adapter for " + adapter.target + " does not fit a " +
                         std::to_string(weight.rows()) + "x" + std::to_string(weight.cols()) + " weight");
    return weight + adapter.delta();
}

Matrix merge_delta(const Matrix& weight, const Matrix& delta) {
    if (!weight.same_shape(delta)) throw ShapeError("merge_delta: shape mismatch");
    return weight + delta;
}

void install_adapters(ParamSet& params, const AdapterSet& set) {
    for (const auto& [target, ad] : set.adapters) {
        const auto& w = params.at(target);
        if (ad.b.rows() != w.rows() || ad.a.cols() != w.cols())
            throw ShapeError("adapter shape does not match " + target);
        params.add(target + names::kLoraB, ad.b);
        params.add(target + names::kLoraA, ad.a);
    }
}

AdapterSet collect_adapters(const ParamSet& params, const AdapterSet& layout) {
    AdapterSet out;
    out.client_id = layout.client_id;
    out.rank = layout.rank;
    for (const auto& [target, ad] : layout.adapters)
        out.adapters.emplace(target, LoraAdapter{target, params.at(target + names::kLoraB),
                                                 params.at(target + names::kLoraA)});
    return out;
}

Checkpoint encode_adapter_payload(const AdapterSet& set, std::size_t sample_count,
                                  const TensorMap& extra) {
    Checkpoint ckpt;
    ckpt.meta = {{"client_id", set.client_id}, {"r", set.rank}, {"sample_count", sample_count}};
    auto targets = nlohmann::json::array();
    for (const auto& [target, ad] : set.adapters) {
        targets.push_back(target);
        ckpt.tensors.emplace(target + ".B", ad.b);
        ckpt.tensors.emplace(target + ".A", ad.a);
    }
    ckpt.meta["targets"] = targets;
    auto extra_names = nlohmann::json::array();
    for (const auto& [name, t] : extra) {
        extra_names.push_back(name);
        ckpt.tensors.emplace(name, t);
    }
    ckpt.meta["extra"] = extra_names;
    return ckpt;
}

DecodedPayload decode_adapter_payload(const Checkpoint& ckpt) {
    DecodedPayload out;
    out.adapters.client_id = ckpt.meta.at("client_id").get<int>();
    out.adapters.rank = ckpt.meta.at("r").get<std::size_t>();
    out.sample_count = ckpt.meta.at("sample_count").get<std::size_t>();
    for (const auto& t : ckpt.meta.at("targets")) {
        const auto target = t.get<std::string>();
        out.adapters.adapters.emplace(
            target, LoraAdapter{target, ckpt.tensors.at(target + ".B"), ckpt.tensors.at(target + ".A")});
    }
    for (const auto& e : ckpt.meta.at("extra")) {
        const auto name = e.get<std::string>();
        out.extra.emplace(name, ckpt.tensors.at(name));
    }
    out.adapters.validate();
    return out;
}

}  // namespace hfl
