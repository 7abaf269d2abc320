#include "hfl/aggregate.hpp"

#include <algorithm>
#include <cmath>

#include "hfl/errors.hpp"
#include "hfl/kernels.hpp"

namespace hfl {

AggregationWeights compute_weights(const std::vector<std::size_t>& sample_counts) {
    if (sample_counts.empty()) throw ConfigError("compute_weights: no clients");
    double total = 0.0;
    for (auto c : sample_counts) {
        if (c < 1) throw ConfigError("compute_weights: every client needs at least one sample");
        total += static_cast<double>(c);
    }
    AggregationWeights w;
    for (auto c : sample_counts) w.p.push_back(static_cast<double>(c) / total);
    return w;
}

namespace {

// Every update must adapt the same targets with matching shapes.
void check_aligned(const std::vector<AdapterSet>& updates, const AggregationWeights& w) {
    if (updates.empty()) throw AlignmentError("aggregation over zero clients");
    if (updates.size() != w.p.size())
        throw AlignmentError("aggregation weights do not match the number of updates");
    const auto& first = updates.front().adapters;
    for (const auto& u : updates) {
        u.validate();
        if (u.adapters.size() != first.size())
            throw AlignmentError("client " + std::to_string(u.client_id) + " adapts a different target set");
        for (const auto& [target, ad] : u.adapters) {
            auto it = first.find(target);
            if (it == first.end())
                throw AlignmentError("client " + std::to_string(u.client_id) + " adapts unknown target " + target);
            if (ad.b.rows() != it->second.b.rows() || ad.a.cols() != it->second.a.cols())
                throw ShapeError("target " + target + " has inconsistent shapes across clients");
        }
    }
}

LoraAdapter padded(const LoraAdapter& ad, std::size_t rank) {
    LoraAdapter out{ad.target, Matrix(ad.b.rows(), rank), Matrix(rank, ad.a.cols())};
    for (std::size_t r = 0; r < ad.b.rows(); ++r)
        for (std::size_t c = 0; c < ad.rank(); ++c) out.b(r, c) = ad.b(r, c);
    for (std::size_t r = 0; r < ad.rank(); ++r)
        for (std::size_t c = 0; c < ad.a.cols(); ++c) out.a(r, c) = ad.a(r, c);
    return out;
}

}  // namespace

AggregatedDelta reference_delta(const std::vector<AdapterSet>& updates, const AggregationWeights& w) {
    check_aligned(updates, w);
    AggregatedDelta out;
    for (const auto& [target, first] : updates.front().adapters) {
        Matrix acc(first.b.rows(), first.a.cols());
        for (std::size_t k = 0; k < updates.size(); ++k)
            acc += w.p[k] * updates[k].adapters.at(target).delta();
        out.emplace(target, std::move(acc));
    }
    return out;
}

StackResult stack_aggregate(const std::vector<AdapterSet>& updates, const AggregationWeights& w) {
    check_aligned(updates, w);
    StackResult out;
    for (const auto& [target, first] : updates.front().adapters) {
        std::vector<Matrix> a_blocks, b_blocks;
        StackedAdapter st;
        std::size_t offset = 0;
        for (std::size_t k = 0; k < updates.size(); ++k) {
            const auto& ad = updates[k].adapters.at(target);
            a_blocks.push_back(w.p[k] * ad.a);
            b_blocks.push_back(ad.b);
            st.offsets.push_back(offset);
            offset += ad.rank();
        }
        st.offsets.push_back(offset);
        st.a_stacked = vstack(a_blocks);
        st.b_stacked = hstack(b_blocks);
        out.delta.emplace(target, kernels::matmul(st.b_stacked, st.a_stacked));
        out.stacked.emplace(target, std::move(st));
    }
    return out;
}

AggregatedDelta naive_aggregate(const std::vector<AdapterSet>& updates, const AggregationWeights& w) {
    check_aligned(updates, w);
    const auto rank = updates.front().rank;
    for (const auto& u : updates)
        if (u.rank != rank)
            throw RankError("naive averaging needs equal ranks; client " + std::to_string(u.client_id) +
                            " has rank " + std::to_string(u.rank) + ", expected " + std::to_string(rank));
    AggregatedDelta out;
    for (const auto& [target, first] : updates.front().adapters) {
        Matrix a_avg(first.a.rows(), first.a.cols());
        Matrix b_avg(first.b.rows(), first.b.cols());
        for (std::size_t k = 0; k < updates.size(); ++k) {
            const auto& ad = updates[k].adapters.at(target);
            a_avg += w.p[k] * ad.a;
            b_avg += w.p[k] * ad.b;
        }
        out.emplace(target, kernels::matmul(b_avg, a_avg));
    }
    return out;
}

AggregatedDelta zero_pad_aggregate(const std::vector<AdapterSet>& updates, const AggregationWeights& w) {
    check_aligned(updates, w);
    std::size_t r_max = 0;
    for (const auto& u : updates) r_max = std::max(r_max, u.rank);
    std::vector<AdapterSet> padded_updates;
    for (const auto& u : updates) {
        AdapterSet p{u.client_id, r_max, {}};
        for (const auto& [target, ad] : u.adapters) p.adapters.emplace(target, padded(ad, r_max));
        padded_updates.push_back(std::move(p));
    }
    return naive_aggregate(padded_updates, w);
}

NoiseDecomposition noise_decomposition(const std::vector<AdapterSet>& updates, const AggregationWeights& w) {
    check_aligned(updates, w);
    NoiseDecomposition out;
    for (const auto& [target, first] : updates.front().adapters) {
        Matrix own(first.b.rows(), first.a.cols());
        Matrix cross(first.b.rows(), first.a.cols());
        for (std::size_t i = 0; i < updates.size(); ++i)
            for (std::size_t j = 0; j < updates.size(); ++j) {
                const auto& bi = updates[i].adapters.at(target).b;
                const auto& aj = updates[j].adapters.at(target).a;
                if (bi.cols() != aj.rows())
                    throw RankError("noise decomposition needs equal ranks");
                (i == j ? own : cross) += (w.p[i] * w.p[j]) * kernels::matmul(bi, aj);
            }
        out.own.emplace(target, std::move(own));
        out.cross.emplace(target, std::move(cross));
    }
    return out;
}

NetworkHead aggregate_head(const std::vector<NetworkHead>& head_deltas, const AggregationWeights& w) {
    if (head_deltas.empty() || head_deltas.size() != w.p.size())
        throw AlignmentError("head deltas do not match aggregation weights");
    const auto& first = head_deltas.front();
    NetworkHead out{Matrix(first.weight.rows(), first.weight.cols()), Matrix(first.bias.rows(), first.bias.cols())};
    for (std::size_t k = 0; k < head_deltas.size(); ++k) {
        const auto& d = head_deltas[k];
        if (!d.weight.same_shape(out.weight) || !d.bias.same_shape(out.bias))
            throw ShapeError("head delta shape mismatch for client position " + std::to_string(k));
        out.weight += w.p[k] * d.weight;
        out.bias += w.p[k] * d.bias;
    }
    return out;
}

Strategy parse_strategy(const std::string& name) {
    if (name == "stacking") return Strategy::Stacking;
    if (name == "naive") return Strategy::Naive;
    if (name == "zeropad") return Strategy::ZeroPad;
    if (name == "reference") return Strategy::Reference;
    throw ConfigError("unknown strategy '" + name + "' (stacking, naive, zeropad, reference)");
}

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::Stacking: return "stacking";
        case Strategy::Naive: return "naive";
        case Strategy::ZeroPad: return "zeropad";
        case Strategy::Reference: return "reference";
    }
    return "unknown";
}

AggregatedDelta aggregate(Strategy strategy, const std::vector<AdapterSet>& updates,
                          const AggregationWeights& w) {
    switch (strategy) {
        case Strategy::Stacking: return stack_aggregate(updates, w).delta;
        case Strategy::Naive: return naive_aggregate(updates, w);
        case Strategy::ZeroPad: return zero_pad_aggregate(updates, w);
        case Strategy::Reference: return reference_delta(updates, w);
    }
    throw ConfigError("unknown strategy");
}

}  // namespace hfl
