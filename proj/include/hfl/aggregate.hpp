#pragma once

#include <map>
#include <string>
#include <vector>

#include "hfl/lora.hpp"
#include "hfl/matrix.hpp"
#include "hfl/model.hpp"

namespace hfl {

// p_k = |D_k| / sum_j |D_j| over the participating clients.
struct AggregationWeights {
    std::vector<double> p;
};

AggregationWeights compute_weights(const std::vector<std::size_t>& sample_counts);

// Dense delta per adapted weight name.
using AggregatedDelta = std::map<std::string, Matrix>;

// Client blocks in client order: A rows [offsets[k], offsets[k+1]) and the
// matching B columns belong to client k.
struct StackedAdapter {
    Matrix a_stacked;  // (sum r_k) x n, rows scaled by p_k
    Matrix b_stacked;  // m x (sum r_k)
    std::vector<std::size_t> offsets;
};

struct StackResult {
    std::map<std::string, StackedAdapter> stacked;
    AggregatedDelta delta;
};

// sum_k p_k B_k A_k, computed product by product. Ground truth for the rest.
AggregatedDelta reference_delta(const std::vector<AdapterSet>& updates, const AggregationWeights& w);

// (B_1 | ... | B_K) (p_1 A_1 ; ... ; p_K A_K). Any rank mixture.
StackResult stack_aggregate(const std::vector<AdapterSet>& updates, const AggregationWeights& w);

// (sum p_k B_k)(sum p_k A_k). Equal ranks only.
AggregatedDelta naive_aggregate(const std::vector<AdapterSet>& updates, const AggregationWeights& w);

// Zero-pads every client to the largest rank, then averages like naive.
AggregatedDelta zero_pad_aggregate(const std::vector<AdapterSet>& updates, const AggregationWeights& w);

// Expansion of the naive product into its two parts:
// own = sum_k p_k^2 B_k A_k, cross = sum_{i != j} p_i p_j B_i A_j.
struct NoiseDecomposition {
    AggregatedDelta own;
    AggregatedDelta cross;
};
NoiseDecomposition noise_decomposition(const std::vector<AdapterSet>& updates, const AggregationWeights& w);

// Weighted mean of dense head deltas.
NetworkHead aggregate_head(const std::vector<NetworkHead>& head_deltas, const AggregationWeights& w);

enum class Strategy { Stacking, Naive, ZeroPad, Reference };

Strategy parse_strategy(const std::string& name);
std::string to_string(Strategy s);

AggregatedDelta aggregate(Strategy strategy, const std::vector<AdapterSet>& updates,
                          const AggregationWeights& w);

}  // namespace hfl
