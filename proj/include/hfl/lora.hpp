#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>

#include "hfl/matrix.hpp"
#include "hfl/model.hpp"
#include "hfl/nncore.hpp"

namespace hfl {

// Low-rank pair for one m x n weight: delta = B * A, B is m x r, A is r x n.
// No scaling factor is applied.
struct LoraAdapter {
    std::string target;
    Matrix b;
    Matrix a;

    std::size_t rank() const { return a.rows(); }
    Matrix delta() const;
};

// One adapter per classifier linear map, all at the client's rank.
struct AdapterSet {
    int client_id = 0;
    std::size_t rank = 0;
    std::map<std::string, LoraAdapter> adapters;  // keyed by target

    // Throws unless every adapter matches `rank` and is internally consistent.
    void validate() const;
};

inline constexpr double kLoraInitStd = 0.02;

// A ~ N(0, 0.02^2), B = 0.
AdapterSet init_adapter_set(std::span<const AdaptPoint> points, std::size_t rank, std::uint64_t seed,
                            int client_id = 0);

Matrix apply_adapter(const Matrix& weight, const LoraAdapter& adapter);
Matrix merge_delta(const Matrix& weight, const Matrix& delta);

// Adds "<target>.lora_b" / "<target>.lora_a" as trainable parameters.
void install_adapters(ParamSet& params, const AdapterSet& set);
// Reads the current adapter values back out of a ParamSet.
AdapterSet collect_adapters(const ParamSet& params, const AdapterSet& layout);

// Upload payload: meta {client_id, r, sample_count}, tensors "<target>.B" and
// "<target>.A". Extra tensors (e.g. a head delta) may ride along.
Checkpoint encode_adapter_payload(const AdapterSet& set, std::size_t sample_count,
                                  const TensorMap& extra = {});
struct DecodedPayload {
    AdapterSet adapters;
    std::size_t sample_count = 0;
    TensorMap extra;
};
DecodedPayload decode_adapter_payload(const Checkpoint& ckpt);

}  // namespace hfl
