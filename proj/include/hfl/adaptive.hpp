#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "hfl/flowdata.hpp"

namespace hfl {

// What a client reports at registration.
struct ResourceVector {
    double data_volume = 1.0;   // sample count
    double entropy_bits = 0.0;  // label entropy of the local shard
    double vram_gb = 1.0;       // declared memory budget
};

struct RankPolicy {
    double alpha = 0.34;  // data volume
    double beta = 0.33;   // data complexity
    double gamma = 0.33;  // compute
    int r_min = 4;
    int r_max = 64;

    void validate() const;
};

// Named weightings: "volume" (0.8, 0.1, 0.1), "balanced" (0.34, 0.33, 0.33)
// and "compute" (0.1, 0.1, 0.8).
RankPolicy rank_policy_preset(const std::string& name);
const std::vector<std::string>& rank_policy_preset_names();

using NormalizedResources = std::array<double, 3>;

// Per-feature min-max scaling across clients; a constant feature maps to 0.5.
std::vector<NormalizedResources> normalize_resources(const std::vector<ResourceVector>& vectors);

double weighted_score(const NormalizedResources& normed, const RankPolicy& policy);

// 2^round_half_up(log2(r_min + (r_max - r_min) * s)) clamped to [r_min, r_max].
int compute_rank(const NormalizedResources& normed, const RankPolicy& policy);
int rank_from_score(double score, const RankPolicy& policy);

// VRAM budget per client, in GB.
const std::vector<double>& default_vram_profile();

std::vector<ResourceVector> resource_vectors(const std::vector<ClientShard>& shards,
                                             const std::vector<double>& vram_profile);

struct RankAssignment {
    int client_id = 0;
    ResourceVector resources;
    NormalizedResources normalized{};
    double score = 0.0;
    int rank = 0;
};

std::vector<RankAssignment> assign_ranks(const std::vector<ResourceVector>& vectors,
                                         const RankPolicy& policy);

// {client_id, data_volume, entropy_bits, vram_gb} per line.
void write_resource_manifest(const std::filesystem::path& path, const std::vector<ResourceVector>& vectors);
std::vector<ResourceVector> read_resource_manifest(const std::filesystem::path& path);

}  // namespace hfl
