#include "hfl/adaptive.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "hfl/errors.hpp"
#include "json.hpp"

namespace hfl {

namespace {
bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }
}  // namespace

void RankPolicy::validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0) throw ConfigError("rank weights must be non-negative");
    if (std::abs(alpha + beta + gamma - 1.0) > 1e-9)
        throw ConfigError("rank weights alpha+beta+gamma must sum to 1");
    if (r_min < 1 || r_max < 1) throw ConfigError("rmin/rmax must be positive");
    if (r_min > r_max) throw ConfigError("rmin must not exceed rmax");
    if (!power_of_two(r_min) || !power_of_two(r_max))
        throw ConfigError("rmin and rmax must be powers of two");
}

RankPolicy rank_policy_preset(const std::string& name) {
    if (name == "volume") return {0.8, 0.1, 0.1};
    if (name == "balanced") return {0.34, 0.33, 0.33};
    if (name == "compute") return {0.1, 0.1, 0.8};
    throw ConfigError("unknown weight preset '" + name + "' (volume, balanced, compute)");
}

const std::vector<std::string>& rank_policy_preset_names() {
    static const std::vector<std::string> names = {"volume", "balanced", "compute"};
    return names;
}

std::vector<NormalizedResources> normalize_resources(const std::vector<ResourceVector>& vectors) {
    if (vectors.empty()) throw ConfigError("normalize_resources needs at least one client");
    auto feature = [](const ResourceVector& v, std::size_t f) {
        return f == 0 ? v.data_volume : f == 1 ? v.entropy_bits : v.vram_gb;
    };
    std::vector<NormalizedResources> out(vectors.size());
    for (std::size_t f = 0; f < 3; ++f) {
        double lo = feature(vectors.front(), f), hi = lo;
        for (const auto& v : vectors) {
            lo = std::min(lo, feature(v, f));
            hi = std::max(hi, feature(v, f));
        }
        for (std::size_t k = 0; k < vectors.size(); ++k)
            out[k][f] = hi == lo ? 0.5 : (feature(vectors[k], f) - lo) / (hi - lo);
    }
    return out;
}

double weighted_score(const NormalizedResources& normed, const RankPolicy& policy) {
    return policy.alpha * normed[0] + policy.beta * normed[1] + policy.gamma * normed[2];
}

int rank_from_score(double score, const RankPolicy& policy) {
    const double raw = policy.r_min + (policy.r_max - policy.r_min) * score;
    const double exponent = std::floor(std::log2(raw) + 0.5);
    const int rank = static_cast<int>(std::lround(std::exp2(exponent)));
    return std::clamp(rank, policy.r_min, policy.r_max);
}

int compute_rank(const NormalizedResources& normed, const RankPolicy& policy) {
    return rank_from_score(weighted_score(normed, policy), policy);
}

const std::vector<double>& default_vram_profile() {
    static const std::vector<double> profile = {48, 48, 48, 48, 48, 24, 24, 24, 12, 12};
    return profile;
}

std::vector<ResourceVector> resource_vectors(const std::vector<ClientShard>& shards,
                                             const std::vector<double>& vram_profile) {
    if (vram_profile.empty()) throw ConfigError("empty VRAM profile");
    std::vector<ResourceVector> out;
    for (std::size_t k = 0; k < shards.size(); ++k)
        out.push_back({static_cast<double>(shards[k].size()), label_entropy(shards[k]),
                       vram_profile[k % vram_profile.size()]});
    return out;
}

std::vector<RankAssignment> assign_ranks(const std::vector<ResourceVector>& vectors,
                                         const RankPolicy& policy) {
    policy.validate();
    const auto normed = normalize_resources(vectors);
    std::vector<RankAssignment> out;
    for (std::size_t k = 0; k < vectors.size(); ++k) {
        const double s = weighted_score(normed[k], policy);
        out.push_back({static_cast<int>(k), vectors[k], normed[k], s, rank_from_score(s, policy)});
    }
    return out;
}

void write_resource_manifest(const std::filesystem::path& path, const std::vector<ResourceVector>& vectors) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path.string());
    for (std::size_t k = 0; k < vectors.size(); ++k)
        out << nlohmann::json{{"client_id", k},
                              {"data_volume", vectors[k].data_volume},
                              {"entropy_bits", vectors[k].entropy_bits},
                              {"vram_gb", vectors[k].vram_gb}}
                   .dump()
            << '\n';
}

std::vector<ResourceVector> read_resource_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    std::vector<ResourceVector> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto obj = nlohmann::json::parse(line);
            const auto id = obj.at("client_id").get<std::size_t>();
            if (out.size() <= id) out.resize(id + 1);
            out[id] = {obj.at("data_volume").get<double>(), obj.at("entropy_bits").get<double>(),
                       obj.at("vram_gb").get<double>()};
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return out;
}

}  // namespace hfl
