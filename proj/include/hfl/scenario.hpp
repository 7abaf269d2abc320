#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hfl/federation.hpp"
#include "json.hpp"

namespace hfl {

struct SyntheticSpec {
    int classes = 6;
    int per_class = 200;
    int vocab_size = 64;
    int seq_len = 32;
    double separation = 0.9;
};

// Everything needed to reproduce one experiment. The JSON form of this struct
// is echoed into every report.
struct ScenarioConfig {
    std::optional<std::filesystem::path> dataset;  // unset => synthetic
    IngestSchema schema;
    SyntheticSpec synthetic;
    SplitRatios split;
    FederationConfig federation;
    ModelSpec model;
    std::string weight_preset;  // informational; the weights themselves live in rank_policy

    void validate() const;
};

nlohmann::json to_json(const ScenarioConfig& config);
ScenarioConfig scenario_from_json(const nlohmann::json& j);

// Parses "0-3,6,7" style index lists.
LayerIndexSet parse_index_set(const std::string& text);
std::string format_index_set(const LayerIndexSet& index);

Dataset load_scenario_dataset(const ScenarioConfig& config);

struct ScenarioResult {
    FederationState state;
    PartitionedModel initial_model;  // post-transformation snapshot
    std::vector<std::string> metrics_lines;
    std::vector<std::string> timing_lines;
    nlohmann::json report;
};

std::string metrics_record(const RoundMetrics& m, Strategy strategy);
nlohmann::json metrics_json(const ClassificationMetrics& m);

ScenarioResult run_scenario(const ScenarioConfig& config);

// Writes metrics.jsonl, timing.jsonl, report.json, model.ckpt,
// model_init.ckpt, partition.jsonl and resources.jsonl into `out_dir`.
void write_artifacts(const ScenarioResult& result, const std::filesystem::path& out_dir);

enum class SweepAxis { Sigma, PerRound, Weights, Strategy };
SweepAxis parse_sweep_axis(const std::string& name);
std::string to_string(SweepAxis axis);

struct SweepResult {
    nlohmann::json report;
    std::vector<ScenarioResult> runs;
};

SweepResult run_sweep(const ScenarioConfig& base, SweepAxis axis, const std::vector<std::string>& values);

// Names the tensors whose bytes differ (or exist on one side only).
std::vector<std::string> checkpoint_diff(const Checkpoint& a, const Checkpoint& b);

}  // namespace hfl
