#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hfl/adaptive.hpp"
#include "hfl/aggregate.hpp"
#include "hfl/flowdata.hpp"
#include "hfl/lora.hpp"
#include "hfl/model.hpp"

namespace hfl {

struct FederationConfig {
    int num_clients = 10;
    int clients_per_round = 8;
    int rounds = 10;
    int local_epochs = 1;
    double learning_rate = 3e-4;
    int batch_size = 32;
    double sigma = 0.2;
    RankPolicy rank_policy;
    Strategy strategy = Strategy::Stacking;
    std::uint64_t seed = 7;
    int workers = 1;
    // Convergence on validation macro-F1. patience = 0 disables the check.
    int patience = 0;
    double min_delta = 1e-3;
    bool stop_on_convergence = false;
    std::vector<double> vram_profile = default_vram_profile();

    void validate() const;
};

// Backbone shape before and after compression.
struct ModelSpec {
    int source_depth = 8;
    LayerIndexSet index{{0, 1, 2, 3, 6, 7}};
    std::size_t split_point = 4;
    int d_model = 128;

    void validate() const;
};

struct ConfusionMatrix {
    // counts[true][predicted]
    std::vector<std::vector<std::size_t>> counts;

    explicit ConfusionMatrix(std::size_t num_classes = 0)
        : counts(num_classes, std::vector<std::size_t>(num_classes, 0)) {}
    std::size_t num_classes() const { return counts.size(); }
    std::size_t total() const;
};

struct ClassificationMetrics {
    ConfusionMatrix confusion;
    double acc = 0.0;
    double macro_pr = 0.0;
    double macro_rc = 0.0;
    double macro_f1 = 0.0;
    std::vector<double> per_class_pr;
    std::vector<double> per_class_rc;
    std::vector<double> per_class_f1;
    // Classes with at least one test sample; the macro averages run over these.
    std::vector<int> classes_present;
};

ClassificationMetrics metrics_from_confusion(const ConfusionMatrix& cm);
ClassificationMetrics evaluate_predictions(std::span<const int> truth, std::span<const int> predicted,
                                           int num_classes);
ClassificationMetrics evaluate(const PartitionedModel& model, const Dataset& dataset);

struct RoundMetrics {
    int round = 0;
    std::vector<int> clients;
    ClassificationMetrics test;
    double val_macro_f1 = 0.0;
    std::map<std::string, double> delta_fro;  // per adapted weight
    double wall_ms = 0.0;
};

// True once `max_rounds` rounds are recorded, or the best validation F1 has
// not improved by more than min_delta for `patience` consecutive rounds.
bool check_convergence(const std::vector<double>& val_f1_history, int patience, double min_delta,
                       int max_rounds);

std::vector<int> sample_clients(int num_clients, int per_round, int round, std::uint64_t master_seed);

struct ClientUpdate {
    int client_id = 0;
    AdapterSet adapters;
    NetworkHead head_delta;
    std::size_t sample_count = 0;
    std::vector<double> epoch_losses;  // mean batch loss per local epoch
};

// Local LoRA + head training on top of the received global model. `hidden`
// holds the shard's extractor outputs, which never change since the
// extractor is frozen.
ClientUpdate client_update(const PartitionedModel& global, const Matrix& hidden,
                           std::span<const int> labels, int client_id, std::size_t rank,
                           const FederationConfig& config, int round);

// Convenience overload that runs the extractor itself.
ClientUpdate client_update(const PartitionedModel& global, const ClientShard& shard, std::size_t rank,
                           const FederationConfig& config, int round);

struct CachedSplit {
    Matrix hidden;
    std::vector<int> labels;
};

CachedSplit cache_hidden(const PartitionedModel& model, const std::vector<FlowRecord>& records);

struct FederationState {
    FederationConfig config;
    ModelSpec spec;
    PartitionedModel global;
    std::vector<ClientShard> shards;
    std::vector<RankAssignment> ranks;
    Dataset val;
    Dataset test;
    std::vector<CachedSplit> shard_cache;
    CachedSplit val_cache;
    CachedSplit test_cache;
    std::vector<RoundMetrics> history;
    int converged_round = -1;
};

// Compressed, head-attached and split model; then partitioning and rank assignment.
PartitionedModel transform_model(const ModelSpec& spec, int vocab_size, int num_classes, std::uint64_t seed);
FederationState setup_federation(const FederationConfig& config, const ModelSpec& spec, DatasetSplits splits);

// One communication round; appends to state.history. Throws (and leaves the
// global model untouched) if any sampled client fails.
void run_round(FederationState& state, int round_index);

using RoundCallback = std::function<void(const FederationState&, const RoundMetrics&)>;
void run_federation(FederationState& state, const RoundCallback& on_round = {});

}  // namespace hfl
