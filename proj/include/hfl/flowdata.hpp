#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace hfl {

inline constexpr std::size_t kDefaultMaxInputLen = 1024;

// One traffic flow as a token sequence plus its class.
struct FlowRecord {
    std::vector<int> tokens;
    int label = 0;

    friend bool operator==(const FlowRecord&, const FlowRecord&) = default;
};

struct Dataset {
    std::vector<FlowRecord> records;
    int num_classes = 0;
    int vocab_size = 0;
    // Original label strings, index = dense class id. May be empty for
    // synthetic data.
    std::vector<std::string> label_names;

    std::size_t size() const { return records.size(); }
    bool empty() const { return records.empty(); }
    // Throws ValidationError if any record breaks the dataset invariants.
    void validate(std::size_t max_input_len = kDefaultMaxInputLen) const;
    std::vector<std::size_t> class_counts() const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct ClientShard {
    int client_id = 0;
    std::vector<FlowRecord> records;
    std::vector<std::size_t> label_histogram;
    // Position of every record in the partitioned training set.
    std::vector<std::size_t> record_indices;

    std::size_t size() const { return records.size(); }
};

struct IngestSchema {
    std::string tokens_field = "tokens";
    std::string label_field = "label";
    std::optional<int> vocab_size;
    std::size_t max_input_len = kDefaultMaxInputLen;
};

// Reads a line-delimited JSON file, one record per line.
Dataset ingest_dataset(const std::filesystem::path& path, const IngestSchema& schema = {});

Dataset synth_flows(int num_classes, int per_class, int vocab_size, int seq_len,
                    double separation, std::uint64_t seed);

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

struct DatasetSplits {
    Dataset train;
    Dataset val;
    Dataset test;
};

DatasetSplits split_dataset(const Dataset& ds, SplitRatios ratios, std::uint64_t seed);

std::vector<ClientShard> dirichlet_partition(const Dataset& train, int num_clients, double sigma,
                                             std::uint64_t seed);

std::vector<std::size_t> label_histogram(const std::vector<FlowRecord>& records, int num_classes);

// Shannon entropy of the shard's label distribution, in bits.
double label_entropy(const ClientShard& shard);

// Mean over clients of the largest single-label share. 1.0 means every client
// holds one label only.
double label_skew(const std::vector<ClientShard>& shards);

// {client_id, record_indices} per line.
void write_partition_manifest(const std::filesystem::path& path,
                              const std::vector<ClientShard>& shards);
std::vector<std::vector<std::size_t>> read_partition_manifest(const std::filesystem::path& path);

void write_dataset(const std::filesystem::path& path, const Dataset& ds);

}  // namespace hfl
