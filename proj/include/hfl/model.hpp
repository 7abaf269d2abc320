#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hfl/flowdata.hpp"
#include "hfl/matrix.hpp"
#include "hfl/nncore.hpp"

namespace hfl {

// Residual block h + W2 tanh(W1 h + b1) + b2.
struct Block {
    Matrix w1, b1, w2, b2;

    std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }
    friend bool operator==(const Block&, const Block&) = default;
};

struct NetworkHead {
    Matrix weight;  // d_model x num_classes
    Matrix bias;    // 1 x num_classes

    int num_classes() const { return static_cast<int>(weight.cols()); }
    friend bool operator==(const NetworkHead&, const NetworkHead&) = default;
};

struct Backbone {
    int vocab_size = 0;
    int d_model = 0;
    Matrix embedding;  // vocab_size x d_model
    std::vector<Block> blocks;
    // Whatever output layer the source model had. Replaced, never used, by
    // attach_network_head.
    std::optional<Matrix> output_head;

    std::size_t depth() const { return blocks.size(); }
    std::size_t parameter_count() const;
    friend bool operator==(const Backbone&, const Backbone&) = default;
};

Backbone init_backbone(int vocab_size, int d_model, int depth, std::uint64_t seed);

// Strictly increasing retained-block indices.
struct LayerIndexSet {
    std::vector<std::size_t> indices;

    void validate(std::size_t source_depth) const;
    // First `near_input` and last `near_output` blocks of a `depth`-block stack.
    static LayerIndexSet ends(std::size_t depth, std::size_t near_input, std::size_t near_output);
    static LayerIndexSet all(std::size_t depth);
};

Backbone layer_extract(const Backbone& backbone, const LayerIndexSet& index);

struct HeadedBackbone {
    Backbone backbone;
    NetworkHead head;

    ArchSpec arch() const;
    ParamSet params() const;
};

HeadedBackbone attach_network_head(Backbone backbone, int num_classes, std::uint64_t seed);

// Extractor (frozen prefix) and classifier (suffix plus head).
struct PartitionedModel {
    int vocab_size = 0;
    int d_model = 0;
    Matrix embedding;
    std::vector<Block> extractor;
    std::vector<Block> classifier;
    NetworkHead head;
    // Dense deltas the server has folded into classifier weights, keyed by
    // weight name ("blocks.<i>.w1"). Base weights stay untouched.
    std::map<std::string, Matrix> merged;

    // Provenance for the checkpoint manifest.
    std::size_t source_depth = 0;
    LayerIndexSet index;

    std::size_t split_point() const { return extractor.size(); }
    std::size_t depth() const { return extractor.size() + classifier.size(); }
    int num_classes() const { return head.num_classes(); }
    ArchSpec arch() const;

    // Frozen embedding, blocks and merged deltas; trainable head.
    ParamSet params() const;

    Matrix extract(TokenBatch batch) const;
    Matrix classify(const Matrix& hidden) const;
    Matrix logits(TokenBatch batch) const;
};

PartitionedModel split(const HeadedBackbone& model, std::size_t split_point);

// Weight names of every linear map inside the classifier blocks.
struct AdaptPoint {
    std::string name;
    std::size_t rows;
    std::size_t cols;
};
std::vector<AdaptPoint> adapt_points(const PartitionedModel& model);

std::size_t argmax_row(std::span<const double> row);
int predict(const PartitionedModel& model, const FlowRecord& record);
std::vector<int> predict_batch(const PartitionedModel& model, TokenBatch batch);

void save_model(const std::filesystem::path& path, const PartitionedModel& model);
PartitionedModel load_model(const std::filesystem::path& path);
Checkpoint model_checkpoint(const PartitionedModel& model);
PartitionedModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace hfl
