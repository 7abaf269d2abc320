#include "hfl/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "hfl/errors.hpp"
#include "hfl/rng.hpp"

namespace hfl {

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (auto& v : m.values()) v = dist(rng);
    return m;
}

void add_block(ParamSet& params, std::size_t i, const Block& b) {
    params.add(names::block(i, "w1"), b.w1, true);
    params.add(names::block(i, "b1"), b.b1, true);
    params.add(names::block(i, "w2"), b.w2, true);
    params.add(names::block(i, "b2"), b.b2, true);
}

Block take_block(const Checkpoint& ckpt, std::size_t i) {
    return Block{ckpt.tensors.at(names::block(i, "w1")), ckpt.tensors.at(names::block(i, "b1")),
                 ckpt.tensors.at(names::block(i, "w2")), ckpt.tensors.at(names::block(i, "b2"))};
}

}  // namespace

std::size_t Backbone::parameter_count() const {
    std::size_t n = embedding.size();
    for (const auto& b : blocks) n += b.parameter_count();
    return n;
}

Backbone init_backbone(int vocab_size, int d_model, int depth, std::uint64_t seed) {
    if (vocab_size < 1 || d_model < 1 || depth < 1)
        throw ConfigError("init_backbone: vocab_size, d_model and depth must be positive");
    Rng rng(derive_seed(seed, {stream::kBackbone}));
    const auto d = static_cast<std::size_t>(d_model);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d_model));

    Backbone bb;
    bb.vocab_size = vocab_size;
    bb.d_model = d_model;
    bb.embedding = gaussian(static_cast<std::size_t>(vocab_size), d, 1.0, rng);
    for (int i = 0; i < depth; ++i)
        bb.blocks.push_back(Block{gaussian(d, d, scale, rng), Matrix(1, d),
                                  gaussian(d, d, 0.5 * scale, rng), Matrix(1, d)});
    // Stand-in for a generative output projection over the vocabulary.
    bb.output_head = gaussian(d, static_cast<std::size_t>(vocab_size), scale, rng);
    return bb;
}

void LayerIndexSet::validate(std::size_t source_depth) const {
    if (indices.empty()) throw ValidationError("layer index set is empty");
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= source_depth)
            throw ValidationError("layer index " + std::to_string(indices[i]) +
                                  " out of range for depth " + std::to_string(source_depth));
        if (i > 0 && indices[i] <= indices[i - 1])
            throw ValidationError(indices[i] == indices[i - 1]
                                      ? "duplicate layer index " + std::to_string(indices[i])
                                      : "layer indices must be strictly increasing");
    }
}

LayerIndexSet LayerIndexSet::ends(std::size_t depth, std::size_t near_input, std::size_t near_output) {
    if (near_input + near_output > depth)
        throw ValidationError("cannot retain more layers than the source depth");
    LayerIndexSet s;
    for (std::size_t i = 0; i < near_input; ++i) s.indices.push_back(i);
    for (std::size_t i = depth - near_output; i < depth; ++i) s.indices.push_back(i);
    return s;
}

LayerIndexSet LayerIndexSet::all(std::size_t depth) { return ends(depth, depth, 0); }

Backbone layer_extract(const Backbone& backbone, const LayerIndexSet& index) {
    index.validate(backbone.depth());
    Backbone out;
    out.vocab_size = backbone.vocab_size;
    out.d_model = backbone.d_model;
    out.embedding = backbone.embedding;
    out.output_head = backbone.output_head;
    for (auto i : index.indices) out.blocks.push_back(backbone.blocks[i]);
    return out;
}

ArchSpec HeadedBackbone::arch() const {
    return {backbone.vocab_size, backbone.d_model, static_cast<int>(backbone.depth()),
            head.num_classes()};
}

ParamSet HeadedBackbone::params() const {
    ParamSet p;
    p.add(names::kEmbed, backbone.embedding, true);
    for (std::size_t i = 0; i < backbone.depth(); ++i) add_block(p, i, backbone.blocks[i]);
    p.add(names::kHeadW, head.weight);
    p.add(names::kHeadB, head.bias);
    return p;
}

HeadedBackbone attach_network_head(Backbone backbone, int num_classes, std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("network head needs at least 2 classes");
    Rng rng(derive_seed(seed, {stream::kHead}));
    std::normal_distribution<double> dist(0.0, 0.02);
    NetworkHead head{Matrix(static_cast<std::size_t>(backbone.d_model), static_cast<std::size_t>(num_classes)),
                     Matrix(1, static_cast<std::size_t>(num_classes))};
    for (auto& v : head.weight.values()) v = dist(rng);
    backbone.output_head.reset();
    return {std::move(backbone), std::move(head)};
}

ArchSpec PartitionedModel::arch() const {
    return {vocab_size, d_model, static_cast<int>(depth()), num_classes()};
}

ParamSet PartitionedModel::params() const {
    ParamSet p;
    p.add(names::kEmbed, embedding, true);
    for (std::size_t i = 0; i < extractor.size(); ++i) add_block(p, i, extractor[i]);
    for (std::size_t j = 0; j < classifier.size(); ++j) add_block(p, split_point() + j, classifier[j]);
    for (const auto& [name, delta] : merged) p.add(name + names::kMerged, delta, true);
    p.add(names::kHeadW, head.weight);
    p.add(names::kHeadB, head.bias);
    return p;
}

Matrix PartitionedModel::extract(TokenBatch batch) const {
    ParamSet p;
    p.add(names::kEmbed, embedding, true);
    for (std::size_t i = 0; i < extractor.size(); ++i) add_block(p, i, extractor[i]);
    return run_blocks(p, embed_pool(p, arch(), batch), 0, split_point());
}

Matrix PartitionedModel::classify(const Matrix& hidden) const {
    ParamSet p;
    for (std::size_t j = 0; j < classifier.size(); ++j) add_block(p, split_point() + j, classifier[j]);
    for (const auto& [name, delta] : merged) p.add(name + names::kMerged, delta, true);
    p.add(names::kHeadW, head.weight);
    p.add(names::kHeadB, head.bias);
    return head_logits(p, run_blocks(p, hidden, split_point(), depth()));
}

Matrix PartitionedModel::logits(TokenBatch batch) const { return classify(extract(batch)); }

PartitionedModel split(const HeadedBackbone& model, std::size_t split_point) {
    const auto depth = model.backbone.depth();
    if (split_point == 0 || split_point >= depth)
        throw ValidationError("split_point " + std::to_string(split_point) +
                              " must leave both sides non-empty (depth " + std::to_string(depth) + ")");
    PartitionedModel pm;
    pm.vocab_size = model.backbone.vocab_size;
    pm.d_model = model.backbone.d_model;
    pm.embedding = model.backbone.embedding;
    const auto mid = model.backbone.blocks.begin() + static_cast<long>(split_point);
    pm.extractor.assign(model.backbone.blocks.begin(), mid);
    pm.classifier.assign(mid, model.backbone.blocks.end());
    pm.head = model.head;
    pm.source_depth = depth;
    pm.index = LayerIndexSet::all(depth);
    return pm;
}

std::vector<AdaptPoint> adapt_points(const PartitionedModel& model) {
    std::vector<AdaptPoint> out;
    for (std::size_t j = 0; j < model.classifier.size(); ++j) {
        const auto& b = model.classifier[j];
        const auto i = model.split_point() + j;
        out.push_back({names::block(i, "w1"), b.w1.rows(), b.w1.cols()});
        out.push_back({names::block(i, "w2"), b.w2.rows(), b.w2.cols()});
    }
    return out;
}

std::size_t argmax_row(std::span<const double> row) {
    // max_element returns the first maximum, so ties go to the lowest index.
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

std::vector<int> predict_batch(const PartitionedModel& model, TokenBatch batch) {
    const Matrix logits = model.logits(batch);
    std::vector<int> out(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = static_cast<int>(argmax_row(logits.row(i)));
    return out;
}

int predict(const PartitionedModel& model, const FlowRecord& record) {
    return predict_batch(model, std::span(&record.tokens, 1)).front();
}

Checkpoint model_checkpoint(const PartitionedModel& model) {
    nlohmann::json manifest = {{"depth", model.source_depth},
                               {"index", model.index.indices},
                               {"split_point", model.split_point()},
                               {"retained_depth", model.depth()},
                               {"d_model", model.d_model},
                               {"vocab_size", model.vocab_size},
                               {"num_classes", model.num_classes()}};
    return to_checkpoint(model.params(), {{"manifest", manifest}});
}

PartitionedModel model_from_checkpoint(const Checkpoint& ckpt) {
    const auto& m = ckpt.meta.at("manifest");
    PartitionedModel pm;
    pm.vocab_size = m.at("vocab_size").get<int>();
    pm.d_model = m.at("d_model").get<int>();
    pm.source_depth = m.at("depth").get<std::size_t>();
    pm.index.indices = m.at("index").get<std::vector<std::size_t>>();
    const auto split_point = m.at("split_point").get<std::size_t>();
    const auto depth = m.at("retained_depth").get<std::size_t>();
    pm.embedding = ckpt.tensors.at(names::kEmbed);
    for (std::size_t i = 0; i < depth; ++i)
        (i < split_point ? pm.extractor : pm.classifier).push_back(take_block(ckpt, i));
    for (const auto& [name, t] : ckpt.tensors) {
        const std::string suffix = names::kMerged;
        if (name.size() > suffix.size() && name.ends_with(suffix))
            pm.merged.emplace(name.substr(0, name.size() - suffix.size()), t);
    }
    pm.head = {ckpt.tensors.at(names::kHeadW), ckpt.tensors.at(names::kHeadB)};
    return pm;
}

void save_model(const std::filesystem::path& path, const PartitionedModel& model) {
    save_checkpoint(path, model_checkpoint(model));
}

PartitionedModel load_model(const std::filesystem::path& path) {
    return model_from_checkpoint(load_checkpoint(path));
}

}  // namespace hfl
