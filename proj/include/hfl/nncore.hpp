#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "hfl/matrix.hpp"
#include "json.hpp"

namespace hfl {

struct Param {
    Matrix value;
    bool frozen = false;
};

// Named parameters, ordered by name so that iteration (and therefore
// checkpoints and optimizer updates) is deterministic.
class ParamSet {
public:
    void add(const std::string& name, Matrix value, bool frozen = false);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    const Matrix& at(const std::string& name) const;
    Matrix& mutable_value(const std::string& name);
    bool is_frozen(const std::string& name) const;
    void set_frozen(const std::string& name, bool frozen);
    void erase(const std::string& name) { params_.erase(name); }

    std::vector<std::string> trainable_names() const;
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;

    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Param> params_;
};

using Gradients = std::map<std::string, Matrix>;

// Parameter naming used by the network below. Block i's linear maps are
// "blocks.<i>.w1" / "blocks.<i>.w2" (d_model x d_model, out x in) with biases
// "...b1" / "...b2". An adapted map W may carry "<W>.merged" (dense delta
// accumulated by the server) and "<W>.lora_b" / "<W>.lora_a".
namespace names {
std::string block(std::size_t i, const char* leaf);
inline constexpr const char* kEmbed = "embed";
inline constexpr const char* kHeadW = "head.w";
inline constexpr const char* kHeadB = "head.b";
inline constexpr const char* kMerged = ".merged";
inline constexpr const char* kLoraB = ".lora_b";
inline constexpr const char* kLoraA = ".lora_a";
}  // namespace names

// Shape of the network: mean-pooled token embedding, `num_blocks` residual
// blocks h + W2 tanh(W1 h + b1) + b2, then a linear head.
struct ArchSpec {
    int vocab_size = 0;
    int d_model = 0;
    int num_blocks = 0;
    int num_classes = 0;

    friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

using TokenBatch = std::span<const std::vector<int>>;

// base (+ merged delta) (+ B*A), whichever are present.
Matrix effective_weight(const ParamSet& params, const std::string& weight_name);

// Building blocks, exposed so a split model can run them piecewise.
Matrix embed_pool(const ParamSet& params, const ArchSpec& arch, TokenBatch batch);
Matrix run_blocks(const ParamSet& params, Matrix hidden, std::size_t first, std::size_t last);
Matrix head_logits(const ParamSet& params, const Matrix& hidden);

Matrix forward(const ParamSet& params, const ArchSpec& arch, TokenBatch batch);

struct LossAndGrads {
    double loss = 0.0;
    Gradients grads;
};

double cross_entropy(const Matrix& logits, std::span<const int> labels);

LossAndGrads loss_and_grads(const ParamSet& params, const ArchSpec& arch, TokenBatch batch,
                            std::span<const int> labels);

// Same, starting from hidden states entering block `first_block`. Everything
// upstream of that block must be frozen.
LossAndGrads loss_and_grads_from_hidden(const ParamSet& params, const ArchSpec& arch,
                                        const Matrix& hidden, std::size_t first_block,
                                        std::span<const int> labels);

struct AdamConfig {
    double learning_rate = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct OptimizerState {
    AdamConfig config;
    std::int64_t step = 0;
    std::map<std::string, Matrix> first_moment;
    std::map<std::string, Matrix> second_moment;

    explicit OptimizerState(AdamConfig c = {}) : config(c) {}
};

void opt_step(OptimizerState& state, ParamSet& params, const Gradients& grads);

// Checkpoint: "HFLCKPT1", u32 metadata length, UTF-8 JSON metadata, u32
// tensor count, then per tensor u32 name length, name, u64 rows, u64 cols and
// rows*cols little-endian IEEE-754 doubles.
using TensorMap = std::map<std::string, Matrix>;

struct Checkpoint {
    nlohmann::json meta = nlohmann::json::object();
    TensorMap tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// ParamSet <-> checkpoint; frozen flags travel in meta["frozen"].
Checkpoint to_checkpoint(const ParamSet& params, nlohmann::json meta = nlohmann::json::object());
ParamSet params_from_checkpoint(const Checkpoint& ckpt);

}  // namespace hfl
