#include "hfl/nncore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "hfl/errors.hpp"
#include "hfl/kernels.hpp"

namespace hfl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

void ParamSet::add(const std::string& name, Matrix value, bool frozen) {
    params_[name] = Param{std::move(value), frozen};
}

const Matrix& ParamSet::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InputError("unknown parameter " + name);
    return it->second.value;
}

Matrix& ParamSet::mutable_value(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InputError("unknown parameter " + name);
    return it->second.value;
}

bool ParamSet::is_frozen(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InputError("unknown parameter " + name);
    return it->second.frozen;
}

void ParamSet::set_frozen(const std::string& name, bool frozen) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InputError("unknown parameter " + name);
    it->second.frozen = frozen;
}

std::vector<std::string> ParamSet::trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, p] : params_)
        if (!p.frozen) out.push_back(name);
    return out;
}

std::size_t ParamSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params_) n += p.value.size();
    return n;
}

std::string names::block(std::size_t i, const char* leaf) {
    return "blocks." + std::to_string(i) + "." + leaf;
}

namespace {

bool trainable(const ParamSet& p, const std::string& name) {
    return p.contains(name) && !p.is_frozen(name);
}

void require_finite(const Matrix& m, const std::string& layer) {
    if (!m.all_finite()) throw NumericError("non-finite values after " + layer);
}

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = kernels::matmul_nt(x, w);
    kernels::add_row_bias(y, b);
    return y;
}

struct BlockTape {
    Matrix input;
    Matrix activation;  // tanh(W1 h + b1)
    Matrix w1;
    Matrix w2;
};

Matrix block_forward(const ParamSet& params, std::size_t i, Matrix hidden, BlockTape* tape) {
    const auto w1_name = names::block(i, "w1");
    const auto w2_name = names::block(i, "w2");
    Matrix w1 = effective_weight(params, w1_name);
    Matrix w2 = effective_weight(params, w2_name);
    Matrix act = linear(hidden, w1, params.at(names::block(i, "b1")));
    for (auto& v : act.values()) v = std::tanh(v);
    Matrix out = linear(act, w2, params.at(names::block(i, "b2")));
    out += hidden;
    require_finite(out, "block " + std::to_string(i));
    if (tape) {
        tape->input = std::move(hidden);
        tape->activation = std::move(act);
        tape->w1 = std::move(w1);
        tape->w2 = std::move(w2);
    }
    return out;
}

// Routes dL/dW_eff to whichever of base / merged / lora factors are trainable.
void accumulate_weight_grad(const ParamSet& params, const std::string& weight, const Matrix& g,
                            Gradients& grads) {
    if (trainable(params, weight)) grads[weight] = g;
    const auto merged = weight + names::kMerged;
    if (trainable(params, merged)) grads[merged] = g;
    const auto b_name = weight + names::kLoraB;
    const auto a_name = weight + names::kLoraA;
    if (params.contains(b_name) && params.contains(a_name)) {
        if (!params.is_frozen(b_name)) grads[b_name] = kernels::matmul_nt(g, params.at(a_name));
        if (!params.is_frozen(a_name)) grads[a_name] = kernels::matmul_tn(params.at(b_name), g);
    }
}

bool block_has_trainable(const ParamSet& params, std::size_t i) {
    for (const char* leaf : {"w1", "w2"}) {
        const auto w = names::block(i, leaf);
        for (const auto& n : {w, w + names::kMerged, w + names::kLoraB, w + names::kLoraA})
            if (trainable(params, n)) return true;
    }
    return trainable(params, names::block(i, "b1")) || trainable(params, names::block(i, "b2"));
}

// Softmax cross-entropy; writes dL/dlogits for the batch mean.
double softmax_xent(const Matrix& logits, std::span<const int> labels, Matrix* dlogits) {
    const std::size_t n = logits.rows();
    const std::size_t c = logits.cols();
    if (labels.size() != n) throw InputError("label count does not match batch size");
    if (dlogits) *dlogits = Matrix(n, c);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = logits.row(i);
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c)
            throw InputError("label " + std::to_string(y) + " out of range");
        const double peak = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - peak);
        const double log_z = peak + std::log(z);
        total += log_z - row[static_cast<std::size_t>(y)];
        if (dlogits) {
            auto drow = dlogits->row(i);
            for (std::size_t j = 0; j < c; ++j)
                drow[j] = std::exp(row[j] - log_z) / static_cast<double>(n);
            drow[static_cast<std::size_t>(y)] -= 1.0 / static_cast<double>(n);
        }
    }
    return total / static_cast<double>(n);
}

LossAndGrads backprop(const ParamSet& params, const ArchSpec& arch, Matrix hidden,
                      std::size_t first_block, std::span<const int> labels,
                      const TokenBatch* tokens) {
    if (params.trainable_names().empty())
        throw NoTrainableParametersError("every parameter is frozen");
    const auto nblocks = static_cast<std::size_t>(arch.num_blocks);

    // Lowest block that needs a gradient; nothing below it is differentiated.
    const bool embed_trainable = tokens && trainable(params, names::kEmbed);
    std::size_t lowest = nblocks;
    for (std::size_t i = first_block; i < nblocks; ++i)
        if (block_has_trainable(params, i)) {
            lowest = i;
            break;
        }
    if (embed_trainable) lowest = first_block;
    if (!tokens) {
        for (std::size_t i = 0; i < first_block; ++i)
            if (block_has_trainable(params, i))
                throw InputError("block " + std::to_string(i) +
                                 " is trainable but upstream of the cached hidden states");
        if (trainable(params, names::kEmbed))
            throw InputError("embedding is trainable but upstream of the cached hidden states");
    }

    std::vector<BlockTape> tapes(nblocks);
    for (std::size_t i = first_block; i < nblocks; ++i)
        hidden = block_forward(params, i, std::move(hidden), i >= lowest ? &tapes[i] : nullptr);
    Matrix logits = head_logits(params, hidden);

    LossAndGrads out;
    Matrix dlogits;
    out.loss = softmax_xent(logits, labels, &dlogits);
    if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");

    const auto& head_w = params.at(names::kHeadW);
    if (trainable(params, names::kHeadW)) out.grads[names::kHeadW] = kernels::matmul_tn(hidden, dlogits);
    if (trainable(params, names::kHeadB)) out.grads[names::kHeadB] = kernels::column_sums(dlogits);
    if (lowest == nblocks && !embed_trainable) return out;

    Matrix dh = kernels::matmul_nt(dlogits, head_w);
    for (std::size_t i = nblocks; i-- > lowest;) {
        const auto& t = tapes[i];
        if (trainable(params, names::block(i, "b2")))
            out.grads[names::block(i, "b2")] = kernels::column_sums(dh);
        accumulate_weight_grad(params, names::block(i, "w2"), kernels::matmul_tn(dh, t.activation),
                               out.grads);
        Matrix dz = kernels::matmul(dh, t.w2);
        for (std::size_t k = 0; k < dz.size(); ++k) {
            const double a = t.activation.values()[k];
            dz.values()[k] *= 1.0 - a * a;
        }
        if (trainable(params, names::block(i, "b1")))
            out.grads[names::block(i, "b1")] = kernels::column_sums(dz);
        accumulate_weight_grad(params, names::block(i, "w1"), kernels::matmul_tn(dz, t.input),
                               out.grads);
        dh += kernels::matmul(dz, t.w1);
    }

    if (embed_trainable) {
        const auto& emb = params.at(names::kEmbed);
        Matrix g(emb.rows(), emb.cols());
        for (std::size_t s = 0; s < tokens->size(); ++s) {
            const auto& seq = (*tokens)[s];
            const double scale = 1.0 / static_cast<double>(seq.size());
            for (int tok : seq) {
                auto grow = g.row(static_cast<std::size_t>(tok));
                const auto drow = dh.row(s);
                for (std::size_t j = 0; j < grow.size(); ++j) grow[j] += scale * drow[j];
            }
        }
        out.grads[names::kEmbed] = std::move(g);
    }
    return out;
}

}  // namespace

Matrix effective_weight(const ParamSet& params, const std::string& weight_name) {
    Matrix w = params.at(weight_name);
    const auto merged = weight_name + names::kMerged;
    if (params.contains(merged)) w += params.at(merged);
    const auto b_name = weight_name + names::kLoraB;
    const auto a_name = weight_name + names::kLoraA;
    if (params.contains(b_name) && params.contains(a_name))
        w += kernels::matmul(params.at(b_name), params.at(a_name));
    return w;
}

Matrix embed_pool(const ParamSet& params, const ArchSpec& arch, TokenBatch batch) {
    if (batch.empty()) throw InputError("empty batch");
    const auto& emb = params.at(names::kEmbed);
    Matrix hidden(batch.size(), emb.cols());
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto& seq = batch[s];
        if (seq.empty()) throw InputError("sample " + std::to_string(s) + " has no tokens");
        auto out = hidden.row(s);
        for (int tok : seq) {
            if (tok < 0 || tok >= arch.vocab_size)
                throw InputError("token " + std::to_string(tok) + " outside vocabulary of size " +
                                 std::to_string(arch.vocab_size));
            const auto e = emb.row(static_cast<std::size_t>(tok));
            for (std::size_t j = 0; j < out.size(); ++j) out[j] += e[j];
        }
        const double inv = 1.0 / static_cast<double>(seq.size());
        for (auto& v : out) v *= inv;
    }
    require_finite(hidden, "embedding");
    return hidden;
}

Matrix run_blocks(const ParamSet& params, Matrix hidden, std::size_t first, std::size_t last) {
    for (std::size_t i = first; i < last; ++i)
        hidden = block_forward(params, i, std::move(hidden), nullptr);
    return hidden;
}

Matrix head_logits(const ParamSet& params, const Matrix& hidden) {
    Matrix logits = kernels::matmul(hidden, params.at(names::kHeadW));
    kernels::add_row_bias(logits, params.at(names::kHeadB));
    require_finite(logits, "network head");
    return logits;
}

Matrix forward(const ParamSet& params, const ArchSpec& arch, TokenBatch batch) {
    Matrix hidden = embed_pool(params, arch, batch);
    hidden = run_blocks(params, std::move(hidden), 0, static_cast<std::size_t>(arch.num_blocks));
    return head_logits(params, hidden);
}

double cross_entropy(const Matrix& logits, std::span<const int> labels) {
    return softmax_xent(logits, labels, nullptr);
}

LossAndGrads loss_and_grads(const ParamSet& params, const ArchSpec& arch, TokenBatch batch,
                            std::span<const int> labels) {
    Matrix hidden = embed_pool(params, arch, batch);
    return backprop(params, arch, std::move(hidden), 0, labels, &batch);
}

LossAndGrads loss_and_grads_from_hidden(const ParamSet& params, const ArchSpec& arch,
                                        const Matrix& hidden, std::size_t first_block,
                                        std::span<const int> labels) {
    return backprop(params, arch, hidden, first_block, labels, nullptr);
}

void opt_step(OptimizerState& state, ParamSet& params, const Gradients& grads) {
    const auto names = params.trainable_names();
    for (const auto& [name, g] : grads) {
        if (!params.contains(name)) throw AlignmentError("gradient for unknown parameter " + name);
        if (params.is_frozen(name)) throw AlignmentError("gradient supplied for frozen parameter " + name);
        if (!g.same_shape(params.at(name))) throw AlignmentError("gradient shape mismatch for " + name);
    }
    for (const auto& name : names)
        if (!grads.count(name)) throw AlignmentError("missing gradient for " + name);

    ++state.step;
    const auto& c = state.config;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(c.beta1, t);
    const double bias2 = 1.0 - std::pow(c.beta2, t);
    for (const auto& name : names) {
        const auto& g = grads.at(name);
        auto& w = params.mutable_value(name);
        auto [m_it, m_new] = state.first_moment.try_emplace(name, g.rows(), g.cols());
        auto [v_it, v_new] = state.second_moment.try_emplace(name, g.rows(), g.cols());
        auto m = m_it->second.values();
        auto v = v_it->second.values();
        auto wv = w.values();
        const auto gv = g.values();
        for (std::size_t k = 0; k < wv.size(); ++k) {
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gv[k];
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gv[k] * gv[k];
            const double m_hat = m[k] / bias1;
            const double v_hat = v[k] / bias2;
            wv[k] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
        }
    }
}

namespace {

constexpr char kMagic[8] = {'H', 'F', 'L', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        T v;
        std::memcpy(&v, take(sizeof(T)), sizeof(T));
        return v;
    }
    const std::uint8_t* take(std::size_t n) {
        if (pos_ + n > bytes_.size()) throw ParseError("checkpoint truncated", pos_);
        const auto* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    const auto meta = ckpt.meta.dump();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
    out.insert(out.end(), meta.begin(), meta.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, m] : ckpt.tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put<std::uint64_t>(out, m.rows());
        put<std::uint64_t>(out, m.cols());
        const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
        out.insert(out.end(), p, p + m.size() * sizeof(double));
    }
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    if (std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0)
        throw ParseError("not a checkpoint (bad magic)", 0);
    Checkpoint ckpt;
    const auto meta_len = r.get<std::uint32_t>();
    const auto* meta = reinterpret_cast<const char*>(r.take(meta_len));
    ckpt.meta = nlohmann::json::parse(std::string(meta, meta_len));
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint32_t>();
        const auto* name = reinterpret_cast<const char*>(r.take(name_len));
        const auto rows = r.get<std::uint64_t>();
        const auto cols = r.get<std::uint64_t>();
        std::vector<double> data(rows * cols);
        std::memcpy(data.data(), r.take(data.size() * sizeof(double)), data.size() * sizeof(double));
        ckpt.tensors.emplace(std::string(name, name_len), Matrix(rows, cols, std::move(data)));
    }
    if (!r.done()) throw ParseError("trailing bytes after checkpoint", 0);
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

Checkpoint to_checkpoint(const ParamSet& params, nlohmann::json meta) {
    Checkpoint ckpt;
    ckpt.meta = std::move(meta);
    auto frozen = nlohmann::json::array();
    for (const auto& [name, p] : params) {
        ckpt.tensors.emplace(name, p.value);
        if (p.frozen) frozen.push_back(name);
    }
    ckpt.meta["frozen"] = frozen;
    return ckpt;
}

ParamSet params_from_checkpoint(const Checkpoint& ckpt) {
    ParamSet params;
    for (const auto& [name, m] : ckpt.tensors) params.add(name, m);
    if (ckpt.meta.contains("frozen"))
        for (const auto& name : ckpt.meta.at("frozen")) params.set_frozen(name.get<std::string>(), true);
    return params;
}

}  // namespace hfl
