#include "hfl/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <limits>
#include <numeric>
#include <optional>

#include "hfl/errors.hpp"
#include "hfl/rng.hpp"

namespace hfl {

void FederationConfig::validate() const {
    if (num_clients < 1) throw ConfigError("clients: must be >= 1");
    if (clients_per_round < 1 || clients_per_round > num_clients)
        throw ConfigError("per_round: must be in [1, clients] (got " + std::to_string(clients_per_round) +
                          " with clients=" + std::to_string(num_clients) + ")");
    if (rounds < 1) throw ConfigError("rounds: must be >= 1");
    if (local_epochs < 0) throw ConfigError("local_epochs: must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("lr: must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
    if (!(sigma > 0.0)) throw ConfigError("sigma: must be > 0");
    if (workers < 1) throw ConfigError("workers: must be >= 1");
    if (patience < 0) throw ConfigError("patience: must be >= 0");
    if (vram_profile.empty()) throw ConfigError("vram: profile is empty");
    for (double v : vram_profile)
        if (!(v > 0.0)) throw ConfigError("vram: budgets must be > 0");
    rank_policy.validate();
}

void ModelSpec::validate() const {
    if (source_depth < 2) throw ConfigError("depth: must be >= 2");
    if (d_model < 1) throw ConfigError("d_model: must be >= 1");
    try {
        index.validate(static_cast<std::size_t>(source_depth));
    } catch (const ValidationError& e) {
        throw ConfigError(std::string("index: ") + e.what());
    }
    if (split_point == 0 || split_point >= index.indices.size())
        throw ConfigError("split_point: must leave extractor and classifier non-empty (retained depth " +
                          std::to_string(index.indices.size()) + ")");
}

std::size_t ConfusionMatrix::total() const {
    std::size_t n = 0;
    for (const auto& row : counts) n = std::accumulate(row.begin(), row.end(), n);
    return n;
}

ClassificationMetrics metrics_from_confusion(const ConfusionMatrix& cm) {
    const std::size_t c = cm.num_classes();
    ClassificationMetrics m;
    m.confusion = cm;
    m.per_class_pr.assign(c, 0.0);
    m.per_class_rc.assign(c, 0.0);
    m.per_class_f1.assign(c, 0.0);
    std::size_t trace = 0;
    for (std::size_t k = 0; k < c; ++k) {
        const std::size_t tp = cm.counts[k][k];
        trace += tp;
        std::size_t actual = 0, predicted = 0;
        for (std::size_t j = 0; j < c; ++j) {
            actual += cm.counts[k][j];
            predicted += cm.counts[j][k];
        }
        const double pr = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
        const double rc = actual ? static_cast<double>(tp) / static_cast<double>(actual) : 0.0;
        m.per_class_pr[k] = pr;
        m.per_class_rc[k] = rc;
        m.per_class_f1[k] = pr + rc > 0.0 ? 2.0 * pr * rc / (pr + rc) : 0.0;
        if (actual > 0) m.classes_present.push_back(static_cast<int>(k));
    }
    const std::size_t total = cm.total();
    m.acc = total ? static_cast<double>(trace) / static_cast<double>(total) : 0.0;
    if (!m.classes_present.empty()) {
        for (int k : m.classes_present) {
            m.macro_pr += m.per_class_pr[static_cast<std::size_t>(k)];
            m.macro_rc += m.per_class_rc[static_cast<std::size_t>(k)];
            m.macro_f1 += m.per_class_f1[static_cast<std::size_t>(k)];
        }
        const auto n = static_cast<double>(m.classes_present.size());
        m.macro_pr /= n;
        m.macro_rc /= n;
        m.macro_f1 /= n;
    }
    return m;
}

ClassificationMetrics evaluate_predictions(std::span<const int> truth, std::span<const int> predicted,
                                           int num_classes) {
    if (truth.size() != predicted.size()) throw InputError("prediction count does not match labels");
    ConfusionMatrix cm(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < truth.size(); ++i)
        ++cm.counts.at(static_cast<std::size_t>(truth[i])).at(static_cast<std::size_t>(predicted[i]));
    return metrics_from_confusion(cm);
}

namespace {

std::vector<int> argmax_rows(const Matrix& logits) {
    std::vector<int> out(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) out[i] = static_cast<int>(argmax_row(logits.row(i)));
    return out;
}

std::vector<std::vector<int>> token_lists(const std::vector<FlowRecord>& records) {
    std::vector<std::vector<int>> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.tokens);
    return out;
}

}  // namespace

ClassificationMetrics evaluate(const PartitionedModel& model, const Dataset& dataset) {
    if (dataset.empty()) throw InputError("evaluate: empty dataset");
    std::vector<int> truth, predicted;
    for (const auto& r : dataset.records) {
        truth.push_back(r.label);
        predicted.push_back(predict(model, r));
    }
    return evaluate_predictions(truth, predicted, model.num_classes());
}

bool check_convergence(const std::vector<double>& val_f1_history, int patience, double min_delta,
                       int max_rounds) {
    if (val_f1_history.empty()) throw InputError("check_convergence: empty history");
    if (static_cast<int>(val_f1_history.size()) >= max_rounds) return true;
    if (patience <= 0) return false;
    double best = val_f1_history.front();
    int since_best = 0;
    for (std::size_t i = 1; i < val_f1_history.size(); ++i) {
        if (val_f1_history[i] > best + min_delta) {
            best = val_f1_history[i];
            since_best = 0;
        } else {
            ++since_best;
        }
    }
    return since_best >= patience;
}

std::vector<int> sample_clients(int num_clients, int per_round, int round, std::uint64_t master_seed) {
    if (per_round < 1 || per_round > num_clients)
        throw ConfigError("per_round: must be in [1, " + std::to_string(num_clients) + "]");
    std::vector<int> ids(static_cast<std::size_t>(num_clients));
    std::iota(ids.begin(), ids.end(), 0);
    if (per_round < num_clients) {
        Rng rng(derive_seed(master_seed, {stream::kSample, static_cast<std::uint64_t>(round)}));
        for (int i = 0; i < per_round; ++i) {
            std::uniform_int_distribution<int> pick(i, num_clients - 1);
            std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(pick(rng))]);
        }
        ids.resize(static_cast<std::size_t>(per_round));
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

CachedSplit cache_hidden(const PartitionedModel& model, const std::vector<FlowRecord>& records) {
    CachedSplit out;
    const auto tokens = token_lists(records);
    out.hidden = model.extract(tokens);
    for (const auto& r : records) out.labels.push_back(r.label);
    return out;
}

ClientUpdate client_update(const PartitionedModel& global, const Matrix& hidden,
                           std::span<const int> labels, int client_id, std::size_t rank,
                           const FederationConfig& config, int round) {
    if (hidden.rows() == 0) throw InputError("client " + std::to_string(client_id) + " has an empty shard");
    if (hidden.rows() != labels.size()) throw InputError("hidden/label count mismatch");

    const auto points = adapt_points(global);
    const auto round_tag = static_cast<std::uint64_t>(round);
    const auto client_tag = static_cast<std::uint64_t>(client_id);
    AdapterSet layout = init_adapter_set(points, rank, derive_seed(config.seed, {client_tag, round_tag}), client_id);

    // Classifier side only: the extractor's output is already in `hidden`.
    ParamSet params;
    const auto split_point = global.split_point();
    for (std::size_t j = 0; j < global.classifier.size(); ++j) {
        const auto& b = global.classifier[j];
        const auto i = split_point + j;
        params.add(names::block(i, "w1"), b.w1, true);
        params.add(names::block(i, "b1"), b.b1, true);
        params.add(names::block(i, "w2"), b.w2, true);
        params.add(names::block(i, "b2"), b.b2, true);
    }
    for (const auto& [name, delta] : global.merged) params.add(name + names::kMerged, delta, true);
    params.add(names::kHeadW, global.head.weight);
    params.add(names::kHeadB, global.head.bias);
    install_adapters(params, layout);

    const ArchSpec arch = global.arch();
    OptimizerState opt(AdamConfig{config.learning_rate});
    ClientUpdate update;
    update.client_id = client_id;
    update.sample_count = hidden.rows();

    std::vector<std::size_t> order(hidden.rows());
    const auto batch = static_cast<std::size_t>(config.batch_size);
    for (int epoch = 0; epoch < config.local_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(config.seed, {stream::kShuffle, client_tag, round_tag,
                                          static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += batch) {
            const std::size_t n = std::min(batch, order.size() - start);
            Matrix xb(n, hidden.cols());
            std::vector<int> yb(n);
            for (std::size_t r = 0; r < n; ++r) {
                const auto src = hidden.row(order[start + r]);
                std::copy(src.begin(), src.end(), xb.row(r).begin());
                yb[r] = labels[order[start + r]];
            }
            LossAndGrads lg;
            try {
                lg = loss_and_grads_from_hidden(params, arch, xb, split_point, yb);
            } catch (const NumericError& e) {
                throw NumericError("round " + std::to_string(round) + ", client " + std::to_string(client_id) +
                                   ", batch " + std::to_string(batches) + ": " + e.what());
            }
            opt_step(opt, params, lg.grads);
            loss_sum += lg.loss;
            ++batches;
        }
        update.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    }

    update.adapters = collect_adapters(params, layout);
    update.head_delta = {params.at(names::kHeadW) - global.head.weight,
                         params.at(names::kHeadB) - global.head.bias};
    return update;
}

ClientUpdate client_update(const PartitionedModel& global, const ClientShard& shard, std::size_t rank,
                           const FederationConfig& config, int round) {
    const auto cached = cache_hidden(global, shard.records);
    return client_update(global, cached.hidden, cached.labels, shard.client_id, rank, config, round);
}

PartitionedModel transform_model(const ModelSpec& spec, int vocab_size, int num_classes, std::uint64_t seed) {
    spec.validate();
    Backbone source = init_backbone(vocab_size, spec.d_model, spec.source_depth, seed);
    Backbone compressed = layer_extract(source, spec.index);
    PartitionedModel pm = split(attach_network_head(std::move(compressed), num_classes, seed), spec.split_point);
    pm.source_depth = static_cast<std::size_t>(spec.source_depth);
    pm.index = spec.index;
    return pm;
}

FederationState setup_federation(const FederationConfig& config, const ModelSpec& spec, DatasetSplits splits) {
    config.validate();
    spec.validate();
    FederationState state;
    state.config = config;
    state.spec = spec;
    const auto& train = splits.train;
    state.global = transform_model(spec, train.vocab_size, train.num_classes, config.seed);
    state.shards = dirichlet_partition(train, config.num_clients, config.sigma, config.seed);
    state.ranks = assign_ranks(resource_vectors(state.shards, config.vram_profile), config.rank_policy);

    std::size_t max_rank = std::numeric_limits<std::size_t>::max();
    for (const auto& p : adapt_points(state.global)) max_rank = std::min({max_rank, p.rows, p.cols});
    for (const auto& r : state.ranks)
        if (static_cast<std::size_t>(r.rank) > max_rank)
            throw ConfigError("rmax: client " + std::to_string(r.client_id) + " gets rank " +
                              std::to_string(r.rank) + " but adapted weights only allow rank <= " +
                              std::to_string(max_rank));
    if (config.strategy == Strategy::Naive)
        for (const auto& r : state.ranks)
            if (r.rank != state.ranks.front().rank)
                throw ConfigError("strategy: naive averaging needs equal ranks (set rmin = rmax)");

    state.val = std::move(splits.val);
    state.test = std::move(splits.test);
    for (const auto& shard : state.shards) state.shard_cache.push_back(cache_hidden(state.global, shard.records));
    state.val_cache = cache_hidden(state.global, state.val.records);
    state.test_cache = cache_hidden(state.global, state.test.records);
    return state;
}

void run_round(FederationState& state, int round_index) {
    const auto start = std::chrono::steady_clock::now();
    const auto& config = state.config;
    const auto clients = sample_clients(config.num_clients, config.clients_per_round, round_index, config.seed);

    // Every sampled client trains against the same broadcast snapshot.
    const PartitionedModel& broadcast = state.global;
    std::vector<std::optional<ClientUpdate>> results(clients.size());
    std::vector<std::exception_ptr> failures(clients.size());
    const auto n = static_cast<long long>(clients.size());
#pragma omp parallel for num_threads(config.workers) schedule(dynamic, 1)
    for (long long slot = 0; slot < n; ++slot) {
        const auto s = static_cast<std::size_t>(slot);
        const auto id = static_cast<std::size_t>(clients[s]);
        try {
            results[s] = client_update(broadcast, state.shard_cache[id].hidden, state.shard_cache[id].labels,
                                       clients[s], static_cast<std::size_t>(state.ranks[id].rank), config,
                                       round_index);
        } catch (...) {
            failures[s] = std::current_exception();
        }
    }
    // Barrier: nothing is aggregated unless every sampled client delivered.
    for (std::size_t s = 0; s < failures.size(); ++s) {
        if (!failures[s]) continue;
        try {
            std::rethrow_exception(failures[s]);
        } catch (const NumericError& e) {
            throw NumericError("round " + std::to_string(round_index) + " aborted: " + e.what());
        } catch (const std::exception& e) {
            throw Error("round " + std::to_string(round_index) + " aborted, client " +
                        std::to_string(clients[s]) + ": " + e.what());
        }
    }

    std::vector<AdapterSet> adapters;
    std::vector<NetworkHead> heads;
    std::vector<std::size_t> counts;
    for (auto& r : results) {
        adapters.push_back(std::move(r->adapters));
        heads.push_back(std::move(r->head_delta));
        counts.push_back(r->sample_count);
    }
    const auto weights = compute_weights(counts);
    const auto delta = aggregate(config.strategy, adapters, weights);
    const auto head_delta = aggregate_head(heads, weights);

    RoundMetrics metrics;
    metrics.round = round_index;
    metrics.clients = clients;
    PartitionedModel next = state.global;
    for (const auto& [target, d] : delta) {
        auto it = next.merged.find(target);
        if (it == next.merged.end())
            next.merged.emplace(target, d);
        else
            it->second = merge_delta(it->second, d);
        metrics.delta_fro[target] = frobenius_norm(d);
    }
    next.head.weight = merge_delta(next.head.weight, head_delta.weight);
    next.head.bias = merge_delta(next.head.bias, head_delta.bias);
    state.global = std::move(next);

    const auto num_classes = state.global.num_classes();
    metrics.test = evaluate_predictions(state.test_cache.labels,
                                        argmax_rows(state.global.classify(state.test_cache.hidden)), num_classes);
    metrics.val_macro_f1 = evaluate_predictions(state.val_cache.labels,
                                                argmax_rows(state.global.classify(state.val_cache.hidden)),
                                                num_classes)
                               .macro_f1;
    metrics.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    state.history.push_back(std::move(metrics));
}

void run_federation(FederationState& state, const RoundCallback& on_round) {
    std::vector<double> val_history;
    for (int round = 0; round < state.config.rounds; ++round) {
        run_round(state, round);
        val_history.push_back(state.history.back().val_macro_f1);
        if (on_round) on_round(state, state.history.back());
        if (state.converged_round < 0 &&
            check_convergence(val_history, state.config.patience, state.config.min_delta, state.config.rounds)) {
            state.converged_round = round;
            if (state.config.stop_on_convergence) break;
        }
    }
}

}  // namespace hfl
