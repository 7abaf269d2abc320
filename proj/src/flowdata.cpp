#include "hfl/flowdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "hfl/errors.hpp"
#include "hfl/rng.hpp"
#include "json.hpp"

namespace hfl {

using nlohmann::json;

void Dataset::validate(std::size_t max_input_len) const {
    if (num_classes < 2) throw ValidationError("dataset needs at least 2 classes");
    if (vocab_size < 1) throw ValidationError("vocab_size must be positive");
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.tokens.empty()) throw ValidationError("record " + std::to_string(i) + " is empty");
        if (r.tokens.size() > max_input_len)
            throw ValidationError("record " + std::to_string(i) + " exceeds max input length");
        if (r.label < 0 || r.label >= num_classes)
            throw ValidationError("record " + std::to_string(i) + " label out of range");
        for (int t : r.tokens)
            if (t < 0 || t >= vocab_size)
                throw ValidationError("record " + std::to_string(i) + " token " +
                                      std::to_string(t) + " outside vocabulary");
    }
}

std::vector<std::size_t> Dataset::class_counts() const {
    return label_histogram(records, num_classes);
}

std::vector<std::size_t> label_histogram(const std::vector<FlowRecord>& records, int num_classes) {
    std::vector<std::size_t> hist(static_cast<std::size_t>(num_classes), 0);
    for (const auto& r : records) ++hist.at(static_cast<std::size_t>(r.label));
    return hist;
}

Dataset ingest_dataset(const std::filesystem::path& path, const IngestSchema& schema) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open dataset " + path.string());

    Dataset ds;
    std::map<std::string, int> label_ids;
    int max_token = -1;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;

        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("malformed record: ") + e.what(), line_no);
        }
        if (!obj.is_object()) throw ParseError("record is not an object", line_no);
        auto tok_it = obj.find(schema.tokens_field);
        auto lab_it = obj.find(schema.label_field);
        if (tok_it == obj.end() || !tok_it->is_array())
            throw ParseError("missing integer array field '" + schema.tokens_field + "'", line_no);
        if (lab_it == obj.end() || !(lab_it->is_string() || lab_it->is_number_integer()))
            throw ParseError("missing label field '" + schema.label_field + "'", line_no);

        FlowRecord rec;
        rec.tokens.reserve(tok_it->size());
        for (const auto& t : *tok_it) {
            if (!t.is_number_integer())
                throw ParseError("token is not an integer", line_no);
            const auto v = t.get<long long>();
            if (v < 0)
                throw ValidationError("line " + std::to_string(line_no) + ": negative token " +
                                      std::to_string(v));
            if (schema.vocab_size && v >= *schema.vocab_size)
                throw ValidationError("line " + std::to_string(line_no) + ": token " +
                                      std::to_string(v) + " >= vocab_size " +
                                      std::to_string(*schema.vocab_size));
            if (v > std::numeric_limits<int>::max())
                throw ValidationError("line " + std::to_string(line_no) + ": token too large");
            rec.tokens.push_back(static_cast<int>(v));
            max_token = std::max(max_token, static_cast<int>(v));
        }
        if (rec.tokens.empty())
            throw ValidationError("line " + std::to_string(line_no) + ": empty token sequence");
        if (rec.tokens.size() > schema.max_input_len)
            throw ValidationError("line " + std::to_string(line_no) + ": sequence longer than " +
                                  std::to_string(schema.max_input_len));

        const std::string key = lab_it->is_string() ? lab_it->get<std::string>()
                                                    : std::to_string(lab_it->get<long long>());
        auto [it, inserted] = label_ids.try_emplace(key, static_cast<int>(ds.label_names.size()));
        if (inserted) ds.label_names.push_back(key);
        rec.label = it->second;
        ds.records.push_back(std::move(rec));
    }
    if (ds.records.empty()) throw EmptyDatasetError("dataset " + path.string() + " has no records");

    ds.num_classes = static_cast<int>(ds.label_names.size());
    ds.vocab_size = schema.vocab_size.value_or(max_token + 1);
    if (ds.num_classes < 2)
        throw ValidationError("dataset " + path.string() + " has fewer than 2 distinct labels");
    return ds;
}

Dataset synth_flows(int num_classes, int per_class, int vocab_size, int seq_len,
                    double separation, std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("synth_flows: num_classes must be >= 2");
    if (per_class < 1) throw ConfigError("synth_flows: per_class must be >= 1");
    if (vocab_size < num_classes) throw ConfigError("synth_flows: vocab_size < num_classes");
    if (seq_len < 1) throw ConfigError("synth_flows: seq_len must be >= 1");
    if (!(separation > 0.0 && separation <= 1.0))
        throw ConfigError("synth_flows: separation must be in (0, 1]");

    Rng rng(derive_seed(seed, {stream::kSynth}));
    const int band = vocab_size / num_classes;
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_int_distribution<int> any_token(0, vocab_size - 1);
    std::uniform_int_distribution<int> band_offset(0, band - 1);

    Dataset ds;
    ds.num_classes = num_classes;
    ds.vocab_size = vocab_size;
    ds.records.reserve(static_cast<std::size_t>(num_classes) * per_class);
    for (int c = 0; c < num_classes; ++c) {
        ds.label_names.push_back("class" + std::to_string(c));
        for (int i = 0; i < per_class; ++i) {
            FlowRecord rec;
            rec.label = c;
            rec.tokens.resize(static_cast<std::size_t>(seq_len));
            for (auto& t : rec.tokens)
                t = coin(rng) < separation ? c * band + band_offset(rng) : any_token(rng);
            ds.records.push_back(std::move(rec));
        }
    }
    std::shuffle(ds.records.begin(), ds.records.end(), rng);
    return ds;
}

namespace {

// Splits `total` into integer parts proportional to `weights` so that the
// parts sum to `total` exactly. Leftover units go to the largest fractional
// remainders, ties to the lower index.
std::vector<std::size_t> largest_remainder(const std::vector<double>& weights, std::size_t total) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> out(weights.size(), 0);
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double exact = wsum > 0 ? static_cast<double>(total) * weights[i] / wsum : 0.0;
        out[i] = static_cast<std::size_t>(std::floor(exact));
        assigned += out[i];
        rem.emplace_back(exact - std::floor(exact), i);
    }
    std::stable_sort(rem.begin(), rem.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t j = 0; assigned < total; ++j, ++assigned) ++out[rem[j % rem.size()].second];
    return out;
}

Dataset subset(const Dataset& ds, std::vector<std::size_t> idx) {
    std::sort(idx.begin(), idx.end());
    Dataset out;
    out.num_classes = ds.num_classes;
    out.vocab_size = ds.vocab_size;
    out.label_names = ds.label_names;
    out.records.reserve(idx.size());
    for (auto i : idx) out.records.push_back(ds.records[i]);
    return out;
}

}  // namespace

DatasetSplits split_dataset(const Dataset& ds, SplitRatios ratios, std::uint64_t seed) {
    if (!(ratios.train > 0 && ratios.val > 0 && ratios.test > 0))
        throw ConfigError("split ratios must be positive");
    if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
        throw ConfigError("split ratios must sum to 1");
    if (ds.size() < 10) throw ConfigError("split_dataset needs at least 10 records");

    const auto counts = ds.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c)
        if (counts[c] < 3)
            throw StratificationError("class " + std::to_string(c) + " has " +
                                      std::to_string(counts[c]) + " records; need >= 3");

    const std::size_t n = ds.size();
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.val));
    const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.test));
    std::vector<double> w(counts.begin(), counts.end());
    const auto val_quota = largest_remainder(w, n_val);
    const auto test_quota = largest_remainder(w, n_test);

    std::vector<std::vector<std::size_t>> by_class(counts.size());
    for (std::size_t i = 0; i < n; ++i)
        by_class[static_cast<std::size_t>(ds.records[i].label)].push_back(i);

    Rng rng(derive_seed(seed, {stream::kSplit}));
    std::vector<std::size_t> train_idx, val_idx, test_idx;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& members = by_class[c];
        if (val_quota[c] + test_quota[c] > members.size())
            throw StratificationError("class " + std::to_string(c) +
                                      " too small for the requested ratios");
        std::shuffle(members.begin(), members.end(), rng);
        auto it = members.begin();
        val_idx.insert(val_idx.end(), it, it + static_cast<long>(val_quota[c]));
        it += static_cast<long>(val_quota[c]);
        test_idx.insert(test_idx.end(), it, it + static_cast<long>(test_quota[c]));
        it += static_cast<long>(test_quota[c]);
        train_idx.insert(train_idx.end(), it, members.end());
    }
    return {subset(ds, std::move(train_idx)), subset(ds, std::move(val_idx)),
            subset(ds, std::move(test_idx))};
}

namespace {

std::vector<double> dirichlet_draw(Rng& rng, std::size_t k, double sigma) {
    std::gamma_distribution<double> gamma(sigma, 1.0);
    std::vector<double> p(k);
    double sum = 0.0;
    for (auto& v : p) sum += (v = gamma(rng));
    if (sum <= 0.0) {
        // Every gamma variate underflowed; put the mass on one client.
        std::uniform_int_distribution<std::size_t> pick(0, k - 1);
        std::fill(p.begin(), p.end(), 0.0);
        p[pick(rng)] = 1.0;
        return p;
    }
    for (auto& v : p) v /= sum;
    return p;
}

}  // namespace

std::vector<ClientShard> dirichlet_partition(const Dataset& train, int num_clients, double sigma,
                                             std::uint64_t seed) {
    if (num_clients < 1) throw ConfigError("dirichlet_partition: K must be >= 1");
    if (!(sigma > 0.0)) throw ConfigError("dirichlet_partition: sigma must be > 0");
    const auto k = static_cast<std::size_t>(num_clients);
    if (train.size() < k)
        throw PartitionError("cannot give each of " + std::to_string(k) + " clients a record from " +
                             std::to_string(train.size()));

    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(train.num_classes));
    for (std::size_t i = 0; i < train.size(); ++i)
        by_class[static_cast<std::size_t>(train.records[i].label)].push_back(i);
    for (std::size_t c = 0; c < by_class.size(); ++c)
        if (by_class[c].empty())
            throw PartitionError("class " + std::to_string(c) + " has no training records");

    Rng rng(derive_seed(seed, {stream::kPartition}));
    std::vector<std::vector<std::size_t>> assignment;
    constexpr int kMaxAttempts = 100;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        assignment.assign(k, {});
        for (const auto& members : by_class) {
            auto shuffled = members;
            std::shuffle(shuffled.begin(), shuffled.end(), rng);
            const auto share = largest_remainder(dirichlet_draw(rng, k, sigma), shuffled.size());
            auto it = shuffled.begin();
            for (std::size_t client = 0; client < k; ++client) {
                assignment[client].insert(assignment[client].end(), it,
                                          it + static_cast<long>(share[client]));
                it += static_cast<long>(share[client]);
            }
        }
        if (std::none_of(assignment.begin(), assignment.end(),
                         [](const auto& a) { return a.empty(); }))
            break;
    }
    // Still-empty clients take one record from the current largest shard.
    for (auto& target : assignment) {
        if (!target.empty()) continue;
        auto donor = std::max_element(assignment.begin(), assignment.end(),
                                      [](const auto& a, const auto& b) { return a.size() < b.size(); });
        std::sort(donor->begin(), donor->end());
        target.push_back(donor->back());
        donor->pop_back();
    }

    std::vector<ClientShard> shards(k);
    for (std::size_t client = 0; client < k; ++client) {
        auto& idx = assignment[client];
        std::sort(idx.begin(), idx.end());
        auto& shard = shards[client];
        shard.client_id = static_cast<int>(client);
        shard.record_indices = idx;
        for (auto i : idx) shard.records.push_back(train.records[i]);
        shard.label_histogram = label_histogram(shard.records, train.num_classes);
    }
    return shards;
}

double label_entropy(const ClientShard& shard) {
    const std::size_t total = std::accumulate(shard.label_histogram.begin(),
                                              shard.label_histogram.end(), std::size_t{0});
    if (total == 0) throw DomainError("label_entropy of an empty shard");
    double h = 0.0;
    for (auto count : shard.label_histogram) {
        if (count == 0) continue;
        const double q = static_cast<double>(count) / static_cast<double>(total);
        h -= q * std::log2(q);
    }
    return std::max(h, 0.0);
}

double label_skew(const std::vector<ClientShard>& shards) {
    if (shards.empty()) return 0.0;
    double acc = 0.0;
    for (const auto& s : shards) {
        const auto peak = *std::max_element(s.label_histogram.begin(), s.label_histogram.end());
        acc += static_cast<double>(peak) / static_cast<double>(s.size());
    }
    return acc / static_cast<double>(shards.size());
}

void write_partition_manifest(const std::filesystem::path& path,
                              const std::vector<ClientShard>& shards) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path.string());
    for (const auto& s : shards)
        out << json{{"client_id", s.client_id}, {"record_indices", s.record_indices}}.dump() << '\n';
}

std::vector<std::vector<std::size_t>> read_partition_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    std::vector<std::vector<std::size_t>> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            auto obj = json::parse(line);
            const auto id = obj.at("client_id").get<std::size_t>();
            if (out.size() <= id) out.resize(id + 1);
            out[id] = obj.at("record_indices").get<std::vector<std::size_t>>();
        } catch (const json::exception& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    return out;
}

void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot write " + path.string());
    for (const auto& r : ds.records) {
        json label = ds.label_names.empty() ? json(r.label)
                                            : json(ds.label_names[static_cast<std::size_t>(r.label)]);
        out << json{{"tokens", r.tokens}, {"label", label}}.dump() << '\n';
    }
}

}  // namespace hfl
