#pragma once

// Synthetic task generation, Dirichlet non-IID partitioning, concept-drift
// transforms, and label histograms. Tasks are Gaussian mixtures (one mean per
// class, shared isotropic covariance); per-cluster rotation and translation
// of the mean constellation creates inter-cluster heterogeneity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cflhkd/dataset.hpp"
#include "cflhkd/model.hpp"
#include "cflhkd/numerics.hpp"

namespace cflhkd {

struct partition_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One cluster-level generative task.
struct ClusterTask {
    std::vector<Vec64> class_means;  // one mean per class
    double noise_sigma = 1.0;

    std::size_t input_dim() const { return class_means.empty() ? 0 : class_means[0].size(); }
    std::size_t num_classes() const { return class_means.size(); }

    // Uniform labels, x = mean[label] + sigma * N(0, I).
    LabeledDataset sample(std::size_t count, SeededRng& rng) const {
        LabeledDataset ds(input_dim());
        ds.reserve(count);
        std::vector<double> x(input_dim());
        for (std::size_t s = 0; s < count; ++s) {
            const auto label = static_cast<std::int32_t>(rng.uniform_below(num_classes()));
            const Vec64& mu = class_means[static_cast<std::size_t>(label)];
            for (std::size_t d = 0; d < x.size(); ++d) x[d] = mu[d] + noise_sigma * rng.normal();
            ds.add_row(x, label);
        }
        return ds;
    }
};

namespace detail {

// Rotate every mean in-place by a fixed angle in dim/2 random disjoint planes.
inline void rotate_constellation(std::vector<Vec64>& means, double angle, SeededRng& rng) {
    if (means.empty()) return;
    const std::size_t dim = means[0].size();
    const auto perm = rng.permutation(dim);
    for (std::size_t p = 0; p + 1 < dim; p += 2) {
        const std::size_t i = perm[p];
        const std::size_t j = perm[p + 1];
        const double theta = (rng.uniform01() < 0.5 ? -angle : angle);
        const double c = std::cos(theta);
        const double s = std::sin(theta);
        for (Vec64& m : means) {
            const double mi = m[i];
            const double mj = m[j];
            m[i] = c * mi - s * mj;
            m[j] = s * mi + c * mj;
        }
    }
}

inline Vec64 random_unit_vector(std::size_t dim, SeededRng& rng) {
    Vec64 v(dim);
    double norm = 0.0;
    while (norm == 0.0) {
        for (std::size_t d = 0; d < dim; ++d) v[d] = rng.normal();
        norm = l2_norm(v);
    }
    v *= 1.0 / norm;
    return v;
}

}  // namespace detail

// K Gaussian-mixture tasks. Task 0 uses the base constellation; every other
// task rotates it by `per_cluster_sep` radians in random planes and shifts it
// by shift_scale * class_radius along a random direction. A negative
// shift_scale couples the shift to the rotation angle (0.3 * sep).
inline std::vector<ClusterTask> generate_cluster_tasks(std::size_t num_clusters,
                                                       double per_cluster_sep,
                                                       const ModelSpec& spec, SeededRng& rng,
                                                       double class_radius = 3.0,
                                                       double noise_sigma = 1.0,
                                                       double shift_scale = -1.0) {
    spec.validate();
    if (num_clusters < 1)
        throw std::invalid_argument("generate_cluster_tasks: num_clusters must be >= 1");
    if (per_cluster_sep < 0)
        throw std::invalid_argument("generate_cluster_tasks: separation must be >= 0");

    std::vector<Vec64> base(spec.num_classes);
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        Vec64 dir = detail::random_unit_vector(spec.input_dim, rng);
        dir *= class_radius;
        base[c] = std::move(dir);
    }

    if (shift_scale < 0) shift_scale = 0.3 * per_cluster_sep;
    std::vector<ClusterTask> tasks(num_clusters);
    for (std::size_t k = 0; k < num_clusters; ++k) {
        std::vector<Vec64> means = base;
        if (k > 0) {
            detail::rotate_constellation(means, per_cluster_sep, rng);
            Vec64 shift = detail::random_unit_vector(spec.input_dim, rng);
            shift *= shift_scale * class_radius;
            for (Vec64& m : means) m += shift;
        }
        tasks[k].class_means = std::move(means);
        tasks[k].noise_sigma = noise_sigma;
    }
    return tasks;
}

// ---------------------------------------------------------------------------
// Dirichlet partitioning

struct PartitionConfig {
    std::size_t num_clients = 1;
    double dirichlet_alpha = 0.5;
    std::size_t samples_min = 50;
    std::size_t samples_max = 200;
    double validation_fraction = 0.1;

    void validate() const {
        if (num_clients < 1) throw std::invalid_argument("PartitionConfig: num_clients must be >= 1");
        if (!(dirichlet_alpha > 0)) throw std::invalid_argument("PartitionConfig: alpha must be > 0");
        if (samples_min < 1 || samples_max < samples_min)
            throw std::invalid_argument("PartitionConfig: bad samples range");
        if (!(validation_fraction > 0) || validation_fraction > 0.5)
            throw std::invalid_argument("PartitionConfig: validation_fraction must be in (0, 0.5]");
    }
};

struct ClientShard {
    LabeledDataset train, val;
    std::vector<std::size_t> pool_rows;  // pool indices backing train+val, draw order
};

// Each client's class proportions are drawn from Dirichlet(alpha * 1). Shards
// are disjoint subsets of the pool; depleted classes are renormalized away.
inline std::vector<ClientShard> dirichlet_partition(const LabeledDataset& pool,
                                                    std::size_t num_classes,
                                                    const PartitionConfig& cfg, SeededRng& rng) {
    cfg.validate();
    if (pool.size() < cfg.num_clients * cfg.samples_min)
        throw partition_error("dirichlet_partition: pool too small for requested shards");

    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto y = pool.labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
            throw std::out_of_range("dirichlet_partition: label out of range");
        by_class[static_cast<std::size_t>(y)].push_back(i);
    }
    std::vector<std::size_t> next(num_classes, 0);  // per-class consumption cursor

    std::vector<ClientShard> shards(cfg.num_clients);
    for (std::size_t c = 0; c < cfg.num_clients; ++c) {
        const std::size_t target =
            cfg.samples_min + rng.uniform_below(cfg.samples_max - cfg.samples_min + 1);
        const auto props = rng.dirichlet(cfg.dirichlet_alpha, num_classes);

        LabeledDataset shard(pool.input_dim);
        std::vector<std::size_t> rows;
        rows.reserve(target);
        for (std::size_t s = 0; s < target; ++s) {
            double avail_mass = 0.0;
            for (std::size_t k = 0; k < num_classes; ++k)
                if (next[k] < by_class[k].size()) avail_mass += props[k];
            if (avail_mass <= 0.0) {
                // all classes with remaining pool rows have zero proportion;
                // fall back to unweighted choice among non-empty classes
                std::vector<std::size_t> nonempty;
                for (std::size_t k = 0; k < num_classes; ++k)
                    if (next[k] < by_class[k].size()) nonempty.push_back(k);
                if (nonempty.empty()) break;
                const std::size_t k = nonempty[rng.uniform_below(nonempty.size())];
                const std::size_t row = by_class[k][next[k]++];
                shard.add_row(pool.row(row), pool.labels[row]);
                rows.push_back(row);
                continue;
            }
            const double u = rng.uniform01() * avail_mass;
            double acc = 0.0;
            std::size_t chosen = num_classes;
            for (std::size_t k = 0; k < num_classes; ++k) {
                if (next[k] >= by_class[k].size()) continue;
                acc += props[k];
                if (u < acc) {
                    chosen = k;
                    break;
                }
            }
            if (chosen == num_classes) {  // rounding at the top end
                for (std::size_t k = num_classes; k-- > 0;)
                    if (next[k] < by_class[k].size()) {
                        chosen = k;
                        break;
                    }
            }
            const std::size_t row = by_class[chosen][next[chosen]++];
            shard.add_row(pool.row(row), pool.labels[row]);
            rows.push_back(row);
        }
        if (shard.size() < cfg.samples_min)
            throw partition_error("dirichlet_partition: pool depleted before minimum shard size");

        // validation split: the tail of the (already randomized) draw order
        std::size_t val_n = static_cast<std::size_t>(
            std::floor(cfg.validation_fraction * static_cast<double>(shard.size())));
        if (val_n == 0 && shard.size() >= 2) val_n = 1;
        const std::size_t train_n = shard.size() - val_n;
        ClientShard& out = shards[c];
        out.train = LabeledDataset(pool.input_dim);
        out.val = LabeledDataset(pool.input_dim);
        out.train.reserve(train_n);
        out.val.reserve(val_n);
        for (std::size_t i = 0; i < shard.size(); ++i) {
            if (i < train_n)
                out.train.add_row(shard.row(i), shard.labels[i]);
            else
                out.val.add_row(shard.row(i), shard.labels[i]);
        }
        out.pool_rows = std::move(rows);
    }
    return shards;
}

// ---------------------------------------------------------------------------
// Concept drift

enum class DriftKind { label_permutation, label_subset_switch, feature_shift };

struct DriftEvent {
    int round = 1;
    DriftKind kind = DriftKind::label_permutation;
    std::vector<int> affected_clients;

    // label_permutation
    std::vector<std::int32_t> label_perm;
    // label_subset_switch: pairwise swap from[i] <-> to[i]
    std::vector<std::int32_t> from_subset, to_subset;
    // feature_shift: explicit offset, or a random direction scaled by
    // feature_shift_scale when offset is empty
    std::vector<double> feature_offset;
    double feature_shift_scale = 0.0;

    void validate(std::size_t num_classes) const {
        if (round < 1) throw std::invalid_argument("DriftEvent: round must be >= 1");
        if (affected_clients.empty())
            throw std::invalid_argument("DriftEvent: affected set must be non-empty");
        switch (kind) {
            case DriftKind::label_permutation: {
                if (label_perm.size() != num_classes)
                    throw std::invalid_argument("DriftEvent: permutation size mismatch");
                std::vector<bool> seen(num_classes, false);
                for (auto v : label_perm) {
                    if (v < 0 || static_cast<std::size_t>(v) >= num_classes || seen[v])
                        throw std::invalid_argument("DriftEvent: not a permutation");
                    seen[v] = true;
                }
                break;
            }
            case DriftKind::label_subset_switch: {
                if (from_subset.empty() || from_subset.size() != to_subset.size())
                    throw std::invalid_argument("DriftEvent: subset size mismatch");
                std::vector<bool> seen(num_classes, false);
                for (std::size_t i = 0; i < from_subset.size(); ++i) {
                    for (auto v : {from_subset[i], to_subset[i]}) {
                        if (v < 0 || static_cast<std::size_t>(v) >= num_classes || seen[v])
                            throw std::invalid_argument("DriftEvent: overlapping or bad subsets");
                        seen[v] = true;
                    }
                }
                break;
            }
            case DriftKind::feature_shift:
                if (feature_offset.empty() && feature_shift_scale == 0.0)
                    throw std::invalid_argument("DriftEvent: feature shift has no magnitude");
                break;
        }
    }

    // Full label map implied by the event (identity for feature_shift).
    std::vector<std::int32_t> label_map(std::size_t num_classes) const {
        std::vector<std::int32_t> map(num_classes);
        std::iota(map.begin(), map.end(), 0);
        if (kind == DriftKind::label_permutation) {
            map = label_perm;
        } else if (kind == DriftKind::label_subset_switch) {
            for (std::size_t i = 0; i < from_subset.size(); ++i) {
                map[static_cast<std::size_t>(from_subset[i])] = to_subset[i];
                map[static_cast<std::size_t>(to_subset[i])] = from_subset[i];
            }
        }
        return map;
    }
};

// Default subset switch: first half of the label range swaps with the second
// half (0-4 <-> 5-9 for ten classes).
inline DriftEvent make_subset_switch(int round, std::vector<int> clients,
                                     std::size_t num_classes) {
    DriftEvent e;
    e.round = round;
    e.kind = DriftKind::label_subset_switch;
    e.affected_clients = std::move(clients);
    const std::size_t half = num_classes / 2;
    for (std::size_t i = 0; i < half; ++i) {
        e.from_subset.push_back(static_cast<std::int32_t>(i));
        e.to_subset.push_back(static_cast<std::int32_t>(i + half));
    }
    return e;
}

// Resolve the additive offset of a feature_shift event; random-direction
// shifts consume the rng so train/val shards can share one offset.
inline std::vector<double> resolve_feature_offset(const DriftEvent& e, std::size_t input_dim,
                                                  SeededRng& rng) {
    if (!e.feature_offset.empty()) {
        if (e.feature_offset.size() != input_dim)
            throw dimension_error("resolve_feature_offset: offset length mismatch");
        return e.feature_offset;
    }
    Vec64 dir = detail::random_unit_vector(input_dim, rng);
    std::vector<double> offset(input_dim);
    for (std::size_t d = 0; d < input_dim; ++d) offset[d] = e.feature_shift_scale * dir[d];
    return offset;
}

inline void apply_drift_to_dataset(LabeledDataset& ds, const DriftEvent& e,
                                   std::size_t num_classes,
                                   std::span<const double> feature_offset = {}) {
    switch (e.kind) {
        case DriftKind::label_permutation:
        case DriftKind::label_subset_switch: {
            const auto map = e.label_map(num_classes);
            for (auto& y : ds.labels) {
                if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
                    throw std::out_of_range("apply_drift: label out of range");
                y = map[static_cast<std::size_t>(y)];
            }
            break;
        }
        case DriftKind::feature_shift: {
            if (feature_offset.size() != ds.input_dim)
                throw dimension_error("apply_drift: offset length mismatch");
            for (std::size_t i = 0; i < ds.size(); ++i) {
                auto row = ds.row(i);
                for (std::size_t d = 0; d < ds.input_dim; ++d) row[d] += feature_offset[d];
            }
            break;
        }
    }
}

// ---------------------------------------------------------------------------

inline Histogram label_histogram(const LabeledDataset& ds, std::size_t num_classes) {
    Histogram h(num_classes);
    for (auto y : ds.labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
            throw std::out_of_range("label_histogram: label out of range");
        h.add(static_cast<std::size_t>(y));
    }
    return h;
}

// ---------------------------------------------------------------------------
// Columnar binary export/import so runs can be replayed without regeneration.
// Layout: magic, version, rows, input_dim, features (f64 LE, row-major),
// labels (i32 LE).

namespace detail {
inline constexpr std::uint32_t kDatasetMagic = 0x444C4643u;  // "CFLD"
inline constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace detail

inline std::vector<std::uint8_t> serialize_dataset(const LabeledDataset& ds) {
    std::vector<std::uint8_t> out;
    out.reserve(24 + 8 * ds.features.size() + 4 * ds.labels.size());
    detail::put_u32(out, detail::kDatasetMagic);
    detail::put_u32(out, detail::kDatasetVersion);
    detail::put_u64(out, ds.size());
    detail::put_u32(out, static_cast<std::uint32_t>(ds.input_dim));
    for (double f : ds.features) detail::put_u64(out, std::bit_cast<std::uint64_t>(f));
    for (auto y : ds.labels) detail::put_u32(out, static_cast<std::uint32_t>(y));
    return out;
}

inline LabeledDataset deserialize_dataset(std::span<const std::uint8_t> in) {
    std::size_t pos = 0;
    if (detail::get_u32(in, pos) != detail::kDatasetMagic)
        throw std::runtime_error("deserialize_dataset: bad magic");
    if (detail::get_u32(in, pos) != detail::kDatasetVersion)
        throw std::runtime_error("deserialize_dataset: unsupported version");
    const std::uint64_t rows = detail::get_u64(in, pos);
    LabeledDataset ds(detail::get_u32(in, pos));
    ds.reserve(rows);
    ds.features.resize(rows * ds.input_dim);
    for (auto& f : ds.features) f = std::bit_cast<double>(detail::get_u64(in, pos));
    ds.labels.resize(rows);
    for (auto& y : ds.labels) y = static_cast<std::int32_t>(detail::get_u32(in, pos));
    return ds;
}

inline void save_dataset(const LabeledDataset& ds, const std::string& path) {
    const auto bytes = serialize_dataset(ds);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_dataset: cannot open " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

inline LabeledDataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_dataset: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return deserialize_dataset(bytes);
}

}  // namespace cflhkd
