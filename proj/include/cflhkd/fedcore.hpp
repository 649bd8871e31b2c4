#pragma once

// The four learning steps of the protocol: local training (L-phase),
// data-size-weighted edge aggregation (E-phase), divergence-penalized dynamic
// cloud aggregation (A-phase), and global-guided cluster refinement.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "cflhkd/data.hpp"
#include "cflhkd/dataset.hpp"
#include "cflhkd/model.hpp"
#include "cflhkd/numerics.hpp"

namespace cflhkd {

struct degenerate_weights_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ClientState {
    int id = 0;
    LabeledDataset train, val;
    Model model;
    Vec64 velocity;
    Histogram histogram{1};
    int cluster_id = -1;
    int gt_task = -1;  // generating task, when synthetic ground truth exists

    std::int64_t data_size() const { return static_cast<std::int64_t>(train.size()); }
};

struct ClusterState {
    int id = 0;
    std::vector<int> members;  // client ids, ascending
    Model model;
    std::int64_t data_size = 0;     // sum of member train sizes
    double val_accuracy = 0.0;      // alpha_k, refreshed before each A-phase
};

struct GlobalState {
    Model model;
    int round = 0;
};

struct RefineConfig {
    double lambda0 = 0.1;
    double refine_lr = 0.01;
    int refine_steps = 5;
    double loss_term_weight = 1.0;  // diagnostics switch; 1 in normal operation

    void validate() const {
        if (lambda0 < 0) throw std::invalid_argument("RefineConfig: lambda0 must be >= 0");
        if (!(refine_lr > 0)) throw std::invalid_argument("RefineConfig: refine_lr must be > 0");
        if (refine_steps < 0) throw std::invalid_argument("RefineConfig: refine_steps must be >= 0");
        if (loss_term_weight < 0)
            throw std::invalid_argument("RefineConfig: loss_term_weight must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// L-phase

// Mini-batch SGD over a seeded shuffle, `epochs` passes. Returns the mean
// epoch loss (measured per batch before the step). The optional proximal
// reference adds 2*mu*(w - ref) to every batch gradient.
inline double local_train(ClientState& c, int epochs, std::size_t batch_size,
                          const SgdConfig& sgd, SeededRng& rng,
                          const Vec64* prox_ref = nullptr, double prox_mu = 0.0) {
    if (c.train.empty()) throw std::invalid_argument("local_train: empty train shard");
    if (batch_size == 0) throw std::invalid_argument("local_train: batch_size must be >= 1");
    if (epochs < 0) throw std::invalid_argument("local_train: epochs must be >= 0");
    if (epochs == 0) return 0.0;
    if (c.velocity.size() != c.model.params.size()) c.velocity = Vec64(c.model.params.size());

    const std::size_t n = c.train.size();
    double loss_sum = 0.0;
    for (int e = 0; e < epochs; ++e) {
        const auto order = rng.permutation(n);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < n; start += batch_size) {
            const std::size_t len = std::min(batch_size, n - start);
            const std::span<const std::size_t> idx(order.data() + start, len);
            epoch_loss += loss(c.model, c.train, idx) * static_cast<double>(len);
            Vec64 g = grad(c.model, c.train, idx);
            if (prox_ref != nullptr && prox_mu != 0.0) {
                if (prox_ref->size() != g.size())
                    throw dimension_error("local_train: proximal reference layout mismatch");
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += 2.0 * prox_mu * (c.model.params[i] - (*prox_ref)[i]);
            }
            sgd_step(c.model, g, sgd, c.velocity);
        }
        loss_sum += epoch_loss / static_cast<double>(n);
    }
    return loss_sum / static_cast<double>(epochs);
}

// ---------------------------------------------------------------------------
// Aggregation

// Weighted average over models, weights normalized by their sum. Single
// accumulation path shared by every aggregation flavor so equal weights give
// bitwise-equal results.
inline Model weighted_model_mean(std::span<const Model* const> models,
                                 std::span<const double> weights) {
    if (models.empty()) throw std::invalid_argument("weighted_model_mean: empty model list");
    if (models.size() != weights.size())
        throw dimension_error("weighted_model_mean: weight count mismatch");
    const ModelSpec& spec = models[0]->spec;
    std::vector<const Vec64*> vs(models.size());
    for (std::size_t k = 0; k < models.size(); ++k) {
        if (!(models[k]->spec == spec))
            throw dimension_error("weighted_model_mean: model spec mismatch");
        vs[k] = &models[k]->params;
    }
    return Model{spec, weighted_mean(vs, weights)};
}

// w_ek = sum_i (|D_i| / |D_k|) * w_i over the given members.
inline Model edge_aggregate(const ClusterState& cluster,
                            std::span<const ClientState* const> members) {
    if (members.empty()) throw std::invalid_argument("edge_aggregate: empty member list");
    double total = 0.0;
    for (const ClientState* m : members) total += static_cast<double>(m->data_size());
    if (!(total > 0)) throw std::invalid_argument("edge_aggregate: no member data");
    std::vector<const Model*> models(members.size());
    std::vector<double> weights(members.size());
    for (std::size_t k = 0; k < members.size(); ++k) {
        if (!(members[k]->model.spec == cluster.model.spec))
            throw dimension_error("edge_aggregate: model spec mismatch");
        models[k] = &members[k]->model;
        weights[k] = static_cast<double>(members[k]->data_size()) / total;
    }
    return weighted_model_mean(models, weights);
}

// w_g = sum_k (|D_k| / |D|) * w_ek -- the plain hierarchical-FedAvg rule.
inline Model cloud_aggregate_naive(std::span<const ClusterState* const> clusters) {
    if (clusters.empty()) throw std::invalid_argument("cloud_aggregate_naive: empty cluster list");
    double total = 0.0;
    for (const ClusterState* c : clusters) total += static_cast<double>(c->data_size);
    if (!(total > 0)) throw std::invalid_argument("cloud_aggregate_naive: no cluster data");
    std::vector<const Model*> models(clusters.size());
    std::vector<double> weights(clusters.size());
    for (std::size_t k = 0; k < clusters.size(); ++k) {
        models[k] = &clusters[k]->model;
        weights[k] = static_cast<double>(clusters[k]->data_size) / total;
    }
    return weighted_model_mean(models, weights);
}

// rho_k = |D_k| * alpha_k * exp(-lambda * ||w_ek - w_g||^2), normalized. The
// distance is taken against the previous round's global model; the caller
// falls back to naive size weights when every numerator vanishes.
inline std::vector<double> compute_rho(std::span<const ClusterState* const> clusters,
                                       const Model& w_g_prev, double lambda) {
    if (clusters.empty()) throw std::invalid_argument("compute_rho: empty cluster list");
    if (lambda < 0) throw std::invalid_argument("compute_rho: lambda must be >= 0");
    std::vector<double> rho(clusters.size());
    double sum = 0.0;
    for (std::size_t k = 0; k < clusters.size(); ++k) {
        const ClusterState& c = *clusters[k];
        if (!(c.model.spec == w_g_prev.spec))
            throw dimension_error("compute_rho: model spec mismatch");
        const double d2 = squared_l2_distance(c.model.params, w_g_prev.params);
        rho[k] = static_cast<double>(c.data_size) * c.val_accuracy * std::exp(-lambda * d2);
        sum += rho[k];
    }
    if (!(sum > 0.0) || !std::isfinite(sum))
        throw degenerate_weights_error("compute_rho: all numerators zero");
    for (double& r : rho) r /= sum;
    return rho;
}

// w_g = sum_k rho_k * w_ek.
inline Model cloud_aggregate_dynamic(std::span<const ClusterState* const> clusters,
                                     std::span<const double> rho) {
    if (clusters.empty()) throw std::invalid_argument("cloud_aggregate_dynamic: empty cluster list");
    if (clusters.size() != rho.size())
        throw dimension_error("cloud_aggregate_dynamic: weight count mismatch");
    std::vector<const Model*> models(clusters.size());
    for (std::size_t k = 0; k < clusters.size(); ++k) models[k] = &clusters[k]->model;
    return weighted_model_mean(models, rho);
}

// lambda_k = lambda0 / (1 + div), div = 1 - cos(w_ek, w_g) in [0, 2].
inline double divergence_aware_lambda(const Model& w_ek, const Model& w_g, double lambda0) {
    if (!(w_ek.spec == w_g.spec))
        throw dimension_error("divergence_aware_lambda: model spec mismatch");
    const double div = 1.0 - cosine_similarity(w_ek.params, w_g.params);
    return lambda0 / (1.0 + div);
}

// ---------------------------------------------------------------------------
// Global-guided refinement
//
// refine_steps plain gradient-descent steps on
//   loss_term_weight * L(w; batch) + lambda_k * ||w - w_g||^2
// with lambda_k from divergence_aware_lambda and batches drawn uniformly
// (with replacement) from the pooled member data.

inline Model refine_cluster(const ClusterState& cluster, const Model& w_g,
                            const RefineConfig& cfg,
                            std::span<const LabeledDataset* const> member_data,
                            std::size_t batch_size, SeededRng& rng) {
    cfg.validate();
    if (cfg.refine_steps == 0) return cluster.model;
    if (batch_size == 0) throw std::invalid_argument("refine_cluster: batch_size must be >= 1");
    std::size_t total = 0;
    std::vector<std::size_t> prefix(member_data.size());
    for (std::size_t j = 0; j < member_data.size(); ++j) {
        prefix[j] = total;
        total += member_data[j]->size();
    }
    if (total == 0) throw std::invalid_argument("refine_cluster: no cluster data");

    Model w = cluster.model;
    const double lambda_k = divergence_aware_lambda(cluster.model, w_g, cfg.lambda0);
    LabeledDataset batch(w.spec.input_dim);
    batch.reserve(batch_size);
    for (int step = 0; step < cfg.refine_steps; ++step) {
        batch.features.clear();
        batch.labels.clear();
        for (std::size_t b = 0; b < batch_size; ++b) {
            const std::size_t r = rng.uniform_below(total);
            std::size_t j = member_data.size() - 1;
            while (prefix[j] > r) --j;
            const LabeledDataset& ds = *member_data[j];
            const std::size_t row = r - prefix[j];
            batch.add_row(ds.row(row), ds.labels[row]);
        }
        Vec64 g = grad(w, batch);
        if (cfg.loss_term_weight != 1.0) g *= cfg.loss_term_weight;
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += 2.0 * lambda_k * (w.params[i] - w_g.params[i]);
        for (std::size_t i = 0; i < w.params.size(); ++i)
            w.params[i] -= cfg.refine_lr * g[i];
        w.params.ensure_finite("refine_cluster");
    }
    return w;
}

// Drift transform applied to a client: both shards change, the histogram is
// recomputed.
inline void apply_drift(ClientState& c, const DriftEvent& e, std::size_t num_classes,
                        SeededRng& rng) {
    e.validate(num_classes);
    std::vector<double> offset;
    if (e.kind == DriftKind::feature_shift)
        offset = resolve_feature_offset(e, c.train.input_dim, rng);
    apply_drift_to_dataset(c.train, e, num_classes, offset);
    apply_drift_to_dataset(c.val, e, num_classes, offset);
    c.histogram = label_histogram(c.train, num_classes);
}

}  // namespace cflhkd
