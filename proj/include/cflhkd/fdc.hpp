#pragma once

// Federated Dynamic Clustering: hybrid affinity scores, sorted threshold
// clustering in affinity-row space, variance-monitored merge/split, and
// JSD-based drift detection.
//
// The affinity score is distance-oriented: gamma * JSD + (1 - gamma) *
// (1 - cos)/2, so identical clients score 0 and "dist <= delta" is coherent.
// Each client is embedded as its affinity-matrix row; centroids are mean
// member rows and all distances are L2 in that row space.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "cflhkd/fedcore.hpp"
#include "cflhkd/numerics.hpp"

namespace cflhkd {

struct FdcConfig {
    double gamma = 0.5;        // affinity trade-off
    double delta = 0.7;        // assignment threshold
    double phi = 0.5;          // drift threshold
    int recluster_every = 10;  // scheduled C-phase interval

    void validate() const {
        if (gamma < 0 || gamma > 1) throw std::invalid_argument("FdcConfig: gamma must be in [0,1]");
        if (!(delta > 0)) throw std::invalid_argument("FdcConfig: delta must be > 0");
        if (!(phi > 0) || !(phi < 1)) throw std::invalid_argument("FdcConfig: phi must be in (0,1)");
        if (recluster_every < 1)
            throw std::invalid_argument("FdcConfig: recluster_every must be >= 1");
    }
};

inline double affinity(const ClientState& ci, const ClientState& cj, double gamma) {
    if (gamma < 0 || gamma > 1) throw std::invalid_argument("affinity: gamma must be in [0,1]");
    const double data_term = jsd(ci.histogram, cj.histogram);
    const double cos = cosine_similarity(ci.model.params, cj.model.params);
    return gamma * data_term + (1.0 - gamma) * (1.0 - cos) / 2.0;
}

class AffinityMatrix {
public:
    AffinityMatrix() = default;
    explicit AffinityMatrix(std::vector<int> client_ids)
        : ids_(std::move(client_ids)), n_(ids_.size()), a_(n_ * n_, 0.0) {
        for (std::size_t i = 0; i < n_; ++i) index_[ids_[i]] = i;
    }

    std::size_t size() const { return n_; }
    const std::vector<int>& client_ids() const { return ids_; }

    double at(std::size_t i, std::size_t j) const { return a_[i * n_ + j]; }
    void set(std::size_t i, std::size_t j, double v) { a_[i * n_ + j] = v; }
    std::span<const double> row(std::size_t i) const { return {a_.data() + i * n_, n_}; }

    std::size_t index_of(int client_id) const {
        const auto it = index_.find(client_id);
        if (it == index_.end()) throw std::out_of_range("AffinityMatrix: unknown client id");
        return it->second;
    }

    double row_norm(std::size_t i) const {
        double acc = 0.0;
        for (double v : row(i)) acc += v * v;
        return std::sqrt(acc);
    }

private:
    std::vector<int> ids_;
    std::size_t n_ = 0;
    std::vector<double> a_;
    std::unordered_map<int, std::size_t> index_;
};

inline AffinityMatrix build_affinity_matrix(std::span<const ClientState* const> clients,
                                            double gamma) {
    if (clients.empty()) throw std::invalid_argument("build_affinity_matrix: no clients");
    std::vector<int> ids(clients.size());
    for (std::size_t i = 0; i < clients.size(); ++i) ids[i] = clients[i]->id;
    AffinityMatrix A(std::move(ids));
    for (std::size_t i = 0; i < clients.size(); ++i) {
        A.set(i, i, 0.0);  // self-affinity under the distance orientation
        for (std::size_t j = i + 1; j < clients.size(); ++j) {
            const double v = affinity(*clients[i], *clients[j], gamma);
            A.set(i, j, v);
            A.set(j, i, v);
        }
    }
    return A;
}

// Refresh one client's row/column after its data or model changed.
inline void update_affinity_row(AffinityMatrix& A, std::span<const ClientState* const> clients,
                                std::size_t idx, double gamma) {
    if (clients.size() != A.size())
        throw dimension_error("update_affinity_row: client count mismatch");
    for (std::size_t j = 0; j < clients.size(); ++j) {
        if (j == idx) continue;
        const double v = affinity(*clients[idx], *clients[j], gamma);
        A.set(idx, j, v);
        A.set(j, idx, v);
    }
}

// Clients sorted by descending affinity-row L2 norm; ties by ascending id.
inline std::vector<int> rank_clients(const AffinityMatrix& A) {
    std::vector<std::size_t> idx(A.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<double> norms(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) norms[i] = A.row_norm(i);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (norms[a] != norms[b]) return norms[a] > norms[b];
        return A.client_ids()[a] < A.client_ids()[b];
    });
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = A.client_ids()[idx[i]];
    return out;
}

struct ClusterAssignment {
    std::vector<int> client_ids;                   // matrix ordering
    std::vector<std::vector<int>> clusters;        // member client ids, ascending
    std::vector<std::vector<double>> centroids;    // mean member rows
    double wcss = 0.0;

    std::size_t num_clusters() const { return clusters.size(); }

    int cluster_of(int client_id) const {
        for (std::size_t k = 0; k < clusters.size(); ++k)
            for (int id : clusters[k])
                if (id == client_id) return static_cast<int>(k);
        return -1;
    }
};

namespace detail {

inline double row_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

inline std::vector<double> mean_row(const AffinityMatrix& A, std::span<const int> member_ids) {
    std::vector<double> mu(A.size(), 0.0);
    for (int id : member_ids) {
        const auto row = A.row(A.index_of(id));
        for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += row[i];
    }
    const double inv = 1.0 / static_cast<double>(member_ids.size());
    for (double& v : mu) v *= inv;
    return mu;
}

inline double cluster_ss(const AffinityMatrix& A, std::span<const int> member_ids) {
    const auto mu = mean_row(A, member_ids);
    double ss = 0.0;
    for (int id : member_ids) {
        const double d = row_distance(A.row(A.index_of(id)), mu);
        ss += d * d;
    }
    return ss;
}

// Greedy sorted threshold pass over `order` (client ids). Running-mean
// centroids; a client joins the nearest centroid when within delta, else
// seeds a new cluster. Ties go to the lowest cluster index.
inline std::vector<std::vector<int>> greedy_cluster(const AffinityMatrix& A,
                                                    std::span<const int> order, double delta) {
    std::vector<std::vector<int>> members;
    std::vector<std::vector<double>> centroids;
    for (int id : order) {
        const auto row = A.row(A.index_of(id));
        std::size_t best = members.size();
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < members.size(); ++k) {
            const double d = row_distance(row, centroids[k]);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        if (best < members.size() && best_d <= delta) {
            const double s = static_cast<double>(members[best].size());
            auto& mu = centroids[best];
            for (std::size_t i = 0; i < mu.size(); ++i)
                mu[i] = (mu[i] * s + row[i]) / (s + 1.0);
            members[best].push_back(id);
        } else {
            members.emplace_back(1, id);
            centroids.emplace_back(row.begin(), row.end());
        }
    }
    for (auto& m : members) std::sort(m.begin(), m.end());
    return members;
}

inline ClusterAssignment finalize_assignment(const AffinityMatrix& A,
                                             std::vector<std::vector<int>> members) {
    ClusterAssignment out;
    out.client_ids = A.client_ids();
    out.clusters = std::move(members);
    out.centroids.reserve(out.clusters.size());
    for (const auto& m : out.clusters) out.centroids.push_back(mean_row(A, m));
    double total = 0.0;
    for (const auto& m : out.clusters) total += cluster_ss(A, m);
    out.wcss = total;
    return out;
}

}  // namespace detail

inline ClusterAssignment threshold_cluster(const AffinityMatrix& A, std::span<const int> order,
                                           double delta) {
    if (order.size() != A.size())
        throw dimension_error("threshold_cluster: order must cover every client");
    if (!(delta > 0)) throw std::invalid_argument("threshold_cluster: delta must be > 0");
    return detail::finalize_assignment(A, detail::greedy_cluster(A, order, delta));
}

// Sum over clusters of squared member distances to the mean member row.
inline double wcss(const ClusterAssignment& assign, const AffinityMatrix& A) {
    double total = 0.0;
    for (const auto& m : assign.clusters) total += detail::cluster_ss(A, m);
    return total;
}

inline double cluster_variance(const AffinityMatrix& A, std::span<const int> member_ids) {
    return detail::cluster_ss(A, member_ids) / static_cast<double>(member_ids.size());
}

struct VarianceEnforceStats {
    int splits = 0;
    int merges = 0;
};

// Split any cluster with Var_k > delta^2 by re-running threshold clustering
// over its members, then greedily merge cluster pairs whose merged variance
// stays within delta^2. Output satisfies Var_k <= delta^2 for every cluster.
inline ClusterAssignment enforce_variance(const ClusterAssignment& assign,
                                          const AffinityMatrix& A, double delta,
                                          VarianceEnforceStats* stats = nullptr) {
    const double limit = delta * delta;
    std::vector<std::vector<int>> members;
    for (const auto& m : assign.clusters) {
        if (cluster_variance(A, m) <= limit) {
            members.push_back(m);
            continue;
        }
        if (stats) ++stats->splits;
        // rank members among themselves, then re-run the threshold pass
        std::vector<int> order = m;
        std::vector<double> norms(order.size());
        for (std::size_t i = 0; i < order.size(); ++i)
            norms[i] = A.row_norm(A.index_of(order[i]));
        std::vector<std::size_t> pos(order.size());
        for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
        std::sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) {
            if (norms[a] != norms[b]) return norms[a] > norms[b];
            return order[a] < order[b];
        });
        std::vector<int> ranked(order.size());
        for (std::size_t i = 0; i < pos.size(); ++i) ranked[i] = order[pos[i]];
        for (auto& part : detail::greedy_cluster(A, ranked, delta))
            members.push_back(std::move(part));
    }

    bool merged = true;
    while (merged) {
        merged = false;
        for (std::size_t a = 0; a < members.size() && !merged; ++a) {
            for (std::size_t b = a + 1; b < members.size() && !merged; ++b) {
                std::vector<int> joint = members[a];
                joint.insert(joint.end(), members[b].begin(), members[b].end());
                std::sort(joint.begin(), joint.end());
                if (detail::cluster_ss(A, joint) / static_cast<double>(joint.size()) <= limit) {
                    members[a] = std::move(joint);
                    members.erase(members.begin() + static_cast<std::ptrdiff_t>(b));
                    if (stats) ++stats->merges;
                    merged = true;
                }
            }
        }
    }
    return detail::finalize_assignment(A, std::move(members));
}

// True iff jsd(old, new) exceeds phi strictly.
inline bool detect_drift(const Histogram& old_hist, const Histogram& new_hist, double phi) {
    return jsd(old_hist, new_hist) > phi;
}

struct ReassignOutcome {
    int destination = -1;   // cluster index after the call
    bool created_new = false;
    bool moved = false;      // membership actually changed
    int dissolved = -1;      // index of a cluster removed by the move, or -1
};

// Move a (drift-flagged) client to the nearest centroid within delta, or to a
// fresh singleton cluster. On joining an existing cluster the client adopts
// that cluster's model. `clusters` must run parallel to `assign.clusters`.
inline ReassignOutcome reassign_client(ClientState& c, ClusterAssignment& assign,
                                       const AffinityMatrix& A, double delta,
                                       std::vector<ClusterState>& clusters) {
    if (clusters.size() != assign.clusters.size())
        throw std::invalid_argument("reassign_client: cluster list out of sync");
    const std::size_t idx = A.index_of(c.id);
    const auto row = A.row(idx);

    ReassignOutcome out;
    const int old_k = assign.cluster_of(c.id);

    // detach
    if (old_k >= 0) {
        auto& m = assign.clusters[static_cast<std::size_t>(old_k)];
        m.erase(std::remove(m.begin(), m.end(), c.id), m.end());
        auto& cm = clusters[static_cast<std::size_t>(old_k)].members;
        cm.erase(std::remove(cm.begin(), cm.end(), c.id), cm.end());
        clusters[static_cast<std::size_t>(old_k)].data_size -= c.data_size();
        if (m.empty()) {
            assign.clusters.erase(assign.clusters.begin() + old_k);
            assign.centroids.erase(assign.centroids.begin() + old_k);
            clusters.erase(clusters.begin() + old_k);
            out.dissolved = old_k;
        } else {
            assign.centroids[static_cast<std::size_t>(old_k)] =
                detail::mean_row(A, assign.clusters[static_cast<std::size_t>(old_k)]);
        }
    }

    std::size_t best = assign.clusters.size();
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < assign.clusters.size(); ++k) {
        const double d = detail::row_distance(row, assign.centroids[k]);
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }

    if (best < assign.clusters.size() && best_d <= delta) {
        auto& m = assign.clusters[best];
        m.insert(std::upper_bound(m.begin(), m.end(), c.id), c.id);
        assign.centroids[best] = detail::mean_row(A, m);
        auto& dst = clusters[best];
        dst.members.insert(std::upper_bound(dst.members.begin(), dst.members.end(), c.id), c.id);
        dst.data_size += c.data_size();
        c.model = dst.model;  // initialize with the new cluster model
        c.velocity = Vec64(c.model.params.size());
        out.destination = static_cast<int>(best);
    } else {
        assign.clusters.emplace_back(1, c.id);
        assign.centroids.emplace_back(row.begin(), row.end());
        ClusterState fresh;
        fresh.id = static_cast<int>(clusters.size());
        fresh.members = {c.id};
        fresh.model = c.model;
        fresh.data_size = c.data_size();
        clusters.push_back(std::move(fresh));
        out.destination = static_cast<int>(assign.clusters.size() - 1);
        out.created_new = true;
    }
    for (std::size_t k = 0; k < clusters.size(); ++k) clusters[k].id = static_cast<int>(k);
    assign.wcss = wcss(assign, A);
    // a singleton that dissolves and reforms as a singleton, or a client that
    // rejoins the cluster it left, leaves the partition unchanged
    if (out.dissolved >= 0)
        out.moved = !out.created_new;
    else
        out.moved = out.created_new || out.destination != old_k;
    c.cluster_id = out.destination;
    return out;
}

}  // namespace cflhkd
