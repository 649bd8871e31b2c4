#pragma once

// Per-round objective and accuracy metrics, divergence diagnostics, the
// client-similarity heatmap, and plot-ready CSV / JSONL writers. Doubles are
// rendered with shortest round-trip precision so identical runs produce
// byte-identical files.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "cflhkd/fdc.hpp"
#include "cflhkd/fedcore.hpp"
#include "cflhkd/model.hpp"

namespace cflhkd {

struct RoundMetrics {
    int round = 0;
    std::string method;
    std::optional<double> global_acc;
    std::optional<double> mean_cluster_acc;
    std::vector<double> cluster_acc;
    std::optional<double> p_edge, p_cloud, h;
    std::optional<double> wcss;
    int n_clusters = 0;
    std::uint64_t comm_client_edge = 0;  // cumulative bytes
    std::uint64_t comm_edge_cloud = 0;   // cumulative bytes
    std::optional<double> var_p;
    std::optional<double> mean_cluster_divergence;
    std::optional<double> misclustering_rate;
    std::vector<std::vector<double>> cluster_divergence;  // not written to CSV
};

// Fraction of argmax-correct predictions.
inline double eval_accuracy(const Model& m, const LabeledDataset& data) {
    if (data.empty()) throw std::invalid_argument("eval_accuracy: empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto probs = forward(m, data.row(i));
        if (argmax_class(probs) == static_cast<std::size_t>(data.labels[i])) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Accuracy over the union of several shards; nullopt when empty.
inline std::optional<double> eval_accuracy_multi(const Model& m,
                                                 std::span<const LabeledDataset* const> parts) {
    std::size_t total = 0, correct = 0;
    for (const LabeledDataset* ds : parts) {
        for (std::size_t i = 0; i < ds->size(); ++i) {
            const auto probs = forward(m, ds->row(i));
            if (argmax_class(probs) == static_cast<std::size_t>(ds->labels[i])) ++correct;
            ++total;
        }
    }
    if (total == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(total);
}

namespace detail {

inline std::unordered_map<int, const ClientState*> client_index(
    std::span<const ClientState* const> clients) {
    std::unordered_map<int, const ClientState*> out;
    for (const ClientState* c : clients) out[c->id] = c;
    return out;
}

}  // namespace detail

struct Objectives {
    double p_edge = 0.0;
    std::optional<double> p_cloud;
    double h = 0.0;
};

// P_edge = sum_k mean_{i in C_k} L(w_ek; D_i)
// P_cloud = mean_i L(w_g; D_i)
// H = sum_k mean_{i in C_k} ||w_i - w_ek||^2
inline Objectives objectives(std::span<const ClusterState* const> clusters,
                             std::span<const ClientState* const> clients, const Model* w_g) {
    const auto by_id = detail::client_index(clients);
    Objectives out;
    for (const ClusterState* k : clusters) {
        if (k->members.empty()) throw std::invalid_argument("objectives: empty cluster");
        double loss_sum = 0.0;
        double dist_sum = 0.0;
        for (int id : k->members) {
            const ClientState* c = by_id.at(id);
            loss_sum += loss(k->model, c->train);
            dist_sum += squared_l2_distance(c->model.params, k->model.params);
        }
        const double inv = 1.0 / static_cast<double>(k->members.size());
        out.p_edge += loss_sum * inv;
        out.h += dist_sum * inv;
    }
    if (w_g != nullptr) {
        double acc = 0.0;
        for (const ClientState* c : clients) acc += loss(*w_g, c->train);
        out.p_cloud = acc / static_cast<double>(clients.size());
    }
    return out;
}

struct DivergenceDiagnostics {
    std::vector<std::vector<double>> pairwise;  // ||w_ej - w_ek||^2
    double var_p = 0.0;                          // Var(P), p_k = |D_k| / |D|
    double mean_pairwise = 0.0;                  // mean of off-diagonal entries
};

inline DivergenceDiagnostics divergence_diagnostics(
    std::span<const ClusterState* const> clusters,
    std::span<const ClientState* const> clients) {
    if (clusters.empty()) throw std::invalid_argument("divergence_diagnostics: no clusters");
    const std::size_t K = clusters.size();
    DivergenceDiagnostics out;
    out.pairwise.assign(K, std::vector<double>(K, 0.0));
    double off_sum = 0.0;
    for (std::size_t a = 0; a < K; ++a)
        for (std::size_t b = a + 1; b < K; ++b) {
            const double d2 =
                squared_l2_distance(clusters[a]->model.params, clusters[b]->model.params);
            out.pairwise[a][b] = d2;
            out.pairwise[b][a] = d2;
            off_sum += d2;
        }
    if (K > 1) out.mean_pairwise = off_sum / static_cast<double>(K * (K - 1) / 2);

    const auto by_id = detail::client_index(clients);
    std::vector<double> pk(K), Pk(K);
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) total += static_cast<double>(clusters[k]->data_size);
    double mean_p = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        pk[k] = total > 0 ? static_cast<double>(clusters[k]->data_size) / total
                          : 1.0 / static_cast<double>(K);
        double loss_sum = 0.0;
        for (int id : clusters[k]->members) loss_sum += loss(clusters[k]->model, by_id.at(id)->train);
        Pk[k] = loss_sum / static_cast<double>(clusters[k]->members.size());
        mean_p += pk[k] * Pk[k];
    }
    for (std::size_t k = 0; k < K; ++k)
        out.var_p += pk[k] * (Pk[k] - mean_p) * (Pk[k] - mean_p);
    return out;
}

// n x n client-model cosine matrix; diagonal pinned to 1.
inline std::vector<std::vector<double>> similarity_heatmap(
    std::span<const ClientState* const> clients) {
    const std::size_t n = clients.size();
    std::vector<std::vector<double>> m(n, std::vector<double>(n, 1.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double c = cosine_similarity(clients[i]->model.params, clients[j]->model.params);
            m[i][j] = c;
            m[j][i] = c;
        }
    return m;
}

// ---------------------------------------------------------------------------
// Mis-clustering rate against synthetic ground truth, via a best-matching
// assignment (Hungarian algorithm on the cluster/task confusion matrix).

namespace detail {

// Minimum-cost assignment over a square cost matrix; returns match[row] = col.
inline std::vector<int> hungarian_min_cost(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, INF);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const int i0 = p[j0];
            double delta = INF;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> match(n, -1);
    for (int j = 1; j <= n; ++j)
        if (p[j] > 0) match[p[j] - 1] = j - 1;
    return match;
}

}  // namespace detail

// 1 - (best one-to-one cluster/task agreement) / n. Requires gt_task >= 0 on
// every client; returns nullopt otherwise.
inline std::optional<double> misclustering_rate(std::span<const ClientState* const> clients) {
    if (clients.empty()) return std::nullopt;
    int max_cluster = -1, max_task = -1;
    for (const ClientState* c : clients) {
        if (c->gt_task < 0 || c->cluster_id < 0) return std::nullopt;
        max_cluster = std::max(max_cluster, c->cluster_id);
        max_task = std::max(max_task, c->gt_task);
    }
    const int s = std::max(max_cluster, max_task) + 1;
    std::vector<std::vector<double>> count(s, std::vector<double>(s, 0.0));
    for (const ClientState* c : clients) count[c->cluster_id][c->gt_task] += 1.0;
    double mx = 0.0;
    for (const auto& row : count)
        for (double v : row) mx = std::max(mx, v);
    std::vector<std::vector<double>> cost(s, std::vector<double>(s));
    for (int a = 0; a < s; ++a)
        for (int b = 0; b < s; ++b) cost[a][b] = mx - count[a][b];
    const auto match = detail::hungarian_min_cost(cost);
    double agree = 0.0;
    for (int a = 0; a < s; ++a)
        if (match[a] >= 0) agree += count[a][match[a]];
    return 1.0 - agree / static_cast<double>(clients.size());
}

// ---------------------------------------------------------------------------
// Writers

inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace detail {

inline std::string csv_opt(const std::optional<double>& v) {
    return v.has_value() ? format_double(*v) : std::string();
}

}  // namespace detail

inline constexpr const char* kMetricsCsvHeader =
    "round,method,global_acc,mean_cluster_acc,cluster_acc,p_edge,p_cloud,h,wcss,"
    "n_clusters,comm_client_edge,comm_edge_cloud,var_p,mean_cluster_divergence,"
    "misclustering_rate";

inline std::string metrics_csv_row(const RoundMetrics& r) {
    std::string acc_list;
    for (std::size_t i = 0; i < r.cluster_acc.size(); ++i) {
        if (i > 0) acc_list += ';';
        acc_list += format_double(r.cluster_acc[i]);
    }
    std::string row;
    row += std::to_string(r.round);
    row += ',';
    row += r.method;
    row += ',';
    row += detail::csv_opt(r.global_acc);
    row += ',';
    row += detail::csv_opt(r.mean_cluster_acc);
    row += ',';
    row += acc_list;
    row += ',';
    row += detail::csv_opt(r.p_edge);
    row += ',';
    row += detail::csv_opt(r.p_cloud);
    row += ',';
    row += detail::csv_opt(r.h);
    row += ',';
    row += detail::csv_opt(r.wcss);
    row += ',';
    row += std::to_string(r.n_clusters);
    row += ',';
    row += std::to_string(r.comm_client_edge);
    row += ',';
    row += std::to_string(r.comm_edge_cloud);
    row += ',';
    row += detail::csv_opt(r.var_p);
    row += ',';
    row += detail::csv_opt(r.mean_cluster_divergence);
    row += ',';
    row += detail::csv_opt(r.misclustering_rate);
    return row;
}

inline std::string metrics_csv(std::span<const RoundMetrics> rows) {
    std::string out(kMetricsCsvHeader);
    out += '\n';
    for (const auto& r : rows) {
        out += metrics_csv_row(r);
        out += '\n';
    }
    return out;
}

inline void write_metrics_csv(std::span<const RoundMetrics> rows, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_metrics_csv: cannot open " + path);
    f << metrics_csv(rows);
}

inline void write_heatmap_csv(const std::vector<std::vector<double>>& m,
                              const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_heatmap_csv: cannot open " + path);
    for (const auto& row : m) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j > 0) f << ',';
            f << format_double(row[j]);
        }
        f << '\n';
    }
}

inline void write_events_jsonl(std::span<const nlohmann::json> events, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_events_jsonl: cannot open " + path);
    for (const auto& e : events) f << e.dump() << '\n';
}

inline nlohmann::json assignment_to_json(const ClusterAssignment& assign, int round) {
    nlohmann::json members = nlohmann::json::object();
    for (std::size_t k = 0; k < assign.clusters.size(); ++k)
        members[std::to_string(k)] = assign.clusters[k];
    return nlohmann::json{{"round", round},
                          {"n_clusters", assign.clusters.size()},
                          {"wcss", assign.wcss},
                          {"members", std::move(members)}};
}

}  // namespace cflhkd
