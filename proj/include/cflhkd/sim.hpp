#pragma once

// Round-driven orchestration of the full protocol (local training, edge
// aggregation, dynamic cloud aggregation, refinement, dynamic clustering)
// plus the baseline methods and communication-cost accounting.
//
// Determinism: every stochastic step draws from a child stream keyed by
// (purpose, round, entity), derived from the run seed. Two runs with the same
// config produce byte-identical outputs, and methods that share a phase
// consume identical streams for it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cflhkd/data.hpp"
#include "cflhkd/fdc.hpp"
#include "cflhkd/fedcore.hpp"
#include "cflhkd/model.hpp"
#include "cflhkd/report.hpp"

namespace cflhkd {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Method { cflhkd, fedavg, fedprox, hierfavg, static_cfl, standalone };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::cflhkd: return "CFLHKD";
        case Method::fedavg: return "FedAvg";
        case Method::fedprox: return "FedProx";
        case Method::hierfavg: return "HierFAVG";
        case Method::static_cfl: return "StaticCFL";
        case Method::standalone: return "Standalone";
    }
    return "?";
}

inline Method parse_method(std::string s) {
    std::string lower;
    for (char c : s) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (lower == "cflhkd") return Method::cflhkd;
    if (lower == "fedavg") return Method::fedavg;
    if (lower == "fedprox") return Method::fedprox;
    if (lower == "hierfavg") return Method::hierfavg;
    if (lower == "staticcfl" || lower == "static_cfl") return Method::static_cfl;
    if (lower == "standalone") return Method::standalone;
    throw config_error("unknown method: " + s);
}

// Synthetic data shape. Ground-truth tasks are balanced contiguous client
// blocks; each block's pool is partitioned with Dirichlet label skew.
struct DataConfig {
    int tasks = 4;
    double separation = 0.8;   // rotation angle in radians
    double task_shift = -1.0;  // translation in units of class_radius; <0 couples to separation
    double class_radius = 3.0;
    double noise_sigma = 1.0;
    std::size_t samples_min = 50;
    std::size_t samples_max = 200;
    double validation_fraction = 0.1;
    double dirichlet_alpha = 0.5;
    // data-quality imbalance: the last `label_noise_tasks` tasks get labels
    // flipped to a uniform class with probability `label_noise`
    double label_noise = 0.0;
    int label_noise_tasks = 0;

    void validate() const {
        if (tasks < 1) throw config_error("data: tasks must be >= 1");
        if (separation < 0) throw config_error("data: separation must be >= 0");
        if (!(class_radius > 0) || !(noise_sigma > 0))
            throw config_error("data: class_radius and noise_sigma must be > 0");
        if (label_noise < 0 || label_noise > 1)
            throw config_error("data: label_noise must be in [0, 1]");
        if (label_noise_tasks < 0 || label_noise_tasks > tasks)
            throw config_error("data: label_noise_tasks must be in [0, tasks]");
        PartitionConfig pc{1, dirichlet_alpha, samples_min, samples_max, validation_fraction};
        pc.validate();
    }
};

struct SimConfig {
    std::uint64_t seed = 1;
    int rounds = 100;
    int clients = 100;
    int initial_clusters = 4;  // used by the fixed-random-cluster methods
    double participation = 0.3;
    Method method = Method::cflhkd;
    int local_epochs = 5;
    std::size_t batch_size = 32;
    SgdConfig sgd;
    RefineConfig refine;
    double rho_lambda = 0.1;
    FdcConfig fdc;
    int edge_every = 0;   // 0 = method default
    int cloud_every = 0;  // 0 = method default
    double fedprox_mu = 0.01;
    ModelSpec model{10, 10, 0};
    DataConfig data;
    std::vector<DriftEvent> drift;
    double target_accuracy = 0.0;  // 0 = not tracked

    // test hooks
    bool force_alpha_one = false;       // alpha_k == 1 in the A-phase
    bool freeze_clusters = false;       // fixed random clusters, no FDC
    bool overwrite_clusters = false;    // cloud round overwrites cluster models
    int freeze_training_after = 0;      // 0 = never

    bool has_edge_tier() const {
        return method == Method::cflhkd || method == Method::hierfavg ||
               method == Method::static_cfl;
    }
    bool has_cloud() const {
        return method == Method::cflhkd || method == Method::hierfavg ||
               method == Method::fedavg || method == Method::fedprox;
    }

    int resolved_edge_every() const {
        if (edge_every > 0) return edge_every;
        switch (method) {
            case Method::cflhkd: return 10;
            case Method::hierfavg: return 5;
            case Method::static_cfl: return 10;
            default: return 0;
        }
    }
    int resolved_cloud_every() const {
        if (cloud_every > 0) return cloud_every;
        switch (method) {
            case Method::cflhkd: return 30;
            case Method::hierfavg: return 20;
            case Method::fedavg:
            case Method::fedprox: return 1;
            default: return 0;
        }
    }

    void validate() const {
        if (rounds < 0) throw config_error("rounds must be >= 0");
        if (clients < 1) throw config_error("clients must be >= 1");
        if (initial_clusters < 1) throw config_error("initial_clusters must be >= 1");
        if (!(participation > 0) || participation > 1)
            throw config_error("participation must be in (0, 1]");
        if (local_epochs < 0) throw config_error("local_epochs must be >= 0");
        if (batch_size < 1) throw config_error("batch_size must be >= 1");
        if (rho_lambda < 0) throw config_error("rho_lambda must be >= 0");
        if (fedprox_mu < 0) throw config_error("fedprox_mu must be >= 0");
        if (freeze_training_after < 0) throw config_error("freeze_training_after must be >= 0");
        if (has_edge_tier() && resolved_edge_every() < 1)
            throw config_error("edge_every must be >= 1");
        if (has_cloud() && resolved_cloud_every() < 1)
            throw config_error("cloud_every must be >= 1");
        sgd.validate();
        refine.validate();
        fdc.validate();
        model.validate();
        data.validate();
        for (const auto& e : drift) {
            e.validate(model.num_classes);
            for (int c : e.affected_clients)
                if (c < 0 || c >= clients) throw config_error("drift: client id out of range");
        }
    }
};

// ---------------------------------------------------------------------------
// Communication ledger. Two links (client<->edge, edge<->cloud), two
// directions. Single-tier methods talk to the cloud directly, so their client
// traffic lands on the edge_cloud link; that matches reporting communication
// cost as "data transferred to/from the cloud".

enum class Link { client_edge = 0, edge_cloud = 1 };
enum class Dir { upload = 0, download = 1 };

struct CommLedger {
    struct Counter {
        std::uint64_t model_units = 0;
        std::uint64_t bytes = 0;
    };
    Counter counters[2][2];  // [link][dir]

    struct RoundRow {
        int round = 0;
        std::uint64_t client_edge_bytes = 0;  // cumulative, both directions
        std::uint64_t edge_cloud_bytes = 0;
    };
    std::vector<RoundRow> per_round;

    const Counter& at(Link l, Dir d) const {
        return counters[static_cast<int>(l)][static_cast<int>(d)];
    }
    std::uint64_t link_bytes(Link l) const {
        return at(l, Dir::upload).bytes + at(l, Dir::download).bytes;
    }
    std::uint64_t link_units(Link l) const {
        return at(l, Dir::upload).model_units + at(l, Dir::download).model_units;
    }

    void snapshot_round(int round) {
        per_round.push_back({round, link_bytes(Link::client_edge), link_bytes(Link::edge_cloud)});
    }
};

inline void account_comm(CommLedger& ledger, Dir dir, Link link, std::uint64_t model_bytes) {
    if (model_bytes == 0) throw std::invalid_argument("account_comm: model_bytes must be > 0");
    auto& c = ledger.counters[static_cast<int>(link)][static_cast<int>(dir)];
    c.model_units += 1;
    c.bytes += model_bytes;
}

// ceil(fraction * n) distinct clients, drawn without replacement.
inline std::vector<int> sample_participants(int n, double fraction, SeededRng& rng) {
    if (!(fraction > 0) || fraction > 1)
        throw std::invalid_argument("sample_participants: fraction must be in (0, 1]");
    const auto count = static_cast<std::size_t>(
        std::ceil(fraction * static_cast<double>(n)));
    auto perm = rng.permutation(static_cast<std::size_t>(n));
    std::vector<int> out(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(out.begin(), out.end());
    return out;
}

struct RunArtifacts {
    SimConfig config;
    std::vector<RoundMetrics> metrics;
    std::vector<nlohmann::json> events;
    std::vector<ClientState> clients;
    std::vector<ClusterState> clusters;
    std::optional<Model> global_model;
    std::optional<ClusterAssignment> assignment;
    CommLedger ledger;
    std::optional<int> rounds_to_target;
};

namespace detail {

// RNG stream purposes
inline constexpr std::uint64_t kStreamInit = 1;
inline constexpr std::uint64_t kStreamData = 2;
inline constexpr std::uint64_t kStreamInitCluster = 3;
inline constexpr std::uint64_t kStreamSample = 4;
inline constexpr std::uint64_t kStreamTrain = 5;
inline constexpr std::uint64_t kStreamRefine = 6;
inline constexpr std::uint64_t kStreamDrift = 7;

class SimEngine {
public:
    explicit SimEngine(const SimConfig& cfg) : cfg_(cfg), root_(cfg.seed) {
        cfg_.validate();
        model_bytes_ = serialized_model_bytes(cfg_.model);
    }

    RunArtifacts run() {
        initialize();
        for (int t = 1; t <= cfg_.rounds; ++t) round(t);
        RunArtifacts out;
        out.config = cfg_;
        out.metrics = std::move(metrics_);
        out.events = std::move(events_);
        out.clients = std::move(clients_);
        out.clusters = std::move(clusters_);
        if (cfg_.has_cloud()) out.global_model = global_.model;
        if (assignment_valid_) out.assignment = assign_;
        out.ledger = std::move(ledger_);
        out.rounds_to_target = rounds_to_target_;
        return out;
    }

private:
    bool uses_fdc() const {
        return (cfg_.method == Method::cflhkd && !cfg_.freeze_clusters) ||
               cfg_.method == Method::static_cfl;
    }

    void initialize() {
        // data
        SeededRng task_rng = root_.derive(kStreamData, 0);
        tasks_ = generate_cluster_tasks(static_cast<std::size_t>(cfg_.data.tasks),
                                        cfg_.data.separation, cfg_.model, task_rng,
                                        cfg_.data.class_radius, cfg_.data.noise_sigma,
                                        cfg_.data.task_shift);
        const int n = cfg_.clients;
        const int K = cfg_.data.tasks;
        std::vector<std::vector<int>> blocks(K);
        for (int i = 0; i < n; ++i) blocks[static_cast<std::size_t>(i) * K / n].push_back(i);

        SeededRng init_rng = root_.derive(kStreamInit, 0);
        const Model w0 = Model::init(cfg_.model, init_rng);

        clients_.resize(n);
        for (int j = 0; j < K; ++j) {
            if (blocks[j].empty()) continue;
            const std::size_t pool_size = static_cast<std::size_t>(
                std::ceil(1.3 * static_cast<double>(blocks[j].size()) *
                          static_cast<double>(cfg_.data.samples_max)));
            SeededRng pool_rng = root_.derive(kStreamData, 1, static_cast<std::uint64_t>(j));
            LabeledDataset pool = tasks_[j].sample(pool_size, pool_rng);
            if (cfg_.data.label_noise > 0 && j >= K - cfg_.data.label_noise_tasks) {
                SeededRng noise_rng = root_.derive(kStreamData, 3, static_cast<std::uint64_t>(j));
                for (auto& y : pool.labels)
                    if (noise_rng.uniform01() < cfg_.data.label_noise)
                        y = static_cast<std::int32_t>(
                            noise_rng.uniform_below(cfg_.model.num_classes));
            }
            PartitionConfig pc{blocks[j].size(), cfg_.data.dirichlet_alpha,
                               cfg_.data.samples_min, cfg_.data.samples_max,
                               cfg_.data.validation_fraction};
            SeededRng part_rng = root_.derive(kStreamData, 2, static_cast<std::uint64_t>(j));
            auto shards = dirichlet_partition(pool, cfg_.model.num_classes, pc, part_rng);
            for (std::size_t b = 0; b < blocks[j].size(); ++b) {
                ClientState& c = clients_[blocks[j][b]];
                c.id = blocks[j][b];
                c.train = std::move(shards[b].train);
                c.val = std::move(shards[b].val);
                c.model = w0;
                c.velocity = Vec64(w0.params.size());
                c.histogram = label_histogram(c.train, cfg_.model.num_classes);
                c.gt_task = j;
            }
        }

        if (cfg_.has_cloud()) global_ = GlobalState{w0, 0};

        // initial clusters
        switch (cfg_.method) {
            case Method::cflhkd:
                if (cfg_.freeze_clusters)
                    init_random_clusters(w0);
                else
                    full_recluster(0);
                break;
            case Method::static_cfl:
                full_recluster(0);
                break;
            case Method::hierfavg:
                init_random_clusters(w0);
                break;
            case Method::fedavg:
            case Method::fedprox: {
                ClusterState all;
                all.id = 0;
                for (int i = 0; i < n; ++i) all.members.push_back(i);
                all.model = w0;
                clusters_.push_back(std::move(all));
                refresh_cluster_sizes();
                sync_cluster_ids();
                break;
            }
            case Method::standalone: {
                for (int i = 0; i < n; ++i) {
                    ClusterState s;
                    s.id = i;
                    s.members = {i};
                    s.model = clients_[i].model;
                    clusters_.push_back(std::move(s));
                }
                refresh_cluster_sizes();
                sync_cluster_ids();
                break;
            }
        }
    }

    void init_random_clusters(const Model& w0) {
        const int n = cfg_.clients;
        const int K = std::min(cfg_.initial_clusters, n);
        SeededRng rng = root_.derive(kStreamInitCluster, 0);
        const auto perm = rng.permutation(static_cast<std::size_t>(n));
        clusters_.assign(K, ClusterState{});
        for (int k = 0; k < K; ++k) {
            clusters_[k].id = k;
            clusters_[k].model = w0;
        }
        for (std::size_t p = 0; p < perm.size(); ++p)
            clusters_[p % K].members.push_back(static_cast<int>(perm[p]));
        for (auto& c : clusters_) std::sort(c.members.begin(), c.members.end());
        refresh_cluster_sizes();
        sync_cluster_ids();
    }

    // Scheduled C-phase: rebuild the affinity matrix over every client and
    // re-form clusters from scratch. New cluster models are the data-size
    // weighted average of their members' current local models.
    void full_recluster(int round) {
        std::vector<const ClientState*> ptrs;
        for (const auto& c : clients_) ptrs.push_back(&c);
        matrix_ = build_affinity_matrix(ptrs, cfg_.fdc.gamma);
        const auto order = rank_clients(matrix_);
        auto raw = threshold_cluster(matrix_, order, cfg_.fdc.delta);
        VarianceEnforceStats stats;
        assign_ = enforce_variance(raw, matrix_, cfg_.fdc.delta, &stats);
        assignment_valid_ = true;

        clusters_.clear();
        for (std::size_t k = 0; k < assign_.clusters.size(); ++k) {
            ClusterState cs;
            cs.id = static_cast<int>(k);
            cs.members = assign_.clusters[k];
            std::vector<const ClientState*> members;
            for (int id : cs.members) members.push_back(&clients_[id]);
            cs.model = clients_[cs.members[0]].model;  // spec placeholder
            cs.model = edge_aggregate(cs, members);
            clusters_.push_back(std::move(cs));
        }
        refresh_cluster_sizes();
        sync_cluster_ids();
        for (const auto& c : clients_) hist_snapshot_[c.id] = c.histogram;

        auto ev = assignment_to_json(assign_, round);
        ev["type"] = "recluster";
        ev["splits"] = stats.splits;
        ev["merges"] = stats.merges;
        events_.push_back(std::move(ev));
    }

    void refresh_cluster_sizes() {
        for (auto& c : clusters_) {
            c.data_size = 0;
            for (int id : c.members) c.data_size += clients_[id].data_size();
        }
    }

    void sync_cluster_ids() {
        for (std::size_t k = 0; k < clusters_.size(); ++k) {
            clusters_[k].id = static_cast<int>(k);
            for (int id : clusters_[k].members) clients_[id].cluster_id = static_cast<int>(k);
        }
    }

    void apply_drift_events(int t) {
        for (std::size_t e = 0; e < cfg_.drift.size(); ++e) {
            const DriftEvent& ev = cfg_.drift[e];
            if (ev.round != t) continue;
            for (int id : ev.affected_clients) {
                SeededRng rng = root_.derive(kStreamDrift, static_cast<std::uint64_t>(t),
                                             static_cast<std::uint64_t>(id));
                apply_drift(clients_[id], ev, cfg_.model.num_classes, rng);
            }
            refresh_cluster_sizes();
            events_.push_back(nlohmann::json{{"type", "drift_event"},
                                             {"round", t},
                                             {"kind", static_cast<int>(ev.kind)},
                                             {"clients", ev.affected_clients}});
        }
    }

    void round(int t) {
        apply_drift_events(t);
        const bool frozen = cfg_.freeze_training_after > 0 && t > cfg_.freeze_training_after;
        if (!frozen) {
            SeededRng sample_rng = root_.derive(kStreamSample, static_cast<std::uint64_t>(t));
            const auto participants =
                sample_participants(cfg_.clients, cfg_.participation, sample_rng);
            l_phase(t, participants);
            if (cfg_.has_edge_tier() && t % cfg_.resolved_edge_every() == 0)
                e_phase(participants);
            if (cfg_.has_cloud() && t % cfg_.resolved_cloud_every() == 0)
                a_phase(t, participants);
            if (cfg_.method == Method::cflhkd && !cfg_.freeze_clusters) c_phase(t);
        }
        record_metrics(t);
    }

    void l_phase(int t, std::span<const int> participants) {
        SgdConfig sgd = cfg_.sgd;
        sgd.learning_rate = cfg_.sgd.lr_at_round(t);
        for (int id : participants) {
            ClientState& c = clients_[id];
            if (cfg_.method == Method::fedavg || cfg_.method == Method::fedprox) {
                c.model = global_.model;
                account_comm(ledger_, Dir::download, Link::edge_cloud, model_bytes_);
            } else if (cfg_.has_edge_tier()) {
                c.model = clusters_[c.cluster_id].model;
                account_comm(ledger_, Dir::download, Link::client_edge, model_bytes_);
            }
            SeededRng rng = root_.derive(kStreamTrain, static_cast<std::uint64_t>(t),
                                         static_cast<std::uint64_t>(id));
            if (cfg_.local_epochs > 0) {
                const Vec64* prox = cfg_.method == Method::fedprox ? &global_.model.params : nullptr;
                local_train(c, cfg_.local_epochs, cfg_.batch_size, sgd, rng, prox,
                            cfg_.method == Method::fedprox ? cfg_.fedprox_mu : 0.0);
            }
            if (cfg_.method == Method::standalone) clusters_[c.cluster_id].model = c.model;
        }
    }

    void e_phase(std::span<const int> participants) {
        for (auto& cluster : clusters_) {
            std::vector<const ClientState*> parts;
            for (int id : cluster.members)
                if (std::binary_search(participants.begin(), participants.end(), id))
                    parts.push_back(&clients_[id]);
            if (parts.empty()) continue;
            for (std::size_t i = 0; i < parts.size(); ++i)
                account_comm(ledger_, Dir::upload, Link::client_edge, model_bytes_);
            cluster.model = edge_aggregate(cluster, parts);
        }
    }

    void a_phase(int t, std::span<const int> participants) {
        std::vector<const ClusterState*> cptrs;
        for (const auto& c : clusters_) cptrs.push_back(&c);

        if (cfg_.method == Method::fedavg || cfg_.method == Method::fedprox) {
            std::vector<const Model*> models;
            std::vector<double> weights;
            double total = 0.0;
            for (int id : participants) total += static_cast<double>(clients_[id].data_size());
            for (int id : participants) {
                models.push_back(&clients_[id].model);
                weights.push_back(static_cast<double>(clients_[id].data_size()) / total);
                account_comm(ledger_, Dir::upload, Link::edge_cloud, model_bytes_);
            }
            global_.model = weighted_model_mean(models, weights);
            global_.round = t;
            clusters_[0].model = global_.model;
            return;
        }

        if (cfg_.method == Method::hierfavg) {
            for (std::size_t k = 0; k < clusters_.size(); ++k)
                account_comm(ledger_, Dir::upload, Link::edge_cloud, model_bytes_);
            global_.model = cloud_aggregate_naive(cptrs);
            global_.round = t;
            for (auto& cluster : clusters_) {
                account_comm(ledger_, Dir::download, Link::edge_cloud, model_bytes_);
                cluster.model = global_.model;
            }
            return;
        }

        // CFLHKD
        for (auto& cluster : clusters_) {
            if (cfg_.force_alpha_one) {
                cluster.val_accuracy = 1.0;
            } else {
                std::vector<const LabeledDataset*> vals;
                for (int id : cluster.members) vals.push_back(&clients_[id].val);
                cluster.val_accuracy = eval_accuracy_multi(cluster.model, vals).value_or(0.0);
            }
            account_comm(ledger_, Dir::upload, Link::edge_cloud, model_bytes_);
        }

        std::vector<double> weights;
        if (!had_a_phase_) {
            weights = naive_weights();
            events_.push_back(nlohmann::json{{"type", "rho_naive_init"}, {"round", t}});
        } else {
            try {
                weights = compute_rho(cptrs, global_.model, cfg_.rho_lambda);
            } catch (const degenerate_weights_error&) {
                weights = naive_weights();
                events_.push_back(nlohmann::json{{"type", "rho_fallback"}, {"round", t}});
            }
        }
        had_a_phase_ = true;
        global_.model = cloud_aggregate_dynamic(cptrs, weights);
        global_.round = t;

        for (std::size_t k = 0; k < clusters_.size(); ++k)
            account_comm(ledger_, Dir::download, Link::edge_cloud, model_bytes_);

        if (cfg_.overwrite_clusters) {
            for (auto& cluster : clusters_) cluster.model = global_.model;
        } else if (cfg_.refine.lambda0 > 0 && cfg_.refine.refine_steps > 0) {
            for (std::size_t k = 0; k < clusters_.size(); ++k) {
                std::vector<const LabeledDataset*> member_data;
                for (int id : clusters_[k].members) member_data.push_back(&clients_[id].train);
                SeededRng rng = root_.derive(kStreamRefine, static_cast<std::uint64_t>(t),
                                             static_cast<std::uint64_t>(k));
                clusters_[k].model = refine_cluster(clusters_[k], global_.model, cfg_.refine,
                                                    member_data, cfg_.batch_size, rng);
            }
        }
    }

    std::vector<double> naive_weights() const {
        double total = 0.0;
        for (const auto& c : clusters_) total += static_cast<double>(c.data_size);
        std::vector<double> w(clusters_.size());
        for (std::size_t k = 0; k < clusters_.size(); ++k)
            w[k] = static_cast<double>(clusters_[k].data_size) / total;
        return w;
    }

    void c_phase(int t) {
        if (t % cfg_.fdc.recluster_every == 0) {
            full_recluster(t);
            return;
        }
        // drift-triggered reassignment of flagged clients only
        std::vector<const ClientState*> ptrs;
        for (const auto& c : clients_) ptrs.push_back(&c);
        for (auto& c : clients_) {
            const auto it = hist_snapshot_.find(c.id);
            if (it == hist_snapshot_.end()) continue;
            if (!detect_drift(it->second, c.histogram, cfg_.fdc.phi)) continue;
            const double score = jsd(it->second, c.histogram);
            update_affinity_row(matrix_, ptrs, matrix_.index_of(c.id), cfg_.fdc.gamma);
            const auto outcome =
                reassign_client(c, assign_, matrix_, cfg_.fdc.delta, clusters_);
            sync_cluster_ids();
            refresh_cluster_sizes();
            hist_snapshot_[c.id] = c.histogram;
            events_.push_back(nlohmann::json{{"type", "drift_detected"},
                                             {"round", t},
                                             {"client", c.id},
                                             {"jsd", score}});
            events_.push_back(nlohmann::json{{"type", "reassign"},
                                             {"round", t},
                                             {"client", c.id},
                                             {"to_cluster", outcome.destination},
                                             {"new_cluster", outcome.created_new},
                                             {"moved", outcome.moved}});
        }
    }

    void record_metrics(int t) {
        RoundMetrics r;
        r.round = t;
        r.method = method_name(cfg_.method);
        r.n_clusters = static_cast<int>(clusters_.size());

        std::vector<const ClientState*> client_ptrs;
        for (const auto& c : clients_) client_ptrs.push_back(&c);
        std::vector<const ClusterState*> cluster_ptrs;
        for (const auto& c : clusters_) cluster_ptrs.push_back(&c);

        double acc_sum = 0.0;
        std::size_t acc_n = 0;
        for (const auto& cluster : clusters_) {
            std::vector<const LabeledDataset*> vals;
            for (int id : cluster.members) vals.push_back(&clients_[id].val);
            const auto a = eval_accuracy_multi(cluster.model, vals);
            r.cluster_acc.push_back(a.value_or(std::numeric_limits<double>::quiet_NaN()));
            if (a) {
                acc_sum += *a;
                ++acc_n;
            }
        }
        if (acc_n > 0) r.mean_cluster_acc = acc_sum / static_cast<double>(acc_n);

        if (cfg_.has_cloud()) {
            std::vector<const LabeledDataset*> vals;
            for (const auto& c : clients_) vals.push_back(&c.val);
            r.global_acc = eval_accuracy_multi(global_.model, vals);
        }

        const auto obj = objectives(cluster_ptrs, client_ptrs,
                                    cfg_.has_cloud() ? &global_.model : nullptr);
        r.p_edge = obj.p_edge;
        r.p_cloud = obj.p_cloud;
        r.h = obj.h;

        const auto diag = divergence_diagnostics(cluster_ptrs, client_ptrs);
        r.var_p = diag.var_p;
        r.mean_cluster_divergence = diag.mean_pairwise;
        r.cluster_divergence = diag.pairwise;

        if (assignment_valid_) r.wcss = assign_.wcss;
        r.misclustering_rate = misclustering_rate(client_ptrs);

        r.comm_client_edge = ledger_.link_bytes(Link::client_edge);
        r.comm_edge_cloud = ledger_.link_bytes(Link::edge_cloud);
        ledger_.snapshot_round(t);

        if (cfg_.target_accuracy > 0 && !rounds_to_target_) {
            const auto headline = cfg_.has_cloud() ? r.global_acc : r.mean_cluster_acc;
            if (headline && *headline >= cfg_.target_accuracy) rounds_to_target_ = t;
        }
        metrics_.push_back(std::move(r));
    }

    SimConfig cfg_;
    SeededRng root_;
    std::size_t model_bytes_ = 0;
    std::vector<ClusterTask> tasks_;
    std::vector<ClientState> clients_;
    std::vector<ClusterState> clusters_;
    GlobalState global_{Model{}, 0};
    AffinityMatrix matrix_;
    ClusterAssignment assign_;
    bool assignment_valid_ = false;
    bool had_a_phase_ = false;
    std::unordered_map<int, Histogram> hist_snapshot_;
    CommLedger ledger_;
    std::vector<RoundMetrics> metrics_;
    std::vector<nlohmann::json> events_;
    std::optional<int> rounds_to_target_;
};

}  // namespace detail

inline RunArtifacts run(const SimConfig& cfg) {
    detail::SimEngine engine(cfg);
    return engine.run();
}

inline RunArtifacts run_baseline(const SimConfig& cfg) {
    if (cfg.method == Method::cflhkd)
        throw config_error("run_baseline: method must not be CFLHKD");
    return run(cfg);
}

// ---------------------------------------------------------------------------
// Drift scenario metrics: accuracy drop (percentage points from the pre-drift
// peak to the post-drift trough of the mean cluster accuracy) and recovery
// (rounds from the drift until accuracy returns to within 0.5 pp of the
// peak; unset means no recovery).

struct DriftReport {
    double pre_drift_peak = 0.0;
    double trough = 0.0;
    double drop_pp = 0.0;
    std::optional<int> recovery_rounds;
    RunArtifacts artifacts;
};

inline DriftReport drift_scenario(const SimConfig& cfg) {
    if (cfg.drift.empty()) throw config_error("drift_scenario: drift schedule is empty");
    int drift_round = cfg.drift[0].round;
    for (const auto& e : cfg.drift) drift_round = std::min(drift_round, e.round);

    DriftReport rep;
    rep.artifacts = run(cfg);

    const auto series = [&](const RoundMetrics& m) { return m.mean_cluster_acc; };
    bool have_peak = false;
    for (const auto& m : rep.artifacts.metrics) {
        if (m.round >= drift_round) break;
        const auto v = series(m);
        if (v && (!have_peak || *v > rep.pre_drift_peak)) {
            rep.pre_drift_peak = *v;
            have_peak = true;
        }
    }
    if (!have_peak) throw config_error("drift_scenario: no pre-drift rounds to measure");

    bool have_trough = false;
    for (const auto& m : rep.artifacts.metrics) {
        if (m.round < drift_round) continue;
        const auto v = series(m);
        if (!v) continue;
        if (!have_trough || *v < rep.trough) {
            rep.trough = *v;
            have_trough = true;
        }
        if (!rep.recovery_rounds && *v >= rep.pre_drift_peak - 0.005)
            rep.recovery_rounds = m.round - drift_round;
    }
    if (!have_trough) rep.trough = rep.pre_drift_peak;
    rep.drop_pp = (rep.pre_drift_peak - rep.trough) * 100.0;
    return rep;
}

// ---------------------------------------------------------------------------
// Run outputs: metrics.csv, events.jsonl, final_models.bin, heatmap.csv.
// final_models.bin layout: magic, version, has_global flag, cluster count,
// client count, then the serialized models in that order.

namespace detail {
inline constexpr std::uint32_t kBundleMagic = 0x424C4643u;  // "CFLB"
inline constexpr std::uint32_t kBundleVersion = 1;
}  // namespace detail

inline std::vector<std::uint8_t> serialize_model_bundle(const RunArtifacts& a) {
    std::vector<std::uint8_t> out;
    detail::put_u32(out, detail::kBundleMagic);
    detail::put_u32(out, detail::kBundleVersion);
    detail::put_u32(out, a.global_model.has_value() ? 1 : 0);
    detail::put_u32(out, static_cast<std::uint32_t>(a.clusters.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(a.clients.size()));
    const auto append = [&out](const Model& m) {
        const auto bytes = serialize_model(m);
        out.insert(out.end(), bytes.begin(), bytes.end());
    };
    if (a.global_model) append(*a.global_model);
    for (const auto& c : a.clusters) append(c.model);
    for (const auto& c : a.clients) append(c.model);
    return out;
}

inline void write_run_outputs(const RunArtifacts& a, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_metrics_csv(a.metrics, dir + "/metrics.csv");
    write_events_jsonl(a.events, dir + "/events.jsonl");
    {
        const auto bytes = serialize_model_bundle(a);
        std::ofstream f(dir + "/final_models.bin", std::ios::binary);
        if (!f) throw std::runtime_error("write_run_outputs: cannot open final_models.bin");
        f.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
    }
    {
        std::vector<const ClientState*> ptrs;
        for (const auto& c : a.clients) ptrs.push_back(&c);
        write_heatmap_csv(similarity_heatmap(ptrs), dir + "/heatmap.csv");
    }
}

}  // namespace cflhkd
