#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cflhkd/config_io.hpp"
#include "cflhkd/sim.hpp"

using namespace cflhkd;

namespace {

// small, fast configuration shared by most sim tests
SimConfig small_config() {
    SimConfig cfg;
    cfg.seed = 11;
    cfg.rounds = 6;
    cfg.clients = 8;
    cfg.initial_clusters = 2;
    cfg.participation = 1.0;
    cfg.local_epochs = 1;
    cfg.batch_size = 8;
    cfg.model = ModelSpec{5, 5, 0};
    cfg.data.tasks = 2;
    cfg.data.separation = 1.0;
    cfg.data.samples_min = 20;
    cfg.data.samples_max = 30;
    cfg.edge_every = 2;
    cfg.cloud_every = 3;
    cfg.fdc.delta = 1.5;
    cfg.fdc.recluster_every = 4;
    cfg.refine.refine_steps = 2;
    cfg.refine.refine_lr = 0.01;
    return cfg;
}

bool metrics_equal_ignoring_method(const RoundMetrics& a, const RoundMetrics& b) {
    const auto opt_eq = [](const std::optional<double>& x, const std::optional<double>& y) {
        if (x.has_value() != y.has_value()) return false;
        return !x.has_value() || *x == *y;
    };
    return a.round == b.round && opt_eq(a.global_acc, b.global_acc) &&
           opt_eq(a.mean_cluster_acc, b.mean_cluster_acc) && a.cluster_acc == b.cluster_acc &&
           opt_eq(a.p_edge, b.p_edge) && opt_eq(a.p_cloud, b.p_cloud) && opt_eq(a.h, b.h) &&
           opt_eq(a.wcss, b.wcss) && a.n_clusters == b.n_clusters &&
           a.comm_client_edge == b.comm_client_edge && a.comm_edge_cloud == b.comm_edge_cloud &&
           opt_eq(a.var_p, b.var_p) &&
           opt_eq(a.mean_cluster_divergence, b.mean_cluster_divergence) &&
           opt_eq(a.misclustering_rate, b.misclustering_rate);
}

}  // namespace

TEST_CASE("zero rounds returns initial state with empty metrics", "[sim]") {
    SimConfig cfg = small_config();
    cfg.rounds = 0;
    const auto artifacts = run(cfg);
    CHECK(artifacts.metrics.empty());
    CHECK(artifacts.clients.size() == 8);
    CHECK(!artifacts.clusters.empty());
    REQUIRE(artifacts.global_model.has_value());
    // all client models start from the same broadcast initialization
    for (const auto& c : artifacts.clients)
        CHECK(c.model.params == artifacts.clients[0].model.params);
}

TEST_CASE("single client CFLHKD equals a direct local training run bit for bit", "[sim]") {
    SimConfig cfg = small_config();
    cfg.clients = 1;
    cfg.initial_clusters = 1;
    cfg.data.tasks = 1;
    cfg.rounds = 5;
    cfg.edge_every = 1;
    cfg.cloud_every = 1;
    cfg.refine.lambda0 = 0.0;  // refinement off so the cloud is a pass-through
    cfg.local_epochs = 2;

    const auto full = run(cfg);

    SimConfig init_only = cfg;
    init_only.rounds = 0;
    auto baseline = run(init_only);
    ClientState& c = baseline.clients[0];

    const SeededRng root(cfg.seed);
    for (int t = 1; t <= cfg.rounds; ++t) {
        SgdConfig sgd = cfg.sgd;
        sgd.learning_rate = cfg.sgd.lr_at_round(t);
        SeededRng rng = root.derive(detail::kStreamTrain, static_cast<std::uint64_t>(t),
                                    static_cast<std::uint64_t>(0));
        local_train(c, cfg.local_epochs, cfg.batch_size, sgd, rng);
    }
    REQUIRE(full.clients[0].model.params == c.model.params);
    REQUIRE(full.global_model->params == c.model.params);
}

TEST_CASE("identical config and seed give byte-identical outputs", "[sim]") {
    const SimConfig cfg = small_config();
    const auto a = run(cfg);
    const auto b = run(cfg);
    REQUIRE(metrics_csv(a.metrics) == metrics_csv(b.metrics));

    const std::string dir_a = "sim_det_a";
    const std::string dir_b = "sim_det_b";
    write_run_outputs(a, dir_a);
    write_run_outputs(b, dir_b);
    for (const char* name : {"metrics.csv", "events.jsonl", "final_models.bin", "heatmap.csv"}) {
        std::ifstream fa(dir_a + "/" + name, std::ios::binary);
        std::ifstream fb(dir_b + "/" + name, std::ios::binary);
        const std::string ca((std::istreambuf_iterator<char>(fa)),
                             std::istreambuf_iterator<char>());
        const std::string cb((std::istreambuf_iterator<char>(fb)),
                             std::istreambuf_iterator<char>());
        REQUIRE(!ca.empty());
        REQUIRE(ca == cb);
    }
    std::filesystem::remove_all(dir_a);
    std::filesystem::remove_all(dir_b);
}

TEST_CASE("sample_participants counts and seeding", "[sim]") {
    SeededRng rng(3);
    CHECK(sample_participants(10, 1.0, rng).size() == 10);
    CHECK(sample_participants(100, 0.3, rng).size() == 30);
    CHECK(sample_participants(10, 0.05, rng).size() == 1);

    const SeededRng root(7);
    int distinct = 0;
    for (int s = 0; s < 20; ++s) {
        SeededRng r1 = root.derive(100, static_cast<std::uint64_t>(s));
        SeededRng r2 = root.derive(100, static_cast<std::uint64_t>(s + 1));
        if (sample_participants(100, 0.3, r1) != sample_participants(100, 0.3, r2)) ++distinct;
    }
    CHECK(distinct >= 19);

    SeededRng bad(9);
    CHECK_THROWS_AS(sample_participants(10, 0.0, bad), std::invalid_argument);
}

TEST_CASE("non-participating clients are untouched within a round", "[sim]") {
    SimConfig cfg = small_config();
    cfg.participation = 0.25;  // 2 of 8
    cfg.rounds = 1;
    cfg.edge_every = 1;
    cfg.cloud_every = 10;  // no cloud round

    SimConfig init_only = cfg;
    init_only.rounds = 0;
    const auto before = run(init_only);
    const auto after = run(cfg);
    int changed = 0;
    for (std::size_t i = 0; i < after.clients.size(); ++i)
        if (!(after.clients[i].model.params == before.clients[i].model.params)) ++changed;
    CHECK(changed == 2);
}

TEST_CASE("StaticCFL produces no cloud traffic", "[sim]") {
    SimConfig cfg = small_config();
    cfg.method = Method::static_cfl;
    const auto artifacts = run(cfg);
    CHECK(artifacts.ledger.link_bytes(Link::edge_cloud) == 0);
    CHECK(artifacts.ledger.link_bytes(Link::client_edge) > 0);
    CHECK_FALSE(artifacts.global_model.has_value());
    for (const auto& m : artifacts.metrics) {
        CHECK(m.comm_edge_cloud == 0);
        CHECK_FALSE(m.global_acc.has_value());
    }
}

TEST_CASE("HierFAVG cluster models equal the global model after a cloud round", "[sim]") {
    SimConfig cfg = small_config();
    cfg.method = Method::hierfavg;
    cfg.edge_every = 2;
    cfg.cloud_every = 4;
    cfg.rounds = 4;  // ends exactly on a cloud round
    const auto artifacts = run(cfg);
    REQUIRE(artifacts.global_model.has_value());
    for (const auto& c : artifacts.clusters)
        REQUIRE(c.model.params == artifacts.global_model->params);
}

TEST_CASE("FedAvg with one client equals Standalone with one client", "[sim]") {
    SimConfig cfg = small_config();
    cfg.clients = 1;
    cfg.data.tasks = 1;
    cfg.initial_clusters = 1;
    cfg.participation = 1.0;
    cfg.method = Method::fedavg;
    cfg.cloud_every = 1;
    const auto fed = run(cfg);
    cfg.method = Method::standalone;
    const auto solo = run(cfg);
    REQUIRE(fed.clients[0].model.params == solo.clients[0].model.params);
}

TEST_CASE("communication accounting matches the closed form", "[sim]") {
    SECTION("client-edge uploads: clients x rounds / edge_every") {
        SimConfig cfg = small_config();
        cfg.method = Method::static_cfl;
        cfg.clients = 10;
        cfg.participation = 1.0;
        cfg.edge_every = 1;
        cfg.rounds = 5;
        const auto artifacts = run(cfg);
        const auto& up = artifacts.ledger.at(Link::client_edge, Dir::upload);
        CHECK(up.model_units == 10 * 5);
        CHECK(up.bytes == 10 * 5 * serialized_model_bytes(cfg.model));

        // downloads happen every round a client participates
        const auto& down = artifacts.ledger.at(Link::client_edge, Dir::download);
        CHECK(down.model_units == 10 * 5);
    }

    SECTION("interval > 1 divides the upload count") {
        SimConfig cfg = small_config();
        cfg.method = Method::hierfavg;
        cfg.clients = 10;
        cfg.initial_clusters = 2;
        cfg.participation = 1.0;
        cfg.edge_every = 2;
        cfg.cloud_every = 3;
        cfg.rounds = 6;
        const auto artifacts = run(cfg);
        CHECK(artifacts.ledger.at(Link::client_edge, Dir::upload).model_units == 10 * 3);
        // K models up and K models down per cloud round
        CHECK(artifacts.ledger.at(Link::edge_cloud, Dir::upload).model_units == 2 * 2);
        CHECK(artifacts.ledger.at(Link::edge_cloud, Dir::download).model_units == 2 * 2);
    }

    SECTION("ledger is monotone across rounds") {
        const auto artifacts = run(small_config());
        std::uint64_t prev_ce = 0, prev_ec = 0;
        for (const auto& row : artifacts.ledger.per_round) {
            CHECK(row.client_edge_bytes >= prev_ce);
            CHECK(row.edge_cloud_bytes >= prev_ec);
            prev_ce = row.client_edge_bytes;
            prev_ec = row.edge_cloud_bytes;
        }
    }
}

TEST_CASE("frozen CFLHKD reproduces HierFAVG exactly", "[sim]") {
    SimConfig hier = small_config();
    hier.method = Method::hierfavg;
    hier.clients = 12;
    hier.initial_clusters = 3;
    hier.participation = 0.5;
    hier.rounds = 8;
    hier.edge_every = 2;
    hier.cloud_every = 4;

    SimConfig frozen = hier;
    frozen.method = Method::cflhkd;
    frozen.freeze_clusters = true;
    frozen.force_alpha_one = true;
    frozen.overwrite_clusters = true;
    frozen.rho_lambda = 0.0;
    frozen.refine.refine_steps = 0;

    const auto a = run(hier);
    const auto b = run(frozen);
    REQUIRE(a.metrics.size() == b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i)
        REQUIRE(metrics_equal_ignoring_method(a.metrics[i], b.metrics[i]));
    REQUIRE(a.global_model->params == b.global_model->params);
    for (std::size_t k = 0; k < a.clusters.size(); ++k)
        REQUIRE(a.clusters[k].model.params == b.clusters[k].model.params);
}

TEST_CASE("identity drift produces no drop and instant recovery", "[sim]") {
    SimConfig cfg = small_config();
    cfg.rounds = 8;
    DriftEvent e;
    e.round = 4;
    e.kind = DriftKind::label_permutation;
    e.affected_clients = {0, 1, 2, 3};
    e.label_perm = {0, 1, 2, 3, 4};
    cfg.drift = {e};
    const auto rep = drift_scenario(cfg);
    CHECK(rep.drop_pp <= 0.5);
    REQUIRE(rep.recovery_rounds.has_value());
    CHECK(*rep.recovery_rounds == 0);
}

TEST_CASE("frozen training after real drift never recovers", "[sim]") {
    SimConfig cfg = small_config();
    cfg.rounds = 10;
    cfg.model = ModelSpec{5, 4, 0};
    cfg.data.tasks = 1;
    cfg.rounds = 10;
    const auto e = make_subset_switch(5, {0, 1, 2, 3, 4, 5, 6, 7}, 4);
    cfg.drift = {e};
    cfg.freeze_training_after = 4;
    const auto rep = drift_scenario(cfg);
    CHECK(rep.drop_pp > 0.5);
    CHECK_FALSE(rep.recovery_rounds.has_value());
}

TEST_CASE("config files parse, apply and reject bad input", "[sim][config]") {
    const std::string text =
        "# sample\n"
        "schema_version = 1\n"
        "seed = 5\n"
        "rounds = 3\n"
        "clients = 6\n"
        "method = StaticCFL\n"
        "tasks = 2\n"
        "samples_min = 20\n"
        "samples_max = 25\n"
        "num_classes = 4\n"
        "input_dim = 5\n"
        "delta = 1.2\n"
        "drift = round:2 kind:subset_switch clients:0-2\n";
    std::istringstream in(text);
    const SimConfig cfg = parse_sim_config(in);
    CHECK(cfg.seed == 5);
    CHECK(cfg.method == Method::static_cfl);
    CHECK(cfg.fdc.delta == 1.2);
    REQUIRE(cfg.drift.size() == 1);
    CHECK(cfg.drift[0].round == 2);
    CHECK(cfg.drift[0].kind == DriftKind::label_subset_switch);
    CHECK(cfg.drift[0].affected_clients == std::vector<int>{0, 1, 2});
    CHECK(cfg.drift[0].from_subset == std::vector<std::int32_t>{0, 1});
    CHECK(cfg.drift[0].to_subset == std::vector<std::int32_t>{2, 3});

    // round-trip through the writer preserves scalar settings
    std::istringstream again(write_sim_config(cfg));
    const SimConfig back = parse_sim_config(again);
    CHECK(back.seed == cfg.seed);
    CHECK(back.rounds == cfg.rounds);
    CHECK(back.fdc.delta == cfg.fdc.delta);
    CHECK(back.method == cfg.method);

    std::istringstream missing("rounds = 3\n");
    CHECK_THROWS_AS(parse_sim_config(missing), config_error);
    std::istringstream unknown("schema_version = 1\nnot_a_key = 2\n");
    CHECK_THROWS_AS(parse_sim_config(unknown), config_error);
    std::istringstream badver("schema_version = 99\n");
    CHECK_THROWS_AS(parse_sim_config(badver), config_error);
}

TEST_CASE("run outputs include parseable model bundle and events", "[sim]") {
    SimConfig cfg = small_config();
    cfg.rounds = 4;
    const auto artifacts = run(cfg);
    const std::string dir = "sim_outputs_test";
    write_run_outputs(artifacts, dir);

    std::ifstream models(dir + "/final_models.bin", std::ios::binary);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(models)),
                                    std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    CHECK(detail::get_u32(bytes, pos) == 0x424C4643u);
    CHECK(detail::get_u32(bytes, pos) == 1u);
    const bool has_global = detail::get_u32(bytes, pos) == 1;
    const auto n_clusters = detail::get_u32(bytes, pos);
    const auto n_clients = detail::get_u32(bytes, pos);
    CHECK(has_global);
    CHECK(n_clusters == artifacts.clusters.size());
    CHECK(n_clients == artifacts.clients.size());
    std::size_t consumed = 0;
    const Model g = deserialize_model({bytes.data() + pos, bytes.size() - pos}, &consumed);
    REQUIRE(g.params == artifacts.global_model->params);

    std::ifstream events(dir + "/events.jsonl");
    std::string line;
    int parsed = 0;
    while (std::getline(events, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("type"));
        ++parsed;
    }
    CHECK(parsed > 0);
    std::filesystem::remove_all(dir);
}

TEST_CASE("drift triggers detection and reassignment events", "[sim]") {
    SimConfig cfg = small_config();
    cfg.rounds = 8;
    cfg.fdc.phi = 0.3;
    cfg.fdc.recluster_every = 100;  // keep scheduled reclustering out of the way
    const auto e = make_subset_switch(4, {0, 1}, 5);
    cfg.drift = {e};
    const auto artifacts = run(cfg);
    bool saw_detect = false, saw_reassign = false;
    for (const auto& ev : artifacts.events) {
        if (ev["type"] == "drift_detected") saw_detect = true;
        if (ev["type"] == "reassign") saw_reassign = true;
    }
    CHECK(saw_detect);
    CHECK(saw_reassign);
}

TEST_CASE("method defaults for aggregation intervals", "[sim]") {
    SimConfig cfg;
    cfg.method = Method::cflhkd;
    CHECK(cfg.resolved_edge_every() == 10);
    CHECK(cfg.resolved_cloud_every() == 30);
    cfg.method = Method::hierfavg;
    CHECK(cfg.resolved_edge_every() == 5);
    CHECK(cfg.resolved_cloud_every() == 20);
    cfg.method = Method::fedavg;
    CHECK(cfg.resolved_cloud_every() == 1);
    cfg.method = Method::static_cfl;
    CHECK(cfg.resolved_edge_every() == 10);
    cfg.edge_every = 7;
    CHECK(cfg.resolved_edge_every() == 7);
}

TEST_CASE("run_baseline rejects the primary method", "[sim]") {
    SimConfig cfg = small_config();
    CHECK_THROWS_AS(run_baseline(cfg), config_error);
    cfg.method = Method::fedavg;
    CHECK(run_baseline(cfg).metrics.size() == static_cast<std::size_t>(cfg.rounds));
}
