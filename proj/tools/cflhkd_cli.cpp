// Command-line front end: run a single configuration, sweep one parameter
// over a list of values, or compare several configurations side by side.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cflhkd/config_io.hpp"
#include "cflhkd/report.hpp"
#include "cflhkd/sim.hpp"

namespace {

using namespace cflhkd;

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(part);
    return out;
}

struct RunSummary {
    std::string label;
    std::optional<double> global_acc;
    std::optional<double> mean_cluster_acc;
    int n_clusters = 0;
    std::uint64_t comm_client_edge = 0;
    std::uint64_t comm_edge_cloud = 0;
    std::optional<int> rounds_to_target;
};

RunSummary summarize(const std::string& label, const RunArtifacts& a) {
    RunSummary s;
    s.label = label;
    if (!a.metrics.empty()) {
        const auto& last = a.metrics.back();
        s.global_acc = last.global_acc;
        s.mean_cluster_acc = last.mean_cluster_acc;
        s.n_clusters = last.n_clusters;
        s.comm_client_edge = last.comm_client_edge;
        s.comm_edge_cloud = last.comm_edge_cloud;
    }
    s.rounds_to_target = a.rounds_to_target;
    return s;
}

std::string opt_str(const std::optional<double>& v) {
    return v ? format_double(*v) : std::string("-");
}

void print_summary(const RunSummary& s) {
    std::cout << s.label << ": global_acc=" << opt_str(s.global_acc)
              << " mean_cluster_acc=" << opt_str(s.mean_cluster_acc)
              << " clusters=" << s.n_clusters
              << " comm_client_edge=" << s.comm_client_edge
              << " comm_edge_cloud=" << s.comm_edge_cloud;
    if (s.rounds_to_target) std::cout << " rounds_to_target=" << *s.rounds_to_target;
    std::cout << "\n";
}

void write_summary_csv(const std::vector<RunSummary>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << "label,global_acc,mean_cluster_acc,n_clusters,comm_client_edge,comm_edge_cloud,"
         "rounds_to_target\n";
    for (const auto& s : rows) {
        f << s.label << ',' << (s.global_acc ? format_double(*s.global_acc) : "") << ','
          << (s.mean_cluster_acc ? format_double(*s.mean_cluster_acc) : "") << ','
          << s.n_clusters << ',' << s.comm_client_edge << ',' << s.comm_edge_cloud << ','
          << (s.rounds_to_target ? std::to_string(*s.rounds_to_target) : "") << '\n';
    }
}

RunArtifacts run_and_write(const SimConfig& cfg, const std::string& out_dir) {
    auto artifacts = run(cfg);
    write_run_outputs(artifacts, out_dir);
    std::ofstream echo(out_dir + "/config.echo");
    echo << write_sim_config(cfg);
    return artifacts;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CFLHKD hierarchical clustered federated learning simulator"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", method_override;
    std::uint64_t seed_override = 0;
    bool seed_set = false;

    auto* run_cmd = app.add_subcommand("run", "Run one configuration");
    run_cmd->add_option("--config", config_path, "config file")->required();
    run_cmd->add_option("--out", out_dir, "output directory");
    run_cmd->add_option("--seed", seed_override, "seed override")->each([&](const std::string&) {
        seed_set = true;
    });
    run_cmd->add_option("--method", method_override, "method override");

    std::string sweep_param, sweep_values;
    auto* sweep_cmd = app.add_subcommand("sweep", "Run one config across parameter values");
    sweep_cmd->add_option("--config", config_path, "config file")->required();
    sweep_cmd->add_option("--param", sweep_param, "config key to sweep")->required();
    sweep_cmd->add_option("--values", sweep_values, "comma-separated values")->required();
    sweep_cmd->add_option("--out", out_dir, "output directory");

    std::string compare_configs;
    auto* compare_cmd = app.add_subcommand("compare", "Run several configs side by side");
    compare_cmd->add_option("--configs", compare_configs, "comma-separated config files")
        ->required();
    compare_cmd->add_option("--out", out_dir, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed()) {
            SimConfig cfg = load_sim_config(config_path);
            if (seed_set) cfg.seed = seed_override;
            if (!method_override.empty()) cfg.method = parse_method(method_override);
            cfg.validate();
            const auto artifacts = run_and_write(cfg, out_dir);
            print_summary(summarize(method_name(cfg.method), artifacts));
        } else if (sweep_cmd->parsed()) {
            const SimConfig base = load_sim_config(config_path);
            std::vector<RunSummary> rows;
            for (const auto& value : split_commas(sweep_values)) {
                SimConfig cfg = base;
                apply_config_key(cfg, sweep_param, value);
                cfg.validate();
                const std::string label = sweep_param + "=" + value;
                const std::string dir = out_dir + "/" + sweep_param + "_" + value;
                rows.push_back(summarize(label, run_and_write(cfg, dir)));
                print_summary(rows.back());
            }
            std::filesystem::create_directories(out_dir);
            write_summary_csv(rows, out_dir + "/sweep_summary.csv");
        } else if (compare_cmd->parsed()) {
            std::vector<RunSummary> rows;
            for (const auto& path : split_commas(compare_configs)) {
                SimConfig cfg = load_sim_config(path);
                const std::string label =
                    std::filesystem::path(path).stem().string() + ":" + method_name(cfg.method);
                const std::string dir =
                    out_dir + "/" + std::filesystem::path(path).stem().string();
                rows.push_back(summarize(label, run_and_write(cfg, dir)));
                print_summary(rows.back());
            }
            std::filesystem::create_directories(out_dir);
            write_summary_csv(rows, out_dir + "/compare_summary.csv");
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
