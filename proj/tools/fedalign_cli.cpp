// fedalign: run experiments, inspect checkpoints, partition labels, estimate cost.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fedalign/fedalign.hpp"

using namespace fedalign;

namespace {

enum ExitCode { kOk = 0, kConfig = 1, kRuntime = 2, kIo = 3 };

void write_json(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& resume) {
    const auto cfg = load_config(config_path, overrides);
    RunOptions opt;
    if (!resume.empty()) opt.resume_from = resume;
    opt.on_round = [](const RoundMetrics& m) {
        std::printf("round %d", m.round);
        if (m.test_acc) std::printf("  test_acc %.4f  test_loss %.4f", *m.test_acc, *m.test_loss);
        std::printf("  comm_bits %llu\n", static_cast<unsigned long long>(m.comm_bits_cum));
        std::fflush(stdout);
    };
    run_experiment(cfg, opt);
    std::printf("wrote %s\n", cfg.output_dir.c_str());
    return kOk;
}

std::vector<std::size_t> parse_client_list(const std::string& spec, std::size_t num_clients) {
    std::vector<std::size_t> ids;
    if (spec == "all") {
        for (std::size_t c = 0; c < num_clients; ++c) ids.push_back(c);
        return ids;
    }
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t pos = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos == 0 || pos != item.size() || v >= num_clients) {
            throw ConfigError("--clients: '" + item + "' is not a client id below " + std::to_string(num_clients));
        }
        ids.push_back(v);
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
}

int cmd_diagnose(const std::string& ckpt_path, const std::string& config_path, const std::string& clients,
                 DiagnoseOptions dopt, std::string out_dir) {
    const auto cfg = load_config(config_path);
    const Experiment exp(cfg);
    const auto state = state_from_checkpoint(exp, load_checkpoint(ckpt_path));
    if (out_dir.empty()) out_dir = cfg.output_dir;
    std::error_code ec;
    std::filesystem::create_directories(out_dir + "/diagnostics", ec);
    if (ec) throw IoError("cannot create " + out_dir + "/diagnostics: " + ec.message());
    dopt.seed = cfg.seed;

    const auto report = global_hessian(state.global, exp.data.test, dopt);
    json g = hessian_report_to_json(report);
    g["round"] = state.round;
    write_json(out_dir + "/diagnostics/global_hessian.json", g);
    std::printf("lambda_max %.6g  trace %.6g +- %.2g\n", report.top_eigenvalues.front(), report.trace_estimate,
                report.trace_stderr);

    const auto ids = parse_client_list(clients, cfg.num_clients);
    if (ids.size() >= 2) {
        std::vector<std::vector<double>> diags;
        for (auto c : ids) {
            auto d = client_hessian_diagonal(state.global, exp.data.train, exp.partition.assignments[c], c, dopt);
            write_json(out_dir + "/diagnostics/client_" + std::to_string(c) + ".json",
                       {{"client", c}, {"diag_estimate", d.diag.data}, {"diag_stderr", d.stderr_}, {"num_probes", d.num_probes}});
            diags.push_back(std::move(d.diag.data));
        }
        const auto cross = cross_client_metrics(diags);
        write_json(out_dir + "/diagnostics/cross_client.json", cross_client_to_json(cross, ids));
        std::printf("H_N %.6g  H_D %.6g  H_D(cosine) %.6g\n", cross.h_n, cross.h_d, cross.h_d_cosine);
    }

    if (report.eigenvectors.size() >= 2) {
        const auto idx = probe_indices(exp.data.test.all_indices(), dopt.probe_batch);
        BatchLoss loss(state.global, exp.data.test, idx);
        const auto grid = landscape_slice(loss.params(), loss, report.eigenvectors[0], report.eigenvectors[1],
                                          dopt.grid, dopt.radius);
        write_landscape_csv(grid, out_dir + "/landscape.csv");
    }
    std::printf("wrote %s/diagnostics\n", out_dir.c_str());
    return kOk;
}

// Labels come from a file (whitespace-separated integers) or from a synthetic
// spec of the form "synthetic:<classes>x<per_class>".
std::vector<int> load_labels(const std::string& source) {
    std::vector<int> labels;
    if (source.rfind("synthetic:", 0) == 0) {
        const auto body = source.substr(10);
        const auto x = body.find('x');
        std::size_t classes = 0, per_class = 0;
        try {
            if (x == std::string::npos) throw std::invalid_argument("missing x");
            classes = std::stoul(body.substr(0, x));
            per_class = std::stoul(body.substr(x + 1));
        } catch (const std::exception&) {
            throw ConfigError("--labels: expected synthetic:<classes>x<per_class>, got '" + source + "'");
        }
        for (std::size_t k = 0; k < classes; ++k) labels.insert(labels.end(), per_class, static_cast<int>(k));
        return labels;
    }
    std::ifstream in(source);
    if (!in) throw IoError("cannot open " + source);
    long long v = 0;
    while (in >> v) {
        if (v < 0) throw ConfigError(source + ": labels must be non-negative");
        labels.push_back(static_cast<int>(v));
    }
    if (!in.eof()) throw ConfigError(source + ": labels must be integers");
    return labels;
}

int cmd_partition(const std::string& labels_src, std::size_t clients, const std::string& alpha_text,
                  std::uint64_t seed, const std::string& out_dir) {
    const auto labels = load_labels(labels_src);
    if (labels.empty()) throw ConfigError("--labels: no labels");
    double alpha = 0.0;
    if (alpha_text != "homogeneous") {
        try {
            alpha = std::stod(alpha_text);
        } catch (const std::exception&) {
            throw ConfigError("--alpha: expected a positive number or 'homogeneous'");
        }
        if (!(alpha > 0.0)) throw ConfigError("--alpha: must be positive");
    }
    const auto part = alpha > 0.0 ? dirichlet_partition(labels, clients, alpha, seed)
                                  : iid_partition(labels.size(), clients, seed);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    write_json(out_dir + "/partition.json", {{"alpha", alpha > 0.0 ? json(alpha) : json("homogeneous")},
                                            {"seed", seed},
                                            {"num_clients", clients},
                                            {"assignments", part.assignments}});
    const std::size_t num_classes = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
    const auto counts = part.class_counts(labels, num_classes);
    std::ofstream csv(out_dir + "/partition_counts.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot write " + out_dir + "/partition_counts.csv");
    csv << "client";
    for (std::size_t k = 0; k < num_classes; ++k) csv << ",class_" << k;
    csv << "\n";
    for (std::size_t c = 0; c < counts.size(); ++c) {
        csv << c;
        for (auto n : counts[c]) csv << "," << n;
        csv << "\n";
    }
    std::printf("wrote %s/partition.json and %s/partition_counts.csv\n", out_dir.c_str(), out_dir.c_str());
    return kOk;
}

int cmd_cost(const std::string& config_path, int rounds) {
    if (rounds < 0) throw ConfigError("--rounds must be non-negative");
    const auto cfg = load_config(config_path);
    const auto spec = cfg.model_spec();
    const auto base = count_cost(spec);
    const double method_flops = method_forward_flops(spec, cfg.method);
    const json j = {{"method", std::string(method_name(cfg.method.method))},
                    {"param_count", base.param_count},
                    {"fedavg_forward_flops", base.flops_per_forward},
                    {"method_forward_flops", method_flops},
                    {"relative_to_fedavg", method_flops / base.flops_per_forward},
                    {"clients_per_round", cfg.clients_per_round()},
                    {"rounds", rounds},
                    {"comm_bits", comm_cost(base.param_count, static_cast<std::uint64_t>(rounds), cfg.clients_per_round())},
                    {"comm_bits_up_and_down", comm_cost(base.param_count, static_cast<std::uint64_t>(rounds),
                                                        cfg.clients_per_round(), CommBilling::upload_and_download)}};
    std::cout << j.dump(2) << "\n";
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning simulator with curvature diagnostics"};
    app.require_subcommand(1);

    std::string config_path, resume, ckpt_path, clients = "all", labels, alpha = "0.5", out_dir, part_dir = ".";
    std::vector<std::string> overrides;
    std::size_t num_clients = 8;
    std::uint64_t seed = 0;
    int rounds = 0;
    DiagnoseOptions dopt;

    auto* run = app.add_subcommand("run", "Run an experiment");
    run->add_option("--config", config_path, "Experiment JSON")->required();
    run->add_option("--override", overrides, "key=value, dotted keys for nested fields");
    run->add_option("--resume", resume, "Continue from a checkpoint");

    auto* diag = app.add_subcommand("diagnose", "Hessian diagnostics of a checkpoint");
    diag->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
    diag->add_option("--config", config_path, "Experiment JSON the checkpoint came from")->required();
    diag->add_option("--clients", clients, "all or comma-separated ids");
    diag->add_option("--probes", dopt.num_probes, "Hutchinson probes")->check(CLI::PositiveNumber);
    diag->add_option("--top-k", dopt.top_k, "Eigenvalues to estimate")->check(CLI::PositiveNumber);
    diag->add_option("--power-iters", dopt.power_iters, "Power iteration cap")->check(CLI::PositiveNumber);
    diag->add_option("--grid", dopt.grid, "Landscape grid points per axis");
    diag->add_option("--radius", dopt.radius, "Landscape half-width");
    diag->add_option("--out", out_dir, "Output directory (default: the config's output_dir)");

    auto* part = app.add_subcommand("partition", "Dirichlet split of labels across clients");
    part->add_option("--labels", labels, "Label file or synthetic:<classes>x<per_class>")->required();
    part->add_option("--clients", num_clients, "Number of clients")->required()->check(CLI::PositiveNumber);
    part->add_option("--alpha", alpha, "Dirichlet concentration or 'homogeneous'")->required();
    part->add_option("--seed", seed, "Seed")->required();
    part->add_option("--out", part_dir, "Output directory");

    auto* cost = app.add_subcommand("cost", "Compute and communication estimates");
    cost->add_option("--config", config_path, "Experiment JSON")->required();
    cost->add_option("--rounds", rounds, "Rounds to bill")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    try {
        if (*run) return cmd_run(config_path, overrides, resume);
        if (*diag) return cmd_diagnose(ckpt_path, config_path, clients, dopt, out_dir);
        if (*part) return cmd_partition(labels, num_clients, alpha, seed, part_dir);
        if (*cost) return cmd_cost(config_path, rounds);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const CheckpointError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kRuntime;
}
