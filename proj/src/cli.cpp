#include "fedbsd/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "fedbsd/checkpoint.hpp"
#include "fedbsd/config.hpp"
#include "fedbsd/errors.hpp"
#include "fedbsd/harness.hpp"

namespace fedbsd::cli {
namespace {

struct GlobalFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string strategy;
    std::optional<std::size_t> threads;
    std::vector<std::string> sets;
    bool quiet = false;
};

std::string hex(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Precedence: defaults < config file < --set key=value < dedicated flags.
ExperimentConfig resolve_config(const GlobalFlags& flags) {
    ExperimentConfig cfg = flags.config.empty() ? ExperimentConfig{} : load_config(flags.config);
    if (flags.config.empty()) {
        cfg.partition.seed = cfg.train.seed;
    }
    for (const auto& kv : flags.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (flags.seed) {
        apply_setting(cfg, "seed", std::to_string(*flags.seed));
    }
    if (!flags.strategy.empty()) {
        apply_setting(cfg, "strategy", flags.strategy);
    }
    if (flags.threads) {
        apply_setting(cfg, "threads", std::to_string(*flags.threads));
    }
    cfg.train.validate();
    return cfg;
}

std::size_t summary_window(const MetricsLog& log) {
    return std::min(log.config.train.eval_last_k, log.rounds());
}

int cmd_run(const GlobalFlags& flags, const std::string& rounds_log, const std::string& checkpoint_dir,
            std::ostream& out) {
    const ExperimentConfig cfg = resolve_config(flags);
    std::ofstream jsonl;
    if (!rounds_log.empty()) {
        jsonl.open(rounds_log, std::ios::app);
        if (!jsonl) {
            throw ConfigError("cannot open rounds log " + rounds_log);
        }
    }
    auto observer = [&](const RoundReport& report, const std::vector<double>& acc) {
        double mean = 0.0;
        for (double a : acc) {
            mean += a;
        }
        mean /= static_cast<double>(acc.size());
        if (!flags.quiet) {
            out << "round " << report.round << " mean_accuracy " << format_double(mean) << '\n';
        }
        if (jsonl.is_open()) {
            nlohmann::json j;
            j["round"] = report.round;
            j["selected"] = report.selected;
            j["losses"] = report.losses;
            j["upload_bytes"] = report.upload_bytes;
            j["wall_seconds"] = report.wall_seconds;
            j["global_checksum"] = hex(report.global_checksum);
            j["mean_accuracy"] = mean;
            jsonl << j.dump() << '\n';
        }
    };

    Federation final_state;
    const MetricsLog log = run_experiment(cfg, observer, &final_state);
    const std::string out_path = flags.out.empty() ? "metrics.csv" : flags.out;
    write_metrics(log, out_path);

    if (!checkpoint_dir.empty()) {
        std::filesystem::create_directories(checkpoint_dir);
        const std::filesystem::path dir(checkpoint_dir);
        save_checkpoint(SplitModel{final_state.server.global_backbone, final_state.server.global_head},
                        dir / "global.ckpt");
        for (const auto& c : final_state.clients) {
            save_checkpoint(c.model, dir / ("client_" + std::to_string(c.client_id) + ".ckpt"));
        }
    }

    const std::size_t k = summary_window(log);
    out << "mean_last_" << k << ' ' << format_double(average_last_k(log, k)) << '\n';
    if (!log.finetuned_accuracy.empty()) {
        double ft = 0.0;
        for (double a : log.finetuned_accuracy) {
            ft += a;
        }
        out << "finetuned_mean " << format_double(ft / static_cast<double>(log.finetuned_accuracy.size()))
            << '\n';
    }
    out << "metrics written to " << out_path << '\n';
    return kOk;
}

int cmd_partition(const GlobalFlags& flags, std::ostream& out) {
    const ExperimentConfig cfg = resolve_config(flags);
    const Dataset data = build_dataset(cfg.data, cfg.train.seed);
    RngStream rng = RngStream::derive(cfg.partition.seed, StreamTag::partition);
    const auto shards = partition_by_classes(data, cfg.partition, rng);
    if (flags.out.empty()) {
        write_manifest(shards, out);
        return kOk;
    }
    std::ofstream file(flags.out);
    if (!file) {
        throw ConfigError("cannot write manifest " + flags.out);
    }
    write_manifest(shards, file);
    if (!flags.quiet) {
        out << "manifest with " << shards.size() << " clients written to " << flags.out << '\n';
    }
    return kOk;
}

int cmd_evaluate(const GlobalFlags& flags, const std::string& checkpoint, std::size_t client_id,
                 std::ostream& out) {
    const ExperimentConfig cfg = resolve_config(flags);
    const Federation fed = build_federation(cfg);
    if (client_id >= fed.clients.size()) {
        throw ConfigError("client " + std::to_string(client_id) + " out of range (have " +
                          std::to_string(fed.clients.size()) + ")");
    }
    const SplitModel model = load_checkpoint(checkpoint);
    const auto& shard = fed.clients[client_id].shard;
    if (model.backbone.input_dim() != shard.test.dim() || model.head.num_classes() != shard.test.num_classes) {
        throw ConfigError("checkpoint architecture does not match the configured data");
    }
    out << "client " << client_id << " accuracy " << format_double(evaluate_client(model, shard.test)) << '\n';
    return kOk;
}

std::map<std::string, std::string> golden_values(const ExperimentConfig& cfg) {
    const MetricsLog log = run_experiment(cfg);
    std::ostringstream csv;
    write_metrics(log, csv);
    std::map<std::string, std::string> values;
    values["final_checksum"] = hex(log.round_checksums.back());
    values["metrics_checksum"] = hex(fnv1a(csv.str()));
    values["mean_last_k"] = format_double(average_last_k(log, summary_window(log)));
    return values;
}

int cmd_golden(const GlobalFlags& flags, const std::string& golden_path, bool regenerate, std::ostream& out) {
    const ExperimentConfig cfg = resolve_config(flags);
    const auto actual = golden_values(cfg);
    if (regenerate) {
        std::ofstream file(golden_path);
        if (!file) {
            throw ConfigError("cannot write golden file " + golden_path);
        }
        file << "# fedbsd golden v1\n";
        for (const auto& [k, v] : actual) {
            file << k << '=' << v << '\n';
        }
        out << "golden values written to " << golden_path << '\n';
        return kOk;
    }
    std::ifstream file(golden_path);
    if (!file) {
        throw ConfigError("cannot open golden file " + golden_path);
    }
    std::map<std::string, std::string> expected;
    std::string line;
    while (std::getline(file, line)) {
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq != std::string::npos) {
            expected[line.substr(0, eq)] = line.substr(eq + 1);
        }
    }
    int status = kOk;
    for (const auto& [k, v] : actual) {
        const auto it = expected.find(k);
        const bool match = it != expected.end() && it->second == v;
        if (!match) {
            status = kGoldenMismatch;
        }
        if (!flags.quiet || !match) {
            out << (match ? "match    " : "MISMATCH ") << k << " expected="
                << (it == expected.end() ? "<missing>" : it->second) << " actual=" << v << '\n';
        }
    }
    return status;
}

}  // namespace

std::uint64_t fnv1a(const std::string& bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"FedBSD federated learning simulator", "fedbsd"};
    app.require_subcommand(1);
    app.fallthrough();
    app.failure_message(CLI::FailureMessage::help);

    GlobalFlags flags;
    app.add_option("--config", flags.config, "key=value configuration file");
    app.add_option("--seed", flags.seed, "master seed (overrides config)");
    app.add_option("--out", flags.out, "output path (metrics CSV or partition manifest)");
    app.add_option("--strategy", flags.strategy, "fedbsd | fedrep | fedavg | local (overrides config)");
    app.add_option("--threads", flags.threads, "worker threads (results do not depend on it)");
    app.add_option("--set", flags.sets, "extra key=value override, repeatable");
    app.add_flag("--quiet", flags.quiet, "suppress progress output");

    std::string rounds_log;
    std::string checkpoint_dir;
    auto* run_cmd = app.add_subcommand("run", "run an experiment and write the metrics CSV");
    run_cmd->add_option("--rounds-log", rounds_log, "append per-round reports as JSON lines");
    run_cmd->add_option("--checkpoint-dir", checkpoint_dir, "save final server and client models here");

    auto* partition_cmd = app.add_subcommand("partition", "write the partition manifest CSV without training");

    std::string checkpoint;
    std::size_t client_id = 0;
    auto* evaluate_cmd = app.add_subcommand("evaluate", "score a checkpoint on one client's test shard");
    evaluate_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    evaluate_cmd->add_option("--client", client_id, "client id")->required();

    std::string golden_path;
    bool regenerate = false;
    auto* golden_cmd = app.add_subcommand("golden", "compare checksums of a frozen run against goldens");
    golden_cmd->add_option("--golden", golden_path, "golden checksum file")->required();
    golden_cmd->add_flag("--regenerate", regenerate, "rewrite the golden file instead of comparing");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        // Help requests exit 0 and print to out; everything else prints usage to err.
        return app.exit(e, out, err) == 0 ? kOk : kConfigError;
    }

    try {
        if (run_cmd->parsed()) {
            return cmd_run(flags, rounds_log, checkpoint_dir, out);
        }
        if (partition_cmd->parsed()) {
            return cmd_partition(flags, out);
        }
        if (evaluate_cmd->parsed()) {
            return cmd_evaluate(flags, checkpoint, client_id, out);
        }
        return cmd_golden(flags, golden_path, regenerate, out);
    } catch (const DivergenceError& e) {
        err << "error: training diverged: " << e.what() << '\n';
        return kDiverged;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kConfigError;
    }
}

}  // namespace fedbsd::cli
