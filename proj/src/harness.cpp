#include "fedbsd/harness.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <ostream>
#include <string>

#include "fedbsd/errors.hpp"
#include "fedbsd/parallel.hpp"

namespace fedbsd {
namespace {

constexpr const char* kMetricsSchema = "# fedbsd-metrics v1";

std::uint64_t federation_checksum(const Federation& fed) {
    std::vector<double> all = flatten_parameters(SplitModel{fed.server.global_backbone, fed.server.global_head});
    for (const auto& c : fed.clients) {
        const auto p = flatten_parameters(c.model);
        all.insert(all.end(), p.begin(), p.end());
    }
    return parameter_checksum(all);
}

std::vector<double> evaluate_all(const Federation& fed, Strategy strategy, std::size_t threads) {
    std::vector<double> acc(fed.clients.size());
    parallel_for(fed.clients.size(), threads, [&](std::size_t k) {
        SplitModel scratch;
        acc[k] = evaluate_client(evaluation_model(fed, k, strategy, scratch), fed.clients[k].shard.test);
    });
    return acc;
}

double mean(const std::vector<double>& xs) {
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

}  // namespace

double evaluate_client(const SplitModel& model, const Dataset& test) {
    if (test.size() == 0) {
        throw ParameterError("evaluate_client: empty test set");
    }
    const Tensor2D logits = forward(model, test.features).logits;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < logits.rows(); ++b) {
        const auto row = logits.row(b);
        std::size_t best = 0;
        for (std::size_t i = 1; i < row.size(); ++i) {
            if (row[i] > row[best]) {
                best = i;
            }
        }
        correct += best == test.labels[b] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
}

double average_last_k(const MetricsLog& log, std::size_t k) {
    if (k == 0 || log.rounds() < k) {
        throw ParameterError("average_last_k: need at least " + std::to_string(k) + " rounds, log has " +
                             std::to_string(log.rounds()));
    }
    double sum = 0.0;
    for (std::size_t r = log.rounds() - k; r < log.rounds(); ++r) {
        sum += log.mean_accuracy[r];
    }
    return sum / static_cast<double>(k);
}

Dataset build_dataset(const DataSource& source, std::uint64_t seed) {
    if (source.kind == DataSource::Kind::idx) {
        return load_idx(source.idx_images, source.idx_labels);
    }
    RngStream rng = RngStream::derive(seed, StreamTag::data);
    return gen_synthetic_blobs(source.classes, source.dim, source.samples_per_class, source.spread, rng);
}

Federation build_federation(const ExperimentConfig& cfg) {
    cfg.train.validate();
    const Dataset data = build_dataset(cfg.data, cfg.train.seed);
    RngStream part_rng = RngStream::derive(cfg.partition.seed, StreamTag::partition);
    auto shards = partition_by_classes(data, cfg.partition, part_rng);

    Architecture arch;
    arch.input_dim = data.dim();
    arch.hidden = cfg.train.hidden;
    arch.num_classes = data.num_classes;
    SplitModel initial = make_model(arch);
    RngStream init_rng = RngStream::derive(cfg.train.seed, StreamTag::init);
    init_params(initial, init_rng);

    Federation fed;
    fed.server.global_backbone = initial.backbone;
    fed.server.global_head = initial.head;
    fed.server.master_seed = cfg.train.seed;
    fed.clients.reserve(shards.size());
    for (auto& shard : shards) {
        ClientState c;
        c.client_id = shard.client_id;
        c.shard = std::move(shard);
        c.model = clone_model(initial);
        fed.clients.push_back(std::move(c));
    }
    return fed;
}

const SplitModel& evaluation_model(const Federation& fed, std::size_t client_id, Strategy strategy,
                                   SplitModel& scratch) {
    if (strategy == Strategy::fedavg) {
        scratch = SplitModel{fed.server.global_backbone, fed.server.global_head};
        return scratch;
    }
    return fed.clients.at(client_id).model;
}

MetricsLog run_experiment(const ExperimentConfig& cfg, const RoundObserver& observer, Federation* final_state) {
    Federation fed = build_federation(cfg);
    const TrainConfig& train = cfg.train;

    MetricsLog log;
    log.config = cfg;
    for (std::size_t r = 0; r < train.rounds; ++r) {
        const RoundReport report = run_round(fed.server, fed.clients, train, train.strategy);
        auto acc = evaluate_all(fed, train.strategy, train.threads);
        log.mean_accuracy.push_back(mean(acc));
        log.round_checksums.push_back(federation_checksum(fed));
        if (observer) {
            observer(report, acc);
        }
        log.accuracy.push_back(std::move(acc));
    }

    if (train.finetune_epochs > 0) {
        log.finetuned_accuracy.resize(fed.clients.size());
        parallel_for(fed.clients.size(), train.threads, [&](std::size_t k) {
            ClientState& client = fed.clients[k];
            if (train.strategy == Strategy::fedavg) {
                client.model = SplitModel{fed.server.global_backbone, fed.server.global_head};
            }
            RngStream rng = RngStream::derive(train.seed, StreamTag::finetune, {client.client_id});
            try {
                local_finetune_head(client, train.finetune_epochs, train, rng);
            } catch (const DivergenceError& e) {
                throw DivergenceError("finetune, client " + std::to_string(client.client_id) + ": " + e.what());
            }
            log.finetuned_accuracy[k] = evaluate_client(client.model, client.shard.test);
        });
    }

    if (final_state != nullptr) {
        *final_state = std::move(fed);
    }
    return log;
}

MetricsLog run_experiment(const TrainConfig& train, const PartitionSpec& partition, const DataSource& data,
                          const RoundObserver& observer) {
    return run_experiment(ExperimentConfig{train, partition, data}, observer);
}

void write_metrics(const MetricsLog& log, std::ostream& out) {
    out << kMetricsSchema << '\n';
    for (const auto& [key, value] : config_entries(log.config, false)) {
        out << "# " << key << '=' << value << '\n';
    }
    out << "round,client_id,accuracy\n";
    for (std::size_t r = 0; r < log.accuracy.size(); ++r) {
        for (std::size_t k = 0; k < log.accuracy[r].size(); ++k) {
            out << (r + 1) << ',' << k << ',' << format_double(log.accuracy[r][k]) << '\n';
        }
    }
    const std::size_t k = std::min(log.config.train.eval_last_k, log.rounds());
    if (k > 0) {
        out << "summary,mean_last_" << k << ',' << format_double(average_last_k(log, k)) << '\n';
    }
    if (!log.finetuned_accuracy.empty()) {
        out << "summary,finetuned_mean," << format_double(mean(log.finetuned_accuracy)) << '\n';
    }
}

void write_metrics(const MetricsLog& log, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw ConfigError("cannot write metrics file " + path.string());
    }
    write_metrics(log, out);
}

}  // namespace fedbsd
