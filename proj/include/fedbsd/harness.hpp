#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <vector>

#include "fedbsd/config.hpp"
#include "fedbsd/data.hpp"
#include "fedbsd/nn.hpp"
#include "fedbsd/protocol.hpp"

namespace fedbsd {

// Fraction of argmax-correct predictions; ties go to the lowest class index.
double evaluate_client(const SplitModel& model, const Dataset& test);

struct MetricsLog {
    ExperimentConfig config;
    std::vector<std::vector<double>> accuracy;  // [round][client]
    std::vector<double> mean_accuracy;          // per round, over clients
    std::vector<std::uint64_t> round_checksums;  // server + all client parameters after each round
    std::vector<double> finetuned_accuracy;     // per client, empty unless finetune_epochs > 0

    std::size_t rounds() const noexcept { return mean_accuracy.size(); }
};

// Mean over the last k rounds of the per-round mean client accuracy.
double average_last_k(const MetricsLog& log, std::size_t k = 10);

Dataset build_dataset(const DataSource& source, std::uint64_t seed);

// Deterministic federation setup shared by run_experiment and the CLI.
struct Federation {
    ServerState server;
    std::vector<ClientState> clients;
};

Federation build_federation(const ExperimentConfig& cfg);

// The model a client is scored with: its personalized model, or the server
// model under fedavg.
const SplitModel& evaluation_model(const Federation& fed, std::size_t client_id, Strategy strategy,
                                   SplitModel& scratch);

// Called after every round with the round report and per-client accuracies.
using RoundObserver = std::function<void(const RoundReport&, const std::vector<double>&)>;

MetricsLog run_experiment(const ExperimentConfig& cfg, const RoundObserver& observer = {},
                          Federation* final_state = nullptr);
MetricsLog run_experiment(const TrainConfig& train, const PartitionSpec& partition, const DataSource& data,
                          const RoundObserver& observer = {});

// CSV: '#'-prefixed header (schema line + config echo), then
// round,client_id,accuracy rows, then summary rows.
void write_metrics(const MetricsLog& log, std::ostream& out);
void write_metrics(const MetricsLog& log, const std::filesystem::path& path);

}  // namespace fedbsd
