#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "fedbsd/data.hpp"
#include "fedbsd/losses.hpp"

namespace fedbsd {

enum class Strategy { fedbsd, fedrep, fedavg, local };

// Where the FedBSD student backbone starts phase 2: the client's own previous
// backbone (local) or a copy of the received global backbone (global).
enum class BackboneInit { local, global };

// Which backbone produces the features the head is trained on in phase 1.
enum class HeadFeatures { global, local };

enum class Aggregation { uniform, weighted };

struct TrainConfig {
    std::size_t rounds = 100;
    double participation = 0.1;
    std::size_t head_epochs = 10;
    std::size_t backbone_epochs = 5;
    std::size_t local_epochs = 5;  // FedAvg and Local
    double lr = 0.01;
    double momentum = 0.5;
    double tau = 2.0;
    double lambda = 1.0;
    std::size_t batch_size = 50;
    Strategy strategy = Strategy::fedbsd;
    std::uint64_t seed = 1;
    std::vector<std::size_t> hidden{64, 64};
    DistillOptions distill;
    BackboneInit backbone_init = BackboneInit::local;
    HeadFeatures head_features = HeadFeatures::global;
    Aggregation aggregation = Aggregation::uniform;
    std::size_t finetune_epochs = 0;
    std::size_t eval_last_k = 10;
    std::size_t threads = 1;  // execution only; never affects results

    void validate() const;
};

struct DataSource {
    enum class Kind { synthetic, idx };
    Kind kind = Kind::synthetic;
    std::size_t classes = 10;
    std::size_t dim = 32;
    std::size_t samples_per_class = 500;
    double spread = 0.3;
    std::filesystem::path idx_images;
    std::filesystem::path idx_labels;
};

struct ExperimentConfig {
    TrainConfig train;
    PartitionSpec partition;
    DataSource data;
};

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& s);

// Applies one key=value setting. Throws ConfigError on unknown keys (listing
// the valid ones) or malformed values.
void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value,
                   std::size_t line = 0);

// Flat key=value text; '#' starts a comment; blank lines ignored. Keys not
// present keep their defaults.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::filesystem::path& path);

// Every key with its current value, in a fixed order. Execution-only keys
// (threads) are omitted when include_execution is false.
std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg,
                                                                bool include_execution = true);
void write_config(const ExperimentConfig& cfg, std::ostream& out);

const std::vector<std::string>& config_keys();

// Shortest round-trip decimal form of a double.
std::string format_double(double v);

}  // namespace fedbsd
