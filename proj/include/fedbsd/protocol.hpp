#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedbsd/config.hpp"
#include "fedbsd/data.hpp"
#include "fedbsd/nn.hpp"
#include "fedbsd/rng.hpp"

namespace fedbsd {

struct ServerState {
    BackboneNet global_backbone;
    HeadLayer global_head;  // only meaningful for full-model strategies (fedavg)
    std::size_t round = 0;
    std::uint64_t master_seed = 0;
};

struct ClientState {
    std::size_t client_id = 0;
    ClientShard shard;
    SplitModel model;
    std::vector<std::size_t> participation;  // rounds this client was selected in
};

struct RoundReport {
    std::size_t round = 0;
    std::vector<std::size_t> selected;
    std::vector<std::vector<double>> losses;  // per selected client, mean loss per local epoch
    double wall_seconds = 0.0;
    std::size_t upload_bytes = 0;
    std::vector<std::vector<unsigned char>> uploads;  // wire bytes per selected client (empty under local)
    std::uint64_t global_checksum = 0;  // parameter checksum of the server model after aggregation
};

// What a client sends back. Backbone-only strategies produce BackbonePayload,
// so a head cannot be uploaded by construction.
struct BackbonePayload {
    std::size_t client_id = 0;
    BackboneNet backbone;
    double weight = 1.0;
};

struct ModelPayload {
    std::size_t client_id = 0;
    SplitModel model;
    double weight = 1.0;
};

// Wire form: the parameters as little-endian IEEE-754 doubles in
// flatten_parameters order, nothing else. The receiver supplies the
// architecture.
std::vector<unsigned char> serialize_parameters(std::span<const double> params);
std::vector<double> deserialize_parameters(std::span<const unsigned char> bytes);
void load_parameters(BackboneNet& net, std::span<const double> params);
void load_parameters(SplitModel& model, std::span<const double> params);

// Uniform sample without replacement of max(1, round(r * n)) ids, sorted.
std::vector<std::size_t> select_clients(std::size_t n, double r, RngStream& rng);

// Phase 1 trains the head on features from the frozen received backbone;
// phase 2 distills the global backbone (teacher, frozen) into the local
// backbone with the new head frozen. Returns the distilled backbone.
BackboneNet client_update_fedbsd(ClientState& client, const BackboneNet& global_backbone,
                                 const TrainConfig& cfg, RngStream& rng,
                                 std::vector<double>* epoch_losses = nullptr);

// FedRep: local backbone replaced by the global one, then head epochs and
// cross-entropy-only backbone epochs.
BackboneNet client_update_fedrep(ClientState& client, const BackboneNet& global_backbone,
                                 const TrainConfig& cfg, RngStream& rng,
                                 std::vector<double>* epoch_losses = nullptr);

// FedAvg: local model replaced by the global model, then local_epochs of
// cross-entropy SGD over all parameters.
SplitModel client_update_fedavg(ClientState& client, const SplitModel& global_model,
                                const TrainConfig& cfg, RngStream& rng,
                                std::vector<double>* epoch_losses = nullptr);

// Local-only: local_epochs of cross-entropy SGD on the client's own model.
void client_update_local(ClientState& client, const TrainConfig& cfg, RngStream& rng,
                         std::vector<double>* epoch_losses = nullptr);

// Element-wise mean over uploads, taken around the lowest-id upload and summed
// in ascending client-id order (see protocol.cpp for the exact formula).
// weighted=true uses payload weights instead of 1/K.
BackboneNet aggregate_backbones(std::vector<BackbonePayload> uploads, bool weighted = false);
SplitModel aggregate_full(std::vector<ModelPayload> uploads, bool weighted = false);

// Trains only the head on features of the client's current (frozen) backbone.
void local_finetune_head(ClientState& client, std::size_t epochs, const TrainConfig& cfg, RngStream& rng);

// One round: select, broadcast, local updates, aggregate. Client updates run on
// cfg.threads workers; results do not depend on the thread count.
RoundReport run_round(ServerState& server, std::vector<ClientState>& clients, const TrainConfig& cfg,
                      Strategy strategy);

}  // namespace fedbsd
