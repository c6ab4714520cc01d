#include "fedbsd/protocol.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

#include "fedbsd/errors.hpp"
#include "fedbsd/losses.hpp"
#include "fedbsd/parallel.hpp"

namespace fedbsd {
namespace {

std::vector<std::size_t> gather_labels(const std::vector<std::size_t>& labels,
                                       std::span<const std::size_t> idx) {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) {
        out.push_back(labels[i]);
    }
    return out;
}

void check_loss(double loss) {
    if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite loss: training diverged");
    }
}

// One pass over n samples in shuffled minibatches; step(indices) returns the
// batch loss. Returns the sample-weighted mean loss.
template <typename Step>
double run_epoch(std::size_t n, std::size_t batch_size, RngStream& rng, Step&& step) {
    if (n == 0) {
        return 0.0;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span(order));
    const std::size_t bs = std::min(batch_size, n);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += bs) {
        const std::size_t count = std::min(bs, n - start);
        const double loss = step(std::span<const std::size_t>(order.data() + start, count));
        total += loss * static_cast<double>(count);
    }
    return total / static_cast<double>(n);
}

// Head-only SGD on fixed features.
void train_head(HeadLayer& head, const Tensor2D& features, const std::vector<std::size_t>& labels,
                std::size_t epochs, const TrainConfig& cfg, RngStream& rng,
                std::vector<double>* epoch_losses) {
    for (std::size_t e = 0; e < epochs; ++e) {
        const double loss = run_epoch(labels.size(), cfg.batch_size, rng, [&](auto idx) {
            const Tensor2D f = features.gather_rows(idx);
            const auto y = gather_labels(labels, idx);
            const CrossEntropy ce = cross_entropy(forward_head(head, f), y);
            check_loss(ce.loss);
            backward_head(head, f, ce.grad);
            sgd_step(head, cfg.lr, cfg.momentum);
            return ce.loss;
        });
        if (epoch_losses != nullptr) {
            epoch_losses->push_back(loss);
        }
    }
}

// Shared body of FedBSD and FedRep. lambda = 0 with replace_backbone = true is FedRep.
BackboneNet split_update(ClientState& client, const BackboneNet& global_backbone, const TrainConfig& cfg,
                         RngStream& rng, std::vector<double>* epoch_losses, double lambda,
                         bool replace_backbone) {
    SplitModel& model = client.model;
    if (!same_architecture(model.backbone, global_backbone)) {
        throw ShapeError("client " + std::to_string(client.client_id) +
                         ": received backbone does not match the local architecture");
    }
    if (replace_backbone) {
        copy_backbone(global_backbone, model.backbone);
        model.backbone.reset_velocity();
    }
    const Dataset& train = client.shard.train;
    if (train.size() == 0) {
        return model.backbone;
    }

    // Teacher features from the frozen received backbone.
    const Tensor2D teacher = forward_backbone(global_backbone, train.features);

    // Phase 1: head.
    if (cfg.head_epochs > 0) {
        const Tensor2D head_features = cfg.head_features == HeadFeatures::global
                                           ? teacher
                                           : forward_backbone(model.backbone, train.features);
        train_head(model.head, head_features, train.labels, cfg.head_epochs, cfg, rng, epoch_losses);
    }

    // Phase 2: backbone, head frozen.
    for (std::size_t e = 0; e < cfg.backbone_epochs; ++e) {
        const double loss = run_epoch(train.size(), cfg.batch_size, rng, [&](auto idx) {
            const Tensor2D x = train.features.gather_rows(idx);
            const auto y = gather_labels(train.labels, idx);
            const ForwardResult fr = forward(model, x);
            const BsdLoss l = bsd_loss(teacher.gather_rows(idx), fr.cache.features, fr.logits, y, cfg.tau,
                                       lambda, cfg.distill);
            check_loss(l.value.total);
            backward(model, fr.cache, l.d_logits, GradScope::backbone_only, &l.d_local_features);
            sgd_step(model.backbone, cfg.lr, cfg.momentum);
            return l.value.total;
        });
        if (epoch_losses != nullptr) {
            epoch_losses->push_back(loss);
        }
    }
    return model.backbone;
}

void train_full(ClientState& client, std::size_t epochs, const TrainConfig& cfg, RngStream& rng,
                std::vector<double>* epoch_losses) {
    SplitModel& model = client.model;
    const Dataset& train = client.shard.train;
    for (std::size_t e = 0; e < epochs; ++e) {
        const double loss = run_epoch(train.size(), cfg.batch_size, rng, [&](auto idx) {
            const Tensor2D x = train.features.gather_rows(idx);
            const auto y = gather_labels(train.labels, idx);
            const ForwardResult fr = forward(model, x);
            const CrossEntropy ce = cross_entropy(fr.logits, y);
            check_loss(ce.loss);
            backward(model, fr.cache, ce.grad, GradScope::full);
            sgd_step(model.backbone, cfg.lr, cfg.momentum);
            sgd_step(model.head, cfg.lr, cfg.momentum);
            return ce.loss;
        });
        if (epoch_losses != nullptr) {
            epoch_losses->push_back(loss);
        }
    }
}

void zero_buffers(LinearLayer& layer) {
    layer.zero_grad();
    layer.reset_velocity();
}

template <typename Payload>
void sort_and_check(std::vector<Payload>& uploads) {
    if (uploads.empty()) {
        throw ParameterError("aggregation needs at least one upload");
    }
    std::sort(uploads.begin(), uploads.end(),
              [](const Payload& a, const Payload& b) { return a.client_id < b.client_id; });
}

// Mean around the first (lowest-id) upload:
//   acc[k] = p_0[k] + (sum_{i>=1} (p_i[k] - p_0[k])) / K
// summed in ascending id order, or with coefficients w_i / W when weighted.
// Identical uploads reproduce p_0 exactly and an antisymmetric pair gives
// exactly zero, which a plain sum-then-divide does not guarantee.
void accumulate_mean(std::vector<double>& acc, const std::vector<std::vector<double>>& params,
                     const std::vector<double>& weights, bool weighted) {
    const double total_weight = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (weighted && !(total_weight > 0.0)) {
        throw ParameterError("weighted aggregation needs a positive total weight");
    }
    const std::vector<double>& base = params.front();
    std::vector<double> delta(base.size(), 0.0);
    for (std::size_t u = 1; u < params.size(); ++u) {
        const double coef = weights[u] / total_weight;
        for (std::size_t k = 0; k < delta.size(); ++k) {
            const double d = params[u][k] - base[k];
            delta[k] += weighted ? coef * d : d;
        }
    }
    const double count = static_cast<double>(params.size());
    acc.resize(base.size());
    for (std::size_t k = 0; k < acc.size(); ++k) {
        acc[k] = base[k] + (weighted ? delta[k] : delta[k] / count);
    }
}

}  // namespace

std::vector<unsigned char> serialize_parameters(std::span<const double> params) {
    std::vector<unsigned char> out(params.size() * 8);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(params[i]);
        for (int b = 0; b < 8; ++b) {
            out[i * 8 + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
        }
    }
    return out;
}

std::vector<double> deserialize_parameters(std::span<const unsigned char> bytes) {
    if (bytes.size() % 8 != 0) {
        throw FormatError("parameter payload length is not a multiple of 8", bytes.size());
    }
    std::vector<double> out(bytes.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= std::uint64_t{bytes[i * 8 + static_cast<std::size_t>(b)]} << (8 * b);
        }
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

void load_parameters(BackboneNet& net, std::span<const double> params) {
    if (params.size() != net.parameter_count()) {
        throw ShapeError("backbone expects " + std::to_string(net.parameter_count()) + " parameters, got " +
                         std::to_string(params.size()));
    }
    std::size_t pos = 0;
    for (auto& layer : net.layers) {
        for (double& w : layer.weight.values()) {
            w = params[pos++];
        }
        for (double& b : layer.bias) {
            b = params[pos++];
        }
    }
}

void load_parameters(SplitModel& model, std::span<const double> params) {
    if (params.size() != model.parameter_count()) {
        throw ShapeError("model expects " + std::to_string(model.parameter_count()) + " parameters, got " +
                         std::to_string(params.size()));
    }
    const std::size_t nb = model.backbone.parameter_count();
    load_parameters(model.backbone, params.first(nb));
    std::size_t pos = nb;
    for (double& w : model.head.layer.weight.values()) {
        w = params[pos++];
    }
    for (double& b : model.head.layer.bias) {
        b = params[pos++];
    }
}

std::vector<std::size_t> select_clients(std::size_t n, double r, RngStream& rng) {
    if (n == 0) {
        throw ParameterError("select_clients: no clients");
    }
    if (!(r > 0.0 && r <= 1.0)) {
        throw ParameterError("participation rate must be in (0, 1]");
    }
    const auto rounded = static_cast<std::size_t>(std::llround(r * static_cast<double>(n)));
    const std::size_t count = std::clamp<std::size_t>(rounded, 1, n);
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
        std::swap(pool[i], pool[i + rng.below(n - i)]);
    }
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

BackboneNet client_update_fedbsd(ClientState& client, const BackboneNet& global_backbone,
                                 const TrainConfig& cfg, RngStream& rng, std::vector<double>* epoch_losses) {
    return split_update(client, global_backbone, cfg, rng, epoch_losses, cfg.lambda,
                        cfg.backbone_init == BackboneInit::global);
}

BackboneNet client_update_fedrep(ClientState& client, const BackboneNet& global_backbone,
                                 const TrainConfig& cfg, RngStream& rng, std::vector<double>* epoch_losses) {
    return split_update(client, global_backbone, cfg, rng, epoch_losses, 0.0, true);
}

SplitModel client_update_fedavg(ClientState& client, const SplitModel& global_model, const TrainConfig& cfg,
                                RngStream& rng, std::vector<double>* epoch_losses) {
    if (!same_architecture(client.model, global_model)) {
        throw ShapeError("client " + std::to_string(client.client_id) +
                         ": received model does not match the local architecture");
    }
    client.model = global_model;
    for (auto& layer : client.model.backbone.layers) {
        zero_buffers(layer);
    }
    zero_buffers(client.model.head.layer);
    train_full(client, cfg.local_epochs, cfg, rng, epoch_losses);
    return client.model;
}

void client_update_local(ClientState& client, const TrainConfig& cfg, RngStream& rng,
                         std::vector<double>* epoch_losses) {
    train_full(client, cfg.local_epochs, cfg, rng, epoch_losses);
}

BackboneNet aggregate_backbones(std::vector<BackbonePayload> uploads, bool weighted) {
    sort_and_check(uploads);
    std::vector<std::vector<double>> params;
    std::vector<double> weights;
    for (const auto& u : uploads) {
        if (!same_architecture(u.backbone, uploads.front().backbone)) {
            throw ShapeError("aggregate_backbones: architecture mismatch in upload from client " +
                             std::to_string(u.client_id));
        }
        params.push_back(flatten_parameters(u.backbone));
        weights.push_back(u.weight);
    }
    std::vector<double> mean;
    accumulate_mean(mean, params, weights, weighted);
    BackboneNet out = uploads.front().backbone;
    load_parameters(out, mean);
    for (auto& layer : out.layers) {
        zero_buffers(layer);
    }
    return out;
}

SplitModel aggregate_full(std::vector<ModelPayload> uploads, bool weighted) {
    sort_and_check(uploads);
    std::vector<std::vector<double>> params;
    std::vector<double> weights;
    for (const auto& u : uploads) {
        if (!same_architecture(u.model, uploads.front().model)) {
            throw ShapeError("aggregate_full: architecture mismatch in upload from client " +
                             std::to_string(u.client_id));
        }
        params.push_back(flatten_parameters(u.model));
        weights.push_back(u.weight);
    }
    std::vector<double> mean;
    accumulate_mean(mean, params, weights, weighted);
    SplitModel out = uploads.front().model;
    load_parameters(out, mean);
    for (auto& layer : out.backbone.layers) {
        zero_buffers(layer);
    }
    zero_buffers(out.head.layer);
    return out;
}

void local_finetune_head(ClientState& client, std::size_t epochs, const TrainConfig& cfg, RngStream& rng) {
    if (epochs == 0 || client.shard.train.size() == 0) {
        return;
    }
    const Tensor2D features = forward_backbone(client.model.backbone, client.shard.train.features);
    train_head(client.model.head, features, client.shard.train.labels, epochs, cfg, rng, nullptr);
}

RoundReport run_round(ServerState& server, std::vector<ClientState>& clients, const TrainConfig& cfg,
                      Strategy strategy) {
    const auto started = std::chrono::steady_clock::now();
    RoundReport report;
    report.round = server.round + 1;
    const std::size_t t = report.round;

    RngStream select_rng = RngStream::derive(server.master_seed, StreamTag::select, {t});
    report.selected = select_clients(clients.size(), cfg.participation, select_rng);
    const std::size_t k = report.selected.size();
    report.losses.resize(k);

    const SplitModel global_model{server.global_backbone, server.global_head};
    std::vector<std::vector<unsigned char>> wire(k);

    parallel_for(k, cfg.threads, [&](std::size_t slot) {
        ClientState& client = clients[report.selected[slot]];
        RngStream rng = RngStream::derive(server.master_seed, StreamTag::client, {t, client.client_id});
        auto* losses = &report.losses[slot];
        try {
            switch (strategy) {
                case Strategy::fedbsd:
                    wire[slot] = serialize_parameters(flatten_parameters(
                        client_update_fedbsd(client, server.global_backbone, cfg, rng, losses)));
                    break;
                case Strategy::fedrep:
                    wire[slot] = serialize_parameters(flatten_parameters(
                        client_update_fedrep(client, server.global_backbone, cfg, rng, losses)));
                    break;
                case Strategy::fedavg:
                    wire[slot] = serialize_parameters(
                        flatten_parameters(client_update_fedavg(client, global_model, cfg, rng, losses)));
                    break;
                case Strategy::local:
                    client_update_local(client, cfg, rng, losses);
                    break;
            }
        } catch (const DivergenceError& e) {
            throw DivergenceError("round " + std::to_string(t) + ", client " + std::to_string(client.client_id) +
                                  ": " + e.what());
        }
    });

    for (std::size_t slot = 0; slot < k; ++slot) {
        report.upload_bytes += wire[slot].size();
        clients[report.selected[slot]].participation.push_back(t);
    }

    const bool weighted = cfg.aggregation == Aggregation::weighted;
    auto weight_of = [&](std::size_t slot) {
        return static_cast<double>(clients[report.selected[slot]].shard.train.size());
    };
    if (strategy == Strategy::fedbsd || strategy == Strategy::fedrep) {
        std::vector<BackbonePayload> uploads;
        for (std::size_t slot = 0; slot < k; ++slot) {
            BackbonePayload p{report.selected[slot], server.global_backbone, weight_of(slot)};
            load_parameters(p.backbone, deserialize_parameters(wire[slot]));
            uploads.push_back(std::move(p));
        }
        server.global_backbone = aggregate_backbones(std::move(uploads), weighted);
    } else if (strategy == Strategy::fedavg) {
        std::vector<ModelPayload> uploads;
        for (std::size_t slot = 0; slot < k; ++slot) {
            ModelPayload p{report.selected[slot], global_model, weight_of(slot)};
            load_parameters(p.model, deserialize_parameters(wire[slot]));
            uploads.push_back(std::move(p));
        }
        SplitModel merged = aggregate_full(std::move(uploads), weighted);
        server.global_backbone = std::move(merged.backbone);
        server.global_head = std::move(merged.head);
    }

    report.uploads = std::move(wire);
    server.round = t;
    report.global_checksum =
        strategy == Strategy::fedavg
            ? parameter_checksum(flatten_parameters(SplitModel{server.global_backbone, server.global_head}))
            : parameter_checksum(flatten_parameters(server.global_backbone));
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

}  // namespace fedbsd
