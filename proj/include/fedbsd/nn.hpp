#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fedbsd/rng.hpp"
#include "fedbsd/tensor.hpp"

namespace fedbsd {

// Fully connected layer y = x W^T + b, with gradient and momentum buffers
// shaped like the parameters.
struct LinearLayer {
    Tensor2D weight;  // out x in
    std::vector<double> bias;
    Tensor2D grad_weight;
    std::vector<double> grad_bias;
    Tensor2D vel_weight;
    std::vector<double> vel_bias;

    LinearLayer() = default;
    LinearLayer(std::size_t in_features, std::size_t out_features);

    std::size_t in_features() const noexcept { return weight.cols(); }
    std::size_t out_features() const noexcept { return weight.rows(); }
    std::size_t parameter_count() const noexcept { return weight.size() + bias.size(); }

    void zero_grad();
    void reset_velocity();
};

// Everything but the final classification layer. relu[i] says whether ReLU
// follows layer i; by default the last layer emits raw features.
struct BackboneNet {
    std::vector<LinearLayer> layers;
    std::vector<bool> relu;

    std::size_t input_dim() const;
    std::size_t feature_dim() const;
    std::size_t parameter_count() const;

    void zero_grad();
    void reset_velocity();
};

// The private, personalized classifier: feature_dim -> num_classes.
struct HeadLayer {
    LinearLayer layer;

    std::size_t feature_dim() const noexcept { return layer.in_features(); }
    std::size_t num_classes() const noexcept { return layer.out_features(); }
    std::size_t parameter_count() const noexcept { return layer.parameter_count(); }
};

struct SplitModel {
    BackboneNet backbone;
    HeadLayer head;

    std::size_t parameter_count() const { return backbone.parameter_count() + head.parameter_count(); }
};

struct Architecture {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden{64, 64};
    std::size_t num_classes = 0;
    bool activate_features = false;
};

// Allocates a model with zero parameters; call init_params to randomize.
SplitModel make_model(const Architecture& arch);

struct BackboneCache {
    std::vector<Tensor2D> inputs;           // input to layer i
    std::vector<Tensor2D> pre_activations;  // layer i output before ReLU
};

struct ForwardCache {
    BackboneCache backbone;
    Tensor2D features;
};

Tensor2D forward_backbone(const BackboneNet& net, const Tensor2D& x, BackboneCache* cache = nullptr);
Tensor2D forward_head(const HeadLayer& head, const Tensor2D& features);

struct ForwardResult {
    Tensor2D logits;
    ForwardCache cache;
};

ForwardResult forward(const SplitModel& model, const Tensor2D& x);

enum class GradScope { backbone_only, head_only, full };

// Accumulates gradients for the layers in scope. d_features_extra, when given,
// is an additional loss gradient w.r.t. the backbone output (e.g. from a
// feature distillation term) and only affects backbone gradients.
void backward(SplitModel& model, const ForwardCache& cache, const Tensor2D& d_logits,
              GradScope scope, const Tensor2D* d_features_extra = nullptr);

// Accumulates head gradients for (features, d_logits); the backbone is not involved.
void backward_head(HeadLayer& head, const Tensor2D& features, const Tensor2D& d_logits);

// Backpropagates d_features through the backbone, accumulating its grads.
void backward_backbone(BackboneNet& net, const BackboneCache& cache, Tensor2D d_features);

// vel <- momentum * vel + grad; param <- param - lr * vel; grads zeroed.
// Throws DivergenceError on non-finite gradients.
void sgd_step(LinearLayer& layer, double lr, double momentum);
void sgd_step(BackboneNet& net, double lr, double momentum);
void sgd_step(HeadLayer& head, double lr, double momentum);

// Glorot-uniform weights, zero biases, zero grads and velocities.
void init_params(LinearLayer& layer, RngStream& rng);
void init_params(SplitModel& model, RngStream& rng);

inline SplitModel clone_model(const SplitModel& model) { return model; }

bool same_architecture(const LinearLayer& a, const LinearLayer& b) noexcept;
bool same_architecture(const BackboneNet& a, const BackboneNet& b) noexcept;
bool same_architecture(const SplitModel& a, const SplitModel& b) noexcept;

// Copies weights and biases of src into dst. dst grads and velocities are
// left alone; the head of the owning model is not touched.
void copy_backbone(const BackboneNet& src, BackboneNet& dst);

// Parameters in a fixed order: per layer, weight (row-major) then bias.
std::vector<double> flatten_parameters(const BackboneNet& net);
std::vector<double> flatten_parameters(const HeadLayer& head);
std::vector<double> flatten_parameters(const SplitModel& model);

// FNV-1a over the IEEE-754 bytes of the flattened parameters.
std::uint64_t parameter_checksum(std::span<const double> params) noexcept;

}  // namespace fedbsd
