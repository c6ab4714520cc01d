#include "fedbsd/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <string>

#include "fedbsd/errors.hpp"

namespace fedbsd {
namespace {

Tensor2D linear_forward(const LinearLayer& layer, const Tensor2D& x) {
    if (x.cols() != layer.in_features()) {
        throw ShapeError("linear layer expects input width " + std::to_string(layer.in_features()) +
                         ", got " + std::to_string(x.cols()));
    }
    const std::size_t batch = x.rows();
    const std::size_t out = layer.out_features();
    const std::size_t in = layer.in_features();
    Tensor2D y(batch, out);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto xr = x.row(b);
        auto yr = y.row(b);
        for (std::size_t o = 0; o < out; ++o) {
            const auto wr = layer.weight.row(o);
            double acc = layer.bias[o];
            for (std::size_t i = 0; i < in; ++i) {
                acc += xr[i] * wr[i];
            }
            yr[o] = acc;
        }
    }
    return y;
}

// Accumulates dW, db from (input, dy) and returns dx.
Tensor2D linear_backward(LinearLayer& layer, const Tensor2D& input, const Tensor2D& dy,
                         bool need_dx) {
    const std::size_t batch = input.rows();
    const std::size_t out = layer.out_features();
    const std::size_t in = layer.in_features();
    for (std::size_t b = 0; b < batch; ++b) {
        const auto xr = input.row(b);
        const auto dyr = dy.row(b);
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dyr[o];
            auto gw = layer.grad_weight.row(o);
            for (std::size_t i = 0; i < in; ++i) {
                gw[i] += g * xr[i];
            }
            layer.grad_bias[o] += g;
        }
    }
    if (!need_dx) {
        return {};
    }
    Tensor2D dx(batch, in);
    for (std::size_t b = 0; b < batch; ++b) {
        const auto dyr = dy.row(b);
        auto dxr = dx.row(b);
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dyr[o];
            const auto wr = layer.weight.row(o);
            for (std::size_t i = 0; i < in; ++i) {
                dxr[i] += g * wr[i];
            }
        }
    }
    return dx;
}

void append(std::vector<double>& out, const LinearLayer& layer) {
    out.insert(out.end(), layer.weight.values().begin(), layer.weight.values().end());
    out.insert(out.end(), layer.bias.begin(), layer.bias.end());
}

}  // namespace

LinearLayer::LinearLayer(std::size_t in_features, std::size_t out_features)
    : weight(out_features, in_features),
      bias(out_features, 0.0),
      grad_weight(out_features, in_features),
      grad_bias(out_features, 0.0),
      vel_weight(out_features, in_features),
      vel_bias(out_features, 0.0) {}

void LinearLayer::zero_grad() {
    grad_weight.fill(0.0);
    std::fill(grad_bias.begin(), grad_bias.end(), 0.0);
}

void LinearLayer::reset_velocity() {
    vel_weight.fill(0.0);
    std::fill(vel_bias.begin(), vel_bias.end(), 0.0);
}

std::size_t BackboneNet::input_dim() const {
    return layers.empty() ? 0 : layers.front().in_features();
}

std::size_t BackboneNet::feature_dim() const {
    return layers.empty() ? 0 : layers.back().out_features();
}

std::size_t BackboneNet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) {
        n += l.parameter_count();
    }
    return n;
}

void BackboneNet::zero_grad() {
    for (auto& l : layers) {
        l.zero_grad();
    }
}

void BackboneNet::reset_velocity() {
    for (auto& l : layers) {
        l.reset_velocity();
    }
}

SplitModel make_model(const Architecture& arch) {
    if (arch.input_dim == 0 || arch.num_classes == 0 || arch.hidden.empty()) {
        throw ParameterError("architecture needs input_dim > 0, num_classes > 0 and at least one backbone layer");
    }
    SplitModel model;
    std::size_t prev = arch.input_dim;
    for (std::size_t i = 0; i < arch.hidden.size(); ++i) {
        if (arch.hidden[i] == 0) {
            throw ParameterError("backbone layer width must be positive");
        }
        model.backbone.layers.emplace_back(prev, arch.hidden[i]);
        const bool last = i + 1 == arch.hidden.size();
        model.backbone.relu.push_back(!last || arch.activate_features);
        prev = arch.hidden[i];
    }
    model.head.layer = LinearLayer(prev, arch.num_classes);
    return model;
}

Tensor2D forward_backbone(const BackboneNet& net, const Tensor2D& x, BackboneCache* cache) {
    if (net.layers.empty()) {
        throw ShapeError("backbone has no layers");
    }
    if (x.cols() != net.input_dim()) {
        throw ShapeError("backbone input width mismatch: expected " + std::to_string(net.input_dim()) +
                         ", got " + std::to_string(x.cols()));
    }
    if (cache != nullptr) {
        cache->inputs.clear();
        cache->pre_activations.clear();
    }
    Tensor2D h = x;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        Tensor2D z = linear_forward(net.layers[i], h);
        if (cache != nullptr) {
            cache->inputs.push_back(std::move(h));
            cache->pre_activations.push_back(z);
        }
        if (net.relu[i]) {
            for (double& v : z.values()) {
                v = v > 0.0 ? v : 0.0;
            }
        }
        h = std::move(z);
    }
    return h;
}

Tensor2D forward_head(const HeadLayer& head, const Tensor2D& features) {
    if (features.cols() != head.feature_dim()) {
        throw ShapeError("head input width mismatch: expected " + std::to_string(head.feature_dim()) +
                         ", got " + std::to_string(features.cols()));
    }
    return linear_forward(head.layer, features);
}

ForwardResult forward(const SplitModel& model, const Tensor2D& x) {
    ForwardResult r;
    r.cache.features = forward_backbone(model.backbone, x, &r.cache.backbone);
    r.logits = forward_head(model.head, r.cache.features);
    return r;
}

void backward_backbone(BackboneNet& net, const BackboneCache& cache, Tensor2D d_features) {
    if (cache.inputs.size() != net.layers.size() || cache.pre_activations.size() != net.layers.size()) {
        throw ShapeError("stale forward cache: " + std::to_string(cache.inputs.size()) +
                         " cached layers vs " + std::to_string(net.layers.size()) + " backbone layers");
    }
    Tensor2D grad = std::move(d_features);
    for (std::size_t i = net.layers.size(); i-- > 0;) {
        const Tensor2D& z = cache.pre_activations[i];
        require_same_shape(z, grad, "backbone backward");
        if (cache.inputs[i].cols() != net.layers[i].in_features()) {
            throw ShapeError("stale forward cache at layer " + std::to_string(i));
        }
        if (net.relu[i]) {
            auto gv = grad.values();
            const auto zv = z.values();
            for (std::size_t k = 0; k < gv.size(); ++k) {
                if (zv[k] <= 0.0) {
                    gv[k] = 0.0;
                }
            }
        }
        grad = linear_backward(net.layers[i], cache.inputs[i], grad, i > 0);
    }
}

void backward_head(HeadLayer& head, const Tensor2D& features, const Tensor2D& d_logits) {
    if (features.cols() != head.feature_dim() || d_logits.cols() != head.num_classes() ||
        features.rows() != d_logits.rows()) {
        throw ShapeError("head backward: features " + features.shape_string() + " vs logits gradient " +
                         d_logits.shape_string());
    }
    linear_backward(head.layer, features, d_logits, false);
}

void backward(SplitModel& model, const ForwardCache& cache, const Tensor2D& d_logits,
              GradScope scope, const Tensor2D* d_features_extra) {
    const auto& head = model.head.layer;
    if (d_logits.cols() != head.out_features() || d_logits.rows() != cache.features.rows() ||
        cache.features.cols() != head.in_features()) {
        throw ShapeError("stale forward cache: logits gradient " + d_logits.shape_string() +
                         " vs cached features " + cache.features.shape_string());
    }
    if (d_features_extra != nullptr) {
        require_same_shape(*d_features_extra, cache.features, "feature gradient");
    }
    if (scope != GradScope::backbone_only) {
        linear_backward(model.head.layer, cache.features, d_logits, false);
    }
    if (scope == GradScope::head_only) {
        return;
    }
    // dL/dfeatures = dL/dlogits * W_head (+ extra feature term)
    Tensor2D d_features(d_logits.rows(), head.in_features());
    for (std::size_t b = 0; b < d_logits.rows(); ++b) {
        const auto dyr = d_logits.row(b);
        auto dfr = d_features.row(b);
        for (std::size_t o = 0; o < head.out_features(); ++o) {
            const auto wr = head.weight.row(o);
            for (std::size_t i = 0; i < head.in_features(); ++i) {
                dfr[i] += dyr[o] * wr[i];
            }
        }
    }
    if (d_features_extra != nullptr) {
        auto dst = d_features.values();
        const auto src = d_features_extra->values();
        for (std::size_t k = 0; k < dst.size(); ++k) {
            dst[k] += src[k];
        }
    }
    backward_backbone(model.backbone, cache.backbone, std::move(d_features));
}

void sgd_step(LinearLayer& layer, double lr, double momentum) {
    if (!layer.grad_weight.all_finite() ||
        !std::all_of(layer.grad_bias.begin(), layer.grad_bias.end(),
                     [](double g) { return std::isfinite(g); })) {
        throw DivergenceError("non-finite gradient: training diverged");
    }
    auto w = layer.weight.values();
    auto gw = layer.grad_weight.values();
    auto vw = layer.vel_weight.values();
    for (std::size_t k = 0; k < w.size(); ++k) {
        vw[k] = momentum * vw[k] + gw[k];
        w[k] -= lr * vw[k];
    }
    for (std::size_t k = 0; k < layer.bias.size(); ++k) {
        layer.vel_bias[k] = momentum * layer.vel_bias[k] + layer.grad_bias[k];
        layer.bias[k] -= lr * layer.vel_bias[k];
    }
    layer.zero_grad();
}

void sgd_step(BackboneNet& net, double lr, double momentum) {
    for (auto& l : net.layers) {
        sgd_step(l, lr, momentum);
    }
}

void sgd_step(HeadLayer& head, double lr, double momentum) { sgd_step(head.layer, lr, momentum); }

void init_params(LinearLayer& layer, RngStream& rng) {
    const double fan = static_cast<double>(layer.in_features() + layer.out_features());
    const double limit = std::sqrt(6.0 / fan);
    for (double& w : layer.weight.values()) {
        w = rng.uniform(-limit, limit);
    }
    std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
    layer.zero_grad();
    layer.reset_velocity();
}

void init_params(SplitModel& model, RngStream& rng) {
    for (auto& l : model.backbone.layers) {
        init_params(l, rng);
    }
    init_params(model.head.layer, rng);
}

bool same_architecture(const LinearLayer& a, const LinearLayer& b) noexcept {
    return a.in_features() == b.in_features() && a.out_features() == b.out_features();
}

bool same_architecture(const BackboneNet& a, const BackboneNet& b) noexcept {
    if (a.layers.size() != b.layers.size() || a.relu != b.relu) {
        return false;
    }
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
        if (!same_architecture(a.layers[i], b.layers[i])) {
            return false;
        }
    }
    return true;
}

bool same_architecture(const SplitModel& a, const SplitModel& b) noexcept {
    return same_architecture(a.backbone, b.backbone) && same_architecture(a.head.layer, b.head.layer);
}

void copy_backbone(const BackboneNet& src, BackboneNet& dst) {
    if (!same_architecture(src, dst)) {
        throw ShapeError("copy_backbone: architecture mismatch");
    }
    for (std::size_t i = 0; i < src.layers.size(); ++i) {
        dst.layers[i].weight = src.layers[i].weight;
        dst.layers[i].bias = src.layers[i].bias;
    }
}

std::vector<double> flatten_parameters(const BackboneNet& net) {
    std::vector<double> out;
    out.reserve(net.parameter_count());
    for (const auto& l : net.layers) {
        append(out, l);
    }
    return out;
}

std::vector<double> flatten_parameters(const HeadLayer& head) {
    std::vector<double> out;
    out.reserve(head.parameter_count());
    append(out, head.layer);
    return out;
}

std::vector<double> flatten_parameters(const SplitModel& model) {
    std::vector<double> out = flatten_parameters(model.backbone);
    append(out, model.head.layer);
    return out;
}

std::uint64_t parameter_checksum(std::span<const double> params) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (double v : params) {
        auto bits = std::bit_cast<std::uint64_t>(v);
        for (int k = 0; k < 8; ++k) {
            h ^= (bits >> (8 * k)) & 0xffU;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

}  // namespace fedbsd
