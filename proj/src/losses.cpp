#include "fedbsd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedbsd/errors.hpp"

namespace fedbsd {
namespace {

void require_tau(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw ParameterError("temperature tau must be positive and finite, got " + std::to_string(tau));
    }
}

double floored_log(double p) { return std::log(std::max(p, kProbabilityFloor)); }

// Distillation value and its gradient w.r.t. the student's pre-softmax input.
struct DistillTerm {
    double value = 0.0;
    Tensor2D grad;
};

// Row-wise log softmax(z / tau); exact for identical inputs and needs no floor.
Tensor2D log_softmax_tau(const Tensor2D& z, double tau) {
    Tensor2D out(z.rows(), z.cols());
    for (std::size_t b = 0; b < z.rows(); ++b) {
        const auto zr = z.row(b);
        auto lr = out.row(b);
        const double zmax = *std::max_element(zr.begin(), zr.end());
        double sum = 0.0;
        for (std::size_t i = 0; i < zr.size(); ++i) {
            lr[i] = (zr[i] - zmax) / tau;
            sum += std::exp(lr[i]);
        }
        const double log_sum = std::log(sum);
        for (double& v : lr) {
            v -= log_sum;
        }
    }
    return out;
}

DistillTerm softmax_kl_term(const Tensor2D& teacher, const Tensor2D& student, double tau,
                            KlDirection direction) {
    const Tensor2D pt = softmax_tau(teacher, tau);
    const Tensor2D ps = softmax_tau(student, tau);
    const Tensor2D log_pt = log_softmax_tau(teacher, tau);
    const Tensor2D log_ps = log_softmax_tau(student, tau);
    const std::size_t batch = ps.rows();
    const std::size_t width = ps.cols();
    const double inv_batch = 1.0 / static_cast<double>(batch);
    DistillTerm term{0.0, Tensor2D(batch, width)};
    // KL(p || q) with p the "from" side.
    const bool fwd = direction == KlDirection::forward;
    const Tensor2D& p = fwd ? pt : ps;
    const Tensor2D& log_p = fwd ? log_pt : log_ps;
    const Tensor2D& log_q = fwd ? log_ps : log_pt;
    for (std::size_t b = 0; b < batch; ++b) {
        const auto pr = p.row(b);
        const auto lp = log_p.row(b);
        const auto lq = log_q.row(b);
        double row_kl = 0.0;
        for (std::size_t i = 0; i < width; ++i) {
            row_kl += pr[i] * (lp[i] - lq[i]);
        }
        term.value += row_kl;
        auto g = term.grad.row(b);
        for (std::size_t i = 0; i < width; ++i) {
            // forward: d/dz_s KL(pt || ps) = (ps - pt) / tau
            // reverse: d/dz_s KL(ps || pt) = ps * (log ps - log pt - KL) / tau
            g[i] = (fwd ? ps.row(b)[i] - pt.row(b)[i] : pr[i] * (lp[i] - lq[i] - row_kl)) * inv_batch / tau;
        }
    }
    term.value *= inv_batch;
    return term;
}

DistillTerm mse_term(const Tensor2D& teacher, const Tensor2D& student) {
    const double scale = 1.0 / static_cast<double>(student.size());
    DistillTerm term{0.0, Tensor2D(student.rows(), student.cols())};
    for (std::size_t k = 0; k < student.size(); ++k) {
        const double d = student.values()[k] - teacher.values()[k];
        term.value += d * d;
        term.grad.values()[k] = 2.0 * d * scale;
    }
    term.value *= scale;
    return term;
}

}  // namespace

Tensor2D softmax_tau(const Tensor2D& z, double tau) {
    require_tau(tau);
    Tensor2D p(z.rows(), z.cols());
    for (std::size_t b = 0; b < z.rows(); ++b) {
        const auto zr = z.row(b);
        auto pr = p.row(b);
        const double zmax = *std::max_element(zr.begin(), zr.end());
        double sum = 0.0;
        for (std::size_t i = 0; i < zr.size(); ++i) {
            pr[i] = std::exp((zr[i] - zmax) / tau);
            sum += pr[i];
        }
        for (double& v : pr) {
            v /= sum;
        }
    }
    return p;
}

CrossEntropy cross_entropy(const Tensor2D& logits, std::span<const std::size_t> labels) {
    if (labels.size() != logits.rows()) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.rows()) + " logit rows");
    }
    if (logits.rows() == 0) {
        throw ShapeError("cross_entropy: empty batch");
    }
    const std::size_t m = logits.cols();
    const double inv_batch = 1.0 / static_cast<double>(logits.rows());
    CrossEntropy ce{0.0, Tensor2D(logits.rows(), m)};
    for (std::size_t b = 0; b < logits.rows(); ++b) {
        if (labels[b] >= m) {
            throw ParameterError("label " + std::to_string(labels[b]) + " out of range [0, " +
                                 std::to_string(m) + ")");
        }
        const auto zr = logits.row(b);
        const double zmax = *std::max_element(zr.begin(), zr.end());
        double sum = 0.0;
        for (double v : zr) {
            sum += std::exp(v - zmax);
        }
        const double log_sum = std::log(sum) + zmax;
        ce.loss += log_sum - zr[labels[b]];
        auto gr = ce.grad.row(b);
        for (std::size_t i = 0; i < m; ++i) {
            gr[i] = std::exp(zr[i] - log_sum) * inv_batch;
        }
        gr[labels[b]] -= inv_batch;
    }
    ce.loss *= inv_batch;
    return ce;
}

double kl_divergence(const Tensor2D& p_teacher, const Tensor2D& p_student) {
    require_same_shape(p_teacher, p_student, "kl_divergence");
    if (p_teacher.rows() == 0) {
        throw ShapeError("kl_divergence: empty batch");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < p_teacher.size(); ++k) {
        const double pt = p_teacher.values()[k];
        if (pt > 0.0) {
            total += pt * (std::log(pt) - floored_log(p_student.values()[k]));
        }
    }
    return total / static_cast<double>(p_teacher.rows());
}

BsdLoss bsd_loss(const Tensor2D& global_features, const Tensor2D& local_features,
                 const Tensor2D& logits, std::span<const std::size_t> labels, double tau,
                 double lambda, const DistillOptions& options) {
    require_same_shape(global_features, local_features, "bsd_loss features");
    if (logits.rows() != local_features.rows()) {
        throw ShapeError("bsd_loss: logits " + logits.shape_string() + " vs features " +
                         local_features.shape_string());
    }
    require_tau(tau);
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw ParameterError("lambda must be finite and non-negative, got " + std::to_string(lambda));
    }

    CrossEntropy ce = cross_entropy(logits, labels);
    DistillTerm distill = options.mode == FeatureDistill::mse
                              ? mse_term(global_features, local_features)
                              : softmax_kl_term(global_features, local_features, tau, options.direction);
    if (options.tau2_rescale) {
        const double s = tau * tau;
        distill.value *= s;
        for (double& g : distill.grad.values()) {
            g *= s;
        }
    }

    BsdLoss out;
    out.value.ce_part = ce.loss;
    out.value.distill_part = distill.value;
    out.value.total = ce.loss + lambda * distill.value;
    out.d_logits = std::move(ce.grad);
    out.d_local_features = std::move(distill.grad);
    if (lambda == 0.0) {
        out.d_local_features.fill(0.0);
    } else {
        for (double& g : out.d_local_features.values()) {
            g *= lambda;
        }
    }
    return out;
}

}  // namespace fedbsd
