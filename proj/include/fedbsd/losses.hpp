#pragma once

#include <cstddef>
#include <span>

#include "fedbsd/tensor.hpp"

namespace fedbsd {

// Floor applied to student probabilities inside logarithms.
inline constexpr double kProbabilityFloor = 1e-12;

// Row-wise softmax of z / tau, computed with max subtraction.
Tensor2D softmax_tau(const Tensor2D& z, double tau);

struct CrossEntropy {
    double loss = 0.0;  // batch mean
    Tensor2D grad;      // dLoss/dLogits = (softmax - onehot) / batch
};

CrossEntropy cross_entropy(const Tensor2D& logits, std::span<const std::size_t> labels);

// Batch mean of sum_i p_t,i * log(p_t,i / p_s,i). Zero teacher entries
// contribute nothing.
double kl_divergence(const Tensor2D& p_teacher, const Tensor2D& p_student);

// forward: D(P_teacher || P_student). reverse: D(P_student || P_teacher),
// the non-negated form of the student-weighted expression.
enum class KlDirection { forward, reverse };

enum class FeatureDistill { softmax_kl, mse };

struct DistillOptions {
    KlDirection direction = KlDirection::forward;
    bool tau2_rescale = false;  // multiply the distillation term by tau^2
    FeatureDistill mode = FeatureDistill::softmax_kl;
};

struct LossValue {
    double total = 0.0;
    double ce_part = 0.0;
    double distill_part = 0.0;
};

struct BsdLoss {
    LossValue value;
    Tensor2D d_local_features;  // from the distillation term only
    Tensor2D d_logits;          // from the cross-entropy term only
};

// Cross-entropy on the student logits plus lambda times the distillation loss
// between teacher (global backbone) and student (local backbone) features.
// Teacher features are constants; no gradient is reported for them.
BsdLoss bsd_loss(const Tensor2D& global_features, const Tensor2D& local_features,
                 const Tensor2D& logits, std::span<const std::size_t> labels, double tau,
                 double lambda, const DistillOptions& options = {});

}  // namespace fedbsd
