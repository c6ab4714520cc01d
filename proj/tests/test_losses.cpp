#include <doctest.h>

#include <cmath>
#include <numbers>

#include "fedbsd/errors.hpp"
#include "fedbsd/losses.hpp"
#include "fedbsd/nn.hpp"
#include "test_util.hpp"

using namespace fedbsd;
using namespace fedbsd::testing;

namespace {

// Term-by-term oracles, written without any shared helper from the library.
double oracle_kl(const Tensor2D& p, const Tensor2D& q) {
    double total = 0.0;
    for (std::size_t b = 0; b < p.rows(); ++b) {
        for (std::size_t i = 0; i < p.cols(); ++i) {
            if (p(b, i) > 0.0) {
                total += p(b, i) * std::log(p(b, i) / std::max(q(b, i), 1e-12));
            }
        }
    }
    return total / static_cast<double>(p.rows());
}

Tensor2D oracle_softmax(const Tensor2D& z, double tau) {
    Tensor2D p(z.rows(), z.cols());
    for (std::size_t b = 0; b < z.rows(); ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < z.cols(); ++i) {
            s += std::exp(z(b, i) / tau);
        }
        for (std::size_t i = 0; i < z.cols(); ++i) {
            p(b, i) = std::exp(z(b, i) / tau) / s;
        }
    }
    return p;
}

double oracle_ce(const Tensor2D& logits, const std::vector<std::size_t>& y) {
    const Tensor2D p = oracle_softmax(logits, 1.0);
    double total = 0.0;
    for (std::size_t b = 0; b < y.size(); ++b) {
        total -= std::log(p(b, y[b]));
    }
    return total / static_cast<double>(y.size());
}

}  // namespace

TEST_CASE("softmax_tau: examples") {
    const Tensor2D u = softmax_tau(Tensor2D(1, 3, {0.0, 0.0, 0.0}), 3.7);
    for (double v : u.values()) {
        CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
    const Tensor2D two = softmax_tau(Tensor2D(1, 2, {std::numbers::ln2, 0.0}), 1.0);
    CHECK(two(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(two(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    // 40-digit evaluation of exp(z/2) / sum exp(z/2).
    const Tensor2D p = softmax_tau(Tensor2D(1, 3, {3.0, 1.0, 0.5}), 2.0);
    CHECK(p(0, 0) == doctest::Approx(0.60445450156717440884).epsilon(1e-14));
    CHECK(p(0, 1) == doctest::Approx(0.22236638425009482852).epsilon(1e-14));
    CHECK(p(0, 2) == doctest::Approx(0.17317911418273076264).epsilon(1e-14));

    CHECK_THROWS_AS(softmax_tau(Tensor2D(1, 2), 0.0), ParameterError);
    CHECK_THROWS_AS(softmax_tau(Tensor2D(1, 2), -1.0), ParameterError);
}

TEST_CASE("softmax_tau: large logits stay finite") {
    const Tensor2D p = softmax_tau(Tensor2D(1, 3, {1000.0, 999.0, -1000.0}), 0.5);
    CHECK(p.all_finite());
    CHECK(p(0, 0) + p(0, 1) + p(0, 2) == doctest::Approx(1.0));
}

TEST_CASE("cross_entropy: examples") {
    const auto confident = cross_entropy(Tensor2D(1, 3, {60.0, 0.0, 0.0}), std::vector<std::size_t>{0});
    CHECK(confident.loss < 1e-20);

    for (std::size_t m : {2u, 5u, 10u}) {
        const auto uniform = cross_entropy(Tensor2D(3, m, 0.5), std::vector<std::size_t>{0, 1, m - 1});
        CHECK(uniform.loss == doctest::Approx(std::log(static_cast<double>(m))).epsilon(1e-14));
    }

    // 40-digit evaluation of log(e + e^2 + e^3) - 1 and softmax - onehot.
    const auto ce = cross_entropy(Tensor2D(1, 3, {1.0, 2.0, 3.0}), std::vector<std::size_t>{0});
    CHECK(ce.loss == doctest::Approx(2.4076059644443803045).epsilon(1e-14));
    CHECK(ce.grad(0, 0) == doctest::Approx(-0.909969426829619542).epsilon(1e-14));
    CHECK(ce.grad(0, 1) == doctest::Approx(0.24472847105479765247).epsilon(1e-14));
    CHECK(ce.grad(0, 2) == doctest::Approx(0.66524095577482188953).epsilon(1e-14));

    CHECK_THROWS_AS(cross_entropy(Tensor2D(1, 3), std::vector<std::size_t>{3}), ParameterError);
    CHECK_THROWS_AS(cross_entropy(Tensor2D(2, 3), std::vector<std::size_t>{0}), ShapeError);
}

TEST_CASE("cross_entropy: gradient is (softmax - onehot) / batch and matches finite differences") {
    RngStream rng(5);
    Tensor2D logits = random_tensor(4, 6, rng, 2.0);
    const auto y = random_labels(4, 6, rng);
    const auto ce = cross_entropy(logits, y);
    CHECK(ce.loss == doctest::Approx(oracle_ce(logits, y)).epsilon(1e-12));
    for (std::size_t k = 0; k < logits.size(); ++k) {
        const double numeric = central_difference(&logits.values()[k], [&] { return cross_entropy(logits, y).loss; });
        CHECK(relative_error(ce.grad.values()[k], numeric) <= 1e-4);
    }
}

TEST_CASE("kl_divergence: examples and errors") {
    RngStream rng(9);
    const Tensor2D p = random_distribution(3, 4, rng);
    CHECK(kl_divergence(p, p) == 0.0);
    CHECK(kl_divergence(Tensor2D(1, 2, {1.0, 0.0}), Tensor2D(1, 2, {0.5, 0.5})) ==
          doctest::Approx(0.693147180559945309).epsilon(1e-15));
    const Tensor2D q = random_distribution(3, 4, rng);
    CHECK(kl_divergence(p, q) == doctest::Approx(oracle_kl(p, q)).epsilon(1e-13));
    CHECK_THROWS_AS(kl_divergence(p, Tensor2D(3, 5)), ShapeError);
}

TEST_CASE("kl_divergence: zero student probability is floored, not infinite") {
    const double kl = kl_divergence(Tensor2D(1, 2, {0.5, 0.5}), Tensor2D(1, 2, {1.0, 0.0}));
    CHECK(std::isfinite(kl));
    CHECK(kl == doctest::Approx(0.5 * std::log(0.5) + 0.5 * std::log(0.5 / 1e-12)));
}

TEST_CASE("bsd_loss: examples") {
    RngStream rng(17);
    const Tensor2D g = random_tensor(5, 6, rng);
    const Tensor2D l = random_tensor(5, 6, rng);
    const Tensor2D logits = random_tensor(5, 4, rng);
    const auto y = random_labels(5, 4, rng);

    SUBCASE("lambda = 0 collapses to cross-entropy with a zero feature gradient") {
        const BsdLoss r = bsd_loss(g, l, logits, y, 2.0, 0.0);
        CHECK(r.value.total == r.value.ce_part);
        CHECK(r.value.ce_part == cross_entropy(logits, y).loss);
        CHECK(all_zero(r.d_local_features.values()));
    }
    SUBCASE("identical teacher and student features zero the distillation term") {
        const BsdLoss r = bsd_loss(l, l, logits, y, 2.0, 1.0);
        CHECK(r.value.distill_part == 0.0);
        CHECK(r.value.total == r.value.ce_part);

        // Probabilities far below any floor still cancel exactly, in both directions.
        Tensor2D sharp(1, 3);
        sharp(0, 0) = 60.0;
        for (KlDirection d : {KlDirection::forward, KlDirection::reverse}) {
            const BsdLoss s = bsd_loss(sharp, sharp, Tensor2D(1, 2), std::vector<std::size_t>{0}, 0.5, 1.0,
                                       {d, false, FeatureDistill::softmax_kl});
            CHECK(s.value.distill_part == 0.0);
            CHECK(all_zero(s.d_local_features.values()));
        }
    }
    SUBCASE("lambda = 1, tau = 2 equals independent CE + KL") {
        const BsdLoss r = bsd_loss(g, l, logits, y, 2.0, 1.0);
        const double kl = oracle_kl(oracle_softmax(g, 2.0), oracle_softmax(l, 2.0));
        CHECK(r.value.ce_part == doctest::Approx(oracle_ce(logits, y)).epsilon(1e-12));
        CHECK(r.value.distill_part == doctest::Approx(kl).epsilon(1e-12));
        CHECK(r.value.total == doctest::Approx(oracle_ce(logits, y) + kl).epsilon(1e-12));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(bsd_loss(g, Tensor2D(5, 5), logits, y, 2.0, 1.0), ShapeError);
        CHECK_THROWS_AS(bsd_loss(g, l, logits, y, 0.0, 1.0), ParameterError);
        CHECK_THROWS_AS(bsd_loss(g, l, logits, y, 2.0, -1.0), ParameterError);
    }
}

TEST_CASE("bsd_loss: returned gradients match finite differences for every distillation variant") {
    struct Variant {
        const char* name;
        DistillOptions options;
    };
    const Variant variants[] = {
        {"forward kl", {KlDirection::forward, false, FeatureDistill::softmax_kl}},
        {"reverse kl", {KlDirection::reverse, false, FeatureDistill::softmax_kl}},
        {"forward kl tau^2", {KlDirection::forward, true, FeatureDistill::softmax_kl}},
        {"mse", {KlDirection::forward, false, FeatureDistill::mse}},
    };
    RngStream rng(23);
    for (const auto& v : variants) {
        CAPTURE(v.name);
        for (int trial = 0; trial < 5; ++trial) {
            const Tensor2D g = random_tensor(4, 5, rng);
            Tensor2D l = random_tensor(4, 5, rng);
            Tensor2D logits = random_tensor(4, 3, rng);
            const auto y = random_labels(4, 3, rng);
            const double tau = rng.uniform(0.5, 4.0);
            const double lambda = rng.uniform(0.1, 2.0);
            const BsdLoss r = bsd_loss(g, l, logits, y, tau, lambda, v.options);
            CHECK(r.value.total == doctest::Approx(r.value.ce_part + lambda * r.value.distill_part).epsilon(1e-14));
            auto total = [&] { return bsd_loss(g, l, logits, y, tau, lambda, v.options).value.total; };
            for (std::size_t k = 0; k < l.size(); ++k) {
                const double numeric = central_difference(&l.values()[k], total);
                CHECK(relative_error(r.d_local_features.values()[k], numeric) <= 1e-4);
            }
            for (std::size_t k = 0; k < logits.size(); ++k) {
                const double numeric = central_difference(&logits.values()[k], total);
                CHECK(relative_error(r.d_logits.values()[k], numeric) <= 1e-4);
            }
        }
    }
}

TEST_CASE("bsd_loss: tau^2 rescaling multiplies the distillation term") {
    RngStream rng(29);
    const Tensor2D g = random_tensor(3, 4, rng);
    const Tensor2D l = random_tensor(3, 4, rng);
    const Tensor2D logits = random_tensor(3, 2, rng);
    const auto y = random_labels(3, 2, rng);
    const BsdLoss plain = bsd_loss(g, l, logits, y, 3.0, 1.0);
    const BsdLoss scaled = bsd_loss(g, l, logits, y, 3.0, 1.0, {KlDirection::forward, true, FeatureDistill::softmax_kl});
    CHECK(scaled.value.distill_part == doctest::Approx(9.0 * plain.value.distill_part).epsilon(1e-14));
}

TEST_CASE("full objective: backbone and head gradients match finite differences through the network") {
    RngStream rng(41);
    for (int trial = 0; trial < 5; ++trial) {
        SplitModel model = random_model(5, {6, 4}, 3, rng);
        const SplitModel teacher = random_model(5, {6, 4}, 3, rng);
        const Tensor2D x = random_tensor(4, 5, rng);
        const auto y = random_labels(4, 3, rng);
        const Tensor2D gf = forward_backbone(teacher.backbone, x);
        auto objective = [&] {
            const ForwardResult fr = forward(model, x);
            return bsd_loss(gf, fr.cache.features, fr.logits, y, 2.0, 1.0).value.total;
        };
        const ForwardResult fr = forward(model, x);
        const BsdLoss l = bsd_loss(gf, fr.cache.features, fr.logits, y, 2.0, 1.0);
        backward(model, fr.cache, l.d_logits, GradScope::full, &l.d_local_features);

        auto params = backbone_params(model);
        auto head = head_params(model);
        params.insert(params.end(), head.begin(), head.end());
        double worst = 0.0;
        for (const auto& p : params) {
            worst = std::max(worst, relative_error(*p.grad, central_difference(p.value, objective)));
        }
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("property: KL is non-negative and zero exactly for equal inputs") {
    RngStream rng(101);
    for (int i = 0; i < 1000; ++i) {
        const std::size_t rows = 1 + rng.below(4);
        const std::size_t cols = 2 + rng.below(8);
        const Tensor2D p = random_distribution(rows, cols, rng);
        const Tensor2D q = random_distribution(rows, cols, rng);
        CHECK(kl_divergence(p, q) >= 0.0);
        CHECK(std::abs(kl_divergence(p, p)) <= 1e-9);
        if (p != q) {
            CHECK(kl_divergence(p, q) > 1e-9);
        }
    }
}

TEST_CASE("property: softmax rows are distributions for tau in {0.5, 1, 2, 10}") {
    RngStream rng(103);
    for (int i = 0; i < 1000; ++i) {
        const Tensor2D z = random_tensor(1 + rng.below(4), 2 + rng.below(10), rng, 5.0);
        for (double tau : {0.5, 1.0, 2.0, 10.0}) {
            const Tensor2D p = softmax_tau(z, tau);
            for (std::size_t b = 0; b < p.rows(); ++b) {
                double sum = 0.0;
                for (double v : p.row(b)) {
                    CHECK(v >= 0.0);
                    CHECK(v <= 1.0);
                    sum += v;
                }
                CHECK(std::abs(sum - 1.0) <= 1e-9);
            }
        }
    }
}

TEST_CASE("property: very high temperature approaches uniform") {
    RngStream rng(107);
    for (int i = 0; i < 200; ++i) {
        const std::size_t m = 2 + rng.below(10);
        const Tensor2D p = softmax_tau(random_tensor(2, m, rng), 1e6);
        for (double v : p.values()) {
            CHECK(std::abs(v - 1.0 / static_cast<double>(m)) <= 1e-6);
        }
    }
}

TEST_CASE("property: teacher features change the loss but never receive a gradient") {
    RngStream rng(109);
    for (int i = 0; i < 100; ++i) {
        Tensor2D g = random_tensor(3, 4, rng);
        const Tensor2D l = random_tensor(3, 4, rng);
        const Tensor2D logits = random_tensor(3, 2, rng);
        const auto y = random_labels(3, 2, rng);
        const BsdLoss before = bsd_loss(g, l, logits, y, 2.0, 1.0);
        g(0, 0) += 0.5;
        const BsdLoss after = bsd_loss(g, l, logits, y, 2.0, 1.0);
        CHECK(before.value.total != after.value.total);
        CHECK(before.d_logits == after.d_logits);
        CHECK(after.d_local_features.rows() == l.rows());
    }
}
