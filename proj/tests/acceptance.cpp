// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fedbsd/harness.hpp"
#include "fedbsd/losses.hpp"
#include "fedbsd/protocol.hpp"
#include "test_util.hpp"

using namespace fedbsd;
using namespace fedbsd::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
    bool pass = true;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o) {
    std::printf("criterion %d: %s  %s -- %s\n", id, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

// 1. Analytic gradients of CE + lambda * KL against central differences.
Outcome gradient_correctness() {
    const auto start = Clock::now();
    RngStream rng(20240601);
    double worst = 0.0;
    std::size_t checked = 0;
    for (int instance = 0; instance < 20; ++instance) {
        const std::size_t in = 2 + rng.below(6);
        std::vector<std::size_t> hidden(1 + rng.below(2));
        for (auto& h : hidden) h = 2 + rng.below(6);
        const std::size_t m = 2 + rng.below(4);
        const std::size_t batch = 1 + rng.below(6);
        const double tau = rng.uniform(0.5, 4.0);
        const double lambda = rng.uniform(0.0, 2.0);

        SplitModel model = random_model(in, hidden, m, rng);
        const BackboneNet teacher_net = random_model(in, hidden, m, rng).backbone;
        const Tensor2D x = random_tensor(batch, in, rng);
        const auto y = random_labels(batch, m, rng);
        const Tensor2D teacher = forward_backbone(teacher_net, x);

        const ForwardResult fr = forward(model, x);
        const BsdLoss l = bsd_loss(teacher, fr.cache.features, fr.logits, y, tau, lambda);
        backward(model, fr.cache, l.d_logits, GradScope::full, &l.d_local_features);

        auto loss = [&] {
            const ForwardResult f = forward(model, x);
            return bsd_loss(teacher, f.cache.features, f.logits, y, tau, lambda).value.total;
        };
        auto params = backbone_params(model);
        const auto head = head_params(model);
        params.insert(params.end(), head.begin(), head.end());
        for (const auto& p : params) {
            worst = std::max(worst, relative_error(*p.grad, central_difference(p.value, loss)));
            ++checked;
        }
    }
    const double secs = seconds_since(start);
    Outcome o;
    o.pass = worst <= 1e-4 && secs < 10.0;
    o.detail = std::to_string(checked) + " parameters over 20 instances, max relative error " +
               fmt("%.2e", worst) + " (limit 1e-4), " + fmt("%.2f", secs) + " s (limit 10 s)";
    return o;
}

// 2. Loss identities over random cases.
Outcome loss_identities() {
    RngStream rng(777);
    const int cases = 2000;
    int kl_sign = 0, ce_only = 0, self_distill = 0;
    double worst_sum = 0.0, worst_self_kl = 0.0, min_kl = 1e300;
    for (int c = 0; c < cases; ++c) {
        const std::size_t rows = 1 + rng.below(8);
        const std::size_t cols = 2 + rng.below(12);
        const double tau = rng.uniform(0.1, 10.0);
        const Tensor2D z1 = random_tensor(rows, cols, rng, rng.uniform(0.1, 10.0));
        const Tensor2D z2 = random_tensor(rows, cols, rng, rng.uniform(0.1, 10.0));
        const Tensor2D p = softmax_tau(z1, tau);
        const Tensor2D q = softmax_tau(z2, tau);
        for (std::size_t r = 0; r < rows; ++r) {
            const auto row = p.row(r);
            worst_sum = std::max(worst_sum, std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0));
        }
        const double self = kl_divergence(p, p);
        const double cross = kl_divergence(p, q);
        worst_self_kl = std::max(worst_self_kl, std::abs(self));
        min_kl = std::min(min_kl, cross);
        if (!(cross > 0.0)) ++kl_sign;  // distinct inputs: strictly positive

        const std::size_t m = 2 + rng.below(6);
        const Tensor2D logits = random_tensor(rows, m, rng, 3.0);
        const auto y = random_labels(rows, m, rng);
        const BsdLoss no_distill = bsd_loss(z1, z2, logits, y, tau, 0.0);
        if (no_distill.value.total != cross_entropy(logits, y).loss || !all_zero(no_distill.d_local_features.values())) {
            ++ce_only;
        }
        const BsdLoss same = bsd_loss(z1, z1, logits, y, tau, rng.uniform(0.0, 5.0));
        if (same.value.distill_part != 0.0 || same.value.total != same.value.ce_part) ++self_distill;
    }
    Outcome o;
    o.pass = kl_sign + ce_only + self_distill == 0 && worst_sum <= 1e-9 && worst_self_kl <= 1e-9;
    o.detail = std::to_string(cases) + " random cases: max |row sum - 1| " + fmt("%.1e", worst_sum) +
               ", max |KL(p,p)| " + fmt("%.1e", worst_self_kl) + ", min KL(p,q) " + fmt("%.2e", min_kl) +
               ", violations: KL sign " + std::to_string(kl_sign) +
               ", lambda=0 not CE " + std::to_string(ce_only) + ", self-distillation nonzero " +
               std::to_string(self_distill);
    return o;
}

// 3. Aggregation against a scalar-loop reference; exact cases.
Outcome aggregation_oracle() {
    RngStream rng(99);
    int mismatches = 0, trials = 0;
    for (int t = 0; t < 200; ++t, ++trials) {
        const std::size_t in = 2 + rng.below(5), m = 2 + rng.below(4);
        const std::vector<std::size_t> hidden{2 + rng.below(6), 2 + rng.below(6)};
        const std::size_t k = 1 + rng.below(10);
        std::vector<BackbonePayload> ups;
        for (std::size_t i = 0; i < k; ++i) {
            ups.push_back({rng.below(10000) * 16 + i, random_model(in, hidden, m, rng).backbone, 1.0});
        }
        // Reference: lowest-id upload plus the mean offset of the others, ascending ids.
        std::vector<std::vector<double>> sorted;
        auto by_id = ups;
        std::sort(by_id.begin(), by_id.end(), [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
        for (const auto& u : by_id) sorted.push_back(flatten_parameters(u.backbone));
        std::vector<double> expected(sorted[0].size());
        for (std::size_t j = 0; j < expected.size(); ++j) {
            double offset = 0.0;
            for (std::size_t i = 1; i < sorted.size(); ++i) offset += sorted[i][j] - sorted[0][j];
            expected[j] = sorted[0][j] + offset / static_cast<double>(k);
        }
        rng.shuffle(std::span(ups));
        if (flatten_parameters(aggregate_backbones(ups)) != expected) ++mismatches;

        // K identical uploads, and an antisymmetric pair.
        std::vector<BackbonePayload> same;
        for (std::size_t i = 0; i < k; ++i) same.push_back({i, by_id[0].backbone, 1.0});
        if (flatten_parameters(aggregate_backbones(same)) != sorted[0]) ++mismatches;
        BackboneNet neg = by_id[0].backbone;
        for (auto& l : neg.layers) {
            for (double& v : l.weight.values()) v = -v;
            for (double& v : l.bias) v = -v;
        }
        if (!all_zero(flatten_parameters(aggregate_backbones({{7, neg, 1.0}, {3, by_id[0].backbone, 1.0}})))) {
            ++mismatches;
        }
    }
    Outcome o;
    o.pass = mismatches == 0;
    o.detail = std::to_string(trials) + " random upload sets (shuffled arrival), identical and antisymmetric cases; " +
               std::to_string(mismatches) + " inexact results";
    return o;
}

// Shared experimental setup for the trend criteria.
ExperimentConfig trend_config(Strategy s, std::size_t classes_per_client, std::uint64_t seed) {
    ExperimentConfig cfg;
    cfg.data.classes = 10;
    cfg.data.dim = 32;
    cfg.data.samples_per_class = 500;
    cfg.data.spread = 0.4;
    cfg.partition.num_clients = 20;
    cfg.partition.classes_per_client = classes_per_client;
    cfg.partition.seed = seed;
    cfg.train.rounds = 40;
    cfg.train.participation = 0.5;
    cfg.train.strategy = s;
    cfg.train.seed = seed;
    return cfg;
}

std::string metrics_csv(const ExperimentConfig& cfg) {
    std::ostringstream out;
    write_metrics(run_experiment(cfg), out);
    return out.str();
}

// 4. Byte-identical metrics at 1 and 4 threads.
Outcome determinism() {
    const auto start = Clock::now();
    bool identical = true;
    std::size_t bytes = 0;
    for (Strategy s : {Strategy::fedbsd, Strategy::fedavg}) {
        ExperimentConfig cfg = trend_config(s, 2, 11);
        cfg.train.finetune_epochs = 10;
        std::vector<std::string> outputs;
        for (std::size_t threads : {1u, 1u, 4u, 4u}) {
            cfg.train.threads = threads;
            outputs.push_back(metrics_csv(cfg));
        }
        bytes += outputs[0].size();
        for (const auto& o : outputs) identical = identical && o == outputs[0];
    }
    Outcome o;
    o.pass = identical;
    o.detail = "fedbsd and fedavg+FT, two runs each at 1 and 4 threads: " +
               std::string(identical ? "byte-identical" : "DIFFERENT") + " (" + std::to_string(bytes) +
               " CSV bytes compared per run set, " + fmt("%.1f", seconds_since(start)) + " s)";
    return o;
}

struct TrendRun {
    double last10 = 0.0;
    double finetuned = 0.0;
    std::size_t test_samples = 0;
    double seconds = 0.0;
};

TrendRun trend_run(Strategy s, std::size_t classes_per_client, std::uint64_t seed, bool finetune) {
    ExperimentConfig cfg = trend_config(s, classes_per_client, seed);
    cfg.train.finetune_epochs = finetune ? 10 : 0;
    const auto start = Clock::now();
    Federation fed;
    const MetricsLog log = run_experiment(cfg, {}, &fed);
    TrendRun r;
    r.seconds = seconds_since(start);
    r.last10 = average_last_k(log, 10);
    if (finetune) {
        r.finetuned = std::accumulate(log.finetuned_accuracy.begin(), log.finetuned_accuracy.end(), 0.0) /
                      static_cast<double>(log.finetuned_accuracy.size());
    }
    for (const auto& c : fed.clients) r.test_samples += c.shard.test.size();
    return r;
}

// A decrease from a to b counts only when it is significant: a two-proportion
// z statistic above 2 on the pooled per-client test sets.
bool significant_drop(const TrendRun& a, const TrendRun& b) {
    const double se = std::sqrt(a.last10 * (1.0 - a.last10) / static_cast<double>(a.test_samples) +
                                b.last10 * (1.0 - b.last10) / static_cast<double>(b.test_samples));
    return a.last10 - b.last10 > 2.0 * se;
}

constexpr std::uint64_t kSeeds = 5;
const std::size_t kHeterogeneity[] = {2, 5, 10};

}  // namespace

int main() {
    std::printf("fedbsd acceptance suite\n");
    report(1, "gradient correctness", gradient_correctness());
    report(2, "loss identities", loss_identities());
    report(3, "aggregation oracle", aggregation_oracle());
    report(4, "determinism across thread counts", determinism());

    // Trend runs shared by criteria 5-7: [strategy][S][seed].
    std::map<Strategy, std::map<std::size_t, std::vector<TrendRun>>> runs;
    for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
        for (std::size_t s : kHeterogeneity) {
            runs[Strategy::fedbsd][s].push_back(trend_run(Strategy::fedbsd, s, seed, false));
            runs[Strategy::fedavg][s].push_back(trend_run(Strategy::fedavg, s, seed, s == 2));
        }
        runs[Strategy::fedrep][2].push_back(trend_run(Strategy::fedrep, 2, seed, false));
    }
    auto acc = [&](Strategy st, std::size_t s, std::size_t seed) { return runs[st][s][seed].last10; };
    auto mean_of = [&](Strategy st, std::size_t s, auto field) {
        double sum = 0.0;
        for (const auto& r : runs[st][s]) sum += field(r);
        return sum / static_cast<double>(kSeeds);
    };
    auto total_seconds = [&](Strategy st, std::size_t s) {
        double t = 0.0;
        for (const auto& r : runs[st][s]) t += r.seconds;
        return t;
    };

    for (std::uint64_t k = 0; k < kSeeds; ++k) {
        std::printf("  seed %llu  S=2/5/10  fedbsd %.4f %.4f %.4f  fedavg %.4f %.4f %.4f  fedrep(S=2) %.4f  "
                    "fedavg+FT(S=2) %.4f\n",
                    static_cast<unsigned long long>(k + 1), acc(Strategy::fedbsd, 2, k), acc(Strategy::fedbsd, 5, k),
                    acc(Strategy::fedbsd, 10, k), acc(Strategy::fedavg, 2, k), acc(Strategy::fedavg, 5, k),
                    acc(Strategy::fedavg, 10, k), acc(Strategy::fedrep, 2, k), runs[Strategy::fedavg][2][k].finetuned);
    }

    {
        int holds = 0, strict_holds = 0;
        double secs = 0.0;
        for (std::size_t s : kHeterogeneity) secs += total_seconds(Strategy::fedbsd, s) + total_seconds(Strategy::fedavg, s);
        for (std::uint64_t k = 0; k < kSeeds; ++k) {
            const auto& b = runs[Strategy::fedbsd];
            const auto& a = runs[Strategy::fedavg];
            const bool margin = b.at(2)[k].last10 >= a.at(2)[k].last10 + 0.05;
            const bool bsd_down = !significant_drop(b.at(5)[k], b.at(2)[k]) && !significant_drop(b.at(10)[k], b.at(5)[k]);
            const bool avg_up = !significant_drop(a.at(2)[k], a.at(5)[k]) && !significant_drop(a.at(5)[k], a.at(10)[k]);
            const bool strict = b.at(2)[k].last10 >= b.at(5)[k].last10 && b.at(5)[k].last10 >= b.at(10)[k].last10 &&
                                a.at(2)[k].last10 <= a.at(5)[k].last10 && a.at(5)[k].last10 <= a.at(10)[k].last10;
            holds += margin && bsd_down && avg_up ? 1 : 0;
            strict_holds += margin && strict ? 1 : 0;
        }
        Outcome o;
        o.pass = holds >= 4 && secs < 300.0;
        o.detail = "margin >= 5 pts at S=2 and monotone trends (no significant reversal, z > 2) hold in " +
                   std::to_string(holds) + "/5 seeds (need 4); strict monotonicity in " + std::to_string(strict_holds) +
                   "/5; " + fmt("%.1f", secs) + " s (limit 300 s)";
        report(5, "heterogeneity trend", o);
    }
    {
        const double bsd = mean_of(Strategy::fedbsd, 2, [](const TrendRun& r) { return r.last10; });
        const double rep = mean_of(Strategy::fedrep, 2, [](const TrendRun& r) { return r.last10; });
        const double secs = total_seconds(Strategy::fedbsd, 2) + total_seconds(Strategy::fedrep, 2);
        Outcome o;
        o.pass = bsd >= rep && secs < 180.0;
        o.detail = "S=2 mean last-10 over 5 seeds: fedbsd " + fmt("%.4f", bsd) + " vs fedrep " + fmt("%.4f", rep) +
                   "; " + fmt("%.1f", secs) + " s (limit 180 s)";
        report(6, "distillation ablation", o);
    }
    {
        const double avg = mean_of(Strategy::fedavg, 2, [](const TrendRun& r) { return r.last10; });
        const double ft = mean_of(Strategy::fedavg, 2, [](const TrendRun& r) { return r.finetuned; });
        Outcome o;
        o.pass = ft >= avg + 0.10;
        o.detail = "S=2 mean over 5 seeds: fedavg+FT " + fmt("%.4f", ft) + " vs fedavg last-10 " + fmt("%.4f", avg) +
                   " (need +0.10)";
        report(7, "fine-tuning baseline", o);
    }
    {
        // Several fedbsd and fedrep rounds; every upload must be exactly the
        // client's backbone and contain none of its head parameters.
        Outcome o;
        std::size_t uploads = 0, head_hits = 0, bad_size = 0, bad_content = 0, backbone_params = 0, head_count = 0;
        for (Strategy s : {Strategy::fedbsd, Strategy::fedrep}) {
            const ExperimentConfig cfg = trend_config(s, 2, 3);
            Federation fed = build_federation(cfg);
            backbone_params = fed.server.global_backbone.parameter_count();
            head_count = fed.clients[0].model.head.layer.parameter_count();
            for (int t = 0; t < 3; ++t) {
                const RoundReport r = run_round(fed.server, fed.clients, cfg.train, s);
                if (r.upload_bytes != r.selected.size() * 8 * backbone_params) ++bad_size;
                for (std::size_t slot = 0; slot < r.uploads.size(); ++slot) {
                    const auto& bytes = r.uploads[slot];
                    const ClientState& c = fed.clients[r.selected[slot]];
                    ++uploads;
                    if (bytes.size() != 8 * backbone_params) ++bad_size;
                    if (deserialize_parameters(bytes) != flatten_parameters(c.model.backbone)) ++bad_content;
                    for (double h : flatten_parameters(c.model.head)) {
                        if (h == 0.0) continue;  // zero is not a distinguishing pattern
                        const auto bits = std::bit_cast<std::uint64_t>(h);
                        for (std::size_t i = 0; i + 8 <= bytes.size(); i += 8) {
                            std::uint64_t word = 0;
                            for (int b = 0; b < 8; ++b) word |= std::uint64_t{bytes[i + static_cast<std::size_t>(b)]} << (8 * b);
                            if (word == bits) ++head_hits;
                        }
                    }
                }
            }
        }
        o.pass = uploads > 0 && bad_size == 0 && bad_content == 0 && head_hits == 0;
        o.detail = std::to_string(uploads) + " uploads of " + std::to_string(8 * backbone_params) + " bytes (" +
                   std::to_string(backbone_params) + " backbone parameters; head has " + std::to_string(head_count) +
                   "): size mismatches " + std::to_string(bad_size) + ", content mismatches " +
                   std::to_string(bad_content) + ", head values found " + std::to_string(head_hits);
        report(8, "payload discipline", o);
    }

    std::printf("%s: %d criteria failed\n", failures == 0 ? "ALL PASS" : "FAILURES", failures);
    return failures == 0 ? 0 : 1;
}
