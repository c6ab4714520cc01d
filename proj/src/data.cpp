#include "fedbsd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <ostream>
#include <string>

#include "fedbsd/errors.hpp"

namespace fedbsd {
namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr int kMaxPartitionAttempts = 100;

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string(), 0);
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                        const std::string& file) {
    if (offset + 4 > bytes.size()) {
        throw FormatError(file + ": truncated header", bytes.size());
    }
    return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
           (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

// Validates magic and payload length; returns the dims.
std::vector<std::size_t> read_idx_header(const std::vector<unsigned char>& bytes,
                                         std::uint32_t expected_magic, const std::string& file) {
    const std::uint32_t magic = read_be32(bytes, 0, file);
    if (magic != expected_magic) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "0x%08x", magic);
        throw FormatError(file + ": bad magic " + buf, 0);
    }
    const std::size_t ndims = magic & 0xffU;
    std::vector<std::size_t> dims;
    for (std::size_t d = 0; d < ndims; ++d) {
        dims.push_back(read_be32(bytes, 4 + 4 * d, file));
    }
    const std::size_t offset = 4 + 4 * ndims;
    const std::size_t payload =
        std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
    if (bytes.size() < offset + payload) {
        throw FormatError(file + ": truncated payload, expected " + std::to_string(payload) +
                              " bytes after header",
                          bytes.size());
    }
    if (bytes.size() > offset + payload) {
        throw FormatError(file + ": trailing bytes after payload", offset + payload);
    }
    return dims;
}

// Class assignment per client; each class held by at least one client.
std::vector<std::vector<std::size_t>> draw_class_sets(std::size_t num_clients, std::size_t s,
                                                      std::size_t m, RngStream& rng) {
    std::vector<std::size_t> pool(m);
    for (int attempt = 0; attempt < kMaxPartitionAttempts; ++attempt) {
        std::vector<std::vector<std::size_t>> sets(num_clients);
        std::vector<std::size_t> holders(m, 0);
        for (auto& set : sets) {
            std::iota(pool.begin(), pool.end(), std::size_t{0});
            // Partial Fisher-Yates: first s entries are a uniform s-subset.
            for (std::size_t i = 0; i < s; ++i) {
                std::swap(pool[i], pool[i + rng.below(m - i)]);
            }
            set.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(s));
            std::sort(set.begin(), set.end());
            for (std::size_t c : set) {
                ++holders[c];
            }
        }
        if (std::all_of(holders.begin(), holders.end(), [](std::size_t h) { return h > 0; })) {
            return sets;
        }
    }
    throw ParameterError("class starvation: some class was drawn by no client after " +
                         std::to_string(kMaxPartitionAttempts) + " attempts (N=" +
                         std::to_string(num_clients) + ", S=" + std::to_string(s) +
                         ", m=" + std::to_string(m) + ")");
}

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.features = features.gather_rows(indices);
    out.labels.reserve(indices.size());
    for (std::size_t i : indices) {
        out.labels.push_back(labels[i]);
    }
    out.num_classes = num_classes;
    return out;
}

void standardize(Tensor2D& features) {
    const std::size_t n = features.rows();
    if (n == 0) {
        return;
    }
    for (std::size_t c = 0; c < features.cols(); ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            mean += features(r, c);
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            const double d = features(r, c) - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double scale = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            features(r, c) = (features(r, c) - mean) * scale;
        }
    }
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
    const std::string img_name = images_path.filename().string();
    const std::string lbl_name = labels_path.filename().string();
    const auto img_bytes = read_file(images_path);
    const auto lbl_bytes = read_file(labels_path);
    const auto img_dims = read_idx_header(img_bytes, kIdxImagesMagic, img_name);
    const auto lbl_dims = read_idx_header(lbl_bytes, kIdxLabelsMagic, lbl_name);
    if (img_dims[0] != lbl_dims[0]) {
        throw FormatError("image count " + std::to_string(img_dims[0]) + " in " + img_name +
                              " does not match label count " + std::to_string(lbl_dims[0]) +
                              " in " + lbl_name,
                          4);
    }
    const std::size_t n = img_dims[0];
    const std::size_t dim = img_dims[1] * img_dims[2];
    if (n == 0 || dim == 0) {
        throw FormatError(img_name + ": empty image set", 4);
    }

    Dataset d;
    d.features = Tensor2D(n, dim);
    const std::size_t img_offset = 16;
    for (std::size_t k = 0; k < n * dim; ++k) {
        d.features.values()[k] = static_cast<double>(img_bytes[img_offset + k]) / 255.0;
    }
    standardize(d.features);
    d.labels.resize(n);
    const std::size_t lbl_offset = 8;
    for (std::size_t k = 0; k < n; ++k) {
        d.labels[k] = lbl_bytes[lbl_offset + k];
    }
    d.num_classes = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
    return d;
}

Dataset gen_synthetic_blobs(std::size_t num_classes, std::size_t dim, std::size_t samples_per_class,
                            double spread, RngStream& rng) {
    if (num_classes < 2 || dim < 2 || samples_per_class == 0 || !(spread >= 0.0) ||
        !std::isfinite(spread)) {
        throw ParameterError("synthetic blobs need classes >= 2, dim >= 2, samples_per_class >= 1, spread >= 0");
    }
    const std::size_t m = num_classes;
    Tensor2D centers(m, dim);
    if (dim >= m) {
        // Random orthonormal basis Q (dim x m) by Gram-Schmidt, then
        // center_c = Q (e_c - 1/m) / |e_c - 1/m|.
        std::vector<std::vector<double>> basis;
        while (basis.size() < m) {
            std::vector<double> v(dim);
            for (double& x : v) {
                x = rng.normal();
            }
            for (const auto& q : basis) {
                const double dot = std::inner_product(v.begin(), v.end(), q.begin(), 0.0);
                for (std::size_t i = 0; i < dim; ++i) {
                    v[i] -= dot * q[i];
                }
            }
            const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
            if (norm < 1e-8) {
                continue;
            }
            for (double& x : v) {
                x /= norm;
            }
            basis.push_back(std::move(v));
        }
        const double inv_m = 1.0 / static_cast<double>(m);
        const double vertex_norm = std::sqrt(1.0 - inv_m);
        for (std::size_t c = 0; c < m; ++c) {
            for (std::size_t j = 0; j < m; ++j) {
                const double coef = ((j == c ? 1.0 : 0.0) - inv_m) / vertex_norm;
                for (std::size_t i = 0; i < dim; ++i) {
                    centers(c, i) += coef * basis[j][i];
                }
            }
        }
    } else {
        for (std::size_t c = 0; c < m; ++c) {
            auto row = centers.row(c);
            double norm = 0.0;
            do {
                for (double& x : row) {
                    x = rng.normal();
                }
                norm = std::sqrt(std::inner_product(row.begin(), row.end(), row.begin(), 0.0));
            } while (norm < 1e-8);
            for (double& x : row) {
                x /= norm;
            }
        }
    }

    const std::size_t n = m * samples_per_class;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(std::span(order));

    Dataset d;
    d.features = Tensor2D(n, dim);
    d.labels.resize(n);
    d.num_classes = m;
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t c = k / samples_per_class;
        const std::size_t slot = order[k];
        d.labels[slot] = c;
        auto row = d.features.row(slot);
        const auto center = centers.row(c);
        for (std::size_t i = 0; i < dim; ++i) {
            row[i] = center[i] + spread * rng.normal();
        }
    }
    return d;
}

std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights) {
    const std::size_t n = weights.size();
    if (n == 0) {
        throw ParameterError("apportion: no recipients");
    }
    const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(sum > 0.0) || !std::isfinite(sum)) {
        throw ParameterError("apportion: weights must have a positive finite sum");
    }
    std::vector<std::size_t> counts(n);
    std::vector<double> frac(n);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double ideal = static_cast<double>(total) * weights[i] / sum;
        counts[i] = static_cast<std::size_t>(std::floor(ideal));
        frac[i] = ideal - std::floor(ideal);
        assigned += counts[i];
    }
    // Guard against floating round-off pushing the floors above total.
    while (assigned > total) {
        auto it = std::max_element(counts.begin(), counts.end());
        --*it;
        --assigned;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t k = 0; assigned < total; k = (k + 1) % n) {
        ++counts[order[k]];
        ++assigned;
    }
    if (total >= n) {
        for (std::size_t i = 0; i < n; ++i) {
            if (counts[i] == 0) {
                auto donor = std::max_element(counts.begin(), counts.end());
                --*donor;
                counts[i] = 1;
            }
        }
    }
    return counts;
}

std::vector<std::size_t> lognormal_allocate(std::size_t total, std::size_t num_clients, double sigma,
                                            RngStream& rng) {
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
        throw ParameterError("lognormal sigma must be >= 0");
    }
    if (num_clients == 0 || total < num_clients) {
        throw ParameterError("cannot allocate " + std::to_string(total) + " samples to " +
                             std::to_string(num_clients) + " clients with at least one each");
    }
    std::vector<double> weights(num_clients);
    for (double& w : weights) {
        w = std::exp(sigma * rng.normal());
    }
    return apportion(total, weights);
}

std::vector<ClientShard> partition_by_classes(const Dataset& data, const PartitionSpec& spec,
                                              RngStream& rng) {
    const std::size_t m = data.num_classes;
    const std::size_t n = spec.num_clients;
    const std::size_t s = spec.classes_per_client;
    if (n == 0) {
        throw ParameterError("partition needs at least one client");
    }
    if (s == 0 || s > m) {
        throw ParameterError("classes_per_client S=" + std::to_string(s) + " must be in [1, m=" +
                             std::to_string(m) + "]");
    }
    if (!(spec.lognormal_sigma >= 0.0)) {
        throw ParameterError("lognormal sigma must be >= 0");
    }

    const auto class_sets = draw_class_sets(n, s, m, rng);

    std::vector<double> client_weight(n, 1.0);
    if (spec.allocation == Allocation::lognormal) {
        for (double& w : client_weight) {
            w = std::exp(spec.lognormal_sigma * rng.normal());
        }
    }

    std::vector<std::vector<std::size_t>> by_class(m);
    for (std::size_t i = 0; i < data.size(); ++i) {
        by_class[data.labels[i]].push_back(i);
    }

    std::vector<ClientShard> shards(n);
    for (std::size_t k = 0; k < n; ++k) {
        shards[k].client_id = k;
        shards[k].class_set = class_sets[k];
    }

    for (std::size_t c = 0; c < m; ++c) {
        std::vector<std::size_t> holders;
        for (std::size_t k = 0; k < n; ++k) {
            if (std::binary_search(class_sets[k].begin(), class_sets[k].end(), c)) {
                holders.push_back(k);
            }
        }
        auto& samples = by_class[c];
        if (samples.size() < holders.size()) {
            throw ParameterError("class " + std::to_string(c) + " has " + std::to_string(samples.size()) +
                                 " samples for " + std::to_string(holders.size()) + " holders");
        }
        rng.shuffle(std::span(samples));

        std::vector<std::size_t> counts;
        if (spec.allocation == Allocation::lognormal) {
            std::vector<double> w;
            for (std::size_t k : holders) {
                w.push_back(client_weight[k]);
            }
            counts = apportion(samples.size(), w);
        } else {
            const std::size_t base = samples.size() / holders.size();
            const std::size_t extra = samples.size() % holders.size();
            for (std::size_t h = 0; h < holders.size(); ++h) {
                counts.push_back(base + (h < extra ? 1 : 0));
            }
        }

        std::size_t pos = 0;
        for (std::size_t h = 0; h < holders.size(); ++h) {
            auto& shard = shards[holders[h]];
            const std::size_t count = counts[h];
            const std::size_t test_count = (count + 2) / 5;  // round(0.2 * count)
            const std::size_t train_count = count - test_count;
            shard.train_indices.insert(shard.train_indices.end(), samples.begin() + static_cast<std::ptrdiff_t>(pos),
                                       samples.begin() + static_cast<std::ptrdiff_t>(pos + train_count));
            shard.test_indices.insert(shard.test_indices.end(),
                                      samples.begin() + static_cast<std::ptrdiff_t>(pos + train_count),
                                      samples.begin() + static_cast<std::ptrdiff_t>(pos + count));
            pos += count;
        }
    }

    for (auto& shard : shards) {
        // Small log-normal shares can round every per-class test count to zero;
        // move one training sample over so every client can be evaluated.
        if (shard.test_indices.empty()) {
            if (shard.train_indices.size() < 2) {
                throw ParameterError("client " + std::to_string(shard.client_id) + " received " +
                                     std::to_string(shard.train_indices.size()) +
                                     " samples; at least 2 are needed for a train/test split");
            }
            shard.test_indices.push_back(shard.train_indices.back());
            shard.train_indices.pop_back();
        }
        shard.train = data.subset(shard.train_indices);
        shard.test = data.subset(shard.test_indices);
    }
    return shards;
}

void write_manifest(std::span<const ClientShard> shards, std::ostream& out) {
    out << "client_id,class_set,train_count,test_count\n";
    for (const auto& shard : shards) {
        out << shard.client_id << ',';
        for (std::size_t i = 0; i < shard.class_set.size(); ++i) {
            out << (i ? ";" : "") << shard.class_set[i];
        }
        out << ',' << shard.train.size() << ',' << shard.test.size() << '\n';
    }
}

}  // namespace fedbsd
