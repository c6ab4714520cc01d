#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "fedbsd/rng.hpp"
#include "fedbsd/tensor.hpp"

namespace fedbsd {

struct Dataset {
    Tensor2D features;  // num_samples x dim
    std::vector<std::size_t> labels;
    std::size_t num_classes = 0;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t dim() const noexcept { return features.cols(); }

    Dataset subset(std::span<const std::size_t> indices) const;
};

// Per-column zero mean / unit variance. Constant columns become zero.
void standardize(Tensor2D& features);

// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
// Pixels are scaled to [0, 1] and then standardized. Throws FormatError.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

// m Gaussian blobs in dim dimensions. Centers are unit-norm vertices of a
// randomly rotated regular simplex (random unit vectors when dim < m), noise is
// isotropic with standard deviation spread. Rows are shuffled.
Dataset gen_synthetic_blobs(std::size_t num_classes, std::size_t dim, std::size_t samples_per_class,
                            double spread, RngStream& rng);

enum class Allocation { uniform, lognormal };

struct PartitionSpec {
    std::size_t num_clients = 100;
    std::size_t classes_per_client = 2;
    Allocation allocation = Allocation::uniform;
    double lognormal_sigma = 1.0;
    std::uint64_t seed = 1;
};

struct ClientShard {
    std::size_t client_id = 0;
    Dataset train;
    Dataset test;
    std::vector<std::size_t> class_set;  // sorted
    std::vector<std::size_t> train_indices;  // rows of the source dataset
    std::vector<std::size_t> test_indices;
};

// Label-skew partition: each client holds exactly S distinct classes; each
// class is divided among its holders (equal split under uniform allocation,
// log-normal client weights otherwise); every client's share is split 80/20
// into train/test per class (test count round(0.2 * n)). A client whose test
// split would be empty gets one training sample moved to test.
std::vector<ClientShard> partition_by_classes(const Dataset& data, const PartitionSpec& spec,
                                              RngStream& rng);

// Largest-remainder apportionment of total over weights; every entry gets at
// least one when total >= weights.size().
std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights);

// Weights drawn from LogNormal(0, sigma^2) and apportioned over total.
std::vector<std::size_t> lognormal_allocate(std::size_t total, std::size_t num_clients, double sigma,
                                            RngStream& rng);

// CSV: client_id,class_set,train_count,test_count (class_set ';'-separated).
void write_manifest(std::span<const ClientShard> shards, std::ostream& out);

}  // namespace fedbsd
