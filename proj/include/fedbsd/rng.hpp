#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <utility>

namespace fedbsd {

// Purpose tags mixed into derived stream seeds so that independent consumers
// (partitioning, client selection, local training, ...) never share a stream.
enum class StreamTag : std::uint64_t {
    init = 1,
    data = 2,
    partition = 3,
    select = 4,
    client = 5,
    finetune = 6,
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// Deterministic random stream. The engine is mt19937_64, whose output sequence
// is fixed by the standard; the distributions below are hand-written because
// the <random> distributions are implementation-defined.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed);

    // Stream for stream(master_seed, path...), e.g. derive(seed, {client, round, id}).
    static RngStream derive(std::uint64_t master_seed, StreamTag tag,
                            std::initializer_list<std::uint64_t> path = {});

    std::uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; the spare deviate is cached.
    double normal();

    // Uniform integer in [0, n), unbiased. n must be > 0.
    std::size_t below(std::size_t n);

    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace fedbsd
