#pragma once

#include <cstdint>
#include <vector>

#include "eeguq/tensor.hpp"

namespace eeguq {

/// Counter-based random stream. A draw is a hash of (seed, stream_id, counter),
/// so identical (seed, stream_id) always replay the same sequence and child
/// streams are independent of scheduling order.
class RngStream {
  public:
    RngStream() : RngStream(0, 0) {}
    explicit RngStream(std::uint64_t seed, std::uint64_t stream_id = 0)
        : seed_(seed), stream_id_(stream_id), counter_(0) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }
    std::uint64_t counter() const { return counter_; }

    /// Derives an independent stream; the parent is left untouched.
    RngStream child(std::uint64_t key) const;

    std::uint64_t next_u64();

    /// Uniform in [0, 1).
    double uniform();
    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);
    /// Uniform integer in [0, n).
    std::int64_t uniform_int(std::int64_t n);
    /// Standard normal via Box-Muller (two uniforms per draw).
    double normal();
    double normal(double mean, double std);
    /// Poisson via inverse CDF from a single uniform, normal approximation
    /// for large rates. Monotone in lambda for a fixed counter position.
    std::int64_t poisson(double lambda);

    /// Fisher-Yates shuffle of [0, n) indices.
    std::vector<std::int64_t> permutation(std::int64_t n);

  private:
    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::uint64_t counter_;
};

/// i.i.d. Gaussian tensor, deterministic given the stream. std must be >= 0;
/// std == 0 yields a constant tensor.
Tensor normal_sample(RngStream& stream, std::vector<std::int64_t> shape, double mean, double std);

/// i.i.d. uniform tensor on [lo, hi).
Tensor uniform_sample(RngStream& stream, std::vector<std::int64_t> shape, double lo, double hi);

}  // namespace eeguq
