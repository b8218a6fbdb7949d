#include "eeguq/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace eeguq {

namespace {

// SplitMix64 finalizer; full avalanche on 64 bits.
std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t hash3(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix64(mix64(mix64(a) ^ b) ^ c);
}

}  // namespace

RngStream RngStream::child(std::uint64_t key) const {
    return RngStream(seed_, mix64(stream_id_ ^ mix64(key ^ 0xd1342543de82ef95ULL)));
}

std::uint64_t RngStream::next_u64() { return hash3(seed_, stream_id_, counter_++); }

double RngStream::uniform() {
    // Top 53 bits -> [0, 1).
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::int64_t RngStream::uniform_int(std::int64_t n) {
    if (n <= 0) {
        throw std::invalid_argument("uniform_int: n must be positive");
    }
    return static_cast<std::int64_t>(uniform() * static_cast<double>(n)) % n;
}

double RngStream::normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double RngStream::normal(double mean, double std) { return mean + std * normal(); }

std::int64_t RngStream::poisson(double lambda) {
    if (lambda < 0.0) {
        throw std::invalid_argument("poisson: rate must be non-negative");
    }
    if (lambda == 0.0) {
        counter_ += 2;  // keep draw count independent of the rate
        return 0;
    }
    if (lambda > 50.0) {
        double z = normal();
        double v = std::round(lambda + std::sqrt(lambda) * z);
        return v < 0.0 ? 0 : static_cast<std::int64_t>(v);
    }
    double u = uniform();
    counter_ += 1;  // match the two-draw cost of the normal branch
    double p = std::exp(-lambda);
    double cdf = p;
    std::int64_t k = 0;
    while (u > cdf && k < 4096) {
        ++k;
        p *= lambda / static_cast<double>(k);
        cdf += p;
    }
    return k;
}

std::vector<std::int64_t> RngStream::permutation(std::int64_t n) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (std::int64_t i = n - 1; i > 0; --i) {
        std::int64_t j = uniform_int(i + 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    return idx;
}

Tensor normal_sample(RngStream& stream, std::vector<std::int64_t> shape, double mean, double std) {
    if (std < 0.0) {
        throw std::invalid_argument("normal_sample: std must be non-negative, got " +
                                    std::to_string(std));
    }
    Tensor out(std::move(shape));
    if (std == 0.0) {
        for (auto& v : out.data) v = mean;
        return out;
    }
    for (auto& v : out.data) v = stream.normal(mean, std);
    return out;
}

Tensor uniform_sample(RngStream& stream, std::vector<std::int64_t> shape, double lo, double hi) {
    Tensor out(std::move(shape));
    for (auto& v : out.data) v = stream.uniform(lo, hi);
    return out;
}

}  // namespace eeguq
