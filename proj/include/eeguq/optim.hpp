#pragma once

#include <cstdint>
#include <vector>

#include "eeguq/tensor.hpp"

namespace eeguq {

/// Adam first/second-moment accumulators, one pair per parameter.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::int64_t step = 0;

    static AdamState init(const std::vector<Tensor>& params);
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update, in place on params.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               const AdamConfig& cfg);

}  // namespace eeguq
