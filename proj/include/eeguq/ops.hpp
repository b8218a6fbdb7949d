#pragma once

#include <cstdint>

#include "eeguq/tensor.hpp"

namespace eeguq {

// Plain-tensor forwards shared by the eval path and the moment propagation
// rules; the taped primitives wrap these same computations.

Tensor conv2d_forward(const Tensor& x, const Tensor& w, std::int64_t ph, std::int64_t pw,
                      std::int64_t groups);
Tensor softmax_rows_forward(const Tensor& x);
Tensor matmul_forward(const Tensor& a, const Tensor& b);
Tensor avgpool2d_forward(const Tensor& x, std::int64_t win_h, std::int64_t win_w);

}  // namespace eeguq
