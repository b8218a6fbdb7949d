#pragma once

#include <cstdint>
#include <vector>

#include "eeguq/tensor.hpp"

namespace eeguq {

/// Paired (mean, variance) arrays under the factorized-Gaussian assumption.
/// Variances are element-wise and must stay non-negative after every rule.
struct MomentTensor {
    Tensor mean;
    Tensor var;

    MomentTensor() = default;
    MomentTensor(Tensor m, Tensor v);

    MomentTensor reshaped(std::vector<std::int64_t> new_shape) const {
        return MomentTensor(mean.reshaped(new_shape), var.reshaped(new_shape));
    }
};

/// Input-noise specification: a single variance magnitude, or one magnitude
/// per channel (broadcast along the remaining axes).
struct InputNoise {
    double magnitude = 0.0;
    std::vector<double> per_channel;  // empty -> isotropic

    static InputNoise isotropic(double u);
    static InputNoise channels(std::vector<double> u);
    bool is_isotropic() const { return per_channel.empty(); }
};

/// Wraps an observation into a Gaussian with the assumed noise variance.
/// For per-channel noise, dimension 0 of x is the channel axis unless x is
/// rank-4 [batch, ch, h, w], in which case dimension 1 is used.
MomentTensor lift(const Tensor& x, const InputNoise& noise);

/// Linear rule: mean through the map, variance through squared weights.
MomentTensor adf_conv2d(const MomentTensor& m, const Tensor& kernel, std::int64_t pad_h,
                        std::int64_t pad_w, std::int64_t groups);
/// Dense layer x[n,k] * W[k,j] + b[j].
MomentTensor adf_dense(const MomentTensor& m, const Tensor& weights, const Tensor& bias);

/// Rectified-Gaussian moments, exact closed form.
MomentTensor adf_relu(const MomentTensor& m);

/// Eval-mode batch norm: per-channel affine map from fixed running stats.
MomentTensor adf_batchnorm(const MomentTensor& m, const Tensor& running_mean,
                           const Tensor& running_var, const Tensor& scale, const Tensor& shift,
                           double eps);

/// Window average; variance shrinks by the window size under independence.
MomentTensor adf_avgpool(const MomentTensor& m, std::int64_t win_h, std::int64_t win_w);

/// Gaussian moment matching of the window maximum under independence:
/// the exact two-variable closed form for pairs, quadrature of the max
/// distribution for wider windows.
MomentTensor adf_maxpool(const MomentTensor& m, std::int64_t win_h, std::int64_t win_w);

/// Dropout mask applied to both moments; entries must be exactly 0 or 1.
/// The mask may omit the batch axis of a rank-4 moment, in which case it is
/// broadcast over the batch.
MomentTensor adf_dropout(const MomentTensor& m, const Tensor& mask);

/// Moments of max(N(mu1,v1), N(mu2,v2)) for independent operands.
void gaussian_max_pair(double mu1, double v1, double mu2, double v2, double& mean_out,
                       double& var_out);

/// Softmax probabilities at the mean plus the delta-method diagonal of the
/// probability-space covariance, J diag(var) J^T, for one logit row.
void softmax_delta_method(const std::vector<double>& mean_logits,
                          const std::vector<double>& var_logits, std::vector<double>& probs,
                          std::vector<double>& prob_vars);

}  // namespace eeguq
