#include "eeguq/moments.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "eeguq/ops.hpp"

namespace eeguq {

namespace {

constexpr double kInvSqrt2Pi = 0.3989422804014327;

double norm_pdf(double z) { return kInvSqrt2Pi * std::exp(-0.5 * z * z); }
double norm_cdf(double z) { return 0.5 * std::erfc(-z * std::numbers::sqrt2 / 2.0); }

// Sub-epsilon negatives from cancellation are floored at zero; anything
// larger is a genuine rule violation.
double sanitize_var(double v, double scale) {
    if (v >= 0.0) return v;
    if (v > -1e-10 * (1.0 + scale)) return 0.0;
    throw std::logic_error("moment rule produced negative variance " + std::to_string(v));
}

}  // namespace

MomentTensor::MomentTensor(Tensor m, Tensor v) : mean(std::move(m)), var(std::move(v)) {
    require_same_shape(mean, var, "MomentTensor");
    for (double x : var.data) {
        if (x < 0.0) {
            throw std::invalid_argument("MomentTensor: negative variance " + std::to_string(x));
        }
    }
}

InputNoise InputNoise::isotropic(double u) {
    if (u < 0.0) {
        throw std::invalid_argument("InputNoise: magnitude must be non-negative, got " +
                                    std::to_string(u));
    }
    InputNoise n;
    n.magnitude = u;
    return n;
}

InputNoise InputNoise::channels(std::vector<double> u) {
    for (double v : u) {
        if (v < 0.0) {
            throw std::invalid_argument("InputNoise: per-channel variance must be non-negative");
        }
    }
    InputNoise n;
    n.per_channel = std::move(u);
    return n;
}

MomentTensor lift(const Tensor& x, const InputNoise& noise) {
    if (noise.is_isotropic()) {
        return MomentTensor(x, Tensor(x.shape, noise.magnitude));
    }
    std::int64_t ch_dim = x.rank() == 4 ? 1 : 0;
    std::int64_t n_ch = x.shape[static_cast<std::size_t>(ch_dim)];
    if (static_cast<std::int64_t>(noise.per_channel.size()) != n_ch) {
        throw std::invalid_argument("lift: per-channel noise length " +
                                    std::to_string(noise.per_channel.size()) +
                                    " does not match channel count " + std::to_string(n_ch));
    }
    Tensor var(x.shape);
    std::int64_t inner = 1;
    for (std::int64_t d = ch_dim + 1; d < x.rank(); ++d) inner *= x.shape[static_cast<std::size_t>(d)];
    std::int64_t outer = x.size() / (n_ch * inner);
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t c = 0; c < n_ch; ++c)
            for (std::int64_t i = 0; i < inner; ++i)
                var[(o * n_ch + c) * inner + i] = noise.per_channel[static_cast<std::size_t>(c)];
    return MomentTensor(x, std::move(var));
}

MomentTensor adf_conv2d(const MomentTensor& m, const Tensor& kernel, std::int64_t pad_h,
                        std::int64_t pad_w, std::int64_t groups) {
    Tensor sq = kernel;
    for (auto& w : sq.data) w *= w;
    Tensor mean = conv2d_forward(m.mean, kernel, pad_h, pad_w, groups);
    Tensor var = conv2d_forward(m.var, sq, pad_h, pad_w, groups);
    return MomentTensor(std::move(mean), std::move(var));
}

MomentTensor adf_dense(const MomentTensor& m, const Tensor& weights, const Tensor& bias) {
    Tensor mean = matmul_forward(m.mean, weights);
    if (bias.size() != 0) {
        if (bias.size() != mean.shape[1]) {
            throw std::invalid_argument("adf_dense: bias length " + std::to_string(bias.size()) +
                                        " does not match output width " +
                                        std::to_string(mean.shape[1]));
        }
        std::int64_t n = mean.shape[0], k = mean.shape[1];
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < k; ++j) mean[i * k + j] += bias[j];
    }
    Tensor sq = weights;
    for (auto& w : sq.data) w *= w;
    Tensor var = matmul_forward(m.var, sq);
    return MomentTensor(std::move(mean), std::move(var));
}

MomentTensor adf_relu(const MomentTensor& m) {
    Tensor mean(m.mean.shape), var(m.mean.shape);
    for (std::int64_t i = 0; i < m.mean.size(); ++i) {
        double mu = m.mean[i];
        double v = m.var[i];
        if (v == 0.0) {
            mean[i] = mu > 0.0 ? mu : 0.0;
            var[i] = 0.0;
            continue;
        }
        double sd = std::sqrt(v);
        double r = mu / sd;
        if (r >= 8.0) {
            // mass entirely above zero to double precision
            mean[i] = mu;
            var[i] = v;
        } else if (r <= -8.0) {
            mean[i] = 0.0;
            var[i] = 0.0;
        } else {
            double cdf = norm_cdf(r);
            double pdf = norm_pdf(r);
            double mo = mu * cdf + sd * pdf;
            double second = (mu * mu + v) * cdf + mu * sd * pdf;
            mean[i] = mo;
            var[i] = sanitize_var(second - mo * mo, second);
        }
    }
    return MomentTensor(std::move(mean), std::move(var));
}

MomentTensor adf_batchnorm(const MomentTensor& m, const Tensor& running_mean,
                           const Tensor& running_var, const Tensor& scale, const Tensor& shift,
                           double eps) {
    const Tensor& x = m.mean;
    if (x.rank() != 4) {
        throw std::invalid_argument("adf_batchnorm: input must be rank-4, got " +
                                    shape_to_string(x.shape));
    }
    std::int64_t B = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    if (running_mean.size() != C || running_var.size() != C || scale.size() != C ||
        shift.size() != C) {
        throw std::invalid_argument("adf_batchnorm: parameter length does not match channels " +
                                    std::to_string(C));
    }
    Tensor mean(x.shape), var(x.shape);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            double coeff = scale[c] / std::sqrt(running_var[c] + eps);
            double sh = shift[c] - coeff * running_mean[c];
            double coeff2 = coeff * coeff;
            std::int64_t base = (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) {
                mean[base + i] = coeff * x[base + i] + sh;
                var[base + i] = coeff2 * m.var[base + i];
            }
        }
    return MomentTensor(std::move(mean), std::move(var));
}

MomentTensor adf_avgpool(const MomentTensor& m, std::int64_t win_h, std::int64_t win_w) {
    Tensor mean = avgpool2d_forward(m.mean, win_h, win_w);
    Tensor var = avgpool2d_forward(m.var, win_h, win_w);
    // avg of variances / window = sum of variances / window^2
    double inv = 1.0 / static_cast<double>(win_h * win_w);
    for (auto& v : var.data) v *= inv;
    return MomentTensor(std::move(mean), std::move(var));
}

namespace {

// 16-point Gauss-Legendre nodes/weights on [-1, 1].
constexpr double kGlNode[16] = {
    -0.9894009349916499, -0.9445750230732326, -0.8656312023878318, -0.7554044083550030,
    -0.6178762444026438, -0.4580167776572274, -0.2816035507792589, -0.0950125098376374,
    0.0950125098376374,  0.2816035507792589,  0.4580167776572274,  0.6178762444026438,
    0.7554044083550030,  0.8656312023878318,  0.9445750230732326,  0.9894009349916499};
constexpr double kGlWeight[16] = {
    0.0271524594117541, 0.0622535239386479, 0.0951585116824928, 0.1246289712555339,
    0.1495959888165767, 0.1691565193950025, 0.1826034150449236, 0.1894506104550685,
    0.1894506104550685, 0.1826034150449236, 0.1691565193950025, 0.1495959888165767,
    0.1246289712555339, 0.0951585116824928, 0.0622535239386479, 0.0271524594117541};

// Exact moments of max(X_1..X_k) for independent Gaussians via quadrature of
// E[g(M)] = int g(x) f(x) dx with f(x) = sum_i pdf_i(x) prod_{j!=i} cdf_j(x).
// Degenerate (zero-variance) entries fold into a single point mass.
void gaussian_max_moments(const double* mu, const double* var, std::int64_t k, double& mean_out,
                          double& var_out) {
    double c_star = -1e308;  // max over degenerate entries
    bool any_const = false;
    std::vector<double> m, s;
    for (std::int64_t i = 0; i < k; ++i) {
        if (var[i] <= 0.0) {
            any_const = true;
            c_star = std::max(c_star, mu[i]);
        } else {
            m.push_back(mu[i]);
            s.push_back(std::sqrt(var[i]));
        }
    }
    if (m.empty()) {
        mean_out = c_star;
        var_out = 0.0;
        return;
    }
    if (m.size() == 1 && !any_const) {
        mean_out = m[0];
        var_out = s[0] * s[0];
        return;
    }
    double lo = -1e308, hi = -1e308;
    for (std::size_t i = 0; i < m.size(); ++i) {
        lo = std::max(lo, m[i] - 9.0 * s[i]);
        hi = std::max(hi, m[i] + 9.0 * s[i]);
    }
    if (any_const) lo = std::max(lo, c_star);
    if (hi <= lo) {  // continuous mass entirely below the constant
        mean_out = c_star;
        var_out = 0.0;
        return;
    }
    double e1 = 0.0, e2 = 0.0, mass = 0.0;
    const int panels = 8;
    double width = (hi - lo) / static_cast<double>(panels);
    for (int p = 0; p < panels; ++p) {
        double a = lo + width * static_cast<double>(p);
        double hw = 0.5 * width;
        double mid = a + hw;
        for (int q = 0; q < 16; ++q) {
            double x = mid + hw * kGlNode[q];
            double f = 0.0;
            for (std::size_t i = 0; i < m.size(); ++i) {
                double zi = (x - m[i]) / s[i];
                double term = norm_pdf(zi) / s[i];
                if (term == 0.0) continue;
                for (std::size_t j = 0; j < m.size(); ++j) {
                    if (j == i) continue;
                    term *= norm_cdf((x - m[j]) / s[j]);
                }
                f += term;
            }
            double w = kGlWeight[q] * hw * f;
            mass += w;
            e1 += w * x;
            e2 += w * x * x;
        }
    }
    if (any_const) {
        // point mass at c_star where every continuous variable falls below it
        double pm = 1.0;
        for (std::size_t j = 0; j < m.size(); ++j) pm *= norm_cdf((c_star - m[j]) / s[j]);
        mass += pm;
        e1 += pm * c_star;
        e2 += pm * c_star * c_star;
    }
    // mass deviates from 1 only by quadrature truncation; renormalize
    e1 /= mass;
    e2 /= mass;
    mean_out = e1;
    var_out = sanitize_var(e2 - e1 * e1, e2);
}

}  // namespace

void gaussian_max_pair(double mu1, double v1, double mu2, double v2, double& mean_out,
                       double& var_out) {
    double a2 = v1 + v2;
    if (a2 <= 0.0) {
        mean_out = std::max(mu1, mu2);
        var_out = 0.0;
        return;
    }
    double a = std::sqrt(a2);
    double alpha = (mu1 - mu2) / a;
    if (alpha >= 8.0) {
        mean_out = mu1;
        var_out = v1;
        return;
    }
    if (alpha <= -8.0) {
        mean_out = mu2;
        var_out = v2;
        return;
    }
    double cdf = norm_cdf(alpha);
    double cdf_n = norm_cdf(-alpha);
    double pdf = norm_pdf(alpha);
    double mean = mu1 * cdf + mu2 * cdf_n + a * pdf;
    double second =
        (mu1 * mu1 + v1) * cdf + (mu2 * mu2 + v2) * cdf_n + (mu1 + mu2) * a * pdf;
    mean_out = mean;
    var_out = sanitize_var(second - mean * mean, second);
}

MomentTensor adf_maxpool(const MomentTensor& m, std::int64_t win_h, std::int64_t win_w) {
    const Tensor& x = m.mean;
    if (x.rank() != 4) {
        throw std::invalid_argument("adf_maxpool: input must be rank-4, got " +
                                    shape_to_string(x.shape));
    }
    if (win_h < 1 || win_w < 1 || x.shape[2] % win_h != 0 || x.shape[3] % win_w != 0) {
        throw std::invalid_argument("adf_maxpool: window (" + std::to_string(win_h) + ", " +
                                    std::to_string(win_w) + ") does not divide extents of " +
                                    shape_to_string(x.shape));
    }
    std::int64_t BC = x.shape[0] * x.shape[1], H = x.shape[2], W = x.shape[3];
    std::int64_t OH = H / win_h, OW = W / win_w;
    std::int64_t win = win_h * win_w;
    Tensor mean({x.shape[0], x.shape[1], OH, OW});
    Tensor var(mean.shape);
    std::vector<double> wm(static_cast<std::size_t>(win)), wv(static_cast<std::size_t>(win));
    for (std::int64_t bc = 0; bc < BC; ++bc)
        for (std::int64_t oh = 0; oh < OH; ++oh)
            for (std::int64_t ow = 0; ow < OW; ++ow) {
                std::int64_t e = 0;
                for (std::int64_t dh = 0; dh < win_h; ++dh)
                    for (std::int64_t dw = 0; dw < win_w; ++dw, ++e) {
                        std::int64_t i = (bc * H + oh * win_h + dh) * W + ow * win_w + dw;
                        wm[static_cast<std::size_t>(e)] = m.mean[i];
                        wv[static_cast<std::size_t>(e)] = m.var[i];
                    }
                double mu, v;
                if (win == 1) {
                    mu = wm[0];
                    v = wv[0];
                } else if (win == 2) {
                    gaussian_max_pair(wm[0], wv[0], wm[1], wv[1], mu, v);
                } else {
                    gaussian_max_moments(wm.data(), wv.data(), win, mu, v);
                }
                mean[(bc * OH + oh) * OW + ow] = mu;
                var[(bc * OH + oh) * OW + ow] = v;
            }
    return MomentTensor(std::move(mean), std::move(var));
}

MomentTensor adf_dropout(const MomentTensor& m, const Tensor& mask) {
    for (double v : mask.data) {
        if (v != 0.0 && v != 1.0) {
            throw std::invalid_argument("adf_dropout: mask entries must be 0 or 1, got " +
                                        std::to_string(v));
        }
    }
    Tensor mean = m.mean, var = m.var;
    if (mask.same_shape(m.mean)) {
        for (std::int64_t i = 0; i < mean.size(); ++i) {
            mean[i] *= mask[i];
            var[i] *= mask[i];
        }
        return MomentTensor(std::move(mean), std::move(var));
    }
    // broadcast an unbatched mask over the batch axis
    if (m.mean.rank() == 4 && mask.rank() == 3 && mask.shape[0] == m.mean.shape[1] &&
        mask.shape[1] == m.mean.shape[2] && mask.shape[2] == m.mean.shape[3]) {
        std::int64_t B = m.mean.shape[0];
        std::int64_t inner = mask.size();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t i = 0; i < inner; ++i) {
                mean[b * inner + i] *= mask[i];
                var[b * inner + i] *= mask[i];
            }
        return MomentTensor(std::move(mean), std::move(var));
    }
    throw std::invalid_argument("adf_dropout: mask shape " + shape_to_string(mask.shape) +
                                " does not match moments " + shape_to_string(m.mean.shape));
}

void softmax_delta_method(const std::vector<double>& mean_logits,
                          const std::vector<double>& var_logits, std::vector<double>& probs,
                          std::vector<double>& prob_vars) {
    std::size_t k = mean_logits.size();
    if (var_logits.size() != k) {
        throw std::invalid_argument("softmax_delta_method: mean/var lengths differ");
    }
    probs.assign(k, 0.0);
    prob_vars.assign(k, 0.0);
    double mx = mean_logits[0];
    for (double v : mean_logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        probs[j] = std::exp(mean_logits[j] - mx);
        sum += probs[j];
    }
    for (auto& p : probs) p /= sum;
    for (std::size_t i = 0; i < k; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            double jac = probs[i] * ((i == j ? 1.0 : 0.0) - probs[j]);
            acc += jac * jac * var_logits[j];
        }
        prob_vars[i] = acc;
    }
}

}  // namespace eeguq
