#include "oracles.hpp"

#include <numbers>

namespace oracles {

namespace {

// Power of the DFT bin nearest the target frequency (Goertzel-style direct sum).
double band_power(const double* x, std::int64_t n, double freq_hz, double fs) {
    double w = 2.0 * std::numbers::pi * freq_hz / fs;
    double re = 0.0, im = 0.0;
    for (std::int64_t t = 0; t < n; ++t) {
        re += x[t] * std::cos(w * static_cast<double>(t));
        im += x[t] * std::sin(w * static_cast<double>(t));
    }
    return (re * re + im * im) / static_cast<double>(n);
}

}  // namespace

double band_power_logistic_accuracy(const Tensor& segments,
                                    const std::vector<std::int64_t>& labels,
                                    const std::vector<double>& class_freqs_hz,
                                    double sample_rate_hz, std::int64_t n_classes) {
    std::int64_t n = segments.shape[0], C = segments.shape[1], T = segments.shape[2];
    std::int64_t F = C * static_cast<std::int64_t>(class_freqs_hz.size());
    // features: per-channel power at every class frequency, standardized
    std::vector<double> feat(static_cast<std::size_t>(n * F));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < C; ++c)
            for (std::size_t f = 0; f < class_freqs_hz.size(); ++f) {
                feat[static_cast<std::size_t>(i * F + c * static_cast<std::int64_t>(
                                                             class_freqs_hz.size()) +
                                              static_cast<std::int64_t>(f))] =
                    band_power(segments.data.data() + (i * C + c) * T, T, class_freqs_hz[f],
                               sample_rate_hz);
            }
    for (std::int64_t f = 0; f < F; ++f) {
        double mu = 0.0, sd = 0.0;
        for (std::int64_t i = 0; i < n; ++i) mu += feat[static_cast<std::size_t>(i * F + f)];
        mu /= static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) {
            double d = feat[static_cast<std::size_t>(i * F + f)] - mu;
            sd += d * d;
        }
        sd = std::sqrt(sd / static_cast<double>(n));
        if (sd <= 0.0) sd = 1.0;
        for (std::int64_t i = 0; i < n; ++i)
            feat[static_cast<std::size_t>(i * F + f)] =
                (feat[static_cast<std::size_t>(i * F + f)] - mu) / sd;
    }

    std::int64_t K = n_classes;
    std::vector<double> wmat(static_cast<std::size_t>((F + 1) * K), 0.0);
    std::vector<double> logits(static_cast<std::size_t>(K));
    std::vector<double> probs(static_cast<std::size_t>(K));
    double lr = 0.5;
    for (int iter = 0; iter < 400; ++iter) {
        std::vector<double> grad(wmat.size(), 0.0);
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t k = 0; k < K; ++k) {
                double acc = wmat[static_cast<std::size_t>(F * K + k)];  // bias row
                for (std::int64_t f = 0; f < F; ++f)
                    acc += feat[static_cast<std::size_t>(i * F + f)] *
                           wmat[static_cast<std::size_t>(f * K + k)];
                logits[static_cast<std::size_t>(k)] = acc;
            }
            double mx = logits[0];
            for (double v : logits) mx = std::max(mx, v);
            double sum = 0.0;
            for (std::int64_t k = 0; k < K; ++k) {
                probs[static_cast<std::size_t>(k)] = std::exp(logits[static_cast<std::size_t>(k)] - mx);
                sum += probs[static_cast<std::size_t>(k)];
            }
            for (auto& p : probs) p /= sum;
            for (std::int64_t k = 0; k < K; ++k) {
                double err = probs[static_cast<std::size_t>(k)] -
                             (labels[static_cast<std::size_t>(i)] == k ? 1.0 : 0.0);
                for (std::int64_t f = 0; f < F; ++f)
                    grad[static_cast<std::size_t>(f * K + k)] +=
                        err * feat[static_cast<std::size_t>(i * F + f)];
                grad[static_cast<std::size_t>(F * K + k)] += err;
            }
        }
        for (std::size_t j = 0; j < wmat.size(); ++j)
            wmat[j] -= lr * grad[j] / static_cast<double>(n);
    }

    std::int64_t correct = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t best = 0;
        double best_v = -1e308;
        for (std::int64_t k = 0; k < K; ++k) {
            double acc = wmat[static_cast<std::size_t>(F * K + k)];
            for (std::int64_t f = 0; f < F; ++f)
                acc += feat[static_cast<std::size_t>(i * F + f)] *
                       wmat[static_cast<std::size_t>(f * K + k)];
            if (acc > best_v) {
                best_v = acc;
                best = k;
            }
        }
        if (best == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace oracles
