#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "eeguq/checkpoint.hpp"
#include "eeguq/dataset.hpp"
#include "eeguq/decoder.hpp"
#include "eeguq/ops.hpp"

#include "oracles.hpp"

using namespace eeguq;

namespace {

DecoderConfig small_config() {
    DecoderConfig c;
    c.n_channels = 8;
    c.n_samples = 128;
    c.n_classes = 4;
    c.temporal_filters = 4;
    c.depth_multiplier = 2;
    c.pointwise_filters = 8;
    c.temporal_kernel = 33;
    c.pool_window = 8;
    c.dropout_rate_train = 0.15;
    return c;
}

// Straight-line per-layer reference forward, written independently of the
// library's interpreters (naive conv oracle, explicit loops for the rest).
Tensor reference_forward(const DecoderModel& m, const Tensor& batch) {
    const DecoderConfig& c = m.config;
    Tensor x = batch.reshaped({batch.shape[0], 1, c.n_channels, c.n_samples});
    auto bn = [&](Tensor a, const BatchNormParams& p) {
        std::int64_t B = a.shape[0], C = a.shape[1], HW = a.shape[2] * a.shape[3];
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t ch = 0; ch < C; ++ch)
                for (std::int64_t i = 0; i < HW; ++i) {
                    double& v = a[(b * C + ch) * HW + i];
                    v = p.gamma[ch] * (v - p.running_mean[ch]) /
                            std::sqrt(p.running_var[ch] + c.bn_eps) +
                        p.beta[ch];
                }
        return a;
    };
    auto relu_t = [](Tensor a) {
        for (auto& v : a.data) v = v > 0.0 ? v : 0.0;
        return a;
    };
    Tensor a = oracles::conv2d_reference(x, m.conv1_w, 0, (c.temporal_kernel - 1) / 2, 1);
    a = bn(a, m.bn1);
    a = oracles::conv2d_reference(a, m.conv2_w, 0, (c.spatial_kernel - 1) / 2,
                                  c.temporal_filters);
    a = relu_t(bn(a, m.bn2));
    a = oracles::conv2d_reference(a, m.conv3_w, 0, (c.pointwise_kernel - 1) / 2, 1);
    a = relu_t(bn(a, m.bn3));
    // average pool over time
    std::int64_t B = a.shape[0], F = a.shape[1], W = a.shape[3];
    std::int64_t OW = W / c.pool_window;
    Tensor pooled({B, F, 1, OW});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t f = 0; f < F; ++f)
            for (std::int64_t ow = 0; ow < OW; ++ow) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < c.pool_window; ++i)
                    acc += a[(b * F + f) * W + ow * c.pool_window + i];
                pooled[(b * F + f) * OW + ow] = acc / static_cast<double>(c.pool_window);
            }
    Tensor flat = pooled.reshaped({B, c.dense_inputs()});
    Tensor logits({B, c.n_classes});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t k = 0; k < c.n_classes; ++k) {
            double acc = m.dense_b[k];
            for (std::int64_t i = 0; i < c.dense_inputs(); ++i)
                acc += flat[b * c.dense_inputs() + i] * m.dense_w[i * c.n_classes + k];
            logits[b * c.n_classes + k] = acc;
        }
    return logits;
}

SegmentSet make_synth_segments(std::uint64_t seed, double u_true, std::int64_t subjects,
                               std::int64_t trials_each) {
    SynthParams p;
    p.n_subjects = subjects;
    p.trials_per_subject = trials_each;
    p.n_channels = 8;
    p.n_samples = 256;
    p.n_classes = 4;
    p.u_true = u_true;
    TrialSet trials = synth_generate(p, RngStream(seed));
    return segment(trials, 128, 64);
}

}  // namespace

TEST_CASE("build_decoder produces normalized probabilities for the paper shapes") {
    for (std::int64_t ch : {22, 44}) {
        DecoderConfig c;
        c.n_channels = ch;
        c.n_samples = 400;
        c.n_classes = 4;
        CHECK_THROWS_AS([&] { DecoderConfig bad = c; bad.pool_window = 7; bad.validate(); }(),
                        std::invalid_argument);
        c.pool_window = 8;
        c.n_samples = 400;
        DecoderModel m = build_decoder(c, RngStream(11));
        RngStream data(1);
        Tensor x = uniform_sample(data, {1, ch, 1, 400}, -1.0, 1.0);
        Tensor logits = forward_eval(m, x);
        Tensor probs = softmax_rows_forward(logits);
        double sum = 0.0;
        for (std::int64_t k = 0; k < 4; ++k) {
            CHECK(probs[k] > 0.0);
            sum += probs[k];
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("kernel longer than the window is rejected") {
    DecoderConfig c = small_config();
    c.temporal_kernel = c.n_samples + 1;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("two builds from the same stream give identical parameters") {
    DecoderConfig c = small_config();
    RngStream stream(77);
    DecoderModel a = build_decoder(c, stream);
    DecoderModel b = build_decoder(c, stream);
    CHECK(a.conv1_w.data == b.conv1_w.data);
    CHECK(a.conv2_w.data == b.conv2_w.data);
    CHECK(a.conv3_w.data == b.conv3_w.data);
    CHECK(a.dense_w.data == b.dense_w.data);
    CHECK(a.dense_b.data == b.dense_b.data);
}

TEST_CASE("all-ones mask equals no dropout and batches are independent") {
    DecoderConfig c = small_config();
    DecoderModel m = build_decoder(c, RngStream(3));
    RngStream data(5);
    Tensor x = uniform_sample(data, {2, c.n_channels, 1, c.n_samples}, -1.0, 1.0);

    DropoutMask ones = DropoutMask::ones(c);
    Tensor with_mask = forward_eval(m, x, &ones);
    Tensor without = forward_eval(m, x);
    CHECK(with_mask.data == without.data);

    // duplicate the first row; its logits must repeat exactly
    Tensor dup({3, c.n_channels, 1, c.n_samples});
    std::copy(x.data.begin(), x.data.end(), dup.data.begin());
    std::copy(x.data.begin(), x.data.begin() + c.n_channels * c.n_samples,
              dup.data.begin() + 2 * c.n_channels * c.n_samples);
    Tensor logits = forward_eval(m, dup);
    for (std::int64_t k = 0; k < c.n_classes; ++k) {
        CHECK(logits[0 * c.n_classes + k] == logits[2 * c.n_classes + k]);
    }
}

TEST_CASE("eval forward matches the straight-line reference within 1e-9") {
    DecoderConfig c = small_config();
    DecoderModel m = build_decoder(c, RngStream(13));
    // non-trivial running stats
    RngStream rs(21);
    for (auto* bn : {&m.bn1, &m.bn2, &m.bn3}) {
        for (auto& v : bn->running_mean.data) v = rs.uniform(-0.3, 0.3);
        for (auto& v : bn->running_var.data) v = rs.uniform(0.5, 1.5);
        for (auto& v : bn->gamma.data) v = rs.uniform(0.8, 1.2);
        for (auto& v : bn->beta.data) v = rs.uniform(-0.2, 0.2);
    }
    RngStream data(5);
    Tensor x = uniform_sample(data, {3, c.n_channels, 1, c.n_samples}, -1.0, 1.0);
    Tensor got = forward_eval(m, x);
    Tensor want = reference_forward(m, x);
    REQUIRE(got.shape == want.shape);
    for (std::int64_t i = 0; i < got.size(); ++i)
        CHECK(std::abs(got[i] - want[i]) < 1e-9);
}

TEST_CASE("adf mean path reproduces the deterministic forward at zero variance") {
    DecoderConfig c = small_config();
    DecoderModel m = build_decoder(c, RngStream(17));
    RngStream data(6);
    Tensor x = uniform_sample(data, {2, c.n_channels, 1, c.n_samples}, -1.0, 1.0);
    MomentTensor m0 = lift(x, InputNoise::isotropic(0.0));
    MomentTensor out = adf_forward(m, m0, DropoutMask::ones(c));
    Tensor logits = forward_eval(m, x);
    for (std::int64_t i = 0; i < logits.size(); ++i) {
        CHECK(std::abs(out.mean[i] - logits[i]) < 1e-9);
        CHECK(out.var[i] == 0.0);
    }
    m.train_mode = true;
    CHECK_THROWS_AS(adf_forward(m, m0, DropoutMask::ones(c)), std::invalid_argument);
}

TEST_CASE("train-mode dropout zeroes the configured fraction of units") {
    DecoderConfig c = small_config();
    c.dropout_rate_train = 0.3;
    RngStream stream(9);
    std::vector<Tensor> masks = sample_train_masks(c, 13, c.dropout_rate_train, stream);
    std::int64_t zeros = 0, total = 0;
    for (const Tensor& m : masks) {
        for (double v : m.data) {
            if (v == 0.0) ++zeros;
            ++total;
        }
    }
    REQUIRE(total > 100000);
    double fraction = static_cast<double>(zeros) / static_cast<double>(total);
    CHECK(std::abs(fraction - 0.3) < 0.02);
}

TEST_CASE("training reaches the separable synthetic task") {
    SegmentSet segs = make_synth_segments(101, 0.05, 3, 32);
    // the generator itself must be separable for a band-power oracle
    double oracle_acc = oracles::band_power_logistic_accuracy(
        segs.data, segs.labels, {8.0, 8.0 + 22.0 / 3.0, 8.0 + 44.0 / 3.0, 30.0}, 250.0, 4);
    CHECK(oracle_acc >= 0.9);

    DecoderConfig c = small_config();
    DecoderModel m = build_decoder(c, RngStream(55));
    TrainHistory h = train(m, segs, segs, 40, 0.001, 64, RngStream(56));
    REQUIRE(h.train_accuracy.size() == 40);
    CHECK(h.train_accuracy.back() >= 0.95);
    CHECK(m.train_mode == false);
}

TEST_CASE("lr zero leaves parameters untouched and loss constant") {
    SegmentSet segs = make_synth_segments(102, 0.05, 2, 16);
    DecoderConfig c = small_config();
    c.dropout_rate_train = 0.0;  // full-batch, no dropout: the loss has no noise source
    DecoderModel m = build_decoder(c, RngStream(50));
    Tensor before = m.conv1_w;
    Tensor before_dense = m.dense_w;
    TrainHistory h = train(m, segs, segs, 3, 0.0, 512, RngStream(51));
    CHECK(m.conv1_w.data == before.data);
    CHECK(m.dense_w.data == before_dense.data);
    CHECK(h.train_loss[0] == h.train_loss[1]);
    CHECK(h.train_loss[1] == h.train_loss[2]);
}

TEST_CASE("train loss is non-increasing in at least 9 of 10 seeded runs") {
    SegmentSet segs = make_synth_segments(103, 0.05, 2, 24);
    DecoderConfig c = small_config();
    c.dropout_rate_train = 0.05;
    int monotone = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        DecoderModel m = build_decoder(c, RngStream(200 + seed));
        TrainHistory h = train(m, segs, segs, 8, 0.001, 48, RngStream(300 + seed));
        bool ok = true;
        for (std::size_t e = 1; e < h.train_loss.size(); ++e) {
            if (h.train_loss[e] > h.train_loss[e - 1]) ok = false;
        }
        if (ok) ++monotone;
    }
    CHECK(monotone >= 9);
}

TEST_CASE("empty dataset and bad labels are rejected") {
    DecoderConfig c = small_config();
    DecoderModel m = build_decoder(c, RngStream(1));
    SegmentSet empty;
    empty.n_classes = 4;
    CHECK_THROWS_AS(train(m, empty, empty, 1, 0.001, 8, RngStream(2)), std::invalid_argument);

    SegmentSet segs = make_synth_segments(104, 0.05, 2, 8);
    segs.labels[0] = 7;
    CHECK_THROWS_AS(train(m, segs, segs, 1, 0.001, 8, RngStream(2)), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    DecoderConfig c = small_config();
    DecoderModel m = build_decoder(c, RngStream(42));
    // perturb running stats so they are not the fresh defaults
    m.bn2.running_mean[1] = 0.37;
    m.bn3.running_var[2] = 1.91;
    std::string path = "/tmp/eeguq_test_ckpt.uncm";
    save_decoder(m, path);
    DecoderModel r = load_decoder(path);
    CHECK(r.config.serialize() == m.config.serialize());
    auto na = m.named_tensors();
    auto nb = r.named_tensors();
    REQUIRE(na.size() == nb.size());
    for (std::size_t i = 0; i < na.size(); ++i) {
        CHECK(na[i].first == nb[i].first);
        CHECK(na[i].second->data == nb[i].second->data);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects foreign and truncated files") {
    std::string path = "/tmp/eeguq_bad_ckpt.uncm";
    {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        std::fputs("NOPE", f);
        std::fclose(f);
    }
    CHECK_THROWS_WITH_AS(load_decoder(path), doctest::Contains("magic"), std::runtime_error);
    std::remove(path.c_str());
}
