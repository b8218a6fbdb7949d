#include "doctest.h"

#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "eeguq/moments.hpp"
#include "eeguq/rng.hpp"

#include "oracles.hpp"

using namespace eeguq;
using oracles::MomentAccumulator;

namespace {

// Samples z ~ N(mean, diag var), pushes each draw through the deterministic
// layer, and compares the ADF moments against the empirical ones (excursion
// guard here; bias aggregated per suite, see McSuite).
oracles::McComparison mc_layer_check(
    const MomentTensor& input,
    const std::function<std::vector<double>(const std::vector<double>&)>& layer,
    const MomentTensor& adf_out, std::int64_t n_samples, RngStream stream) {
    std::vector<double> z(static_cast<std::size_t>(input.mean.size()));
    std::vector<MomentAccumulator> acc(static_cast<std::size_t>(adf_out.mean.size()));
    for (std::int64_t s = 0; s < n_samples; ++s) {
        for (std::size_t i = 0; i < z.size(); ++i) {
            z[i] = input.mean[static_cast<std::int64_t>(i)] +
                   std::sqrt(input.var[static_cast<std::int64_t>(i)]) * stream.normal();
        }
        std::vector<double> out = layer(z);
        if (s == 0) REQUIRE(out.size() == acc.size());
        for (std::size_t i = 0; i < out.size(); ++i) acc[i].add(out[i]);
    }
    oracles::McComparison cmp = oracles::compare_moments(acc, adf_out.mean, adf_out.var);
    INFO("worst |z| mean ", cmp.worst_mean_sigma, " var ", cmp.worst_var_sigma, ", bias z mean ",
         cmp.mean_bias_z, " var ", cmp.var_bias_z, " over ", cmp.elements, " elements");
    CHECK(cmp.guard_ok());
    return cmp;
}

MomentTensor random_moments(RngStream& stream, std::vector<std::int64_t> shape) {
    Tensor mean = uniform_sample(stream, shape, -2.0, 2.0);
    Tensor var = uniform_sample(stream, shape, 0.01, 2.0);
    return MomentTensor(std::move(mean), std::move(var));
}

}  // namespace

TEST_CASE("lift wraps an observation with the assumed noise") {
    Tensor x({3, 4}, 0.7);
    MomentTensor m0 = lift(x, InputNoise::isotropic(0.0));
    for (double v : m0.var.data) CHECK(v == 0.0);

    MomentTensor m1 = lift(x, InputNoise::isotropic(0.1));
    CHECK(m1.mean.data == x.data);
    for (double v : m1.var.data) CHECK(v == 0.1);

    MomentTensor mc = lift(x, InputNoise::channels({0.1, 0.2, 0.3}));
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t t = 0; t < 4; ++t)
            CHECK(mc.var[c * 4 + t] == doctest::Approx(0.1 * static_cast<double>(c + 1)));

    CHECK_THROWS_AS(InputNoise::isotropic(-0.01), std::invalid_argument);
    CHECK_THROWS_AS(lift(x, InputNoise::channels({0.1, 0.2})), std::invalid_argument);
}

TEST_CASE("linear rule: identity and scalar scaling behave exactly") {
    Tensor mean({1, 2}, std::vector<double>{1.0, -0.5});
    Tensor var({1, 2}, std::vector<double>{0.3, 0.8});
    MomentTensor m(mean, var);

    Tensor eye({2, 2}, std::vector<double>{1.0, 0.0, 0.0, 1.0});
    MomentTensor out = adf_dense(m, eye, Tensor({2}));
    CHECK(out.mean.data == mean.data);
    CHECK(out.var.data == var.data);

    Tensor twice({2, 2}, std::vector<double>{2.0, 0.0, 0.0, 2.0});
    MomentTensor scaled = adf_dense(m, twice, Tensor({2}));
    CHECK(scaled.mean[0] == doctest::Approx(2.0));
    CHECK(scaled.var[0] == doctest::Approx(4.0 * 0.3));
    CHECK(scaled.var[1] == doctest::Approx(4.0 * 0.8));
}

TEST_CASE("linear rule matches Monte-Carlo on random dense layers") {
    RngStream stream(31);
    oracles::McSuite suite;
    for (int cfg = 0; cfg < 20; ++cfg) {
        RngStream s = stream.child(static_cast<std::uint64_t>(cfg));
        MomentTensor m = random_moments(s, {1, 6});
        Tensor w = uniform_sample(s, {6, 3}, -1.0, 1.0);
        Tensor b = uniform_sample(s, {3}, -0.5, 0.5);
        MomentTensor out = adf_dense(m, w, b);
        suite.add(mc_layer_check(
            m,
            [&](const std::vector<double>& z) {
                std::vector<double> y(3, 0.0);
                for (int j = 0; j < 3; ++j) {
                    for (int i = 0; i < 6; ++i) y[static_cast<std::size_t>(j)] += z[static_cast<std::size_t>(i)] * w[i * 3 + j];
                    y[static_cast<std::size_t>(j)] += b[j];
                }
                return y;
            },
            out, 100000, s.child(999)));
    }
    CHECK(suite.bias_ok());
}

TEST_CASE("relu rule: spot values and asymptotics") {
    Tensor mean({3}), var({3});
    mean[0] = 0.0;  var[0] = 1.0;
    mean[1] = 10.0; var[1] = 1.0;
    mean[2] = -10.0; var[2] = 1.0;
    MomentTensor out = adf_relu(MomentTensor(mean, var));
    CHECK(out.mean[0] == doctest::Approx(0.39894).epsilon(1e-4));
    CHECK(out.var[0] == doctest::Approx(0.34085).epsilon(1e-4));
    CHECK(std::abs(out.mean[1] - 10.0) < 1e-6);
    CHECK(std::abs(out.var[1] - 1.0) < 1e-6);
    CHECK(out.mean[2] < 1e-6);
    CHECK(out.var[2] < 1e-6);

    // zero variance degrades to the deterministic relu
    Tensor m0({2}, std::vector<double>{1.5, -1.5});
    MomentTensor det = adf_relu(MomentTensor(m0, Tensor({2})));
    CHECK(det.mean[0] == 1.5);
    CHECK(det.mean[1] == 0.0);
    CHECK(det.var[0] == 0.0);
}

TEST_CASE("relu rule matches a 1e7-sample Monte-Carlo at the origin") {
    RngStream stream(57);
    MomentAccumulator acc;
    for (std::int64_t i = 0; i < 10000000; ++i) {
        double z = stream.normal();
        acc.add(z > 0.0 ? z : 0.0);
    }
    CHECK(acc.mean() == doctest::Approx(1.0 / std::sqrt(2.0 * std::numbers::pi)).epsilon(1e-3));
    CHECK(acc.variance() == doctest::Approx(0.5 - 1.0 / (2.0 * std::numbers::pi)).epsilon(1e-3));
}

TEST_CASE("relu rule matches Monte-Carlo over random moment grids") {
    RngStream stream(33);
    oracles::McSuite suite;
    for (int cfg = 0; cfg < 20; ++cfg) {
        RngStream s = stream.child(static_cast<std::uint64_t>(cfg));
        MomentTensor m = random_moments(s, {8});
        MomentTensor out = adf_relu(m);
        suite.add(mc_layer_check(
            m,
            [](const std::vector<double>& z) {
                std::vector<double> y(z.size());
                for (std::size_t i = 0; i < z.size(); ++i) y[i] = z[i] > 0.0 ? z[i] : 0.0;
                return y;
            },
            out, 100000, s.child(999)));
    }
    CHECK(suite.bias_ok());
}

TEST_CASE("batchnorm rule: identity, scaling, and Monte-Carlo agreement") {
    Tensor mean({1, 1, 1, 4}, std::vector<double>{0.5, -1.0, 2.0, 0.0});
    Tensor var({1, 1, 1, 4}, std::vector<double>{0.2, 0.4, 0.6, 0.8});
    MomentTensor m(mean, var);

    Tensor zeros({1}), ones({1}, 1.0);
    MomentTensor same = adf_batchnorm(m, zeros, ones, ones, zeros, 0.0);
    for (std::int64_t i = 0; i < 4; ++i) {
        CHECK(same.mean[i] == doctest::Approx(mean[i]));
        CHECK(same.var[i] == doctest::Approx(var[i]));
    }

    Tensor three({1}, 3.0);
    MomentTensor scaled = adf_batchnorm(m, zeros, ones, three, zeros, 0.0);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(scaled.var[i] == doctest::Approx(9.0 * var[i]));

    RngStream stream(35);
    oracles::McSuite suite;
    for (int cfg = 0; cfg < 20; ++cfg) {
        RngStream s = stream.child(static_cast<std::uint64_t>(cfg));
        MomentTensor rm = random_moments(s, {1, 2, 1, 3});
        Tensor mu = uniform_sample(s, {2}, -1.0, 1.0);
        Tensor rv = uniform_sample(s, {2}, 0.3, 2.0);
        Tensor g = uniform_sample(s, {2}, 0.5, 1.5);
        Tensor b = uniform_sample(s, {2}, -0.5, 0.5);
        double eps = 1e-5;
        MomentTensor out = adf_batchnorm(rm, mu, rv, g, b, eps);
        suite.add(mc_layer_check(
            rm,
            [&](const std::vector<double>& z) {
                std::vector<double> y(z.size());
                for (std::int64_t c = 0; c < 2; ++c)
                    for (std::int64_t i = 0; i < 3; ++i) {
                        double coeff = g[c] / std::sqrt(rv[c] + eps);
                        y[static_cast<std::size_t>(c * 3 + i)] =
                            coeff * (z[static_cast<std::size_t>(c * 3 + i)] - mu[c]) + b[c];
                    }
                return y;
            },
            out, 100000, s.child(999)));
    }
    CHECK(suite.bias_ok());
}

TEST_CASE("avgpool rule: identity, variance shrinkage, Monte-Carlo") {
    RngStream stream(37);
    MomentTensor m = random_moments(stream, {1, 1, 2, 4});
    MomentTensor idod = adf_avgpool(m, 1, 1);
    CHECK(idod.mean.data == m.mean.data);
    CHECK(idod.var.data == m.var.data);

    Tensor mean({1, 1, 1, 2}, std::vector<double>{1.0, 3.0});
    Tensor var({1, 1, 1, 2}, 0.6);
    MomentTensor pooled = adf_avgpool(MomentTensor(mean, var), 1, 2);
    CHECK(pooled.mean[0] == doctest::Approx(2.0));
    CHECK(pooled.var[0] == doctest::Approx(0.3));

    CHECK_THROWS_AS(adf_avgpool(m, 1, 3), std::invalid_argument);

    oracles::McSuite suite;
    for (int cfg = 0; cfg < 20; ++cfg) {
        RngStream s = stream.child(static_cast<std::uint64_t>(cfg));
        MomentTensor rm = random_moments(s, {1, 1, 2, 4});
        MomentTensor out = adf_avgpool(rm, 2, 2);
        suite.add(mc_layer_check(
            rm,
            [](const std::vector<double>& z) {
                std::vector<double> y(2, 0.0);
                for (int ow = 0; ow < 2; ++ow) {
                    double acc = 0.0;
                    for (int dh = 0; dh < 2; ++dh)
                        for (int dw = 0; dw < 2; ++dw)
                            acc += z[static_cast<std::size_t>(dh * 4 + ow * 2 + dw)];
                    y[static_cast<std::size_t>(ow)] = acc / 4.0;
                }
                return y;
            },
            out, 100000, s.child(999)));
    }
    CHECK(suite.bias_ok());
}

TEST_CASE("max pool rule: closed-form pair and identity window") {
    Tensor mean({1, 1, 1, 2}), var({1, 1, 1, 2}, 1.0);
    MomentTensor out = adf_maxpool(MomentTensor(mean, var), 1, 2);
    CHECK(out.mean[0] == doctest::Approx(1.0 / std::sqrt(std::numbers::pi)).epsilon(1e-3));
    CHECK(out.var[0] == doctest::Approx(1.0 - 1.0 / std::numbers::pi).epsilon(1e-3));

    RngStream stream(39);
    MomentTensor m = random_moments(stream, {1, 1, 1, 4});
    MomentTensor same = adf_maxpool(m, 1, 1);
    CHECK(same.mean.data == m.mean.data);
}

TEST_CASE("max pool rule stays within 5% of a 1e6-sample Monte-Carlo") {
    RngStream stream(41);
    for (int cfg = 0; cfg < 20; ++cfg) {
        RngStream s = stream.child(static_cast<std::uint64_t>(cfg));
        MomentTensor m = random_moments(s, {1, 1, 1, 4});
        MomentTensor out = adf_maxpool(m, 1, 4);
        MomentAccumulator acc;
        RngStream draw = s.child(999);
        for (std::int64_t i = 0; i < 1000000; ++i) {
            double best = -1e308;
            for (std::int64_t j = 0; j < 4; ++j) {
                double z = m.mean[j] + std::sqrt(m.var[j]) * draw.normal();
                best = std::max(best, z);
            }
            acc.add(best);
        }
        CHECK(oracles::rel_err(out.mean[0], acc.mean(), 0.05) < 0.05);
        CHECK(oracles::rel_err(out.var[0], acc.variance(), 0.05) < 0.05);
    }
}

TEST_CASE("dropout rule equals a diagonal 0/1 linear layer") {
    RngStream stream(43);
    MomentTensor m = random_moments(stream, {1, 6});
    Tensor mask({1, 6});
    for (auto& v : mask.data) v = stream.uniform() < 0.5 ? 0.0 : 1.0;

    MomentTensor dropped = adf_dropout(m, mask);
    Tensor diag({6, 6});
    for (std::int64_t i = 0; i < 6; ++i) diag[i * 6 + i] = mask[i];
    MomentTensor linear = adf_dense(m, diag, Tensor({6}));
    for (std::int64_t i = 0; i < 6; ++i) {
        CHECK(dropped.mean[i] == doctest::Approx(linear.mean[i]));
        CHECK(dropped.var[i] == doctest::Approx(linear.var[i]));
    }

    MomentTensor all = adf_dropout(m, Tensor({1, 6}, 1.0));
    CHECK(all.mean.data == m.mean.data);
    MomentTensor none = adf_dropout(m, Tensor({1, 6}, 0.0));
    for (double v : none.mean.data) CHECK(v == 0.0);
    for (double v : none.var.data) CHECK(v == 0.0);

    Tensor bad({1, 6}, 0.5);
    CHECK_THROWS_AS(adf_dropout(m, bad), std::invalid_argument);
}

TEST_CASE("conv moment rule matches Monte-Carlo") {
    RngStream stream(45);
    oracles::McSuite suite;
    for (int cfg = 0; cfg < 10; ++cfg) {
        RngStream s = stream.child(static_cast<std::uint64_t>(cfg));
        MomentTensor m = random_moments(s, {1, 2, 3, 4});
        Tensor w = uniform_sample(s, {3, 2, 2, 2}, -1.0, 1.0);
        MomentTensor out = adf_conv2d(m, w, 1, 1, 1);
        suite.add(mc_layer_check(
            m,
            [&](const std::vector<double>& z) {
                Tensor x({1, 2, 3, 4}, z);
                Tensor y = oracles::conv2d_reference(x, w, 1, 1, 1);
                return y.data;
            },
            out, 50000, s.child(999)));
    }
    CHECK(suite.bias_ok());
}

TEST_CASE("softmax delta method produces a valid distribution and variances") {
    std::vector<double> mu{1.0, -0.5, 0.2};
    std::vector<double> v{0.1, 0.2, 0.3};
    std::vector<double> p, pv;
    softmax_delta_method(mu, v, p, pv);
    double sum = 0.0;
    for (double x : p) {
        CHECK(x > 0.0);
        sum += x;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    for (double x : pv) CHECK(x >= 0.0);
    // zero logit variance -> zero probability variance
    std::vector<double> zeros{0.0, 0.0, 0.0};
    softmax_delta_method(mu, zeros, p, pv);
    for (double x : pv) CHECK(x == 0.0);
}
