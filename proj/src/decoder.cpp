#include "eeguq/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "eeguq/ops.hpp"
#include "eeguq/optim.hpp"

namespace eeguq {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

Tensor uniform_fan_in(RngStream& stream, std::vector<std::int64_t> shape, std::int64_t fan_in) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return uniform_sample(stream, std::move(shape), -bound, bound);
}

BatchNormParams make_bn(std::int64_t channels) {
    BatchNormParams bn;
    bn.gamma = Tensor({channels}, 1.0);
    bn.beta = Tensor({channels});
    bn.running_mean = Tensor({channels});
    bn.running_var = Tensor({channels}, 1.0);
    return bn;
}

// Plain eval-mode batch norm.
void apply_bn_eval(Tensor& x, const BatchNormParams& bn, double eps) {
    std::int64_t B = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            double sc = bn.gamma[c] / std::sqrt(bn.running_var[c] + eps);
            double sh = bn.beta[c] - sc * bn.running_mean[c];
            double* p = x.data.data() + (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) p[i] = sc * p[i] + sh;
        }
}

void apply_relu(Tensor& x) {
    for (auto& v : x.data) v = v > 0.0 ? v : 0.0;
}

// Unbatched {0,1} mask broadcast over the batch.
void apply_mask(Tensor& x, const Tensor& mask) {
    std::int64_t inner = mask.size();
    require(x.size() % inner == 0 && x.shape[1] == mask.shape[0] && x.shape[2] == mask.shape[1] &&
                x.shape[3] == mask.shape[2],
            "dropout mask shape " + shape_to_string(mask.shape) + " does not match activation " +
                shape_to_string(x.shape));
    std::int64_t B = x.shape[0];
    for (std::int64_t b = 0; b < B; ++b) {
        double* p = x.data.data() + b * inner;
        for (std::int64_t i = 0; i < inner; ++i) p[i] *= mask[i];
    }
}

struct BatchStats {
    Tensor mean;
    Tensor var;  // biased
};

BatchStats compute_batch_stats(const Tensor& x) {
    std::int64_t B = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    std::int64_t m = B * HW;
    BatchStats s{Tensor({C}), Tensor({C})};
    for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
            const double* p = x.data.data() + (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) acc += p[i];
        }
        s.mean[c] = acc / static_cast<double>(m);
        double accv = 0.0;
        for (std::int64_t b = 0; b < B; ++b) {
            const double* p = x.data.data() + (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) {
                double d = p[i] - s.mean[c];
                accv += d * d;
            }
        }
        s.var[c] = accv / static_cast<double>(m);
    }
    return s;
}

void apply_bn_batch(Tensor& x, const BatchNormParams& bn, const BatchStats& s, double eps) {
    std::int64_t B = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            double sc = bn.gamma[c] / std::sqrt(s.var[c] + eps);
            double sh = bn.beta[c] - sc * s.mean[c];
            double* p = x.data.data() + (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) p[i] = sc * p[i] + sh;
        }
}

void update_running(BatchNormParams& bn, const BatchStats& s, double momentum, std::int64_t m) {
    double unbias = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
    for (std::int64_t c = 0; c < bn.running_mean.size(); ++c) {
        bn.running_mean[c] = (1.0 - momentum) * bn.running_mean[c] + momentum * s.mean[c];
        bn.running_var[c] = (1.0 - momentum) * bn.running_var[c] + momentum * s.var[c] * unbias;
    }
}

}  // namespace

void DecoderConfig::validate() const {
    require(n_channels > 0 && n_samples > 0 && n_classes > 0,
            "decoder config: channel, sample and class counts must be positive");
    require(temporal_filters > 0 && depth_multiplier > 0 && pointwise_filters > 0,
            "decoder config: filter counts must be positive");
    require(dropout_rate_train >= 0.0 && dropout_rate_train < 1.0,
            "decoder config: dropout_rate_train must lie in [0, 1)");
    for (auto [k, name] : {std::pair{temporal_kernel, "temporal_kernel"},
                           std::pair{spatial_kernel, "spatial_kernel"},
                           std::pair{pointwise_kernel, "pointwise_kernel"}}) {
        require(k > 0, std::string("decoder config: ") + name + " must be positive");
        require(k % 2 == 1, std::string("decoder config: ") + name +
                                " must be odd so symmetric padding preserves the window");
        require(k <= n_samples, std::string("decoder config: ") + name + " = " +
                                    std::to_string(k) + " exceeds the window of " +
                                    std::to_string(n_samples) + " samples");
    }
    require(pool_window > 0 && n_samples % pool_window == 0,
            "decoder config: pool_window " + std::to_string(pool_window) +
                " must divide n_samples " + std::to_string(n_samples));
    require(bn_momentum > 0.0 && bn_momentum <= 1.0, "decoder config: bn_momentum out of (0, 1]");
}

std::string DecoderConfig::serialize() const {
    std::ostringstream os;
    os << "n_channels=" << n_channels << "\n";
    os << "n_samples=" << n_samples << "\n";
    os << "n_classes=" << n_classes << "\n";
    os << "temporal_filters=" << temporal_filters << "\n";
    os << "depth_multiplier=" << depth_multiplier << "\n";
    os << "pointwise_filters=" << pointwise_filters << "\n";
    os << "temporal_kernel=" << temporal_kernel << "\n";
    os << "spatial_kernel=" << spatial_kernel << "\n";
    os << "pointwise_kernel=" << pointwise_kernel << "\n";
    os << "pool_window=" << pool_window << "\n";
    os << "dropout_rate_train=" << dropout_rate_train << "\n";
    os << "bn_momentum=" << bn_momentum << "\n";
    os << "bn_eps=" << bn_eps << "\n";
    return os.str();
}

DecoderConfig DecoderConfig::deserialize(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        require(eq != std::string::npos, "decoder config: malformed line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    DecoderConfig c;
    auto geti = [&](const char* k, std::int64_t& out) {
        auto it = kv.find(k);
        require(it != kv.end(), std::string("decoder config: missing key ") + k);
        out = std::stoll(it->second);
        kv.erase(it);
    };
    auto getd = [&](const char* k, double& out) {
        auto it = kv.find(k);
        require(it != kv.end(), std::string("decoder config: missing key ") + k);
        out = std::stod(it->second);
        kv.erase(it);
    };
    geti("n_channels", c.n_channels);
    geti("n_samples", c.n_samples);
    geti("n_classes", c.n_classes);
    geti("temporal_filters", c.temporal_filters);
    geti("depth_multiplier", c.depth_multiplier);
    geti("pointwise_filters", c.pointwise_filters);
    geti("temporal_kernel", c.temporal_kernel);
    geti("spatial_kernel", c.spatial_kernel);
    geti("pointwise_kernel", c.pointwise_kernel);
    geti("pool_window", c.pool_window);
    getd("dropout_rate_train", c.dropout_rate_train);
    getd("bn_momentum", c.bn_momentum);
    getd("bn_eps", c.bn_eps);
    if (!kv.empty()) {
        throw std::invalid_argument("decoder config: unknown key '" + kv.begin()->first + "'");
    }
    c.validate();
    return c;
}

std::vector<Tensor*> DecoderModel::trainable_params() {
    return {&conv1_w, &bn1.gamma, &bn1.beta,  &conv2_w, &bn2.gamma, &bn2.beta,
            &conv3_w, &bn3.gamma, &bn3.beta,  &dense_w, &dense_b};
}

std::vector<const Tensor*> DecoderModel::trainable_params() const {
    auto* self = const_cast<DecoderModel*>(this);
    std::vector<const Tensor*> out;
    for (Tensor* t : self->trainable_params()) out.push_back(t);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> DecoderModel::named_tensors() {
    return {{"conv1_w", &conv1_w},
            {"bn1_gamma", &bn1.gamma},
            {"bn1_beta", &bn1.beta},
            {"bn1_running_mean", &bn1.running_mean},
            {"bn1_running_var", &bn1.running_var},
            {"conv2_w", &conv2_w},
            {"bn2_gamma", &bn2.gamma},
            {"bn2_beta", &bn2.beta},
            {"bn2_running_mean", &bn2.running_mean},
            {"bn2_running_var", &bn2.running_var},
            {"conv3_w", &conv3_w},
            {"bn3_gamma", &bn3.gamma},
            {"bn3_beta", &bn3.beta},
            {"bn3_running_mean", &bn3.running_mean},
            {"bn3_running_var", &bn3.running_var},
            {"dense_w", &dense_w},
            {"dense_b", &dense_b}};
}

DropoutMask DropoutMask::ones(const DecoderConfig& config) {
    DropoutMask m;
    m.keep_prob = 1.0;
    m.layers.push_back(Tensor({config.temporal_filters * config.depth_multiplier, 1,
                               config.n_samples},
                              1.0));
    m.layers.push_back(Tensor({config.pointwise_filters, 1, config.n_samples}, 1.0));
    return m;
}

DropoutMask DropoutMask::sample(const DecoderConfig& config, double drop_prob, RngStream& stream) {
    require(drop_prob >= 0.0 && drop_prob < 1.0, "dropout mask: drop probability out of [0, 1)");
    DropoutMask m = ones(config);
    m.keep_prob = 1.0 - drop_prob;
    for (Tensor& layer : m.layers) {
        for (auto& v : layer.data) v = stream.uniform() < drop_prob ? 0.0 : 1.0;
    }
    return m;
}

DecoderModel build_decoder(const DecoderConfig& config, RngStream stream) {
    config.validate();
    DecoderModel m;
    m.config = config;
    std::int64_t f1 = config.temporal_filters;
    std::int64_t fd = f1 * config.depth_multiplier;
    std::int64_t f2 = config.pointwise_filters;
    m.conv1_w = uniform_fan_in(stream, {f1, 1, 1, config.temporal_kernel}, config.temporal_kernel);
    m.bn1 = make_bn(f1);
    m.conv2_w = uniform_fan_in(stream, {fd, 1, config.n_channels, config.spatial_kernel},
                               config.n_channels * config.spatial_kernel);
    m.bn2 = make_bn(fd);
    m.conv3_w = uniform_fan_in(stream, {f2, fd, 1, config.pointwise_kernel},
                               fd * config.pointwise_kernel);
    m.bn3 = make_bn(f2);
    m.dense_w = uniform_fan_in(stream, {config.dense_inputs(), config.n_classes},
                               config.dense_inputs());
    m.dense_b = uniform_fan_in(stream, {config.n_classes}, config.dense_inputs());
    m.train_mode = false;
    m.dropout_stream = stream.child(0x6d61736bULL);  // per-model mask stream
    return m;
}

Tensor canonical_batch(const Tensor& batch, const DecoderConfig& config) {
    std::int64_t C = config.n_channels, T = config.n_samples;
    if (batch.rank() == 2 && batch.shape[0] == C && batch.shape[1] == T) {
        return batch.reshaped({1, 1, C, T});
    }
    if (batch.rank() == 3 && batch.shape[1] == C && batch.shape[2] == T) {
        return batch.reshaped({batch.shape[0], 1, C, T});
    }
    if (batch.rank() == 4 && batch.shape[1] == C && batch.shape[2] == 1 && batch.shape[3] == T) {
        return batch.reshaped({batch.shape[0], 1, C, T});
    }
    if (batch.rank() == 4 && batch.shape[1] == 1 && batch.shape[2] == C && batch.shape[3] == T) {
        return batch;
    }
    throw std::invalid_argument("decoder forward: batch shape " + shape_to_string(batch.shape) +
                                " does not match config [*, " + std::to_string(C) + ", 1, " +
                                std::to_string(T) + "]");
}

namespace {

std::int64_t half(std::int64_t k) { return (k - 1) / 2; }

Tensor plain_forward(const DecoderModel& model, const Tensor& batch, const DropoutMask* mask,
                     bool batch_stats, RngStream* dropout_stream, DecoderModel* stats_sink) {
    const DecoderConfig& c = model.config;
    Tensor x = canonical_batch(batch, c);
    std::int64_t B = x.shape[0];
    if (mask != nullptr) {
        require(mask->layers.size() == 2, "decoder forward: mask must cover both dropout sites");
    }

    auto dropout_site = [&](Tensor& act, std::size_t site) {
        if (mask != nullptr) {
            apply_mask(act, mask->layers[site]);
        } else if (dropout_stream != nullptr && c.dropout_rate_train > 0.0) {
            double keep = 1.0 - c.dropout_rate_train;
            double inv = 1.0 / keep;
            for (auto& v : act.data)
                v = dropout_stream->uniform() < c.dropout_rate_train ? 0.0 : v * inv;
        }
    };

    auto bn = [&](Tensor& act, const BatchNormParams& p, BatchNormParams* sink) {
        if (batch_stats) {
            BatchStats s = compute_batch_stats(act);
            apply_bn_batch(act, p, s, c.bn_eps);
            if (sink != nullptr) {
                update_running(*sink, s, c.bn_momentum,
                               act.shape[0] * act.shape[2] * act.shape[3]);
            }
        } else {
            apply_bn_eval(act, p, c.bn_eps);
        }
    };

    // block 1: temporal filters
    Tensor a = conv2d_forward(x, model.conv1_w, 0, half(c.temporal_kernel), 1);
    bn(a, model.bn1, stats_sink ? &stats_sink->bn1 : nullptr);
    // block 2: depthwise spatial filters
    a = conv2d_forward(a, model.conv2_w, 0, half(c.spatial_kernel), c.temporal_filters);
    bn(a, model.bn2, stats_sink ? &stats_sink->bn2 : nullptr);
    apply_relu(a);
    dropout_site(a, 0);
    // block 3: pointwise filters + pooling
    a = conv2d_forward(a, model.conv3_w, 0, half(c.pointwise_kernel), 1);
    bn(a, model.bn3, stats_sink ? &stats_sink->bn3 : nullptr);
    apply_relu(a);
    dropout_site(a, 1);
    a = avgpool2d_forward(a, 1, c.pool_window);
    // head
    a = a.reshaped({B, c.dense_inputs()});
    Tensor logits = matmul_forward(a, model.dense_w);
    for (std::int64_t i = 0; i < B; ++i)
        for (std::int64_t j = 0; j < c.n_classes; ++j) logits[i * c.n_classes + j] += model.dense_b[j];
    return logits;
}

}  // namespace

Tensor forward(DecoderModel& model, const Tensor& batch, const DropoutMask* mask) {
    if (model.train_mode && mask == nullptr) {
        return plain_forward(model, batch, nullptr, true, &model.dropout_stream, &model);
    }
    return plain_forward(model, batch, mask, false, nullptr, nullptr);
}

Tensor forward_eval(const DecoderModel& model, const Tensor& batch, const DropoutMask* mask) {
    return plain_forward(model, batch, mask, false, nullptr, nullptr);
}

MomentTensor adf_forward(const DecoderModel& model, const MomentTensor& input,
                         const DropoutMask& mask) {
    if (model.train_mode) {
        throw std::invalid_argument("adf_forward: model must be in eval mode");
    }
    const DecoderConfig& c = model.config;
    Tensor mean = canonical_batch(input.mean, c);
    Tensor var = input.var.reshaped(mean.shape);
    if (mask.layers.size() != 2) {
        throw std::invalid_argument("adf_forward: mask must cover both dropout sites");
    }
    MomentTensor m(mean, var);
    std::int64_t B = mean.shape[0];
    auto step = [&](const char* layer, auto&& fn) {
        try {
            m = fn();
        } catch (const std::exception& e) {
            throw std::runtime_error(std::string("adf_forward at ") + layer + ": " + e.what());
        }
    };
    step("block1/conv", [&] { return adf_conv2d(m, model.conv1_w, 0, half(c.temporal_kernel), 1); });
    step("block1/batchnorm", [&] {
        return adf_batchnorm(m, model.bn1.running_mean, model.bn1.running_var, model.bn1.gamma,
                             model.bn1.beta, c.bn_eps);
    });
    step("block2/conv", [&] {
        return adf_conv2d(m, model.conv2_w, 0, half(c.spatial_kernel), c.temporal_filters);
    });
    step("block2/batchnorm", [&] {
        return adf_batchnorm(m, model.bn2.running_mean, model.bn2.running_var, model.bn2.gamma,
                             model.bn2.beta, c.bn_eps);
    });
    step("block2/relu", [&] { return adf_relu(m); });
    step("block2/dropout", [&] { return adf_dropout(m, mask.layers[0]); });
    step("block3/conv", [&] {
        return adf_conv2d(m, model.conv3_w, 0, half(c.pointwise_kernel), 1);
    });
    step("block3/batchnorm", [&] {
        return adf_batchnorm(m, model.bn3.running_mean, model.bn3.running_var, model.bn3.gamma,
                             model.bn3.beta, c.bn_eps);
    });
    step("block3/relu", [&] { return adf_relu(m); });
    step("block3/dropout", [&] { return adf_dropout(m, mask.layers[1]); });
    step("block3/avgpool", [&] { return adf_avgpool(m, 1, c.pool_window); });
    m = m.reshaped({B, c.dense_inputs()});
    step("head/dense", [&] { return adf_dense(m, model.dense_w, model.dense_b); });
    return m;
}

Tensor penultimate_embedding(const DecoderModel& model, const Tensor& batch) {
    const DecoderConfig& c = model.config;
    Tensor x = canonical_batch(batch, c);
    Tensor a = conv2d_forward(x, model.conv1_w, 0, half(c.temporal_kernel), 1);
    apply_bn_eval(a, model.bn1, c.bn_eps);
    a = conv2d_forward(a, model.conv2_w, 0, half(c.spatial_kernel), c.temporal_filters);
    apply_bn_eval(a, model.bn2, c.bn_eps);
    apply_relu(a);
    a = conv2d_forward(a, model.conv3_w, 0, half(c.pointwise_kernel), 1);
    apply_bn_eval(a, model.bn3, c.bn_eps);
    apply_relu(a);
    a = avgpool2d_forward(a, 1, c.pool_window);
    std::int64_t B = a.shape[0], F2 = a.shape[1], P = a.shape[2] * a.shape[3];
    Tensor emb({F2});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t f = 0; f < F2; ++f) {
            const double* p = a.data.data() + (b * F2 + f) * P;
            for (std::int64_t i = 0; i < P; ++i) emb[f] += p[i];
        }
    for (auto& v : emb.data) v /= static_cast<double>(B * P);
    return emb;
}

TapedDecoder TapedDecoder::leaves(Tape& tape, DecoderModel& model) {
    TapedDecoder d;
    d.model = &model;
    d.conv1_w = tape.leaf(model.conv1_w);
    d.bn1_g = tape.leaf(model.bn1.gamma);
    d.bn1_b = tape.leaf(model.bn1.beta);
    d.conv2_w = tape.leaf(model.conv2_w);
    d.bn2_g = tape.leaf(model.bn2.gamma);
    d.bn2_b = tape.leaf(model.bn2.beta);
    d.conv3_w = tape.leaf(model.conv3_w);
    d.bn3_g = tape.leaf(model.bn3.gamma);
    d.bn3_b = tape.leaf(model.bn3.beta);
    d.dense_w = tape.leaf(model.dense_w);
    d.dense_b = tape.leaf(model.dense_b);
    return d;
}

TapedDecoder TapedDecoder::constants(Tape& tape, DecoderModel& model) {
    TapedDecoder d;
    d.model = &model;
    d.conv1_w = tape.constant(model.conv1_w);
    d.bn1_g = tape.constant(model.bn1.gamma);
    d.bn1_b = tape.constant(model.bn1.beta);
    d.conv2_w = tape.constant(model.conv2_w);
    d.bn2_g = tape.constant(model.bn2.gamma);
    d.bn2_b = tape.constant(model.bn2.beta);
    d.conv3_w = tape.constant(model.conv3_w);
    d.bn3_g = tape.constant(model.bn3.gamma);
    d.bn3_b = tape.constant(model.bn3.beta);
    d.dense_w = tape.constant(model.dense_w);
    d.dense_b = tape.constant(model.dense_b);
    return d;
}

std::vector<Var> TapedDecoder::params() const {
    return {conv1_w, bn1_g, bn1_b, conv2_w, bn2_g, bn2_b, conv3_w, bn3_g, bn3_b, dense_w, dense_b};
}

std::vector<Tensor*> TapedDecoder::tensors() const { return model->trainable_params(); }

Var taped_forward(Tape& tape, const TapedDecoder& dec, Var input, const TapedForwardOptions& opt) {
    DecoderModel& model = *dec.model;
    const DecoderConfig& c = model.config;
    std::int64_t B = input.value().shape[0];

    auto bn = [&](Var a, Var g, Var b, BatchNormParams& p) -> Var {
        if (opt.batch_stats) {
            BatchNormResult r = batchnorm_train(a, g, b, c.bn_eps);
            if (opt.update_running_stats) {
                std::int64_t m =
                    a.value().shape[0] * a.value().shape[2] * a.value().shape[3];
                update_running(p, BatchStats{r.batch_mean, r.batch_var}, c.bn_momentum, m);
            }
            return r.y;
        }
        return batchnorm_eval(a, g, b, p.running_mean, p.running_var, c.bn_eps);
    };
    auto dropout_site = [&](Var a, std::size_t site) -> Var {
        if (opt.dropout_masks == nullptr) return a;
        return mul(a, tape.constant((*opt.dropout_masks)[site]));
    };

    Var a = conv2d(input, dec.conv1_w, 0, half(c.temporal_kernel), 1);
    a = bn(a, dec.bn1_g, dec.bn1_b, model.bn1);
    a = conv2d(a, dec.conv2_w, 0, half(c.spatial_kernel), c.temporal_filters);
    a = bn(a, dec.bn2_g, dec.bn2_b, model.bn2);
    a = relu(a);
    a = dropout_site(a, 0);
    a = conv2d(a, dec.conv3_w, 0, half(c.pointwise_kernel), 1);
    a = bn(a, dec.bn3_g, dec.bn3_b, model.bn3);
    a = relu(a);
    a = dropout_site(a, 1);
    a = avgpool2d(a, 1, c.pool_window);
    a = reshape(a, {B, c.dense_inputs()});
    return add_rowvec(matmul(a, dec.dense_w), dec.dense_b);
}

std::vector<Tensor> sample_train_masks(const DecoderConfig& config, std::int64_t batch,
                                       double drop_prob, RngStream& stream) {
    std::vector<Tensor> masks;
    double keep = 1.0 - drop_prob;
    double inv = drop_prob > 0.0 ? 1.0 / keep : 1.0;
    std::int64_t fd = config.temporal_filters * config.depth_multiplier;
    masks.push_back(Tensor({batch, fd, 1, config.n_samples}));
    masks.push_back(Tensor({batch, config.pointwise_filters, 1, config.n_samples}));
    for (Tensor& m : masks) {
        for (auto& v : m.data) v = stream.uniform() < drop_prob ? 0.0 : inv;
    }
    return masks;
}

namespace {

void check_labels(const SegmentSet& set, std::int64_t n_classes, const char* name) {
    require(set.size() > 0, std::string(name) + " set is empty");
    for (std::int64_t l : set.labels) {
        require(l >= 0 && l < n_classes, std::string("label ") + std::to_string(l) + " in " +
                                             name + " set out of range [0, " +
                                             std::to_string(n_classes) + ")");
    }
}

Tensor gather_batch(const SegmentSet& set, const std::vector<std::int64_t>& order,
                    std::int64_t start, std::int64_t count, std::vector<std::int64_t>& labels) {
    std::int64_t C = set.n_channels(), T = set.window();
    Tensor x({count, 1, C, T});
    labels.resize(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        std::int64_t src = order[static_cast<std::size_t>(start + i)];
        const double* p = set.data.data.data() + src * C * T;
        std::copy(p, p + C * T, x.data.data() + i * C * T);
        labels[static_cast<std::size_t>(i)] = set.labels[static_cast<std::size_t>(src)];
    }
    return x;
}

}  // namespace

RngStream train_order_stream(const RngStream& base, std::int64_t epoch) {
    return base.child(0x0e90c0000ULL + static_cast<std::uint64_t>(epoch));
}

RngStream train_dropout_stream(const RngStream& base, std::int64_t epoch,
                               std::int64_t batch_index) {
    return base.child(0xd00000ULL ^ (static_cast<std::uint64_t>(epoch) << 24) ^
                      static_cast<std::uint64_t>(batch_index));
}

TrainHistory train(DecoderModel& model, const SegmentSet& train_set, const SegmentSet& val_set,
                   std::int64_t epochs, double lr, std::int64_t batch_size, RngStream stream) {
    const DecoderConfig& c = model.config;
    check_labels(train_set, c.n_classes, "train");
    check_labels(val_set, c.n_classes, "validation");
    require(batch_size > 0, "train: batch_size must be positive");
    require(train_set.n_channels() == c.n_channels && train_set.window() == c.n_samples,
            "train: segment shape does not match decoder config");

    TrainHistory history;
    AdamState adam = AdamState::init([&] {
        std::vector<Tensor> snap;
        for (Tensor* t : model.trainable_params()) snap.push_back(*t);
        return snap;
    }());
    AdamConfig acfg;
    acfg.lr = lr;

    std::int64_t n = train_set.size();
    model.train_mode = true;
    for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
        RngStream order_stream = train_order_stream(stream, epoch);
        std::vector<std::int64_t> order = order_stream.permutation(n);
        double loss_sum = 0.0;
        std::int64_t correct = 0;
        for (std::int64_t start = 0; start < n; start += batch_size) {
            std::int64_t count = std::min(batch_size, n - start);
            std::vector<std::int64_t> labels;
            Tensor xb = gather_batch(train_set, order, start, count, labels);
            RngStream drop_stream = train_dropout_stream(stream, epoch, start / batch_size);
            std::vector<Tensor> masks =
                sample_train_masks(c, count, c.dropout_rate_train, drop_stream);

            Tape tape;
            TapedDecoder dec = TapedDecoder::leaves(tape, model);
            TapedForwardOptions opt;
            opt.batch_stats = true;
            opt.update_running_stats = true;
            opt.dropout_masks = &masks;
            Var logits = taped_forward(tape, dec, tape.constant(xb), opt);
            Var loss = cross_entropy(logits, labels);
            std::vector<Tensor> grads = tape.grad(loss, dec.params());

            std::vector<Tensor*> ptrs = model.trainable_params();
            std::vector<Tensor> params;
            params.reserve(ptrs.size());
            for (Tensor* t : ptrs) params.push_back(std::move(*t));
            adam_step(params, grads, adam, acfg);
            for (std::size_t i = 0; i < ptrs.size(); ++i) *ptrs[i] = std::move(params[i]);

            loss_sum += loss.value()[0] * static_cast<double>(count);
            const Tensor& lv = logits.value();
            for (std::int64_t i = 0; i < count; ++i) {
                std::int64_t best = 0;
                for (std::int64_t j = 1; j < c.n_classes; ++j)
                    if (lv[i * c.n_classes + j] > lv[i * c.n_classes + best]) best = j;
                if (best == labels[static_cast<std::size_t>(i)]) ++correct;
            }
        }
        history.train_loss.push_back(loss_sum / static_cast<double>(n));
        history.train_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
        auto [vl, va] = evaluate(model, val_set);
        history.val_loss.push_back(vl);
        history.val_accuracy.push_back(va);
    }
    model.train_mode = false;
    return history;
}

std::pair<double, double> evaluate(const DecoderModel& model, const SegmentSet& set) {
    check_labels(set, model.config.n_classes, "evaluation");
    std::int64_t n = set.size(), K = model.config.n_classes;
    std::int64_t C = set.n_channels(), T = set.window();
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    const std::int64_t chunk = 256;
    for (std::int64_t start = 0; start < n; start += chunk) {
        std::int64_t count = std::min(chunk, n - start);
        Tensor x({count, 1, C, T});
        std::copy(set.data.data.data() + start * C * T,
                  set.data.data.data() + (start + count) * C * T, x.data.data());
        Tensor logits = forward_eval(model, x);
        Tensor probs = softmax_rows_forward(logits);
        for (std::int64_t i = 0; i < count; ++i) {
            std::int64_t label = set.labels[static_cast<std::size_t>(start + i)];
            loss_sum += -std::log(std::max(probs[i * K + label], 1e-300));
            std::int64_t best = 0;
            for (std::int64_t j = 1; j < K; ++j)
                if (probs[i * K + j] > probs[i * K + best]) best = j;
            if (best == label) ++correct;
        }
    }
    return {loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

Tensor predict_probs(const DecoderModel& model, const SegmentSet& set) {
    std::int64_t n = set.size(), K = model.config.n_classes;
    std::int64_t C = set.n_channels(), T = set.window();
    Tensor out({n, K});
    const std::int64_t chunk = 256;
    for (std::int64_t start = 0; start < n; start += chunk) {
        std::int64_t count = std::min(chunk, n - start);
        Tensor x({count, 1, C, T});
        std::copy(set.data.data.data() + start * C * T,
                  set.data.data.data() + (start + count) * C * T, x.data.data());
        Tensor probs = softmax_rows_forward(forward_eval(model, x));
        std::copy(probs.data.begin(), probs.data.end(), out.data.data() + start * K);
    }
    return out;
}

}  // namespace eeguq
