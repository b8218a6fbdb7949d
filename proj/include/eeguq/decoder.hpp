#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eeguq/dataset.hpp"
#include "eeguq/moments.hpp"
#include "eeguq/rng.hpp"
#include "eeguq/tape.hpp"
#include "eeguq/tensor.hpp"

namespace eeguq {

/// Three-block convolutional decoder layout: temporal filters, a depthwise
/// spatial block, a pointwise block with average pooling, and a dense head.
struct DecoderConfig {
    std::int64_t n_channels = 22;
    std::int64_t n_samples = 400;
    std::int64_t n_classes = 4;
    std::int64_t temporal_filters = 8;   // F1
    std::int64_t depth_multiplier = 2;   // D
    std::int64_t pointwise_filters = 16; // F2
    std::int64_t temporal_kernel = 65;   // odd, so symmetric padding keeps the window length
    std::int64_t spatial_kernel = 1;     // temporal extent of the depthwise spatial filter, odd
    std::int64_t pointwise_kernel = 1;   // odd
    std::int64_t pool_window = 8;
    double dropout_rate_train = 0.25;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    std::int64_t pooled_samples() const { return n_samples / pool_window; }
    std::int64_t dense_inputs() const { return pointwise_filters * pooled_samples(); }
    void validate() const;

    std::string serialize() const;
    static DecoderConfig deserialize(const std::string& text);
};

struct BatchNormParams {
    Tensor gamma;
    Tensor beta;
    Tensor running_mean;
    Tensor running_var;
};

struct DecoderModel {
    DecoderConfig config;
    Tensor conv1_w;  // [F1, 1, 1, temporal_kernel]
    BatchNormParams bn1;
    Tensor conv2_w;  // [F1*D, 1, n_channels, spatial_kernel], groups = F1
    BatchNormParams bn2;
    Tensor conv3_w;  // [F2, F1*D, 1, pointwise_kernel]
    BatchNormParams bn3;
    Tensor dense_w;  // [dense_inputs, n_classes]
    Tensor dense_b;  // [n_classes]
    bool train_mode = false;
    RngStream dropout_stream;  // consumed by train-mode forward

    std::vector<Tensor*> trainable_params();
    std::vector<const Tensor*> trainable_params() const;
    /// Every tensor in checkpoint order, running stats included.
    std::vector<std::pair<std::string, Tensor*>> named_tensors();
};

/// Per-site binary masks for the two dropout layers; the output layer never
/// carries a mask. Masks are unbatched and broadcast over the batch.
struct DropoutMask {
    double keep_prob = 1.0;
    std::vector<Tensor> layers;  // site 0: [F1*D, 1, T]; site 1: [F2, 1, T]

    static DropoutMask ones(const DecoderConfig& config);
    /// Bernoulli(1 - drop_prob) entries per unit.
    static DropoutMask sample(const DecoderConfig& config, double drop_prob, RngStream& stream);
};

struct TrainHistory {
    std::vector<double> train_loss;
    std::vector<double> train_accuracy;
    std::vector<double> val_loss;
    std::vector<double> val_accuracy;
};

/// Fan-in uniform initialization; deterministic given the stream.
DecoderModel build_decoder(const DecoderConfig& config, RngStream stream);

/// Accepts [ch, window], [b, ch, window] or [b, ch, 1, window] and returns
/// the canonical [b, 1, ch, window] view (row-major, no data movement).
Tensor canonical_batch(const Tensor& batch, const DecoderConfig& config);

/// Logits [b, n_classes]. Eval mode without a mask is deterministic; train
/// mode draws inverted dropout from the model's stream; an explicit mask is
/// applied verbatim (MC dropout path). Batch norm uses running stats except
/// in train mode.
Tensor forward(DecoderModel& model, const Tensor& batch, const DropoutMask* mask = nullptr);

/// Eval forward for a const model (no train mode, optional verbatim mask).
Tensor forward_eval(const DecoderModel& model, const Tensor& batch,
                    const DropoutMask* mask = nullptr);

/// Moment propagation through the same layer sequence; requires eval mode.
MomentTensor adf_forward(const DecoderModel& model, const MomentTensor& input,
                         const DropoutMask& mask);

/// Mean over batch and time of the pooled block-3 activations: [F2].
Tensor penultimate_embedding(const DecoderModel& model, const Tensor& batch);

// --- taped forward (training / meta-learning) -------------------------------

/// The decoder's trainable parameters as leaves on a tape.
struct TapedDecoder {
    DecoderModel* model;
    Var conv1_w, bn1_g, bn1_b;
    Var conv2_w, bn2_g, bn2_b;
    Var conv3_w, bn3_g, bn3_b;
    Var dense_w, dense_b;

    static TapedDecoder leaves(Tape& tape, DecoderModel& model);
    /// Same parameters recorded as constants (frozen network).
    static TapedDecoder constants(Tape& tape, DecoderModel& model);
    std::vector<Var> params() const;
    /// Writes grads through adam externally; this just lists tensors in the
    /// same order as params().
    std::vector<Tensor*> tensors() const;
};

struct TapedForwardOptions {
    bool batch_stats = false;              // true: training batch norm
    bool update_running_stats = false;     // fold batch stats into the model
    const std::vector<Tensor>* dropout_masks = nullptr;  // batched, entries {0, 1/keep}
};

/// Differentiable forward from a canonical [b, 1, ch, window] input Var.
Var taped_forward(Tape& tape, const TapedDecoder& dec, Var input, const TapedForwardOptions& opt);

/// Batched inverted-dropout mask tensors ({0, 1/keep}) for one train step.
std::vector<Tensor> sample_train_masks(const DecoderConfig& config, std::int64_t batch,
                                       double drop_prob, RngStream& stream);

/// Batch-schedule streams, shared so alternative trainers can reproduce the
/// plain loop's shuffling and dropout draws bit for bit.
RngStream train_order_stream(const RngStream& base, std::int64_t epoch);
RngStream train_dropout_stream(const RngStream& base, std::int64_t epoch,
                               std::int64_t batch_index);

/// Cross-entropy training with Adam; returns the model in eval mode.
TrainHistory train(DecoderModel& model, const SegmentSet& train_set, const SegmentSet& val_set,
                   std::int64_t epochs, double lr, std::int64_t batch_size, RngStream stream);

/// Mean loss / accuracy of eval-mode predictions.
std::pair<double, double> evaluate(const DecoderModel& model, const SegmentSet& set);

/// Eval-mode class probabilities [n, n_classes] for a whole segment set.
Tensor predict_probs(const DecoderModel& model, const SegmentSet& set);

}  // namespace eeguq
