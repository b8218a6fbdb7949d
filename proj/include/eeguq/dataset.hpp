#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eeguq/rng.hpp"
#include "eeguq/tensor.hpp"

namespace eeguq {

/// Metadata the synthetic generator records about its own ground truth.
struct TrialMeta {
    double u_true = 0.0;  // effective white-noise variance after standardization
    std::vector<std::int64_t> signal_channels;
    std::vector<double> class_freqs_hz;
    std::vector<double> channel_offset;  // standardization mean per channel
    std::vector<double> channel_scale;   // standardization std per channel
    std::string note;
};

/// Raw trials: [n_trials, n_channels, n_samples].
struct TrialSet {
    Tensor data;
    std::vector<std::int64_t> labels;
    std::vector<std::int64_t> subjects;
    std::int64_t n_classes = 0;
    std::int64_t sample_rate_hz = 250;
    TrialMeta meta;

    std::int64_t n_trials() const { return data.rank() == 3 ? data.shape[0] : 0; }
    std::int64_t n_channels() const { return data.rank() == 3 ? data.shape[1] : 0; }
    std::int64_t n_samples() const { return data.rank() == 3 ? data.shape[2] : 0; }
    void validate() const;
};

/// Windowed segments: [n_segments, n_channels, window]; every segment keeps
/// the index of the trial it was cut from.
struct SegmentSet {
    Tensor data;
    std::vector<std::int64_t> labels;
    std::vector<std::int64_t> subjects;
    std::vector<std::int64_t> source_trial;
    std::int64_t n_classes = 0;

    std::int64_t size() const { return data.rank() == 3 ? data.shape[0] : 0; }
    std::int64_t n_channels() const { return data.rank() == 3 ? data.shape[1] : 0; }
    std::int64_t window() const { return data.rank() == 3 ? data.shape[2] : 0; }

    /// One segment as a [n_channels, window] tensor.
    Tensor segment(std::int64_t i) const;
    /// Rows `idx` gathered into a new set.
    SegmentSet subset(const std::vector<std::int64_t>& idx) const;
};

struct SynthParams {
    std::int64_t n_subjects = 4;
    std::int64_t trials_per_subject = 48;
    std::int64_t n_channels = 8;
    std::int64_t n_samples = 256;
    std::int64_t n_classes = 4;
    std::int64_t sample_rate_hz = 250;
    double u_true = 0.1;
    double class_signal_fraction = 0.8;   // share of signal-channel power carrying class identity
    double mixing_angle = 0.25;           // per-subject spatial rotation scale, radians
    double freq_jitter_hz = 1.0;          // per-subject class-frequency offset bound
};

/// Band-limited class oscillations on fixed signal channels plus per-subject
/// spatial mixing and white noise of variance u_true; standardized per
/// channel with the injected noise variance tracked into meta.
TrialSet synth_generate(const SynthParams& params, RngStream stream);

/// Sliding windows; count per trial = floor((n_samples - window)/stride) + 1.
SegmentSet segment(const TrialSet& trials, std::int64_t window, std::int64_t stride);

enum class SplitMode { kIntra, kCross };

/// Intra: per-subject stratified split at the trial level. Cross: all trials
/// of holdout_subject go to test.
void split(const TrialSet& set, SplitMode mode, std::int64_t holdout_subject, double fraction,
           RngStream stream, TrialSet& train_out, TrialSet& test_out);

/// Binary container, magic "UEEG": bit-exact round trip.
void write_dataset(const TrialSet& set, const std::string& path);
TrialSet read_dataset(const std::string& path);

}  // namespace eeguq
