#include "eeguq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace eeguq {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

void TrialSet::validate() const {
    require(data.rank() == 3, "trial set: data must be [n_trials, n_channels, n_samples], got " +
                                  shape_to_string(data.shape));
    require(static_cast<std::int64_t>(labels.size()) == n_trials(),
            "trial set: label count does not match trial count");
    require(static_cast<std::int64_t>(subjects.size()) == n_trials(),
            "trial set: subject count does not match trial count");
    require(sample_rate_hz > 0, "trial set: sample rate must be positive");
    for (std::int64_t l : labels) {
        require(l >= 0 && l < n_classes,
                "trial set: label " + std::to_string(l) + " out of range");
    }
}

Tensor SegmentSet::segment(std::int64_t i) const {
    std::int64_t C = n_channels(), T = window();
    require(i >= 0 && i < size(), "segment index out of range");
    Tensor out({C, T});
    std::copy(data.data.data() + i * C * T, data.data.data() + (i + 1) * C * T, out.data.data());
    return out;
}

SegmentSet SegmentSet::subset(const std::vector<std::int64_t>& idx) const {
    std::int64_t C = n_channels(), T = window();
    SegmentSet out;
    out.n_classes = n_classes;
    out.data = Tensor({static_cast<std::int64_t>(idx.size()), C, T});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::int64_t s = idx[i];
        require(s >= 0 && s < size(), "segment subset index out of range");
        std::copy(data.data.data() + s * C * T, data.data.data() + (s + 1) * C * T,
                  out.data.data.data() + static_cast<std::int64_t>(i) * C * T);
        out.labels.push_back(labels[static_cast<std::size_t>(s)]);
        out.subjects.push_back(subjects[static_cast<std::size_t>(s)]);
        out.source_trial.push_back(source_trial[static_cast<std::size_t>(s)]);
    }
    return out;
}

TrialSet synth_generate(const SynthParams& p, RngStream stream) {
    require(p.n_subjects > 0 && p.trials_per_subject > 0 && p.n_channels > 0 &&
                p.n_samples > 0 && p.n_classes > 0,
            "synth_generate: all counts must be positive");
    require(p.u_true >= 0.0, "synth_generate: u_true must be non-negative");
    require(p.class_signal_fraction > 0.0 && p.class_signal_fraction <= 1.0,
            "synth_generate: class_signal_fraction out of (0, 1]");

    std::int64_t S = p.n_subjects, R = p.trials_per_subject, C = p.n_channels, T = p.n_samples;
    std::int64_t K = p.n_classes, N = S * R;
    double fs = static_cast<double>(p.sample_rate_hz);
    double clean_var = 1.0 - p.u_true;
    require(clean_var > 0.0, "synth_generate: u_true must be below 1 (unit total variance)");

    RngStream bg_stream = stream.child(1);
    RngStream phase_stream = stream.child(2);
    RngStream subject_stream = stream.child(3);
    RngStream mixing_stream = stream.child(4);
    RngStream noise_stream = stream.child(5);

    std::int64_t sig0 = C >= 8 ? 3 : 0;
    std::int64_t sig1 = C >= 8 ? 7 : C - 1;

    // fixed per-channel background frequencies
    std::vector<double> bg_freq(static_cast<std::size_t>(C));
    for (auto& f : bg_freq) f = bg_stream.uniform(5.0, 40.0);

    // class frequencies spread over the 8-30 Hz band
    std::vector<double> class_freq(static_cast<std::size_t>(K));
    for (std::int64_t k = 0; k < K; ++k) {
        class_freq[static_cast<std::size_t>(k)] =
            K == 1 ? 19.0 : 8.0 + 22.0 * static_cast<double>(k) / static_cast<double>(K - 1);
    }
    // per-class amplitude split over the two signal channels, mean power 1/2 each
    std::vector<double> psi(static_cast<std::size_t>(K));
    for (std::int64_t k = 0; k < K; ++k) {
        psi[static_cast<std::size_t>(k)] =
            std::numbers::pi * static_cast<double>(k + 1) / (2.0 * static_cast<double>(K + 1));
    }

    // per-subject frequency jitter and spatial mixing
    std::vector<std::vector<double>> subj_freq(static_cast<std::size_t>(S));
    for (std::int64_t s = 0; s < S; ++s) {
        subj_freq[static_cast<std::size_t>(s)].resize(static_cast<std::size_t>(K));
        for (std::int64_t k = 0; k < K; ++k) {
            subj_freq[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)] =
                class_freq[static_cast<std::size_t>(k)] +
                subject_stream.uniform(-p.freq_jitter_hz, p.freq_jitter_hz);
        }
    }
    // mixing: product of C random Givens rotations per subject (orthogonal)
    std::vector<Tensor> mixing(static_cast<std::size_t>(S));
    for (std::int64_t s = 0; s < S; ++s) {
        Tensor M({C, C});
        for (std::int64_t i = 0; i < C; ++i) M[i * C + i] = 1.0;
        for (std::int64_t r = 0; r < C; ++r) {
            std::int64_t i = mixing_stream.uniform_int(C);
            std::int64_t j = mixing_stream.uniform_int(C);
            double theta = mixing_stream.uniform(-p.mixing_angle, p.mixing_angle);
            if (i == j) continue;
            double cth = std::cos(theta), sth = std::sin(theta);
            for (std::int64_t col = 0; col < C; ++col) {
                double a = M[i * C + col], b = M[j * C + col];
                M[i * C + col] = cth * a - sth * b;
                M[j * C + col] = sth * a + cth * b;
            }
        }
        mixing[static_cast<std::size_t>(s)] = std::move(M);
    }

    TrialSet set;
    set.n_classes = K;
    set.sample_rate_hz = p.sample_rate_hz;
    set.data = Tensor({N, C, T});
    set.labels.resize(static_cast<std::size_t>(N));
    set.subjects.resize(static_cast<std::size_t>(N));

    double bg_amp_plain = std::sqrt(2.0 * clean_var);
    double bg_frac = 1.0 - p.class_signal_fraction;
    double bg_amp_sig = std::sqrt(2.0 * bg_frac * clean_var);
    double cls_amp = std::sqrt(2.0 * p.class_signal_fraction * clean_var);

    std::vector<double> clean(static_cast<std::size_t>(C * T));
    std::vector<double> mixed(static_cast<std::size_t>(C * T));
    for (std::int64_t s = 0; s < S; ++s) {
        for (std::int64_t r = 0; r < R; ++r) {
            std::int64_t t_idx = s * R + r;
            std::int64_t k = t_idx % K;  // balanced labels
            set.labels[static_cast<std::size_t>(t_idx)] = k;
            set.subjects[static_cast<std::size_t>(t_idx)] = s;

            double f_cls = subj_freq[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)];
            double phase_cls = phase_stream.uniform(0.0, 2.0 * std::numbers::pi);
            double a0 = cls_amp * std::cos(psi[static_cast<std::size_t>(k)]);
            double a1 = cls_amp * std::sin(psi[static_cast<std::size_t>(k)]);
            for (std::int64_t c = 0; c < C; ++c) {
                double phase_bg = phase_stream.uniform(0.0, 2.0 * std::numbers::pi);
                double amp = (c == sig0 || c == sig1) ? bg_amp_sig : bg_amp_plain;
                double w_bg = 2.0 * std::numbers::pi * bg_freq[static_cast<std::size_t>(c)] / fs;
                double* row = clean.data() + c * T;
                for (std::int64_t t = 0; t < T; ++t) {
                    row[t] = amp * std::sin(w_bg * static_cast<double>(t) + phase_bg);
                }
            }
            double w_cls = 2.0 * std::numbers::pi * f_cls / fs;
            for (std::int64_t t = 0; t < T; ++t) {
                double ph = w_cls * static_cast<double>(t) + phase_cls;
                clean[static_cast<std::size_t>(sig0 * T + t)] += a0 * std::sin(ph);
                clean[static_cast<std::size_t>(sig1 * T + t)] += a1 * std::cos(ph);
            }
            // subject-specific orthogonal channel mixing
            const Tensor& M = mixing[static_cast<std::size_t>(s)];
            for (std::int64_t t = 0; t < T; ++t) {
                for (std::int64_t c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (std::int64_t c2 = 0; c2 < C; ++c2) {
                        acc += M[c * C + c2] * clean[static_cast<std::size_t>(c2 * T + t)];
                    }
                    mixed[static_cast<std::size_t>(c * T + t)] = acc;
                }
            }
            double noise_std = std::sqrt(p.u_true);
            double* out = set.data.data.data() + t_idx * C * T;
            for (std::int64_t i = 0; i < C * T; ++i) {
                double n = p.u_true > 0.0 ? noise_stream.normal(0.0, noise_std) : 0.0;
                out[i] = mixed[static_cast<std::size_t>(i)] + n;
            }
        }
    }

    // per-channel standardization over the whole set
    std::vector<double> mean_c(static_cast<std::size_t>(C)), std_c(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::int64_t t_idx = 0; t_idx < N; ++t_idx) {
            const double* row = set.data.data.data() + (t_idx * C + c) * T;
            for (std::int64_t t = 0; t < T; ++t) acc += row[t];
        }
        double mu = acc / static_cast<double>(N * T);
        double accv = 0.0;
        for (std::int64_t t_idx = 0; t_idx < N; ++t_idx) {
            const double* row = set.data.data.data() + (t_idx * C + c) * T;
            for (std::int64_t t = 0; t < T; ++t) accv += (row[t] - mu) * (row[t] - mu);
        }
        double sd = std::sqrt(accv / static_cast<double>(N * T));
        if (sd <= 0.0) sd = 1.0;
        mean_c[static_cast<std::size_t>(c)] = mu;
        std_c[static_cast<std::size_t>(c)] = sd;
        for (std::int64_t t_idx = 0; t_idx < N; ++t_idx) {
            double* row = set.data.data.data() + (t_idx * C + c) * T;
            for (std::int64_t t = 0; t < T; ++t) row[t] = (row[t] - mu) / sd;
        }
    }

    // track the injected noise variance through the standardization
    double u_eff = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
        u_eff += p.u_true / (std_c[static_cast<std::size_t>(c)] * std_c[static_cast<std::size_t>(c)]);
    }
    u_eff /= static_cast<double>(C);

    set.meta.u_true = u_eff;
    set.meta.signal_channels = {sig0, sig1};
    set.meta.class_freqs_hz = class_freq;
    set.meta.channel_offset = mean_c;
    set.meta.channel_scale = std_c;
    std::ostringstream note;
    note << "synthetic oscillation generator, injected_noise_var=" << p.u_true;
    set.meta.note = note.str();
    set.validate();
    return set;
}

SegmentSet segment(const TrialSet& trials, std::int64_t window, std::int64_t stride) {
    trials.validate();
    require(window > 0 && window <= trials.n_samples(),
            "segment: window " + std::to_string(window) + " exceeds trial length " +
                std::to_string(trials.n_samples()));
    require(stride >= 1, "segment: stride must be at least 1");
    std::int64_t per_trial = (trials.n_samples() - window) / stride + 1;
    std::int64_t C = trials.n_channels(), T = trials.n_samples();
    SegmentSet out;
    out.n_classes = trials.n_classes;
    out.data = Tensor({trials.n_trials() * per_trial, C, window});
    std::int64_t seg = 0;
    for (std::int64_t tr = 0; tr < trials.n_trials(); ++tr) {
        for (std::int64_t s = 0; s < per_trial; ++s, ++seg) {
            std::int64_t off = s * stride;
            for (std::int64_t c = 0; c < C; ++c) {
                const double* src = trials.data.data.data() + (tr * C + c) * T + off;
                std::copy(src, src + window, out.data.data.data() + (seg * C + c) * window);
            }
            out.labels.push_back(trials.labels[static_cast<std::size_t>(tr)]);
            out.subjects.push_back(trials.subjects[static_cast<std::size_t>(tr)]);
            out.source_trial.push_back(tr);
        }
    }
    return out;
}

namespace {

TrialSet gather_trials(const TrialSet& set, const std::vector<std::int64_t>& idx) {
    std::int64_t C = set.n_channels(), T = set.n_samples();
    TrialSet out;
    out.n_classes = set.n_classes;
    out.sample_rate_hz = set.sample_rate_hz;
    out.meta = set.meta;
    out.data = Tensor({static_cast<std::int64_t>(idx.size()), C, T});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::int64_t s = idx[i];
        std::copy(set.data.data.data() + s * C * T, set.data.data.data() + (s + 1) * C * T,
                  out.data.data.data() + static_cast<std::int64_t>(i) * C * T);
        out.labels.push_back(set.labels[static_cast<std::size_t>(s)]);
        out.subjects.push_back(set.subjects[static_cast<std::size_t>(s)]);
    }
    return out;
}

}  // namespace

void split(const TrialSet& set, SplitMode mode, std::int64_t holdout_subject, double fraction,
           RngStream stream, TrialSet& train_out, TrialSet& test_out) {
    set.validate();
    std::vector<std::int64_t> train_idx, test_idx;
    if (mode == SplitMode::kCross) {
        bool found = false;
        for (std::int64_t s : set.subjects) {
            if (s == holdout_subject) found = true;
        }
        require(found, "split: holdout subject " + std::to_string(holdout_subject) +
                           " not present in the data");
        for (std::int64_t i = 0; i < set.n_trials(); ++i) {
            if (set.subjects[static_cast<std::size_t>(i)] == holdout_subject) {
                test_idx.push_back(i);
            } else {
                train_idx.push_back(i);
            }
        }
    } else {
        require(fraction > 0.0 && fraction < 1.0, "split: fraction must lie in (0, 1)");
        // stratified by (subject, class) at the trial level
        std::int64_t max_subject = 0;
        for (std::int64_t s : set.subjects) max_subject = std::max(max_subject, s);
        for (std::int64_t s = 0; s <= max_subject; ++s) {
            for (std::int64_t k = 0; k < set.n_classes; ++k) {
                std::vector<std::int64_t> pool;
                for (std::int64_t i = 0; i < set.n_trials(); ++i) {
                    if (set.subjects[static_cast<std::size_t>(i)] == s &&
                        set.labels[static_cast<std::size_t>(i)] == k) {
                        pool.push_back(i);
                    }
                }
                if (pool.empty()) continue;
                RngStream cell = stream.child(static_cast<std::uint64_t>(s * set.n_classes + k));
                std::vector<std::int64_t> perm = cell.permutation(
                    static_cast<std::int64_t>(pool.size()));
                std::int64_t n_train = static_cast<std::int64_t>(
                    std::llround(fraction * static_cast<double>(pool.size())));
                n_train = std::clamp<std::int64_t>(n_train, 0,
                                                   static_cast<std::int64_t>(pool.size()));
                for (std::size_t j = 0; j < pool.size(); ++j) {
                    std::int64_t tr = pool[static_cast<std::size_t>(perm[j])];
                    if (static_cast<std::int64_t>(j) < n_train) {
                        train_idx.push_back(tr);
                    } else {
                        test_idx.push_back(tr);
                    }
                }
            }
        }
        std::sort(train_idx.begin(), train_idx.end());
        std::sort(test_idx.begin(), test_idx.end());
    }
    train_out = gather_trials(set, train_idx);
    test_out = gather_trials(set, test_idx);
}

// --- UEEG container ----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'U', 'E', 'E', 'G'};
constexpr std::uint8_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("UEEG: truncated file (header)");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::string meta_to_text(const TrialMeta& m) {
    std::ostringstream os;
    os.precision(17);
    os << "u_true=" << m.u_true << "\n";
    os << "signal_channels=";
    for (std::size_t i = 0; i < m.signal_channels.size(); ++i) {
        if (i) os << ",";
        os << m.signal_channels[i];
    }
    os << "\n";
    auto vec = [&](const char* key, const std::vector<double>& v) {
        os << key << "=";
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (i) os << ",";
            os << v[i];
        }
        os << "\n";
    };
    vec("class_freqs_hz", m.class_freqs_hz);
    vec("channel_offset", m.channel_offset);
    vec("channel_scale", m.channel_scale);
    os << "note=" << m.note << "\n";
    return os.str();
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
    }
    return out;
}

TrialMeta meta_from_text(const std::string& text) {
    TrialMeta m;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "u_true") {
            m.u_true = std::stod(val);
        } else if (key == "signal_channels") {
            for (double d : parse_double_list(val)) {
                m.signal_channels.push_back(static_cast<std::int64_t>(d));
            }
        } else if (key == "class_freqs_hz") {
            m.class_freqs_hz = parse_double_list(val);
        } else if (key == "channel_offset") {
            m.channel_offset = parse_double_list(val);
        } else if (key == "channel_scale") {
            m.channel_scale = parse_double_list(val);
        } else if (key == "note") {
            m.note = val;
        }
    }
    return m;
}

}  // namespace

void write_dataset(const TrialSet& set, const std::string& path) {
    set.validate();
    std::int64_t max_subject = 0;
    for (std::int64_t s : set.subjects) max_subject = std::max(max_subject, s);
    require(max_subject < 256 && set.n_classes <= 256,
            "UEEG: labels and subjects must fit in a byte");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("UEEG: cannot open '" + path + "' for writing");
    os.write(kMagic, 4);
    os.put(static_cast<char>(kVersion));
    write_u32(os, static_cast<std::uint32_t>(set.n_trials()));
    write_u32(os, static_cast<std::uint32_t>(set.n_channels()));
    write_u32(os, static_cast<std::uint32_t>(set.n_samples()));
    write_u32(os, static_cast<std::uint32_t>(set.n_classes));
    write_u32(os, static_cast<std::uint32_t>(max_subject + 1));
    write_u32(os, static_cast<std::uint32_t>(set.sample_rate_hz));
    os.write(reinterpret_cast<const char*>(set.data.data.data()),
             static_cast<std::streamsize>(set.data.data.size() * sizeof(double)));
    for (std::int64_t l : set.labels) os.put(static_cast<char>(l));
    for (std::int64_t s : set.subjects) os.put(static_cast<char>(s));
    std::string meta = meta_to_text(set.meta);
    write_u32(os, static_cast<std::uint32_t>(meta.size()));
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    if (!os) throw std::runtime_error("UEEG: write to '" + path + "' failed");
}

TrialSet read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("UEEG: cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("UEEG: bad magic in '" + path + "'");
    }
    int version = is.get();
    if (version == std::char_traits<char>::eof()) {
        throw std::runtime_error("UEEG: truncated file (version)");
    }
    if (version != kVersion) {
        throw std::runtime_error("UEEG: unsupported version " + std::to_string(version));
    }
    std::uint32_t n_trials = read_u32(is);
    std::uint32_t n_channels = read_u32(is);
    std::uint32_t n_samples = read_u32(is);
    std::uint32_t n_classes = read_u32(is);
    read_u32(is);  // n_subjects, implied by the subject bytes
    std::uint32_t sample_rate = read_u32(is);

    TrialSet set;
    set.n_classes = n_classes;
    set.sample_rate_hz = sample_rate;
    set.data = Tensor({static_cast<std::int64_t>(n_trials), static_cast<std::int64_t>(n_channels),
                       static_cast<std::int64_t>(n_samples)});
    is.read(reinterpret_cast<char*>(set.data.data.data()),
            static_cast<std::streamsize>(set.data.data.size() * sizeof(double)));
    if (!is) throw std::runtime_error("UEEG: truncated file (data)");
    set.labels.resize(n_trials);
    set.subjects.resize(n_trials);
    for (auto& l : set.labels) {
        int b = is.get();
        if (b == std::char_traits<char>::eof()) {
            throw std::runtime_error("UEEG: truncated file (labels)");
        }
        l = b;
    }
    for (auto& s : set.subjects) {
        int b = is.get();
        if (b == std::char_traits<char>::eof()) {
            throw std::runtime_error("UEEG: truncated file (subjects)");
        }
        s = b;
    }
    std::uint32_t meta_len = read_u32(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), static_cast<std::streamsize>(meta_len));
    if (!is) throw std::runtime_error("UEEG: truncated file (meta)");
    set.meta = meta_from_text(meta);
    set.validate();
    return set;
}

}  // namespace eeguq
