#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tbcough/audio_io.hpp"
#include "tbcough/csv.hpp"
#include "tbcough/dsp.hpp"
#include "tbcough/error.hpp"

namespace tbcough {

/// splitmix64 finalizer; used to derive independent child seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

constexpr std::uint64_t child_seed(std::uint64_t seed, std::uint64_t index) noexcept {
    return mix_seed(seed ^ mix_seed(index + 0x51ed270b27e2a3c5ull));
}

inline double rms(std::span<const double> x) {
    require(!x.empty(), ErrorCode::InvalidArgument, "rms of empty vector");
    double acc = 0.0;
    for (double v : x) acc += v * v;
    return std::sqrt(acc / static_cast<double>(x.size()));
}

inline double peak_abs(std::span<const double> x) {
    double p = 0.0;
    for (double v : x) p = std::max(p, std::abs(v));
    return p;
}

/// 10 log10(rms(signal)^2 / rms(noise)^2)
inline double measure_snr_db(std::span<const double> signal, std::span<const double> noise) {
    const double rs = rms(signal);
    const double rn = rms(noise);
    require(rn > 0.0, ErrorCode::InvalidArgument, "noise vector is silent");
    return 10.0 * std::log10((rs * rs) / (rn * rn));
}

inline constexpr double kNoAugmentSnr = std::numeric_limits<double>::infinity();

struct NoisyClip {
    AudioClip clip;
    std::vector<double> noise;  // injected noise after the output gain
    double gain = 1.0;          // peak-normalization gain applied to signal+noise
};

/// Adds Gaussian white noise scaled to hit `target_snr_db` exactly against the
/// clip. If the sum would clip, signal and noise are scaled together so the
/// ratio is unchanged. A +inf target passes the clip through.
inline NoisyClip add_white_noise_snr_detailed(const AudioClip& clip, double target_snr_db, std::uint64_t seed) {
    clip.validate();
    require(!std::isnan(target_snr_db), ErrorCode::InvalidArgument, "target SNR is NaN");
    NoisyClip out{clip, std::vector<double>(clip.size(), 0.0), 1.0};
    if (std::isinf(target_snr_db) && target_snr_db > 0) return out;
    const double signal_rms = rms(clip.samples);
    require(signal_rms > 0.0, ErrorCode::InvalidArgument, "clip is silent; SNR undefined");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& v : out.noise) v = gauss(rng);
    const double noise_rms = rms(out.noise);
    const double scale = signal_rms / (noise_rms * std::pow(10.0, target_snr_db / 20.0));
    for (auto& v : out.noise) v *= scale;

    for (std::size_t i = 0; i < clip.size(); ++i) out.clip.samples[i] = clip.samples[i] + out.noise[i];
    const double peak = peak_abs(out.clip.samples);
    if (peak > 1.0) {
        out.gain = 1.0 / peak;
        for (auto& v : out.clip.samples) v *= out.gain;
        for (auto& v : out.noise) v *= out.gain;
    }
    return out;
}

inline AudioClip add_white_noise_snr(const AudioClip& clip, double target_snr_db, std::uint64_t seed) {
    return add_white_noise_snr_detailed(clip, target_snr_db, seed).clip;
}

/// Convolves with the impulse response, trims to the input length, then sets
/// the output peak to half the input peak: gain = 0.5 * peak(in) / peak(conv).
inline AudioClip apply_ir(const AudioClip& clip, const ImpulseResponse& ir) {
    require(clip.sample_rate_hz == ir.sample_rate_hz, ErrorCode::SampleRateMismatch,
            "clip and impulse response sample rates differ");
    clip.validate();
    ir.validate();
    auto wet = convolve_full(clip.samples, ir.taps);
    wet.resize(clip.size());
    const double in_peak = peak_abs(clip.samples);
    const double wet_peak = peak_abs(wet);
    const double gain = wet_peak > 0.0 ? 0.5 * in_peak / wet_peak : 0.0;
    for (auto& v : wet) v *= gain;
    return {std::move(wet), clip.sample_rate_hz};
}

// ---------------------------------------------------------------------------
// Room impulse responses

/// A simple room model: unit direct path, a few early reflections, and an
/// exponentially decaying, one-pole low-passed noise tail reaching -60 dB at
/// rt60_s.
inline ImpulseResponse synthetic_room_ir(double rt60_s, int sample_rate_hz, std::uint64_t seed,
                                         std::size_t n_taps = 0) {
    require(rt60_s > 0.0, ErrorCode::InvalidArgument, "rt60 must be positive");
    if (n_taps == 0) n_taps = static_cast<std::size_t>(std::llround(rt60_s * sample_rate_hz));
    require(n_taps >= 2, ErrorCode::InvalidArgument, "room IR needs >= 2 taps");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    ImpulseResponse ir{std::vector<double>(n_taps, 0.0), sample_rate_hz};
    const double decay = std::log(1000.0) / (rt60_s * sample_rate_hz);  // amplitude -60 dB at rt60
    double lp = 0.0;
    for (std::size_t i = 1; i < n_taps; ++i) {
        lp = 0.5 * lp + 0.5 * gauss(rng);
        ir.taps[i] = 0.25 * lp * std::exp(-decay * static_cast<double>(i));
    }
    for (int r = 0; r < 4; ++r) {
        const auto at = 1 + static_cast<std::size_t>(uni(rng) * 0.02 * sample_rate_hz) % (n_taps - 1);
        ir.taps[at] += (uni(rng) < 0.5 ? -1.0 : 1.0) * (0.2 + 0.3 * uni(rng));
    }
    ir.taps[0] = 1.0;
    return ir;
}

/// IR pool measured the way a real room would be: play an exponential sweep
/// through each synthetic room and deconvolve the recording.
inline std::vector<ImpulseResponse> measured_room_ir_pool(std::size_t count, int sample_rate_hz,
                                                          std::uint64_t seed, const EssParams& ess = {}) {
    require(count >= 1, ErrorCode::InvalidArgument, "IR pool must be nonempty");
    static constexpr double kRt60[] = {0.15, 0.25, 0.35, 0.5, 0.7, 0.9};
    const auto sweep = ess_generate(ess, sample_rate_hz);
    std::vector<ImpulseResponse> pool;
    pool.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double rt60 = kRt60[i % std::size(kRt60)] * (1.0 + 0.1 * static_cast<double>(i / std::size(kRt60)));
        const auto room = synthetic_room_ir(rt60, sample_rate_hz, child_seed(seed, i));
        AudioClip recorded{convolve_full(sweep.samples, room.taps), sample_rate_hz};
        pool.push_back(ir_from_recording(recorded, sweep, ess, IrOptions{room.taps.size(), true}));
    }
    return pool;
}

// ---------------------------------------------------------------------------
// Augmentation plan

enum class AugmentMethod { SnrNoise, IrConvolve };

inline std::string_view to_string(AugmentMethod m) { return m == AugmentMethod::SnrNoise ? "snr_noise" : "ir_convolve"; }

struct AugmentAssignment {
    std::string clip_id;
    AugmentMethod method = AugmentMethod::SnrNoise;
    double parameter = 0.0;  // SNR in dB, or IR pool index
    std::uint64_t seed = 0;

    bool operator==(const AugmentAssignment&) const = default;
};

struct AugmentationPlan {
    std::vector<AugmentAssignment> assignments;
    double fraction = 0.5;
    double method_split = 0.5;
    std::uint64_t seed = 0;
};

struct PlanOptions {
    double fraction = 0.5;
    double method_split = 0.5;  // share of SnrNoise among the selected clips
    // Noise-to-signal amplitude ratio range; ratio r means SNR = 20 log10(1/r).
    double ratio_low = 0.0;
    double ratio_high = 0.9;
};

inline double noise_ratio_to_snr_db(double ratio) {
    require(ratio >= 0.0, ErrorCode::InvalidArgument, "noise ratio must be >= 0");
    return ratio == 0.0 ? kNoAugmentSnr : 20.0 * std::log10(1.0 / ratio);
}

/// Picks round(fraction * n) distinct training clips uniformly without
/// replacement, gives round(split * count) of them white noise and the rest an
/// impulse response. Deterministic in `seed`.
inline AugmentationPlan plan_augmentation(const std::vector<std::string>& train_ids, const PlanOptions& opt,
                                          std::size_t ir_pool_size, std::uint64_t seed) {
    require(!train_ids.empty(), ErrorCode::InvalidArgument, "no training clips to augment");
    require(opt.fraction > 0.0 && opt.fraction <= 1.0, ErrorCode::InvalidArgument, "fraction must be in (0, 1]");
    require(opt.method_split >= 0.0 && opt.method_split <= 1.0, ErrorCode::InvalidArgument,
            "method split must be in [0, 1]");
    require(opt.ratio_low >= 0.0 && opt.ratio_low <= opt.ratio_high, ErrorCode::InvalidArgument,
            "noise ratio range invalid");
    const auto count = static_cast<std::size_t>(std::llround(opt.fraction * static_cast<double>(train_ids.size())));
    const auto n_noise = static_cast<std::size_t>(std::llround(opt.method_split * static_cast<double>(count)));
    require(n_noise == count || ir_pool_size > 0, ErrorCode::InvalidArgument, "IR pool empty");

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(train_ids.size());
    std::iota(order.begin(), order.end(), 0);
    // Partial Fisher-Yates: the first `count` slots become the sample.
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
        std::swap(order[i], order[pick(rng)]);
    }
    std::uniform_real_distribution<double> ratio(opt.ratio_low, opt.ratio_high);

    AugmentationPlan plan{{}, opt.fraction, opt.method_split, seed};
    plan.assignments.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        AugmentAssignment a;
        a.clip_id = train_ids[order[i]];
        a.seed = child_seed(seed, i);
        if (i < n_noise) {
            a.method = AugmentMethod::SnrNoise;
            a.parameter = noise_ratio_to_snr_db(opt.ratio_high > opt.ratio_low ? ratio(rng) : opt.ratio_low);
        } else {
            a.method = AugmentMethod::IrConvolve;
            std::uniform_int_distribution<std::size_t> pick(0, ir_pool_size - 1);
            a.parameter = static_cast<double>(pick(rng));
        }
        plan.assignments.push_back(std::move(a));
    }
    return plan;
}

inline std::string augmented_clip_id(const AugmentAssignment& a) {
    return a.clip_id + "#" + std::string(to_string(a.method));
}

inline AudioClip apply_assignment(const AudioClip& clip, const AugmentAssignment& a,
                                  const std::vector<ImpulseResponse>& ir_pool) {
    if (a.method == AugmentMethod::SnrNoise) return add_white_noise_snr(clip, a.parameter, a.seed);
    const auto idx = static_cast<std::size_t>(a.parameter);
    require(idx < ir_pool.size(), ErrorCode::InvalidArgument, "IR index out of range in plan");
    return apply_ir(clip, ir_pool[idx]);
}

inline std::string plan_to_csv(const AugmentationPlan& plan) {
    std::ostringstream os;
    os.precision(17);
    os << "clip_id,method,parameter,seed\n";
    for (const auto& a : plan.assignments) {
        os << csv::escape(a.clip_id) << ',' << to_string(a.method) << ',';
        if (std::isinf(a.parameter)) os << "inf";
        else os << a.parameter;
        os << ',' << a.seed << '\n';
    }
    return os.str();
}

inline void save_plan_csv(const std::string& path, const AugmentationPlan& plan) {
    std::ofstream os(path);
    require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
    os << plan_to_csv(plan);
}

inline AugmentationPlan load_plan_csv(const std::string& path) {
    const auto table = csv::read(path);
    const auto c_id = table.column("clip_id"), c_m = table.column("method"), c_p = table.column("parameter"),
               c_s = table.column("seed");
    require(c_id && c_m && c_p && c_s, ErrorCode::MissingColumn, "plan CSV needs clip_id,method,parameter,seed");
    AugmentationPlan plan;
    for (const auto& row : table.rows) {
        AugmentAssignment a;
        a.clip_id = row[*c_id];
        if (row[*c_m] == "snr_noise") a.method = AugmentMethod::SnrNoise;
        else if (row[*c_m] == "ir_convolve") a.method = AugmentMethod::IrConvolve;
        else fail(ErrorCode::ParseError, "unknown augmentation method " + row[*c_m]);
        if (row[*c_p] == "inf") a.parameter = kNoAugmentSnr;
        else {
            auto v = csv::parse_double(row[*c_p]);
            require(v.has_value(), ErrorCode::ParseError, "bad plan parameter " + row[*c_p]);
            a.parameter = *v;
        }
        a.seed = std::stoull(row[*c_s]);
        plan.assignments.push_back(std::move(a));
    }
    return plan;
}

}  // namespace tbcough
