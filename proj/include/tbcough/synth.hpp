#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tbcough/audio_io.hpp"
#include "tbcough/augmentation.hpp"
#include "tbcough/csv.hpp"
#include "tbcough/error.hpp"

namespace tbcough {

/// Per-class clinical distribution. Numeric fields are normal (mean, sd)
/// clipped to a range, cough duration is gamma with the given mean and sd,
/// and Yes/No fields are Bernoulli.
struct ClassClinical {
    double age_mean, age_sd, age_lo, age_hi;
    double height_mean, height_sd;
    double weight_mean, weight_sd;
    double hr_mean, hr_sd;
    double temp_mean, temp_sd;
    double cough_days_mean, cough_days_sd;
    double p_female;
    double p_prior_tb, p_ptb, p_eptb, p_weight_loss, p_fever, p_night_sweats, p_hemoptysis;
};

/// Clinical table statistics of the source cohort, TB-positive column.
inline ClassClinical positive_clinical() {
    return {37.55, 14.84, 18, 83, 163.0, 8.49, 51.84, 9.24, 94.95, 19.61, 36.96, 0.66, 53.29, 49.51,
            0.51,  0.16,  0.15, 0.01, 0.77, 0.67, 0.62, 0.22};
}

/// Same, TB-negative column.
inline ClassClinical negative_clinical() {
    return {42.06, 15.28, 18, 85, 160.99, 8.79, 59.84, 14.41, 82.94, 14.27, 36.64, 0.46, 44.73, 56.74,
            0.51,  0.19,  0.17, 0.02, 0.49, 0.37, 0.37, 0.10};
}

struct SyntheticSpec {
    std::size_t n_participants = 100;
    std::size_t clips_per_participant = 10;
    double positive_fraction = 0.6;
    std::uint64_t seed = 0;

    int sample_rate_hz = 44100;
    double clip_seconds = 0.5;
    // Resonance band of the cough burst. Each clip jitters its center by a
    // uniform relative amount and adds a class-independent second resonance.
    double positive_center_hz = 1800.0;
    double negative_center_hz = 1200.0;
    double center_jitter = 0.23;
    double bandwidth_hz = 250.0;
    double decay_min_s = 0.05;
    double decay_max_s = 0.14;
    double resonance_share = 0.40;
    double noise_floor = 0.003;
    double tabular_missing_rate = 0.02;
    ClassClinical positive = positive_clinical();
    ClassClinical negative = negative_clinical();

    void validate() const {
        require(positive_fraction > 0.0 && positive_fraction < 1.0, ErrorCode::InvalidArgument,
                "positive_fraction must be in (0, 1)");
        require(n_participants >= 2 && clips_per_participant >= 1, ErrorCode::InvalidArgument,
                "need >= 2 participants and >= 1 clip each");
        require(clip_seconds > 0.0 && sample_rate_hz > 0, ErrorCode::InvalidArgument, "bad clip geometry");
    }
};

namespace detail {

/// Two-pole resonator (constant peak gain band-pass) applied in place.
inline void resonate(std::vector<double>& x, double center_hz, double bandwidth_hz, int sr) {
    const double r = std::exp(-std::numbers::pi * bandwidth_hz / sr);
    const double theta = 2.0 * std::numbers::pi * center_hz / sr;
    const double a1 = -2.0 * r * std::cos(theta), a2 = r * r;
    const double g = (1.0 - r * r) / 2.0;
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (double& v : x) {
        const double y = g * (v - x2) - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = v;
        y2 = y1;
        y1 = y;
        v = y;
    }
}

inline void normalize_rms(std::vector<double>& x) {
    const double r = rms(x);
    if (r > 0.0)
        for (double& v : x) v /= r;
}

inline std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

}  // namespace detail

/// One synthetic cough: an attack/decay envelope over a mix of resonant
/// and broadband noise, on top of a faint noise floor.
inline AudioClip synth_cough(bool positive, const SyntheticSpec& s, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int sr = s.sample_rate_hz;
    const auto n = static_cast<std::size_t>(std::llround(s.clip_seconds * sr));

    const double base = positive ? s.positive_center_hz : s.negative_center_hz;
    const double center = base * (1.0 + s.center_jitter * (2.0 * u01(rng) - 1.0));
    const double distractor = 500.0 + 2500.0 * u01(rng);
    const double onset = 0.02 + 0.10 * u01(rng);
    const double decay = s.decay_min_s + (s.decay_max_s - s.decay_min_s) * u01(rng);
    const double attack = 0.008 + 0.008 * u01(rng);
    const double peak = 0.3 + 0.5 * u01(rng);

    std::vector<double> exc(n), broad(n), second(n);
    for (auto& v : exc) v = gauss(rng);
    for (auto& v : broad) v = gauss(rng);
    for (auto& v : second) v = gauss(rng);
    detail::resonate(exc, center, s.bandwidth_hz, sr);
    detail::resonate(second, distractor, 2.0 * s.bandwidth_hz, sr);
    detail::normalize_rms(exc);
    detail::normalize_rms(second);

    AudioClip clip;
    clip.sample_rate_hz = sr;
    clip.samples.resize(n);
    const double rs = s.resonance_share, rest = 1.0 - rs;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr - onset;
        double env = 0.0;
        if (t >= 0.0) env = t < attack ? t / attack : std::exp(-(t - attack) / decay);
        clip.samples[i] = env * (rs * exc[i] + 0.5 * rest * second[i] + 0.5 * rest * broad[i]);
    }
    const double pk = peak_abs(clip.samples);
    if (pk > 0.0)
        for (double& v : clip.samples) v *= peak / pk;
    for (double& v : clip.samples) v += s.noise_floor * gauss(rng);
    return clip;
}

namespace detail {
inline std::string clinical_row(const std::string& pid, bool positive, const SyntheticSpec& s, std::mt19937_64& rng) {
    const ClassClinical& c = positive ? s.positive : s.negative;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto normal = [&](double m, double sd) { return std::normal_distribution<double>(m, sd)(rng); };
    auto yes = [&](double p) { return u01(rng) < p ? std::string("Yes") : std::string("No"); };
    auto maybe_missing = [&](std::string v) { return u01(rng) < s.tabular_missing_rate ? std::string() : v; };

    const double age = std::clamp(normal(c.age_mean, c.age_sd), c.age_lo, c.age_hi);
    const double height = normal(c.height_mean, c.height_sd);
    const double weight = std::max(30.0, normal(c.weight_mean, c.weight_sd));
    const double hr = std::clamp(normal(c.hr_mean, c.hr_sd), 40.0, 180.0);
    const double temp = normal(c.temp_mean, c.temp_sd);
    const double shape = (c.cough_days_mean / c.cough_days_sd) * (c.cough_days_mean / c.cough_days_sd);
    const double scale = c.cough_days_sd * c.cough_days_sd / c.cough_days_mean;
    const double days = std::gamma_distribution<double>(shape, scale)(rng);
    const std::string sex = u01(rng) < c.p_female ? "Female" : "Male";

    std::ostringstream os;
    os << pid << ',' << sex << ',' << maybe_missing(std::to_string(static_cast<int>(std::lround(age)))) << ','
       << maybe_missing(fixed(height, 1)) << ',' << maybe_missing(fixed(weight, 1)) << ','
       << maybe_missing(std::to_string(static_cast<int>(std::lround(hr)))) << ',' << maybe_missing(fixed(temp, 1))
       << ',' << maybe_missing(std::to_string(static_cast<int>(std::lround(days)))) << ',' << yes(c.p_prior_tb)
       << ',' << yes(c.p_ptb) << ',' << yes(c.p_eptb) << ',' << yes(c.p_weight_loss) << ',' << yes(c.p_fever)
       << ',' << yes(c.p_night_sweats) << ',' << yes(c.p_hemoptysis);
    return os.str();
}
}  // namespace detail

inline constexpr const char* kTabularHeader =
    "participant_id,sex,age,height_cm,weight_kg,heart_rate_bpm,temperature_c,cough_duration_days,"
    "prior_tb_exposure,ptb_diagnosis,eptb_diagnosis,weight_loss,fever,night_sweats,hemoptysis";

/// Writes audio/<clip>.wav (16-bit PCM), manifest.csv and tabular.csv under
/// `out_dir`. Exactly round(positive_fraction * n_participants) participants
/// are positive. Output bytes depend only on the spec.
inline Manifest synth_generate(const SyntheticSpec& spec, const std::string& out_dir) {
    spec.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "audio", ec);
    require(!ec, ErrorCode::Io, "cannot create " + out_dir + ": " + ec.message());

    const std::size_t n_pos =
        static_cast<std::size_t>(std::llround(spec.positive_fraction * static_cast<double>(spec.n_participants)));
    std::vector<int> participant_label(spec.n_participants, 0);
    std::fill(participant_label.begin(), participant_label.begin() + static_cast<std::ptrdiff_t>(n_pos), 1);
    std::mt19937_64 rng(child_seed(spec.seed, 0));
    std::shuffle(participant_label.begin(), participant_label.end(), rng);

    const int width = static_cast<int>(std::to_string(spec.n_participants - 1).size());
    auto pad = [](std::size_t v, int w) {
        std::ostringstream os;
        os << std::setw(w) << std::setfill('0') << v;
        return os.str();
    };

    Manifest manifest;
    std::ostringstream mcsv, tcsv;
    mcsv << "clip_id,file_path,participant_id,cough_probability,label\n";
    tcsv << kTabularHeader << '\n';
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::size_t clip_index = 0;
    for (std::size_t p = 0; p < spec.n_participants; ++p) {
        const std::string pid = "P" + pad(p, width);
        const bool positive = participant_label[p] == 1;
        std::mt19937_64 trng(child_seed(spec.seed, 1'000'000 + p));
        tcsv << detail::clinical_row(pid, positive, spec, trng) << '\n';
        for (std::size_t c = 0; c < spec.clips_per_participant; ++c, ++clip_index) {
            ClipRecord r;
            r.clip_id = pid + "_c" + pad(c, 2);
            r.file_path = "audio/" + r.clip_id + ".wav";
            r.participant_id = pid;
            // Drawn in (0.85, 1.0] so every clip passes the default gate.
            r.cough_probability = std::round((1.0 - 0.15 * u01(rng)) * 1e6) / 1e6;
            if (r.cough_probability <= 0.85) r.cough_probability = 0.850001;
            r.label = positive ? 1 : 0;
            const auto clip = synth_cough(positive, spec, child_seed(spec.seed, 2'000'000 + clip_index));
            write_wav((fs::path(out_dir) / r.file_path).string(), clip, SampleFormat::Pcm16);
            mcsv << r.clip_id << ',' << r.file_path << ',' << r.participant_id << ','
                 << detail::fixed(r.cough_probability, 6) << ',' << *r.label << '\n';
            manifest.records.push_back(std::move(r));
        }
    }
    auto write = [&](const std::string& name, const std::string& text) {
        std::ofstream os(fs::path(out_dir) / name, std::ios::binary);
        require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + name + " in " + out_dir);
        os << text;
    };
    write("manifest.csv", mcsv.str());
    write("tabular.csv", tcsv.str());
    manifest.tabular = load_tabular((fs::path(out_dir) / "tabular.csv").string());
    return manifest;
}

}  // namespace tbcough
