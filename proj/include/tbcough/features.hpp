#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "tbcough/audio_io.hpp"
#include "tbcough/dsp.hpp"
#include "tbcough/error.hpp"
#include "tbcough/matrix.hpp"
#include "tbcough/tabular.hpp"

namespace tbcough {

struct MelParams {
    std::size_t n_fft = 2048;
    std::size_t hop = 512;
    std::size_t n_mels = 128;
    double f_min_hz = 0.0;
    double f_max_hz = 0.0;  // <= 0 means Nyquist

    double resolved_f_max(int sample_rate_hz) const {
        return f_max_hz > 0.0 ? f_max_hz : 0.5 * sample_rate_hz;
    }
    void validate(int sample_rate_hz) const {
        require(is_power_of_two(n_fft), ErrorCode::InvalidArgument, "n_fft must be a power of two");
        require(hop >= 1, ErrorCode::InvalidArgument, "hop must be >= 1");
        require(n_mels >= 2, ErrorCode::InvalidArgument, "n_mels must be >= 2");
        const double fmax = resolved_f_max(sample_rate_hz);
        require(f_min_hz >= 0.0 && f_min_hz < fmax, ErrorCode::InvalidArgument, "need 0 <= f_min < f_max");
        require(fmax <= 0.5 * sample_rate_hz + 1e-9, ErrorCode::InvalidArgument, "f_max beyond Nyquist");
    }
};

enum class FeatureKind : std::uint32_t { MelSpectrogramDb = 1, Mfcc = 2, SpectralContrast = 3 };

struct FeatureMatrix {
    Matrix<double> values;  // feature bins x time frames
    FeatureKind kind = FeatureKind::MelSpectrogramDb;

    bool operator==(const FeatureMatrix&) const = default;
};

/// f_mel = 2595 log10(1 + f / 700)
inline double hz_to_mel(double f_hz) {
    require(f_hz >= 0.0, ErrorCode::InvalidArgument, "negative frequency");
    return 2595.0 * std::log10(1.0 + f_hz / 700.0);
}

inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// n_mels + 2 frequencies evenly spaced in mel; entries 1..n_mels are the
/// filter peaks, the outer two are the first/last filter edges.
inline std::vector<double> mel_band_edges_hz(const MelParams& p, int sample_rate_hz) {
    p.validate(sample_rate_hz);
    const double lo = hz_to_mel(p.f_min_hz);
    const double hi = hz_to_mel(p.resolved_f_max(sample_rate_hz));
    std::vector<double> hz(p.n_mels + 2);
    for (std::size_t i = 0; i < hz.size(); ++i)
        hz[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(p.n_mels + 1));
    return hz;
}

inline std::vector<double> mel_center_frequencies(const MelParams& p, int sample_rate_hz) {
    const auto edges = mel_band_edges_hz(p, sample_rate_hz);
    return {edges.begin() + 1, edges.end() - 1};
}

/// Triangular, area-normalized mel filters over the rfft bins.
inline Matrix<double> mel_filterbank(const MelParams& p, int sample_rate_hz) {
    const auto hz = mel_band_edges_hz(p, sample_rate_hz);
    const std::size_t bins = p.n_fft / 2 + 1;
    Matrix<double> fb(p.n_mels, bins, 0.0);
    for (std::size_t m = 0; m < p.n_mels; ++m) {
        const double lower = hz[m], center = hz[m + 1], upper = hz[m + 2];
        const double norm = 2.0 / (upper - lower);
        for (std::size_t b = 0; b < bins; ++b) {
            const double f = static_cast<double>(b) * sample_rate_hz / static_cast<double>(p.n_fft);
            const double rise = (f - lower) / (center - lower);
            const double fall = (upper - f) / (upper - center);
            fb(m, b) = std::max(0.0, std::min(rise, fall)) * norm;
        }
    }
    return fb;
}

inline constexpr double kPowerFloor = 1e-10;

inline Matrix<double> power_to_db(const Matrix<double>& power) {
    Matrix<double> out(power.rows(), power.cols());
    for (std::size_t i = 0; i < power.data().size(); ++i)
        out.data()[i] = 10.0 * std::log10(std::max(power.data()[i], kPowerFloor));
    return out;
}

inline Matrix<double> apply_filterbank(const Matrix<double>& fb, const Matrix<double>& spectrum) {
    require(fb.cols() == spectrum.rows(), ErrorCode::ShapeMismatch, "filterbank/spectrum bins differ");
    Matrix<double> out(fb.rows(), spectrum.cols(), 0.0);
    for (std::size_t m = 0; m < fb.rows(); ++m) {
        for (std::size_t b = 0; b < fb.cols(); ++b) {
            const double w = fb(m, b);
            if (w == 0.0) continue;
            const auto src = spectrum.row(b);
            auto dst = out.row(m);
            for (std::size_t t = 0; t < src.size(); ++t) dst[t] += w * src[t];
        }
    }
    return out;
}

inline FeatureMatrix mel_spectrogram_db_from_power(const StftPower& power, const MelParams& p) {
    const auto fb = mel_filterbank(p, power.sample_rate_hz);
    return {power_to_db(apply_filterbank(fb, power.frames)), FeatureKind::MelSpectrogramDb};
}

/// Centered STFT power through the mel filterbank, then 10 log10 with a
/// 1e-10 floor.
inline FeatureMatrix mel_spectrogram_db(const AudioClip& clip, const MelParams& p = {}) {
    p.validate(clip.sample_rate_hz);
    return mel_spectrogram_db_from_power(stft_power(clip, p.n_fft, p.hop, true), p);
}

// ---------------------------------------------------------------------------
// DCT / MFCC

/// Orthonormal DCT-II basis, rows = coefficients (n_out x n).
inline Matrix<double> dct_ii_basis(std::size_t n_out, std::size_t n) {
    require(n >= 1 && n_out >= 1 && n_out <= n, ErrorCode::InvalidArgument, "bad DCT size");
    Matrix<double> basis(n_out, n);
    for (std::size_t k = 0; k < n_out; ++k) {
        const double scale = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (std::size_t i = 0; i < n; ++i)
            basis(k, i) = scale * std::cos(std::numbers::pi * static_cast<double>(k) *
                                           (2.0 * static_cast<double>(i) + 1.0) / (2.0 * static_cast<double>(n)));
    }
    return basis;
}

inline std::vector<double> dct_ii(std::span<const double> x) {
    const auto basis = dct_ii_basis(x.size(), x.size());
    std::vector<double> out(x.size(), 0.0);
    for (std::size_t k = 0; k < x.size(); ++k)
        for (std::size_t i = 0; i < x.size(); ++i) out[k] += basis(k, i) * x[i];
    return out;
}

/// Inverse of the orthonormal DCT-II.
inline std::vector<double> dct_iii(std::span<const double> c) {
    const auto basis = dct_ii_basis(c.size(), c.size());
    std::vector<double> out(c.size(), 0.0);
    for (std::size_t i = 0; i < c.size(); ++i)
        for (std::size_t k = 0; k < c.size(); ++k) out[i] += basis(k, i) * c[k];
    return out;
}

inline FeatureMatrix mfcc_from_log_mel(const FeatureMatrix& log_mel, std::size_t n_mfcc) {
    const std::size_t n_mels = log_mel.values.rows();
    require(n_mfcc >= 1 && n_mfcc <= n_mels, ErrorCode::InvalidArgument, "n_mfcc must be in [1, n_mels]");
    const auto basis = dct_ii_basis(n_mfcc, n_mels);
    const std::size_t frames = log_mel.values.cols();
    Matrix<double> out(n_mfcc, frames, 0.0);
    for (std::size_t k = 0; k < n_mfcc; ++k)
        for (std::size_t m = 0; m < n_mels; ++m) {
            const double w = basis(k, m);
            const auto src = log_mel.values.row(m);
            auto dst = out.row(k);
            for (std::size_t t = 0; t < frames; ++t) dst[t] += w * src[t];
        }
    return {std::move(out), FeatureKind::Mfcc};
}

inline FeatureMatrix mfcc(const AudioClip& clip, std::size_t n_mfcc = 20, const MelParams& p = {}) {
    require(n_mfcc <= p.n_mels, ErrorCode::InvalidArgument, "n_mfcc exceeds n_mels");
    return mfcc_from_log_mel(mel_spectrogram_db(clip, p), n_mfcc);
}

// ---------------------------------------------------------------------------
// Spectral contrast

struct ContrastParams {
    std::size_t n_bands = 8;
    double quantile = 0.02;
    double f_min_hz = 80.0;  // bottom of the octave ladder

    void validate(int sample_rate_hz) const {
        require(n_bands >= 1, ErrorCode::InvalidArgument, "n_bands must be >= 1");
        require(quantile > 0.0 && quantile <= 0.5, ErrorCode::InvalidArgument, "quantile must be in (0, 0.5]");
        require(f_min_hz > 0.0, ErrorCode::InvalidArgument, "contrast f_min must be positive");
        require(f_min_hz * std::pow(2.0, static_cast<double>(n_bands)) < 0.5 * sample_rate_hz,
                ErrorCode::InvalidArgument, "octave ladder exceeds Nyquist; lower f_min or n_bands");
    }
};

/// Bin index ranges [first, last) of the n_bands+1 contrast sub-bands: the
/// residual band below f_min, then one band per octave. Each octave band also
/// takes the bin just below its edge; the top band runs to Nyquist.
inline std::vector<std::pair<std::size_t, std::size_t>> contrast_band_bins(const ContrastParams& cp,
                                                                           std::size_t n_fft, int sample_rate_hz) {
    cp.validate(sample_rate_hz);
    const std::size_t bins = n_fft / 2 + 1;
    std::vector<double> edges(cp.n_bands + 2, 0.0);
    for (std::size_t k = 1; k < edges.size(); ++k) edges[k] = cp.f_min_hz * std::pow(2.0, static_cast<double>(k - 1));
    auto freq = [&](std::size_t b) { return static_cast<double>(b) * sample_rate_hz / static_cast<double>(n_fft); };

    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t k = 0; k + 1 < edges.size(); ++k) {
        std::size_t first = bins, last = 0;
        for (std::size_t b = 0; b < bins; ++b) {
            if (freq(b) >= edges[k] && freq(b) <= edges[k + 1]) {
                first = std::min(first, b);
                last = std::max(last, b + 1);
            }
        }
        require(first < last, ErrorCode::InvalidArgument, "empty spectral-contrast band; n_fft too small");
        if (k > 0 && first > 0) --first;
        if (k == cp.n_bands) last = bins;
        else if (last - first > 1) --last;  // the upper edge bin belongs to the next band
        out.emplace_back(first, last);
    }
    return out;
}

inline FeatureMatrix spectral_contrast_from_magnitude(const Matrix<double>& magnitude, std::size_t n_fft,
                                                      int sample_rate_hz, const ContrastParams& cp) {
    const auto bands = contrast_band_bins(cp, n_fft, sample_rate_hz);
    const std::size_t frames = magnitude.cols();
    Matrix<double> out(bands.size(), frames, 0.0);
    std::vector<double> col;
    for (std::size_t k = 0; k < bands.size(); ++k) {
        const auto [first, last] = bands[k];
        const std::size_t width = last - first;
        const auto n_q = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(cp.quantile * static_cast<double>(width))));
        for (std::size_t t = 0; t < frames; ++t) {
            col.clear();
            for (std::size_t b = first; b < last; ++b) col.push_back(magnitude(b, t));
            std::sort(col.begin(), col.end());
            double valley = 0.0, peak = 0.0;
            for (std::size_t i = 0; i < n_q; ++i) {
                valley += col[i];
                peak += col[width - 1 - i];
            }
            valley /= static_cast<double>(n_q);
            peak /= static_cast<double>(n_q);
            out(k, t) = std::log(std::max(peak, kPowerFloor)) - std::log(std::max(valley, kPowerFloor));
        }
    }
    return {std::move(out), FeatureKind::SpectralContrast};
}

/// Per band and frame: log(mean of top-quantile magnitudes) minus
/// log(mean of bottom-quantile magnitudes).
inline FeatureMatrix spectral_contrast(const AudioClip& clip, const ContrastParams& cp = {},
                                       std::size_t n_fft = 2048, std::size_t hop = 512) {
    cp.validate(clip.sample_rate_hz);
    const auto mag = stft_spectrum(clip, n_fft, hop, true, 1);
    return spectral_contrast_from_magnitude(mag, n_fft, clip.sample_rate_hz, cp);
}

// ---------------------------------------------------------------------------
// Pooling

/// Per-row mean followed by per-row (population) standard deviation.
inline std::vector<double> pool_features(const FeatureMatrix& m) {
    const auto& v = m.values;
    require(v.rows() > 0 && v.cols() > 0, ErrorCode::InvalidArgument, "pooling an empty matrix");
    std::vector<double> out(2 * v.rows());
    for (std::size_t r = 0; r < v.rows(); ++r) {
        const auto row = v.row(r);
        double mean = 0.0;
        for (double x : row) mean += x;
        mean /= static_cast<double>(row.size());
        double var = 0.0;
        for (double x : row) var += (x - mean) * (x - mean);
        var /= static_cast<double>(row.size());
        out[r] = mean;
        out[v.rows() + r] = std::sqrt(var);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Combined extraction and cache format

struct FeatureParams {
    MelParams mel;
    std::size_t n_mfcc = 20;
    ContrastParams contrast;

    /// Canonical text used for the parameter hash; any change here changes
    /// cache keys and model compatibility.
    std::string canonical() const {
        std::ostringstream os;
        os.precision(17);
        os << "n_fft=" << mel.n_fft << ";hop=" << mel.hop << ";n_mels=" << mel.n_mels << ";f_min=" << mel.f_min_hz
           << ";f_max=" << mel.f_max_hz << ";n_mfcc=" << n_mfcc << ";contrast_bands=" << contrast.n_bands
           << ";contrast_quantile=" << contrast.quantile << ";contrast_fmin=" << contrast.f_min_hz
           << ";centered=1;window=hann;db_floor=1e-10";
        return os.str();
    }
};

/// 64-bit FNV-1a, rendered as 16 hex digits.
inline std::string fnv1a_hex(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = kHex[h & 0xf];
        h >>= 4;
    }
    return out;
}

inline std::string feature_param_hash(const FeatureParams& p) { return fnv1a_hex(p.canonical()); }

struct ClipFeatures {
    FeatureMatrix mel;
    FeatureMatrix mfcc;
    FeatureMatrix contrast;

    bool operator==(const ClipFeatures&) const = default;
};

inline void quantize_to_float(FeatureMatrix& m) {
    for (double& v : m.values.data()) v = static_cast<double>(static_cast<float>(v));
}

/// All three feature sets from one clip, sharing a single STFT. Values are
/// rounded to float precision so that in-memory and cached features agree
/// bit for bit.
inline ClipFeatures extract_features(const AudioClip& clip, const FeatureParams& p = {}) {
    p.mel.validate(clip.sample_rate_hz);
    p.contrast.validate(clip.sample_rate_hz);
    const auto magnitude = stft_spectrum(clip, p.mel.n_fft, p.mel.hop, true, 1);
    StftPower power{Matrix<double>(magnitude.rows(), magnitude.cols()), p.mel.n_fft, p.mel.hop, clip.sample_rate_hz};
    for (std::size_t i = 0; i < magnitude.data().size(); ++i)
        power.frames.data()[i] = magnitude.data()[i] * magnitude.data()[i];
    ClipFeatures f;
    f.mel = mel_spectrogram_db_from_power(power, p.mel);
    f.mfcc = mfcc_from_log_mel(f.mel, p.n_mfcc);
    f.contrast = spectral_contrast_from_magnitude(magnitude, p.mel.n_fft, clip.sample_rate_hz, p.contrast);
    quantize_to_float(f.mel);
    quantize_to_float(f.mfcc);
    quantize_to_float(f.contrast);
    return f;
}

/// Pooled acoustic summary used by the tree models: mel, MFCC, contrast.
inline std::vector<double> pooled_acoustic_vector(const ClipFeatures& f) {
    std::vector<double> out = pool_features(f.mel);
    const auto a = pool_features(f.mfcc);
    const auto b = pool_features(f.contrast);
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

// Binary record: "TBFM", kind, rows, cols (little-endian u32), then
// rows*cols little-endian float32 values in row-major order.
inline constexpr char kFeatureMagic[4] = {'T', 'B', 'F', 'M'};

namespace detail {
inline void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    require(static_cast<bool>(is), ErrorCode::MalformedHeader, "truncated feature record");
    return le32(b);
}
}  // namespace detail

inline void write_feature_matrix(std::ostream& os, const FeatureMatrix& m) {
    os.write(kFeatureMagic, 4);
    detail::write_u32(os, static_cast<std::uint32_t>(m.kind));
    detail::write_u32(os, static_cast<std::uint32_t>(m.values.rows()));
    detail::write_u32(os, static_cast<std::uint32_t>(m.values.cols()));
    for (double v : m.values.data()) {
        const float f = static_cast<float>(v);
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        detail::write_u32(os, u);
    }
}

inline FeatureMatrix read_feature_matrix(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    require(static_cast<bool>(is) && std::memcmp(magic, kFeatureMagic, 4) == 0, ErrorCode::MalformedHeader,
            "bad feature record magic");
    const auto kind = detail::read_u32(is);
    require(kind >= 1 && kind <= 3, ErrorCode::MalformedHeader, "unknown feature kind");
    const auto rows = detail::read_u32(is);
    const auto cols = detail::read_u32(is);
    std::vector<double> data(static_cast<std::size_t>(rows) * cols);
    for (auto& v : data) {
        const std::uint32_t u = detail::read_u32(is);
        float f;
        std::memcpy(&f, &u, 4);
        v = f;
    }
    return {Matrix<double>(rows, cols, std::move(data)), static_cast<FeatureKind>(kind)};
}

inline void save_clip_features(const std::string& path, const ClipFeatures& f) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::Io, "cannot write feature cache " + path);
    write_feature_matrix(os, f.mel);
    write_feature_matrix(os, f.mfcc);
    write_feature_matrix(os, f.contrast);
    require(static_cast<bool>(os), ErrorCode::Io, "short write to " + path);
}

inline ClipFeatures load_clip_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorCode::MissingFile, "cannot open feature cache " + path);
    ClipFeatures f;
    f.mel = read_feature_matrix(is);
    f.mfcc = read_feature_matrix(is);
    f.contrast = read_feature_matrix(is);
    require(f.mel.kind == FeatureKind::MelSpectrogramDb && f.mfcc.kind == FeatureKind::Mfcc &&
                f.contrast.kind == FeatureKind::SpectralContrast,
            ErrorCode::MalformedHeader, "feature cache records out of order in " + path);
    return f;
}

/// Debug dump of a feature matrix as an 8-bit PGM (low rows at the bottom).
inline void write_pgm(const std::string& path, const FeatureMatrix& m) {
    const auto& v = m.values;
    require(!v.empty(), ErrorCode::InvalidArgument, "empty matrix");
    const auto [lo, hi] = std::minmax_element(v.data().begin(), v.data().end());
    const double span = *hi > *lo ? *hi - *lo : 1.0;
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
    os << "P5\n" << v.cols() << " " << v.rows() << "\n255\n";
    for (std::size_t r = v.rows(); r-- > 0;)
        for (std::size_t c = 0; c < v.cols(); ++c)
            os.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * (v(r, c) - *lo) / span))));
}

}  // namespace tbcough
