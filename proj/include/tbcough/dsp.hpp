#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "tbcough/audio_io.hpp"
#include "tbcough/error.hpp"
#include "tbcough/matrix.hpp"

namespace tbcough {

using Complex = std::complex<double>;
using ComplexSpectrum = std::vector<Complex>;

constexpr bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

constexpr std::size_t next_power_of_two(std::size_t n) noexcept {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}

/// Periodic Hann window, w[k] = 0.5 (1 - cos(2 pi k / n)).
inline std::vector<double> hann_window(std::size_t n) {
    require(n >= 1, ErrorCode::InvalidArgument, "window length must be >= 1");
    std::vector<double> w(n);
    for (std::size_t k = 0; k < n; ++k)
        w[k] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n)));
    return w;
}

/// Literal O(N^2) evaluation of y[k] = sum_n exp(-2 pi j k n / N) x[n].
/// Kept as the reference the fast transform is checked against.
inline ComplexSpectrum dft_oracle(std::span<const Complex> x) {
    require(!x.empty(), ErrorCode::InvalidArgument, "dft of empty input");
    const std::size_t n = x.size();
    // exp(-2 pi j m / n) for every residue m; k*t is reduced mod n before the
    // lookup so each angle stays small and accurate.
    std::vector<double> wr(n), wi(n);
    for (std::size_t m = 0; m < n; ++m) {
        const double angle = -2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(n);
        wr[m] = std::cos(angle);
        wi[m] = std::sin(angle);
    }
    ComplexSpectrum y(n);
    for (std::size_t k = 0; k < n; ++k) {
        double re = 0.0, im = 0.0;
        std::size_t m = 0;  // (k * t) mod n
        for (std::size_t t = 0; t < n; ++t) {
            const double a = x[t].real(), b = x[t].imag();
            re += a * wr[m] - b * wi[m];
            im += a * wi[m] + b * wr[m];
            m += k;
            if (m >= n) m -= n;
        }
        y[k] = Complex(re, im);
    }
    return y;
}

inline ComplexSpectrum dft_oracle(std::span<const double> x) {
    std::vector<Complex> c(x.begin(), x.end());
    return dft_oracle(std::span<const Complex>(c));
}

/// Precomputed bit-reversal permutation and twiddles for one radix-2 size.
class FftPlan {
public:
    explicit FftPlan(std::size_t n) : n_(n), rev_(n), twiddle_(n / 2) {
        require(is_power_of_two(n), ErrorCode::InvalidArgument, "fft size must be a power of two");
        std::size_t bits = 0;
        while ((std::size_t{1} << bits) < n) ++bits;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t r = 0;
            for (std::size_t b = 0; b < bits; ++b)
                if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
            rev_[i] = r;
        }
        for (std::size_t k = 0; k < n / 2; ++k) {
            const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
            twiddle_[k] = Complex(std::cos(angle), std::sin(angle));
        }
    }

    std::size_t size() const noexcept { return n_; }

    /// In-place transform. The inverse is unnormalized; callers divide by n.
    void transform(std::span<Complex> a, bool inverse = false) const {
        require(a.size() == n_, ErrorCode::ShapeMismatch, "fft buffer size does not match plan");
        for (std::size_t i = 0; i < n_; ++i)
            if (i < rev_[i]) std::swap(a[i], a[rev_[i]]);
        for (std::size_t len = 2; len <= n_; len <<= 1) {
            const std::size_t half = len / 2;
            const std::size_t step = n_ / len;
            for (std::size_t start = 0; start < n_; start += len) {
                for (std::size_t j = 0; j < half; ++j) {
                    Complex w = twiddle_[j * step];
                    if (inverse) w = std::conj(w);
                    const Complex u = a[start + j];
                    const Complex v = a[start + j + half] * w;
                    a[start + j] = u + v;
                    a[start + j + half] = u - v;
                }
            }
        }
    }

private:
    std::size_t n_;
    std::vector<std::size_t> rev_;
    std::vector<Complex> twiddle_;
};

/// Radix-2 FFT of `x` zero-padded or truncated to `n` points.
inline ComplexSpectrum fft(std::span<const Complex> x, std::size_t n) {
    require(is_power_of_two(n), ErrorCode::InvalidArgument, "fft size must be a power of two");
    ComplexSpectrum a(n, Complex{});
    std::copy_n(x.begin(), std::min(n, x.size()), a.begin());
    FftPlan(n).transform(a);
    return a;
}

inline ComplexSpectrum fft(std::span<const double> x, std::size_t n) {
    require(is_power_of_two(n), ErrorCode::InvalidArgument, "fft size must be a power of two");
    ComplexSpectrum a(n, Complex{});
    for (std::size_t i = 0; i < std::min(n, x.size()); ++i) a[i] = x[i];
    FftPlan(n).transform(a);
    return a;
}

/// Inverse FFT including the 1/N factor.
inline ComplexSpectrum ifft(std::span<const Complex> y) {
    require(is_power_of_two(y.size()), ErrorCode::InvalidArgument, "ifft size must be a power of two");
    ComplexSpectrum a(y.begin(), y.end());
    FftPlan(a.size()).transform(a, true);
    const double inv = 1.0 / static_cast<double>(a.size());
    for (auto& v : a) v *= inv;
    return a;
}

// ---------------------------------------------------------------------------
// STFT

struct StftPower {
    Matrix<double> frames;  // (n_fft/2 + 1) x n_frames
    std::size_t n_fft = 0;
    std::size_t hop = 0;
    int sample_rate_hz = 0;
};

namespace detail {
// numpy-style "reflect" padding (edge sample not repeated).
inline std::vector<double> reflect_pad(std::span<const double> x, std::size_t pad) {
    const std::size_t n = x.size();
    std::vector<double> out(n + 2 * pad);
    if (n == 1) {
        std::fill(out.begin(), out.end(), x[0]);
        return out;
    }
    const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto j = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(pad);
        j %= period;
        if (j < 0) j += period;
        if (j >= static_cast<std::ptrdiff_t>(n)) j = period - j;
        out[i] = x[static_cast<std::size_t>(j)];
    }
    return out;
}
}  // namespace detail

inline std::size_t stft_frame_count(std::size_t n_samples, std::size_t n_fft, std::size_t hop, bool centered) {
    if (centered) return n_samples / hop + 1;
    return n_samples < n_fft ? 0 : (n_samples - n_fft) / hop + 1;
}

/// Short-time spectrum |FFT(window * frame)|^exponent, bins 0..n_fft/2.
/// exponent 2 gives power, 1 gives magnitude.
inline Matrix<double> stft_spectrum(const AudioClip& clip, std::size_t n_fft, std::size_t hop, bool centered,
                                    int exponent) {
    require(hop >= 1, ErrorCode::InvalidArgument, "hop must be >= 1");
    require(is_power_of_two(n_fft), ErrorCode::InvalidArgument, "n_fft must be a power of two");
    require(exponent == 1 || exponent == 2, ErrorCode::InvalidArgument, "exponent must be 1 or 2");
    clip.validate();
    std::vector<double> signal = centered ? detail::reflect_pad(clip.samples, n_fft / 2) : clip.samples;
    const std::size_t frames = stft_frame_count(clip.samples.size(), n_fft, hop, centered);
    require(frames > 0, ErrorCode::InvalidArgument, "clip shorter than one STFT window");

    const auto window = hann_window(n_fft);
    const FftPlan plan(n_fft);
    const std::size_t bins = n_fft / 2 + 1;
    Matrix<double> out(bins, frames);
    std::vector<Complex> buf(n_fft);
    for (std::size_t f = 0; f < frames; ++f) {
        const std::size_t start = f * hop;
        for (std::size_t i = 0; i < n_fft; ++i) {
            const std::size_t idx = start + i;
            buf[i] = idx < signal.size() ? signal[idx] * window[i] : 0.0;
        }
        plan.transform(buf);
        for (std::size_t b = 0; b < bins; ++b) {
            const double p = std::norm(buf[b]);
            out(b, f) = exponent == 2 ? p : std::sqrt(p);
        }
    }
    return out;
}

inline StftPower stft_power(const AudioClip& clip, std::size_t n_fft, std::size_t hop, bool centered = true) {
    return {stft_spectrum(clip, n_fft, hop, centered, 2), n_fft, hop, clip.sample_rate_hz};
}

// ---------------------------------------------------------------------------
// Convolution

inline std::vector<double> convolve_direct(std::span<const double> a, std::span<const double> b) {
    require(!a.empty() && !b.empty(), ErrorCode::InvalidArgument, "convolution of empty input");
    std::vector<double> out(a.size() + b.size() - 1, 0.0);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
    return out;
}

/// Full linear convolution, length len(a)+len(b)-1. Small inputs use the
/// direct sum, larger ones go through a zero-padded FFT.
inline std::vector<double> convolve_full(std::span<const double> a, std::span<const double> b) {
    require(!a.empty() && !b.empty(), ErrorCode::InvalidArgument, "convolution of empty input");
    const std::size_t out_len = a.size() + b.size() - 1;
    if (std::min(a.size(), b.size()) <= 32 || a.size() * b.size() <= 16384) return convolve_direct(a, b);

    const std::size_t n = next_power_of_two(out_len);
    const FftPlan plan(n);
    // Pack both real inputs into one complex transform: z = a + j b.
    std::vector<Complex> z(n, Complex{});
    for (std::size_t i = 0; i < a.size(); ++i) z[i].real(a[i]);
    for (std::size_t i = 0; i < b.size(); ++i) z[i].imag(b[i]);
    plan.transform(z);
    std::vector<Complex> prod(n);
    for (std::size_t k = 0; k < n; ++k) {
        const Complex zk = z[k];
        const Complex zc = std::conj(z[(n - k) % n]);
        const Complex fa = 0.5 * (zk + zc);
        const Complex fb = Complex(0.0, -0.5) * (zk - zc);
        prod[k] = fa * fb;
    }
    plan.transform(prod, true);
    std::vector<double> out(out_len);
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < out_len; ++i) out[i] = prod[i].real() * inv;
    return out;
}

// ---------------------------------------------------------------------------
// Exponential sine sweep and impulse-response estimation

struct EssParams {
    double f1_hz = 10.0;
    double f2_hz = 22000.0;
    double duration_s = 1.0;
};

struct ImpulseResponse {
    std::vector<double> taps;
    int sample_rate_hz = kDefaultSampleRate;

    void validate() const {
        require(!taps.empty(), ErrorCode::InvalidArgument, "impulse response has no taps");
        require(sample_rate_hz > 0, ErrorCode::InvalidArgument, "impulse response sample rate must be positive");
        for (double t : taps) require(std::isfinite(t), ErrorCode::NonFinite, "impulse response not finite");
    }
};

namespace detail {
inline void check_ess(const EssParams& p, int sample_rate_hz) {
    require(sample_rate_hz > 0, ErrorCode::InvalidArgument, "sample rate must be positive");
    require(p.f1_hz > 0.0 && p.f1_hz < p.f2_hz && p.f2_hz < 0.5 * sample_rate_hz, ErrorCode::InvalidArgument,
            "sweep needs 0 < f1 < f2 < sample_rate/2");
    require(p.duration_s > 0.0, ErrorCode::InvalidArgument, "sweep duration must be positive");
}
inline double sweep_rate_constant(const EssParams& p) { return p.duration_s / std::log(p.f2_hz / p.f1_hz); }
}  // namespace detail

/// x(t) = sin(2 pi f1 L (e^{t/L} - 1)), L = T / ln(f2/f1).
inline AudioClip ess_generate(const EssParams& p, int sample_rate_hz) {
    detail::check_ess(p, sample_rate_hz);
    const double L = detail::sweep_rate_constant(p);
    const auto n = static_cast<std::size_t>(std::llround(p.duration_s * sample_rate_hz));
    AudioClip clip{std::vector<double>(n), sample_rate_hz};
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sample_rate_hz;
        clip.samples[i] = std::sin(2.0 * std::numbers::pi * p.f1_hz * L * std::expm1(t / L));
    }
    return clip;
}

inline AudioClip ess_generate(double f1_hz, double f2_hz, double duration_s, int sample_rate_hz) {
    return ess_generate(EssParams{f1_hz, f2_hz, duration_s}, sample_rate_hz);
}

/// Time-reversed sweep with an envelope proportional to the reversed sweep's
/// instantaneous frequency (+6 dB/octave), scaled so sweep * inverse peaks at 1.
inline std::vector<double> ess_inverse_filter(const AudioClip& sweep, const EssParams& p) {
    detail::check_ess(p, sweep.sample_rate_hz);
    sweep.validate();
    const double L = detail::sweep_rate_constant(p);
    const std::size_t n = sweep.samples.size();
    std::vector<double> inv(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sweep.sample_rate_hz;
        inv[i] = sweep.samples[n - 1 - i] * std::exp(-t / L);
    }
    const auto delta = convolve_full(sweep.samples, inv);
    double peak = 0.0;
    for (double v : delta) peak = std::max(peak, std::abs(v));
    require(peak > 0.0, ErrorCode::InvalidArgument, "degenerate sweep");
    for (double& v : inv) v /= peak;
    return inv;
}

struct IrOptions {
    std::size_t n_taps = 4096;
    bool peak_align = true;
};

/// Deconvolves a sweep recording with the sweep's inverse filter. The linear
/// response starts at lag len(sweep)-1; harmonic products sit before it and
/// are discarded. With peak alignment the first tap is the strongest sample
/// at or after that lag.
inline ImpulseResponse ir_from_recording(const AudioClip& recorded, const AudioClip& sweep, const EssParams& p,
                                         const IrOptions& opt = {}) {
    require(recorded.sample_rate_hz == sweep.sample_rate_hz, ErrorCode::SampleRateMismatch,
            "recording and sweep sample rates differ");
    require(opt.n_taps >= 1, ErrorCode::InvalidArgument, "n_taps must be >= 1");
    recorded.validate();
    ImpulseResponse ir{std::vector<double>(opt.n_taps, 0.0), recorded.sample_rate_hz};
    // Silence deconvolves to silence; skip the FFT so no rounding residue leaks in.
    if (std::all_of(recorded.samples.begin(), recorded.samples.end(), [](double v) { return v == 0.0; })) return ir;
    const auto inv = ess_inverse_filter(sweep, p);
    const auto dec = convolve_full(recorded.samples, inv);
    const std::size_t zero_lag = sweep.samples.size() - 1;
    std::size_t start = zero_lag;
    if (opt.peak_align) {
        double best = 0.0;
        const std::size_t end = std::min(dec.size(), zero_lag + opt.n_taps);
        for (std::size_t k = zero_lag; k < end; ++k) {
            if (std::abs(dec[k]) > best) {
                best = std::abs(dec[k]);
                start = k;
            }
        }
    }
    for (std::size_t i = 0; i < opt.n_taps && start + i < dec.size(); ++i) ir.taps[i] = dec[start + i];
    return ir;
}

/// Lag-0 normalized cross-correlation; the shorter input is treated as
/// zero-extended.
inline double normalized_cross_correlation(std::span<const double> a, std::span<const double> b) {
    const std::size_t n = std::min(a.size(), b.size());
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < n; ++i) ab += a[i] * b[i];
    for (double v : a) aa += v * v;
    for (double v : b) bb += v * v;
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

}  // namespace tbcough
