#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tbcough/csv.hpp"
#include "tbcough/error.hpp"
#include "tbcough/tabular.hpp"

namespace tbcough {

inline constexpr int kDefaultSampleRate = 44100;

/// Mono sample buffer. Samples are nominally in [-1, 1].
struct AudioClip {
    std::vector<double> samples;
    int sample_rate_hz = kDefaultSampleRate;

    std::size_t size() const noexcept { return samples.size(); }
    double duration_s() const { return static_cast<double>(samples.size()) / sample_rate_hz; }

    void validate() const {
        require(!samples.empty(), ErrorCode::InvalidArgument, "audio clip has no samples");
        require(sample_rate_hz > 0, ErrorCode::InvalidArgument, "sample rate must be positive");
        for (double s : samples)
            require(std::isfinite(s), ErrorCode::NonFinite, "audio clip contains NaN/Inf");
    }
};

enum class SampleFormat { Pcm8, Pcm16, Pcm24, Pcm32, Float32 };

/// Decoded WAV contents before channel mixing.
struct WavData {
    std::vector<std::vector<double>> channels;
    int sample_rate_hz = 0;
    SampleFormat format = SampleFormat::Pcm16;
};

namespace detail {

inline std::uint16_t le16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t le32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline void put16(std::vector<unsigned char>& b, std::uint16_t v) {
    b.push_back(static_cast<unsigned char>(v & 0xff));
    b.push_back(static_cast<unsigned char>(v >> 8));
}
inline void put32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put_tag(std::vector<unsigned char>& b, const char* tag) {
    b.insert(b.end(), tag, tag + 4);
}

inline int bits_of(SampleFormat f) {
    switch (f) {
    case SampleFormat::Pcm8: return 8;
    case SampleFormat::Pcm16: return 16;
    case SampleFormat::Pcm24: return 24;
    case SampleFormat::Pcm32: return 32;
    case SampleFormat::Float32: return 32;
    }
    return 16;
}

}  // namespace detail

/// Parses a RIFF/WAVE byte buffer: PCM 8/16/24/32-bit integer or 32-bit
/// float, 1–2 channels. Integer samples are divided by 2^(bits-1) so the
/// integer minimum maps to exactly -1.
inline WavData decode_wav(std::span<const unsigned char> bytes) {
    using detail::le16;
    using detail::le32;
    require(bytes.size() >= 12 && std::memcmp(bytes.data(), "RIFF", 4) == 0 &&
                std::memcmp(bytes.data() + 8, "WAVE", 4) == 0,
            ErrorCode::MalformedHeader, "not a RIFF/WAVE stream");

    std::optional<std::uint16_t> format_tag;
    std::uint16_t channels = 0, bits = 0, block_align = 0;
    std::uint32_t rate = 0;
    std::span<const unsigned char> data;
    bool have_data = false;

    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const unsigned char* hdr = bytes.data() + pos;
        const std::uint32_t size = le32(hdr + 4);
        const std::size_t body = pos + 8;
        require(body + size <= bytes.size() || std::memcmp(hdr, "data", 4) == 0,
                ErrorCode::MalformedHeader, "chunk runs past end of file");
        if (std::memcmp(hdr, "fmt ", 4) == 0) {
            require(size >= 16, ErrorCode::MalformedHeader, "fmt chunk too short");
            const unsigned char* f = bytes.data() + body;
            format_tag = le16(f);
            channels = le16(f + 2);
            rate = le32(f + 4);
            block_align = le16(f + 12);
            bits = le16(f + 14);
            if (*format_tag == 0xFFFE) {
                // WAVE_FORMAT_EXTENSIBLE: the sub-format GUID starts with the real tag.
                require(size >= 40, ErrorCode::MalformedHeader, "extensible fmt chunk too short");
                format_tag = le16(f + 24);
            }
        } else if (std::memcmp(hdr, "data", 4) == 0) {
            // Some writers leave the size unpatched; clamp to what is present.
            const std::size_t avail = std::min<std::size_t>(size, bytes.size() - body);
            data = bytes.subspan(body, avail);
            have_data = true;
        }
        pos = body + size + (size & 1u);
    }

    require(format_tag.has_value(), ErrorCode::MalformedHeader, "missing fmt chunk");
    require(have_data, ErrorCode::MalformedHeader, "missing data chunk");
    require(rate > 0, ErrorCode::MalformedHeader, "zero sample rate");

    SampleFormat fmt;
    if (*format_tag == 1) {
        switch (bits) {
        case 8: fmt = SampleFormat::Pcm8; break;
        case 16: fmt = SampleFormat::Pcm16; break;
        case 24: fmt = SampleFormat::Pcm24; break;
        case 32: fmt = SampleFormat::Pcm32; break;
        default: fail(ErrorCode::UnsupportedCodec, "unsupported PCM bit depth " + std::to_string(bits));
        }
    } else if (*format_tag == 3 && bits == 32) {
        fmt = SampleFormat::Float32;
    } else {
        fail(ErrorCode::UnsupportedCodec, "unsupported WAV format tag " + std::to_string(*format_tag) +
                                              " with " + std::to_string(bits) + " bits");
    }
    require(channels >= 1 && channels <= 2, ErrorCode::UnsupportedCodec,
            "only mono or stereo supported, got " + std::to_string(channels) + " channels");
    const std::size_t bytes_per_sample = bits / 8;
    require(block_align == channels * bytes_per_sample, ErrorCode::MalformedHeader, "inconsistent block align");

    const std::size_t frames = data.size() / block_align;
    WavData out;
    out.sample_rate_hz = static_cast<int>(rate);
    out.format = fmt;
    out.channels.assign(channels, std::vector<double>(frames));
    const unsigned char* p = data.data();
    for (std::size_t i = 0; i < frames; ++i) {
        for (std::size_t c = 0; c < channels; ++c, p += bytes_per_sample) {
            double v = 0.0;
            switch (fmt) {
            case SampleFormat::Pcm8: v = (static_cast<int>(p[0]) - 128) / 128.0; break;
            case SampleFormat::Pcm16: v = static_cast<std::int16_t>(le16(p)) / 32768.0; break;
            case SampleFormat::Pcm24: {
                std::int32_t s = static_cast<std::int32_t>(p[0] | (p[1] << 8) | (p[2] << 16));
                if (s & 0x800000) s -= 0x1000000;
                v = s / 8388608.0;
                break;
            }
            case SampleFormat::Pcm32: v = static_cast<std::int32_t>(le32(p)) / 2147483648.0; break;
            case SampleFormat::Float32: {
                const std::uint32_t u = le32(p);
                float f;
                std::memcpy(&f, &u, sizeof f);
                v = f;
                break;
            }
            }
            out.channels[c][i] = v;
        }
    }
    return out;
}

inline WavData read_wav_channels(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::MissingFile, "cannot open WAV " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_wav(bytes);
}

/// Per-sample arithmetic mean over channels.
inline std::vector<double> to_mono(const std::vector<std::vector<double>>& channels) {
    require(!channels.empty(), ErrorCode::InvalidArgument, "to_mono needs at least one channel");
    const std::size_t n = channels.front().size();
    for (const auto& ch : channels)
        require(ch.size() == n, ErrorCode::LengthMismatch, "channels differ in length");
    if (channels.size() == 1) return channels.front();
    std::vector<double> out(n, 0.0);
    const double inv = 1.0 / static_cast<double>(channels.size());
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (const auto& ch : channels) acc += ch[i];
        out[i] = acc * inv;
    }
    return out;
}

inline AudioClip read_wav(const std::string& path) {
    WavData w = read_wav_channels(path);
    AudioClip clip{to_mono(w.channels), w.sample_rate_hz};
    return clip;
}

inline std::vector<unsigned char> encode_wav(const std::vector<std::vector<double>>& channels, int sample_rate_hz,
                                             SampleFormat fmt = SampleFormat::Pcm16) {
    require(!channels.empty() && channels.size() <= 2, ErrorCode::InvalidArgument, "1 or 2 channels required");
    require(sample_rate_hz > 0, ErrorCode::InvalidArgument, "sample rate must be positive");
    const std::size_t frames = channels.front().size();
    for (const auto& ch : channels)
        require(ch.size() == frames, ErrorCode::LengthMismatch, "channels differ in length");

    const int bits = detail::bits_of(fmt);
    const std::uint16_t nch = static_cast<std::uint16_t>(channels.size());
    const std::uint16_t block = static_cast<std::uint16_t>(nch * bits / 8);
    const std::uint32_t data_bytes = static_cast<std::uint32_t>(frames * block);

    std::vector<unsigned char> b;
    b.reserve(44 + data_bytes);
    detail::put_tag(b, "RIFF");
    detail::put32(b, 36 + data_bytes + (data_bytes & 1u));
    detail::put_tag(b, "WAVE");
    detail::put_tag(b, "fmt ");
    detail::put32(b, 16);
    detail::put16(b, fmt == SampleFormat::Float32 ? 3 : 1);
    detail::put16(b, nch);
    detail::put32(b, static_cast<std::uint32_t>(sample_rate_hz));
    detail::put32(b, static_cast<std::uint32_t>(sample_rate_hz) * block);
    detail::put16(b, block);
    detail::put16(b, static_cast<std::uint16_t>(bits));
    detail::put_tag(b, "data");
    detail::put32(b, data_bytes);

    auto quantize = [](double x, double scale, double lo, double hi) {
        return std::clamp(std::nearbyint(x * scale), lo, hi);
    };
    for (std::size_t i = 0; i < frames; ++i) {
        for (const auto& ch : channels) {
            const double x = std::isfinite(ch[i]) ? ch[i] : 0.0;
            switch (fmt) {
            case SampleFormat::Pcm8:
                b.push_back(static_cast<unsigned char>(quantize(x, 128.0, -128.0, 127.0) + 128));
                break;
            case SampleFormat::Pcm16:
                detail::put16(b, static_cast<std::uint16_t>(
                                     static_cast<std::int16_t>(quantize(x, 32768.0, -32768.0, 32767.0))));
                break;
            case SampleFormat::Pcm24: {
                const auto s = static_cast<std::int32_t>(quantize(x, 8388608.0, -8388608.0, 8388607.0));
                const auto u = static_cast<std::uint32_t>(s);
                b.push_back(static_cast<unsigned char>(u & 0xff));
                b.push_back(static_cast<unsigned char>((u >> 8) & 0xff));
                b.push_back(static_cast<unsigned char>((u >> 16) & 0xff));
                break;
            }
            case SampleFormat::Pcm32:
                detail::put32(b, static_cast<std::uint32_t>(static_cast<std::int32_t>(
                                     quantize(x, 2147483648.0, -2147483648.0, 2147483647.0))));
                break;
            case SampleFormat::Float32: {
                const float f = static_cast<float>(x);
                std::uint32_t u;
                std::memcpy(&u, &f, sizeof u);
                detail::put32(b, u);
                break;
            }
            }
        }
    }
    if (data_bytes & 1u) b.push_back(0);
    return b;
}

inline void write_wav(const std::string& path, const AudioClip& clip, SampleFormat fmt = SampleFormat::Pcm16) {
    const auto bytes = encode_wav({clip.samples}, clip.sample_rate_hz, fmt);
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot write WAV " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorCode::Io, "short write to " + path);
}

/// Linear-interpolation resampler. Output length is round(n * target / source).
inline AudioClip resample(const AudioClip& clip, int target_hz) {
    require(target_hz > 0, ErrorCode::InvalidArgument, "target sample rate must be positive");
    clip.validate();
    if (target_hz == clip.sample_rate_hz) return clip;
    const std::size_t n = clip.samples.size();
    const double ratio = static_cast<double>(clip.sample_rate_hz) / target_hz;
    const auto n_out = static_cast<std::size_t>(
        std::llround(static_cast<double>(n) * target_hz / clip.sample_rate_hz));
    AudioClip out{std::vector<double>(std::max<std::size_t>(n_out, 1)), target_hz};
    for (std::size_t i = 0; i < out.samples.size(); ++i) {
        const double pos = static_cast<double>(i) * ratio;
        const auto i0 = std::min(static_cast<std::size_t>(pos), n - 1);
        const std::size_t i1 = std::min(i0 + 1, n - 1);
        const double frac = pos - static_cast<double>(i0);
        const double x0 = clip.samples[i0];
        out.samples[i] = x0 + frac * (clip.samples[i1] - x0);
    }
    return out;
}

/// Zero-pads clips shorter than `min_samples` at the end. Returns true when
/// padding was applied so the caller can count it.
inline bool pad_to_min_length(AudioClip& clip, std::size_t min_samples) {
    if (clip.samples.size() >= min_samples) return false;
    clip.samples.resize(min_samples, 0.0);
    return true;
}

// ---------------------------------------------------------------------------
// Manifest

struct ClipRecord {
    std::string clip_id;
    std::string file_path;
    std::string participant_id;
    double cough_probability = 0.0;
    std::optional<int> label;
    std::optional<std::string> split_tag;
};

struct Manifest {
    std::vector<ClipRecord> records;
    std::map<std::string, TabularRecord> tabular;

    /// Checks unique clip ids and, when a tabular table is attached, that every
    /// participant resolves in it.
    void validate() const {
        std::set<std::string> ids;
        for (const auto& r : records) {
            require(ids.insert(r.clip_id).second, ErrorCode::DuplicateId, "duplicate clip_id " + r.clip_id);
            if (!tabular.empty())
                require(tabular.contains(r.participant_id), ErrorCode::UnresolvedParticipant,
                        "participant " + r.participant_id + " has no tabular record");
        }
    }
};

struct ManifestLoad {
    Manifest manifest;
    std::size_t total_rows = 0;
    std::size_t dropped = 0;
};

/// Reads the clip manifest and drops every row whose cough probability is
/// not strictly greater than `gate`.
inline ManifestLoad load_manifest(const std::string& manifest_path, double gate) {
    const auto table = csv::read(manifest_path);
    auto col = [&](const char* name) {
        auto c = table.column(name);
        require(c.has_value(), ErrorCode::MissingColumn, std::string("manifest lacks column ") + name);
        return *c;
    };
    const std::size_t c_id = col("clip_id"), c_path = col("file_path"), c_pid = col("participant_id"),
                      c_prob = col("cough_probability");
    const auto c_label = table.column("label");
    const auto c_split = table.column("split_tag");

    ManifestLoad out;
    std::set<std::string> seen;
    for (const auto& row : table.rows) {
        ++out.total_rows;
        ClipRecord r;
        r.clip_id = row[c_id];
        r.file_path = row[c_path];
        r.participant_id = row[c_pid];
        require(seen.insert(r.clip_id).second, ErrorCode::DuplicateId, "duplicate clip_id " + r.clip_id);
        const auto p = csv::parse_double(row[c_prob]);
        require(p.has_value() && *p >= 0.0 && *p <= 1.0, ErrorCode::ParseError,
                "bad cough_probability '" + row[c_prob] + "' for " + r.clip_id);
        r.cough_probability = *p;
        if (c_label && !row[*c_label].empty()) {
            const auto& l = row[*c_label];
            require(l == "0" || l == "1", ErrorCode::ParseError, "label must be 0 or 1 for " + r.clip_id);
            r.label = l == "1" ? 1 : 0;
        }
        if (c_split && !row[*c_split].empty()) r.split_tag = row[*c_split];
        if (r.cough_probability > gate) out.manifest.records.push_back(std::move(r));
        else ++out.dropped;
    }
    return out;
}

/// Resolves a manifest file_path relative to the manifest's directory unless
/// it is absolute.
inline std::string resolve_audio_path(const std::string& manifest_path, const std::string& file_path) {
    std::filesystem::path p(file_path);
    if (p.is_absolute()) return p.string();
    return (std::filesystem::path(manifest_path).parent_path() / p).string();
}

}  // namespace tbcough
