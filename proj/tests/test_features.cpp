#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "tbcough/features.hpp"
#include "tbcough/tabular.hpp"
#include "test_util.hpp"

using namespace tbcough;

namespace {

AudioClip tone(double hz, double amp, std::size_t n = 22050, int sr = 44100) {
    AudioClip clip{std::vector<double>(n), sr};
    for (std::size_t i = 0; i < n; ++i)
        clip.samples[i] = amp * std::sin(2 * std::numbers::pi * hz * static_cast<double>(i) / sr);
    return clip;
}

AudioClip noise(std::uint64_t seed, double sd, std::size_t n = 22050) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, sd);
    AudioClip clip{std::vector<double>(n), 44100};
    for (auto& v : clip.samples) v = g(rng);
    return clip;
}

}  // namespace

TEST(HzToMel, KnownValues) {
    EXPECT_EQ(hz_to_mel(0.0), 0.0);
    EXPECT_NEAR(hz_to_mel(700.0), 2595.0 * std::log10(2.0), 1e-9 * 781.0);
    EXPECT_NEAR(hz_to_mel(7000.0), 2595.0 * std::log10(11.0), 1e-9 * 2702.0);
    EXPECT_TB_ERROR(hz_to_mel(-1.0), ErrorCode::InvalidArgument);
}

TEST(HzToMel, MonotoneAndInvertible) {
    double prev = -1.0;
    for (double f = 1.0; f <= 20000.0; f *= 1.01) {
        const double m = hz_to_mel(f);
        EXPECT_GT(m, prev);
        prev = m;
        EXPECT_NEAR(mel_to_hz(m), f, 1e-9 * f);
    }
}

TEST(MelFilterbank, ShapeAndRows) {
    const MelParams p;
    const auto fb = mel_filterbank(p, 44100);
    ASSERT_EQ(fb.rows(), 128u);
    ASSERT_EQ(fb.cols(), 1025u);
    for (std::size_t m = 0; m < fb.rows(); ++m) {
        double sum = 0, best = -1;
        std::size_t n_best = 0;
        for (double v : fb.row(m)) {
            EXPECT_GE(v, 0.0);
            sum += v;
            if (v > best) { best = v; n_best = 1; }
            else if (v == best) ++n_best;
        }
        EXPECT_GT(sum, 0.0) << "row " << m;
        EXPECT_EQ(n_best, 1u) << "row " << m;
    }
}

TEST(MelFilterbank, PeaksEvenlySpacedInMel) {
    const MelParams p;
    const auto centers = mel_center_frequencies(p, 44100);
    ASSERT_EQ(centers.size(), 128u);
    const double step = hz_to_mel(22050.0) / 129.0;
    for (std::size_t i = 0; i < centers.size(); ++i)
        EXPECT_NEAR(hz_to_mel(centers[i]), step * static_cast<double>(i + 1), 1e-6);
}

TEST(MelFilterbank, FmaxBeyondNyquistRejected) {
    MelParams p;
    p.f_max_hz = 30000;
    EXPECT_TB_ERROR(mel_filterbank(p, 44100), ErrorCode::InvalidArgument);
}

TEST(MelSpectrogram, HalfSecondShape) {
    const auto m = mel_spectrogram_db(noise(1, 0.1), {});
    EXPECT_EQ(m.values.rows(), 128u);
    EXPECT_EQ(m.values.cols(), 44u);
    EXPECT_EQ(m.kind, FeatureKind::MelSpectrogramDb);
}

TEST(MelSpectrogram, SilenceHitsFloor) {
    AudioClip silent{std::vector<double>(22050, 0.0), 44100};
    for (double v : mel_spectrogram_db(silent).values.data()) EXPECT_EQ(v, -100.0);
}

TEST(MelSpectrogram, ToneLandsInItsBand) {
    const MelParams p;
    const auto edges = mel_band_edges_hz(p, 44100);
    const auto m = mel_spectrogram_db(tone(1000.0, 0.5), p);
    for (std::size_t t = 2; t + 2 < m.values.cols(); ++t) {
        std::size_t best = 0;
        for (std::size_t r = 0; r < m.values.rows(); ++r)
            if (m.values(r, t) > m.values(best, t)) best = r;
        EXPECT_LT(edges[best], 1000.0);
        EXPECT_GT(edges[best + 2], 1000.0);
    }
}

TEST(MelSpectrogram, TrailingSilenceLeavesEarlierFramesAlone) {
    const auto base = noise(3, 0.2, 11025);
    AudioClip longer = base;
    longer.samples.resize(22050, 0.0);
    const auto a = mel_spectrogram_db(base), b = mel_spectrogram_db(longer);
    // Frames whose window lies inside the original clip.
    std::size_t inside = 0;
    for (std::size_t t = 0; t < a.values.cols(); ++t) {
        if (t * 512 < 1024 || t * 512 + 1024 > base.size()) continue;
        ++inside;
        for (std::size_t r = 0; r < 128; ++r) EXPECT_NEAR(a.values(r, t), b.values(r, t), 1e-9);
    }
    EXPECT_GT(inside, 10u);
}

TEST(Dct, BasisIsOrthonormal) {
    const auto B = dct_ii_basis(128, 128);
    for (std::size_t i = 0; i < 128; ++i)
        for (std::size_t j = 0; j < 128; ++j) {
            double dot = 0;
            for (std::size_t k = 0; k < 128; ++k) dot += B(i, k) * B(j, k);
            EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-9);
        }
}

TEST(Dct, InverseRecovers) {
    std::mt19937_64 rng(5);
    const auto x = testutil::uniform_vector(rng, 128, -80, 0);
    EXPECT_LT(testutil::max_abs_diff(dct_iii(dct_ii(x)), x), 1e-9);
}

TEST(Mfcc, ConstantColumn) {
    FeatureMatrix logmel{Matrix<double>(128, 3, -42.0), FeatureKind::MelSpectrogramDb};
    const auto c = mfcc_from_log_mel(logmel, 20);
    ASSERT_EQ(c.values.rows(), 20u);
    for (std::size_t t = 0; t < 3; ++t) {
        EXPECT_NEAR(c.values(0, t), -42.0 * std::sqrt(128.0), 1e-9);
        for (std::size_t k = 1; k < 20; ++k) EXPECT_NEAR(c.values(k, t), 0.0, 1e-9);
    }
}

TEST(Mfcc, ShapeAndErrors) {
    const auto clip = noise(4, 0.1);
    const auto c = mfcc(clip, 20);
    EXPECT_EQ(c.values.rows(), 20u);
    EXPECT_EQ(c.values.cols(), 44u);
    EXPECT_TB_ERROR(mfcc(clip, 129), ErrorCode::InvalidArgument);
}

TEST(SpectralContrast, ShapeIsNineRows) {
    const auto c = spectral_contrast(noise(6, 0.1));
    EXPECT_EQ(c.values.rows(), 9u);
    EXPECT_EQ(c.values.cols(), 44u);
}

TEST(SpectralContrast, FlatSpectrumHasNoContrast) {
    Matrix<double> mag(1025, 5, 0.37);
    const auto c = spectral_contrast_from_magnitude(mag, 2048, 44100, {});
    for (double v : c.values.data()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(SpectralContrast, ToneBandStandsOut) {
    const ContrastParams cp;
    const auto bands = contrast_band_bins(cp, 2048, 44100);
    for (std::size_t k = 1; k < bands.size(); ++k) {
        // Bin-centred tone in the middle of band k over a faint noise floor.
        const auto bin = static_cast<double>((bands[k].first + bands[k].second) / 2);
        auto clip = noise(10 + k, 1e-3);
        const auto t = tone(bin * 44100 / 2048, 0.5);
        for (std::size_t i = 0; i < clip.size(); ++i) clip.samples[i] += t.samples[i];
        const auto c = spectral_contrast(clip, cp);
        std::vector<double> mean(c.values.rows(), 0.0);
        for (std::size_t r = 0; r < c.values.rows(); ++r)
            for (double v : c.values.row(r)) mean[r] += v / static_cast<double>(c.values.cols());
        for (std::size_t r = 0; r < mean.size(); ++r)
            if (r != k) {
                EXPECT_GT(mean[k], mean[r]) << "tone band " << k << " vs " << r;
            }
    }
}

TEST(SpectralContrast, NonnegativeAndScaleInvariant) {
    const auto clip = noise(7, 0.05);
    AudioClip loud = clip;
    for (auto& v : loud.samples) v *= 7.5;
    const auto a = spectral_contrast(clip), b = spectral_contrast(loud);
    for (std::size_t i = 0; i < a.values.data().size(); ++i) {
        EXPECT_GE(a.values.data()[i], 0.0);
        EXPECT_NEAR(a.values.data()[i], b.values.data()[i], 1e-6);
    }
}

TEST(SpectralContrast, BadQuantileRejected) {
    ContrastParams cp;
    cp.quantile = 0.6;
    EXPECT_TB_ERROR(spectral_contrast(noise(1, 0.1), cp), ErrorCode::InvalidArgument);
    cp.quantile = 0.0;
    EXPECT_TB_ERROR(spectral_contrast(noise(1, 0.1), cp), ErrorCode::InvalidArgument);
}

TEST(PoolFeatures, TrivialCases) {
    FeatureMatrix one{Matrix<double>(3, 1, std::vector<double>{1, 2, 3}), FeatureKind::Mfcc};
    EXPECT_EQ(pool_features(one), (std::vector<double>{1, 2, 3, 0, 0, 0}));
    FeatureMatrix flat{Matrix<double>(2, 5, 4.0), FeatureKind::Mfcc};
    EXPECT_EQ(pool_features(flat), (std::vector<double>{4, 4, 0, 0}));
}

TEST(PoolFeatures, MatchesLoopOracle) {
    std::mt19937_64 rng(8);
    FeatureMatrix m{Matrix<double>(9, 44, testutil::uniform_vector(rng, 9 * 44, -3, 3)),
                    FeatureKind::SpectralContrast};
    const auto pooled = pool_features(m);
    ASSERT_EQ(pooled.size(), 18u);
    for (std::size_t r = 0; r < 9; ++r) {
        long double s = 0, ss = 0;
        for (std::size_t c = 0; c < 44; ++c) s += m.values(r, c);
        const long double mu = s / 44;
        for (std::size_t c = 0; c < 44; ++c) ss += (m.values(r, c) - mu) * (m.values(r, c) - mu);
        EXPECT_NEAR(pooled[r], static_cast<double>(mu), 1e-12);
        EXPECT_NEAR(pooled[9 + r], static_cast<double>(std::sqrt(ss / 44)), 1e-12);
    }
}

TEST(ExtractFeatures, ShapesForHalfSecondClip) {
    const auto f = extract_features(noise(9, 0.1));
    EXPECT_EQ(f.mel.values.rows(), 128u);
    EXPECT_EQ(f.mel.values.cols(), 44u);
    EXPECT_EQ(f.mfcc.values.rows(), 20u);
    EXPECT_EQ(f.mfcc.values.cols(), 44u);
    EXPECT_EQ(f.contrast.values.rows(), 9u);
    EXPECT_EQ(f.contrast.values.cols(), 44u);
    EXPECT_EQ(pooled_acoustic_vector(f).size(), 2u * (128 + 20 + 9));
}

TEST(ExtractFeatures, AgreesWithSeparateOperations) {
    const auto clip = noise(10, 0.1);
    const auto f = extract_features(clip);
    const auto mel = mel_spectrogram_db(clip), mf = mfcc(clip, 20), sc = spectral_contrast(clip);
    // The combined path stores float precision.
    for (std::size_t i = 0; i < mel.values.data().size(); ++i)
        EXPECT_NEAR(f.mel.values.data()[i], mel.values.data()[i], 1e-4);
    for (std::size_t i = 0; i < mf.values.data().size(); ++i)
        EXPECT_NEAR(f.mfcc.values.data()[i], mf.values.data()[i], 1e-3);
    for (std::size_t i = 0; i < sc.values.data().size(); ++i)
        EXPECT_NEAR(f.contrast.values.data()[i], sc.values.data()[i], 1e-5);
}

TEST(FeatureCache, BinaryRoundTripIsExact) {
    testutil::TempDir dir("fcache");
    const auto f = extract_features(noise(11, 0.1));
    save_clip_features(dir.file("a.tbf"), f);
    EXPECT_EQ(load_clip_features(dir.file("a.tbf")), f);

    const auto bytes = testutil::read_file(dir.file("a.tbf"));
    ASSERT_GE(bytes.size(), 16u);
    EXPECT_EQ(bytes.substr(0, 4), "TBFM");
    EXPECT_EQ(bytes.size(), 3 * 16 + 4 * (128 * 44 + 20 * 44 + 9 * 44));
    testutil::write_file(dir.file("bad.tbf"), "XXXX" + bytes.substr(4));
    EXPECT_TB_ERROR(load_clip_features(dir.file("bad.tbf")), ErrorCode::MalformedHeader);
}

TEST(FeatureParams, HashTracksEveryParameter) {
    const FeatureParams base;
    EXPECT_EQ(feature_param_hash(base), feature_param_hash(FeatureParams{}));
    EXPECT_EQ(feature_param_hash(base).size(), 16u);
    FeatureParams a = base;
    a.mel.hop = 256;
    FeatureParams b = base;
    b.n_mfcc = 13;
    FeatureParams c = base;
    c.contrast.quantile = 0.05;
    EXPECT_NE(feature_param_hash(a), feature_param_hash(base));
    EXPECT_NE(feature_param_hash(b), feature_param_hash(base));
    EXPECT_NE(feature_param_hash(c), feature_param_hash(base));
    // Published FNV-1a test vector.
    EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

// ---------------------------------------------------------------------------
// Tabular encoding

TEST(EncodeRecord, YesNoAndOneHot) {
    const auto schema = default_clinical_schema();
    const auto slots = schema.slots();
    auto slot = [&](const std::string& label) {
        for (std::size_t i = 0; i < slots.size(); ++i)
            if (slots[i].label == label) return i;
        ADD_FAILURE() << "no slot " << label;
        return std::size_t{0};
    };
    TabularRecord r{"P1", {{"sex", "Female"}, {"age", "41"}, {"height_cm", "170"}, {"weight_kg", "60"},
                           {"heart_rate_bpm", "88"}, {"temperature_c", "37.1"}, {"cough_duration_days", "20"},
                           {"prior_tb_exposure", "No"}, {"ptb_diagnosis", "No"}, {"eptb_diagnosis", "No"},
                           {"weight_loss", "Yes"}, {"fever", "No"}, {"night_sweats", "yes"}, {"hemoptysis", "No"}}};
    const auto e = encode_record(r, schema);
    EXPECT_EQ(e.values[slot("weight_loss")], 1.0);
    EXPECT_EQ(e.values[slot("fever")], 0.0);
    EXPECT_EQ(e.values[slot("sex=Female")], 1.0);
    EXPECT_EQ(e.values[slot("sex=Male")], 0.0);
    EXPECT_EQ(e.values[slot("age")], 41.0);
    EXPECT_EQ(e.values.size(), schema.width());

    r.fields["weight_loss"] = "No";
    r.fields["sex"] = "Male";
    r.fields["age"] = "";
    const auto e2 = encode_record(r, schema);
    EXPECT_EQ(e2.values[slot("weight_loss")], 0.0);
    EXPECT_EQ(e2.values.size(), e.values.size());
    EXPECT_TRUE(std::isnan(e2.values[slot("age")]));
}

TEST(EncodeRecord, ThreeCategoryField) {
    const EncodingSchema schema({{"smoker", FieldKind::Categorical, {"never", "former", "current"}}});
    for (const char* v : {"never", "former", "current"}) {
        const auto e = encode_record({"p", {{"smoker", v}}}, schema);
        ASSERT_EQ(e.values.size(), 3u);
        EXPECT_EQ(e.values[0] + e.values[1] + e.values[2], 1.0);
    }
}

TEST(EncodeRecord, OutOfVocabularyIsAnError) {
    const EncodingSchema schema({{"fever", FieldKind::YesNo, {}}, {"sex", FieldKind::Categorical, {"Male", "Female"}}});
    EXPECT_TB_ERROR(encode_record({"p", {{"fever", "maybe"}, {"sex", "Male"}}}, schema), ErrorCode::OutOfVocabulary);
    EXPECT_TB_ERROR(encode_record({"p", {{"fever", "Yes"}, {"sex", "Other"}}}, schema), ErrorCode::OutOfVocabulary);
}

TEST(MinMax, EndpointsAndMidpoint) {
    const std::vector<double> train{3.0, 10.0, -2.0, 7.0};
    EXPECT_EQ(minmax_fit_apply(train, -2.0), 0.0);
    EXPECT_EQ(minmax_fit_apply(train, 10.0), 1.0);
    EXPECT_EQ(minmax_fit_apply(std::vector<double>{0.0, 10.0}, 5.0), 0.5);
    EXPECT_TB_ERROR(minmax_fit_apply(std::vector<double>{2.0, 2.0}, 1.0), ErrorCode::DegenerateColumn);
}

TEST(MinMax, MatchesLoopAndDoesNotClip) {
    std::mt19937_64 rng(12);
    const auto train = testutil::uniform_vector(rng, 1000, -5, 5);
    double lo = train[0], hi = train[0];
    for (double v : train) { lo = std::min(lo, v); hi = std::max(hi, v); }
    const auto probes = testutil::uniform_vector(rng, 100, -8, 8);
    bool outside = false;
    for (double x : probes) {
        const double y = minmax_fit_apply(train, x);
        EXPECT_NEAR(y, (x - lo) / (hi - lo), 1e-12);
        outside = outside || y < 0.0 || y > 1.0;
    }
    EXPECT_TRUE(outside);
}

TEST(TabularPreprocessor, ImputesMedianAndScales) {
    const std::vector<EncodedSlot> slots{{"age", "age", true}, {"fever", "fever", false}};
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const std::vector<std::vector<double>> rows{{10, 1}, {20, 0}, {nan, 1}, {40, 0}};
    const auto p = TabularPreprocessor::fit(rows, slots);
    EXPECT_EQ(p.medians()[0], 20.0);
    EXPECT_EQ(p.apply(std::vector<double>{nan, 1.0}), (std::vector<double>{1.0 / 3.0, 1.0}));
    EXPECT_EQ(p.apply(std::vector<double>{40, 0.0}), (std::vector<double>{1.0, 0.0}));
    EXPECT_GT(p.apply(std::vector<double>{70, 0.0})[0], 1.0);
}
