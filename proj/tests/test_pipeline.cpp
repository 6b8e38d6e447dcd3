#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <regex>
#include <set>

#include <gtest/gtest.h>

#include "tbcough/pipeline.hpp"
#include "test_util.hpp"

using namespace tbcough;
namespace fs = std::filesystem;

namespace {

// One small corpus shared by the suite: synthesized and extracted once.
class PipelineTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new testutil::TempDir("pipeline");
        auto c = base_config();
        c.set("synth_participants", "100");
        c.set("synth_clips", "2");
        c.set("out", dir_->path().string());
        std::ostringstream sink, out;
        Log log(sink);
        cmd_synth(c, out, log);
        const FeatureCache cache(base_config().str("cache_dir"), feature_params_from(base_config()));
        run_extract(base_config(), cache, log);
    }
    static void TearDownTestSuite() {
        delete dir_;
        dir_ = nullptr;
    }

    static Config base_config() {
        Config c;
        c.set("seed", "7");
        c.set("manifest", (dir_->path() / "manifest.csv").string());
        c.set("tabular", (dir_->path() / "tabular.csv").string());
        c.set("cache_dir", (dir_->path() / "cache").string());
        c.set("et_trees", "20");
        c.set("hgb_iter", "20");
        c.set("cnn_channels", "4,4,4,4,4,4");
        c.set("cnn_epochs", "1");
        c.set("cnn_lr", "1e-3");
        return c;
    }

    static std::string path(const std::string& name) { return (dir_->path() / name).string(); }

    std::ostringstream sink_;
    Log log_{sink_};
    static testutil::TempDir* dir_;
};

testutil::TempDir* PipelineTest::dir_ = nullptr;

std::map<std::string, std::string> read_tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = testutil::read_file(e.path());
    return out;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(TBCOUGH_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, DefaultsTypesAndOverrides) {
    Config c;
    EXPECT_EQ(c.real("gate"), 0.85);
    EXPECT_EQ(c.count("k"), 5u);
    EXPECT_EQ(c.str("model"), "extratrees");
    EXPECT_EQ(c.int_list("cnn_channels"), (std::vector<std::size_t>{16, 32, 64, 128, 256, 256}));
    EXPECT_THROW(c.seed(), UsageError);
    EXPECT_THROW(c.set("k", "five"), UsageError);
    EXPECT_THROW(c.set("gate", "nan"), UsageError);
    EXPECT_THROW(c.set("grouped", "maybe"), UsageError);
    EXPECT_THROW(c.set("cnn_channels", "8,,16"), UsageError);
    EXPECT_THROW(c.set("no_such_key", "1"), UsageError);

    const auto f = Config::from_text("# comment\nseed = 42\n  hop=256   # trailing\n\nmodel = hgb\n");
    EXPECT_EQ(f.seed(), 42u);
    EXPECT_EQ(f.count("hop"), 256u);
    EXPECT_EQ(f.str("model"), "hgb");
    EXPECT_THROW(Config::from_text("seed 42\n"), UsageError);
    auto g = f;
    g.set("model", "wavenet");
    EXPECT_THROW(checked_model_kind(g), UsageError);
}

TEST(Synth, CountsGateAndDeterminism) {
    testutil::TempDir a("synth_a"), b("synth_b");
    SyntheticSpec spec;
    spec.seed = 3;
    const auto m = synth_generate(spec, a.path().string());
    ASSERT_EQ(m.records.size(), 1000u);
    const auto pos = std::count_if(m.records.begin(), m.records.end(), [](const ClipRecord& r) { return r.label == 1; });
    EXPECT_EQ(pos, 600);
    for (const auto& r : m.records) EXPECT_GT(r.cough_probability, 0.85);
    const auto loaded = load_manifest((a.path() / "manifest.csv").string(), 0.85);
    EXPECT_EQ(loaded.dropped, 0u);
    EXPECT_EQ(loaded.manifest.records.size(), 1000u);

    spec.n_participants = 12;
    spec.clips_per_participant = 3;
    testutil::TempDir c("synth_c");
    synth_generate(spec, b.path().string());
    synth_generate(spec, c.path().string());
    const auto tb = read_tree(b.path()), tc = read_tree(c.path());
    EXPECT_EQ(tb.size(), 36u + 2u);
    EXPECT_TRUE(tb == tc);
    spec.seed = 4;
    testutil::TempDir d("synth_d");
    synth_generate(spec, d.path().string());
    EXPECT_FALSE(read_tree(d.path()) == tb);

    const auto clip = read_wav((a.path() / m.records.front().file_path).string());
    EXPECT_EQ(clip.sample_rate_hz, 44100);
    EXPECT_EQ(clip.samples.size(), 22050u);
}

TEST_F(PipelineTest, ExtractIsIdempotentAndKeyedByParameters) {
    auto c = base_config();
    const FeatureCache cache(c.str("cache_dir"), feature_params_from(c));
    const auto again = run_extract(c, cache, log_);
    EXPECT_EQ(again.total, 200u);
    EXPECT_EQ(again.hits, 200u);
    EXPECT_EQ(again.computed, 0u);

    c.set("hop", "256");
    const FeatureCache other(c.str("cache_dir"), feature_params_from(c));
    EXPECT_NE(other.hash(), cache.hash());
    const auto fresh = run_extract(c, other, log_);
    EXPECT_EQ(fresh.hits, 0u);
    EXPECT_EQ(fresh.computed, 200u);
    EXPECT_EQ(other.load(other.clip_path("P00_c00")).mel.values.cols(), 87u);
}

TEST_F(PipelineTest, CacheEqualsFreshExtraction) {
    const auto c = base_config();
    const FeatureCache cache(c.str("cache_dir"), feature_params_from(c));
    const auto load = load_gated_manifest(c);
    for (std::size_t i = 0; i < load.manifest.records.size(); i += 37) {
        const auto& r = load.manifest.records[i];
        const auto clip = load_analysis_clip(resolve_audio_path(c.str("manifest"), r.file_path), 2048);
        const auto f = extract_features(clip, cache.params());
        const auto cached = cache.load(cache.clip_path(r.clip_id));
        EXPECT_EQ(cached.mel.values.data(), f.mel.values.data());
        EXPECT_EQ(cached.mfcc.values.data(), f.mfcc.values.data());
        EXPECT_EQ(cached.contrast.values.data(), f.contrast.values.data());
    }
}

TEST_F(PipelineTest, ParallelExtractionWritesSameBytes) {
    auto c = base_config();
    c.set("cache_dir", path("cache_jobs"));
    c.set("jobs", "3");
    const FeatureCache cache(c.str("cache_dir"), feature_params_from(c));
    run_extract(c, cache, log_);
    const auto serial = read_tree(fs::path(base_config().str("cache_dir")) / cache.hash() / "clips");
    const auto parallel = read_tree(fs::path(c.str("cache_dir")) / cache.hash() / "clips");
    EXPECT_EQ(serial.size(), 200u);
    EXPECT_TRUE(serial == parallel);
}

TEST_F(PipelineTest, CorpusAndShuffledLabels) {
    auto c = base_config();
    const FeatureCache cache(c.str("cache_dir"), feature_params_from(c));
    const auto corpus = load_corpus(c, cache);
    EXPECT_EQ(corpus.records.size(), 200u);
    EXPECT_EQ(std::count(corpus.labels.begin(), corpus.labels.end(), 1), 120);
    ASSERT_EQ(corpus.tabular.size(), 200u);
    c.set("shuffle_labels", "true");
    const auto shuffled = load_corpus(c, cache);
    EXPECT_NE(shuffled.labels, corpus.labels);
    EXPECT_EQ(std::count(shuffled.labels.begin(), shuffled.labels.end(), 1), 120);
    EXPECT_EQ(shuffled.labels, load_corpus(c, cache).labels);
}

TEST_F(PipelineTest, AugmentationStaysInTrainingFolds) {
    const auto c = base_config();
    const FeatureCache cache(c.str("cache_dir"), feature_params_from(c));
    const auto corpus = load_corpus(c, cache);
    const auto fa = stratified_kfold(corpus.labels, corpus.groups, 5, c.seed());
    Augmenter aug(c, cache, log_);
    for (int f = 0; f < 2; ++f) {
        const auto train_idx = fa.train_indices(f);
        std::set<std::string> held_out;
        for (std::size_t i : fa.test_indices(f)) held_out.insert(corpus.records[i].clip_id);
        std::vector<std::string> ids;
        std::vector<int> labels;
        for (std::size_t i : train_idx) {
            ids.push_back(corpus.records[i].clip_id);
            labels.push_back(corpus.labels[i]);
        }
        const auto plan = aug.plan_for(ids, plan_seed_for_fold(c.seed(), f));
        EXPECT_EQ(plan.assignments.size(), ids.size() / 2);
        for (const auto& a : plan.assignments) EXPECT_FALSE(held_out.contains(a.clip_id)) << a.clip_id;
        const auto augmented = aug.features_for(plan, corpus);
        const auto train = build_training_set(corpus, train_idx, labels, augmented, &plan);
        ASSERT_EQ(train.labels.size(), ids.size() + plan.assignments.size());
        std::map<std::string, int> label_of;
        for (std::size_t j = 0; j < ids.size(); ++j) label_of[ids[j]] = labels[j];
        for (std::size_t a = 0; a < plan.assignments.size(); ++a)
            EXPECT_EQ(train.labels[ids.size() + a], label_of.at(plan.assignments[a].clip_id));
        // Augmented features are real modifications of their source clip.
        const auto& a0 = plan.assignments.front();
        const auto src = std::find(ids.begin(), ids.end(), a0.clip_id) - ids.begin();
        EXPECT_NE(train.features[ids.size()]->mel.values.data(), train.features[static_cast<std::size_t>(src)]->mel.values.data());
    }
}

TEST_F(PipelineTest, ScalersFitOnTrainingRowsOnly) {
    const auto c = base_config();
    const FeatureCache cache(c.str("cache_dir"), feature_params_from(c));
    const auto corpus = load_corpus(c, cache);
    std::vector<std::vector<double>> rows(corpus.tabular.begin(), corpus.tabular.begin() + 100);
    const auto pre = TabularPreprocessor::fit(rows, corpus.tabular_slots);
    bool outside = false;
    for (std::size_t i = 100; i < corpus.tabular.size(); ++i)
        for (double v : pre.apply(corpus.tabular[i])) outside |= v < 0.0 || v > 1.0;
    EXPECT_TRUE(outside);
}

TEST_F(PipelineTest, CnnImageIsStandardizedAndPadded) {
    const auto c = base_config();
    const FeatureCache cache(c.str("cache_dir"), feature_params_from(c));
    const auto f = cache.load(cache.clip_path("P01_c01"));
    ASSERT_EQ(f.mel.values.cols(), 44u);
    const auto img = prepare_cnn_image(f, 128, 64, false);
    ASSERT_EQ(img.size(), 128u * 64);
    double s = 0, ss = 0;
    for (std::size_t r = 0; r < 128; ++r)
        for (std::size_t t = 0; t < 64; ++t) {
            const double v = img[r * 64 + t];
            if (t >= 44) {
                EXPECT_EQ(v, 0.0);
                continue;
            }
            s += v;
            ss += v * v;
        }
    EXPECT_NEAR(s / (128 * 44), 0.0, 1e-5);
    EXPECT_NEAR(ss / (128 * 44), 1.0, 1e-4);
    EXPECT_EQ(prepare_cnn_image(f, 128, 64, true).size(), 2u * 128 * 64);
    EXPECT_TB_ERROR(prepare_cnn_image(f, 64, 64, false), ErrorCode::ShapeMismatch);
}

TEST_F(PipelineTest, TrainWritesModelAndReport) {
    auto c = base_config();
    c.set("out", path("et_model.json"));
    std::ostringstream out;
    EXPECT_EQ(cmd_train(c, out, log_), 0);
    ASSERT_TRUE(fs::exists(path("et_model.json")));
    const auto rep = nlohmann::json::parse(testutil::read_file(path("et_model.report.json")));
    ASSERT_TRUE(rep.at("reports").at(0).contains("auroc"));
    const double a = rep["reports"][0]["auroc"].get<double>();
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
    EXPECT_EQ(rep.at("n_augmented").get<std::size_t>(), rep.at("n_train_clips").get<std::size_t>() / 2);
    EXPECT_NE(out.str().find("extratrees"), std::string::npos);
    const auto env = nlohmann::json::parse(testutil::read_file(path("et_model.json")));
    for (const char* k : {"format_version", "model_kind", "feature_param_hash", "created_by_seed", "payload"})
        EXPECT_TRUE(env.contains(k)) << k;

    c.set("model", "extra_trees");
    EXPECT_THROW(cmd_train(c, out, log_), UsageError);
}

TEST_F(PipelineTest, SavedModelsPredictBitwiseIdentically) {
    const auto c = base_config();
    const auto fp = feature_params_from(c);
    const FeatureCache cache(c.str("cache_dir"), fp);
    const auto corpus = load_corpus(c, cache);
    std::vector<std::size_t> idx(corpus.records.size());
    std::iota(idx.begin(), idx.end(), 0);
    const auto train = build_training_set(corpus, idx, corpus.labels, {}, nullptr);
    std::vector<const ClipFeatures*> probes;
    std::vector<const std::vector<double>*> tab;
    for (std::size_t i = 0; i < 100; ++i) {
        probes.push_back(&corpus.features[2 * i]);
        tab.push_back(&corpus.tabular[2 * i]);
    }
    for (const std::string kind : {"extratrees", "hgb", "cnn", "ensemble"}) {
        const auto fit = fit_bundle(kind, c, fp, train, corpus.tabular_slots, 11, log_);
        const auto file = path("rt_" + kind + ".json");
        save_model(file, fit.bundle);
        const auto loaded = load_model(file);
        EXPECT_EQ(loaded.kind, kind);
        EXPECT_EQ(predict_bundle(loaded, probes, tab), predict_bundle(fit.bundle, probes, tab)) << kind;
        for (double p : predict_bundle(loaded, probes, tab)) {
            EXPECT_GE(p, 0.0);
            EXPECT_LE(p, 1.0);
        }
    }
    testutil::write_file(path("broken.json"), "{\"format_version\": 1}");
    EXPECT_TB_ERROR(load_model(path("broken.json")), ErrorCode::ParseError);
    EXPECT_TB_ERROR(load_model(path("absent.json")), ErrorCode::MissingFile);
}

TEST_F(PipelineTest, CrossValidationReportsAndDeterminism) {
    auto c = base_config();
    c.set("out", path("cv_a.json"));
    std::ostringstream out;
    EXPECT_EQ(cmd_cv(c, out, log_), 0);
    const auto j = nlohmann::json::parse(testutil::read_file(path("cv_a.json")));
    EXPECT_EQ(j.at("folds").size(), 5u);
    EXPECT_TRUE(j.contains("mean_auroc"));
    EXPECT_TRUE(j.contains("std_auroc"));
    EXPECT_GE(j["mean_auroc"].get<double>(), 0.9);
    EXPECT_NE(out.str().find("mean"), std::string::npos);

    c.set("out", path("cv_b.json"));
    cmd_cv(c, out, log_);
    EXPECT_EQ(testutil::read_file(path("cv_a.json")), testutil::read_file(path("cv_b.json")));

    c.set("k", "41");
    try {
        cmd_cv(c, out, log_);
        ADD_FAILURE() << "expected TooFewGroups";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::TooFewGroups);
        EXPECT_NE(std::string(e.what()).find("k=41"), std::string::npos) << e.what();
    }
}

TEST_F(PipelineTest, InferRangeLatencyAndHashCheck) {
    auto c = base_config();
    c.set("out", path("infer_model.json"));
    c.set("augment", "false");
    std::ostringstream train_out;
    cmd_train(c, train_out, log_);
    c.set("model_file", path("infer_model.json"));
    c.set("wav", (dir_->path() / "audio" / "P03_c00.wav").string());
    c.set("participant", "P03");
    std::ostringstream out;
    EXPECT_EQ(cmd_infer(c, out, log_), 0);
    std::smatch m;
    const auto text = out.str();
    ASSERT_TRUE(std::regex_search(text, m, std::regex(R"(probability (\d\.\d{4})\n)"))) << text;
    const double p = std::stod(m[1]);
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
    ASSERT_TRUE(std::regex_search(text, m, std::regex(R"(latency_ms ([0-9.]+))")));
    EXPECT_LT(std::stod(m[1]), 1000.0);

    c.set("n_mels", "64");
    EXPECT_TB_ERROR(cmd_infer(c, out, log_), ErrorCode::HashMismatch);
    c.set("n_mels", "128");
    c.set("participant", "");
    EXPECT_THROW(cmd_infer(c, out, log_), UsageError);
}

TEST_F(PipelineTest, CliExitCodes) {
    const auto mf = base_config().str("manifest");
    EXPECT_EQ(run_cli(""), 2);
    EXPECT_EQ(run_cli("bogus"), 2);
    EXPECT_EQ(run_cli("train --seed 1 --model nope --manifest " + mf), 2);
    EXPECT_EQ(run_cli("extract --manifest " + mf), 2);  // no seed
    EXPECT_EQ(run_cli("extract --seed 1 --manifest " + path("missing.csv")), 1);
    EXPECT_EQ(run_cli("synth --seed 1 --synth-participants 4 --synth-clips 1 --out " + path("cli_synth")), 0);
    EXPECT_TRUE(fs::exists(path("cli_synth/manifest.csv")));
    testutil::write_file(path("cli.conf"), "seed = 5\nsynth_participants = 4\nsynth_clips = 1\n");
    EXPECT_EQ(run_cli("synth --config " + path("cli.conf") + " --out " + path("cli_synth2")), 0);
    EXPECT_EQ(testutil::read_file(path("cli_synth2/manifest.csv")).empty(), false);
    EXPECT_EQ(run_cli("synth --config " + path("absent.conf")), 2);
}
