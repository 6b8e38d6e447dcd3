#pragma once

#include <atomic>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tbcough/audio_io.hpp"
#include "tbcough/augmentation.hpp"
#include "tbcough/cnn.hpp"
#include "tbcough/csv.hpp"
#include "tbcough/error.hpp"
#include "tbcough/evaluation.hpp"
#include "tbcough/features.hpp"
#include "tbcough/model_io.hpp"
#include "tbcough/synth.hpp"
#include "tbcough/tabular.hpp"
#include "tbcough/trees.hpp"

namespace tbcough {

/// Bad invocation or configuration; the CLI maps it to exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration

enum class KeyType { String, Int, Real, Bool, IntList };

struct ConfigKey {
    const char* name;
    KeyType type;
    const char* default_value;  // empty string: no default
    const char* help;
};

inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"seed", KeyType::Int, "", "random seed (required)"},
        {"jobs", KeyType::Int, "1", "worker threads"},
        {"out", KeyType::String, "", "output path (verb specific)"},
        {"data_dir", KeyType::String, "data", "synth output directory"},
        {"manifest", KeyType::String, "data/manifest.csv", "clip manifest CSV"},
        {"tabular", KeyType::String, "data/tabular.csv", "clinical CSV (empty to disable)"},
        {"cache_dir", KeyType::String, "cache", "feature cache directory"},
        {"gate", KeyType::Real, "0.85", "drop clips with cough_probability <= gate"},
        {"model", KeyType::String, "extratrees", "extratrees | hgb | cnn | ensemble"},
        {"model_file", KeyType::String, "model.json", "model path for infer"},
        {"wav", KeyType::String, "", "audio file for infer"},
        {"participant", KeyType::String, "", "participant id for infer (tabular row)"},
        {"report", KeyType::String, "", "report JSON path (default derived from out)"},
        {"k", KeyType::Int, "5", "cross-validation folds"},
        {"grouped", KeyType::Bool, "true", "keep each participant's clips in one fold"},
        {"holdout_folds", KeyType::Int, "5", "train holds out one fold of this many (5 = 80/20)"},
        {"threshold", KeyType::Real, "0.5", "decision threshold for confusion counts"},
        {"shuffle_labels", KeyType::Bool, "false", "permute clip labels (null control)"},
        {"use_tabular", KeyType::Bool, "true", "append clinical vector to tree features"},
        // features
        {"n_fft", KeyType::Int, "2048", "STFT size"},
        {"hop", KeyType::Int, "512", "STFT hop"},
        {"n_mels", KeyType::Int, "128", "mel bands"},
        {"f_min", KeyType::Real, "0", "lowest mel frequency"},
        {"f_max", KeyType::Real, "0", "highest mel frequency (0 = Nyquist)"},
        {"n_mfcc", KeyType::Int, "20", "MFCC coefficients"},
        {"contrast_bands", KeyType::Int, "8", "spectral contrast octave bands"},
        {"contrast_quantile", KeyType::Real, "0.02", "spectral contrast peak/valley quantile"},
        {"contrast_fmin", KeyType::Real, "80", "lowest contrast band edge"},
        // augmentation
        {"augment", KeyType::Bool, "true", "augment training clips"},
        {"augment_fraction", KeyType::Real, "0.5", "share of training clips augmented"},
        {"augment_split", KeyType::Real, "0.5", "share of augmented clips given noise (rest IR)"},
        {"noise_ratio_low", KeyType::Real, "0.0", "lowest noise amplitude ratio"},
        {"noise_ratio_high", KeyType::Real, "0.9", "highest noise amplitude ratio"},
        {"ir_pool_size", KeyType::Int, "6", "measured room responses"},
        // synth
        {"synth_participants", KeyType::Int, "100", "synthetic participants"},
        {"synth_clips", KeyType::Int, "10", "clips per synthetic participant"},
        {"synth_positive_fraction", KeyType::Real, "0.6", "share of positive participants"},
        // extra-trees
        {"et_trees", KeyType::Int, "300", "number of trees"},
        {"et_max_depth", KeyType::Int, "0", "depth limit (0 = none)"},
        {"et_min_leaf", KeyType::Int, "2", "min samples per leaf"},
        {"et_k_features", KeyType::Int, "0", "features tried per node (0 = ceil sqrt d)"},
        // boosting
        {"hgb_iter", KeyType::Int, "200", "boosting stages"},
        {"hgb_lr", KeyType::Real, "0.1", "shrinkage"},
        {"hgb_max_depth", KeyType::Int, "6", "depth limit"},
        {"hgb_max_leaf", KeyType::Int, "31", "leaves per stage"},
        {"hgb_l2", KeyType::Real, "1.0", "leaf L2 penalty"},
        {"hgb_min_leaf", KeyType::Int, "20", "min samples per leaf"},
        {"hgb_bins", KeyType::Int, "256", "histogram bins"},
        // cnn
        {"cnn_channels", KeyType::IntList, "16,32,64,128,256,256", "channels per conv block"},
        {"cnn_epochs", KeyType::Int, "150", "training epochs"},
        {"cnn_batch", KeyType::Int, "16", "mini-batch size"},
        {"cnn_lr", KeyType::Real, "6e-5", "one-cycle peak learning rate"},
        {"cnn_dropout", KeyType::Real, "0.25", "dropout rate"},
        {"cnn_weight_decay", KeyType::Real, "0.01", "AdamW decoupled weight decay"},
        {"cnn_pct_start", KeyType::Real, "0.3", "one-cycle warm-up share"},
        {"cnn_stack_mfcc", KeyType::Bool, "false", "add MFCC as a second input channel"},
        {"cnn_width", KeyType::Int, "64", "padded time frames of the input image"},
    };
    return keys;
}

inline const ConfigKey* find_key(const std::string& name) {
    for (const auto& k : config_keys())
        if (name == k.name) return &k;
    return nullptr;
}

class Config {
public:
    Config() {
        for (const auto& k : config_keys())
            if (*k.default_value) values_[k.name] = k.default_value;
    }

    /// Parses `key = value` lines; '#' starts a comment.
    static Config from_text(const std::string& text, const std::string& origin = "config") {
        Config c;
        std::istringstream is(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
            line = csv::trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw UsageError(origin + ":" + std::to_string(lineno) + ": expected key = value");
            c.set(csv::trim(line.substr(0, eq)), csv::trim(line.substr(eq + 1)));
        }
        return c;
    }

    static Config from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw UsageError("cannot read config file " + path);
        std::stringstream ss;
        ss << is.rdbuf();
        return from_text(ss.str(), path);
    }

    void set(const std::string& key, const std::string& value) {
        const ConfigKey* k = find_key(key);
        if (!k) throw UsageError("unknown config key '" + key + "'");
        check_type(*k, value);
        values_[key] = value;
    }

    bool has(const std::string& key) const { return values_.contains(key) && !values_.at(key).empty(); }

    std::string str(const std::string& key) const {
        auto it = values_.find(key);
        return it == values_.end() ? std::string{} : it->second;
    }
    long long integer(const std::string& key) const { return std::stoll(required(key)); }
    std::size_t count(const std::string& key) const {
        const auto v = integer(key);
        if (v < 0) throw UsageError("config key '" + key + "' must be >= 0");
        return static_cast<std::size_t>(v);
    }
    double real(const std::string& key) const { return *csv::parse_double(required(key)); }
    bool flag(const std::string& key) const {
        const auto v = required(key);
        return v == "true" || v == "1" || v == "yes";
    }
    std::vector<std::size_t> int_list(const std::string& key) const {
        std::vector<std::size_t> out;
        std::stringstream ss(required(key));
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(std::stoull(csv::trim(item)));
        return out;
    }
    std::uint64_t seed() const {
        if (!has("seed")) throw UsageError("a seed is required (--seed or 'seed =' in the config file)");
        return std::stoull(str("seed"));
    }

private:
    std::string required(const std::string& key) const {
        if (!has(key)) throw UsageError("config key '" + key + "' has no value");
        return str(key);
    }

    static void check_type(const ConfigKey& k, const std::string& v) {
        auto bad = [&] { throw UsageError("config key '" + std::string(k.name) + "' has invalid value '" + v + "'"); };
        switch (k.type) {
        case KeyType::String:
            break;
        case KeyType::Int: {
            long long x;
            const auto* e = v.data() + v.size();
            auto [p, ec] = std::from_chars(v.data(), e, x);
            if (ec != std::errc() || p != e) bad();
            break;
        }
        case KeyType::Real: {
            const auto d = csv::parse_double(v);
            if (!d || !std::isfinite(*d)) bad();
            break;
        }
        case KeyType::Bool:
            if (v != "true" && v != "false" && v != "1" && v != "0" && v != "yes" && v != "no") bad();
            break;
        case KeyType::IntList: {
            std::stringstream ss(v);
            std::string item;
            bool any = false;
            while (std::getline(ss, item, ',')) {
                item = csv::trim(item);
                if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) bad();
                any = true;
            }
            if (!any) bad();
            break;
        }
        }
    }

    std::map<std::string, std::string> values_;
};

inline FeatureParams feature_params_from(const Config& c) {
    FeatureParams p;
    p.mel.n_fft = c.count("n_fft");
    p.mel.hop = c.count("hop");
    p.mel.n_mels = c.count("n_mels");
    p.mel.f_min_hz = c.real("f_min");
    p.mel.f_max_hz = c.real("f_max");
    p.n_mfcc = c.count("n_mfcc");
    p.contrast.n_bands = c.count("contrast_bands");
    p.contrast.quantile = c.real("contrast_quantile");
    p.contrast.f_min_hz = c.real("contrast_fmin");
    return p;
}

inline ExtraTreesParams extratrees_params_from(const Config& c, std::uint64_t seed) {
    ExtraTreesParams p;
    p.n_trees = c.count("et_trees");
    p.max_depth = c.count("et_max_depth");
    p.min_samples_leaf = c.count("et_min_leaf");
    p.k_features = c.count("et_k_features");
    p.n_jobs = std::max<std::size_t>(1, c.count("jobs"));
    p.seed = seed;
    return p;
}

inline HgbParams hgb_params_from(const Config& c) {
    HgbParams p;
    p.n_iter = c.count("hgb_iter");
    p.learning_rate = c.real("hgb_lr");
    p.max_depth = c.count("hgb_max_depth");
    p.max_leaf = c.count("hgb_max_leaf");
    p.l2 = c.real("hgb_l2");
    p.min_samples_leaf = c.count("hgb_min_leaf");
    p.n_bins = c.count("hgb_bins");
    return p;
}

inline CnnConfig cnn_config_from(const Config& c, const FeatureParams& fp) {
    CnnConfig cfg;
    cfg.channels = c.int_list("cnn_channels");
    cfg.epochs = c.count("cnn_epochs");
    cfg.batch_size = c.count("cnn_batch");
    cfg.max_lr = c.real("cnn_lr");
    cfg.dropout = c.real("cnn_dropout");
    cfg.weight_decay = c.real("cnn_weight_decay");
    cfg.pct_start = c.real("cnn_pct_start");
    cfg.in_channels = c.flag("cnn_stack_mfcc") ? 2 : 1;
    cfg.input_h = fp.mel.n_mels;
    cfg.input_w = c.count("cnn_width");
    return cfg;
}

inline const std::vector<std::string>& model_kinds() {
    static const std::vector<std::string> kinds = {"extratrees", "hgb", "cnn", "ensemble"};
    return kinds;
}

inline std::string checked_model_kind(const Config& c) {
    const auto m = c.str("model");
    for (const auto& k : model_kinds())
        if (k == m) return m;
    throw UsageError("invalid model '" + m + "' (expected extratrees, hgb, cnn or ensemble)");
}

// ---------------------------------------------------------------------------
// Logging and small helpers

class Log {
public:
    explicit Log(std::ostream& os) : os_(os), start_(std::chrono::steady_clock::now()) {}
    template <typename... A>
    void info(const A&... parts) {
        const double s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        std::lock_guard lock(mu_);
        os_ << '[' << std::fixed << std::setprecision(1) << std::setw(7) << s << "s] ";
        (os_ << ... << parts);
        os_ << '\n';
    }

private:
    std::ostream& os_;
    std::chrono::steady_clock::time_point start_;
    std::mutex mu_;
};

inline std::string safe_file_stem(const std::string& id) {
    std::string s = id;
    for (char& c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') c = '_';
    return s + "_" + fnv1a_hex(id).substr(0, 8);
}

/// Writes via a temporary file and rename so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    const auto tmp = path.string() + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    {
        std::ofstream os(tmp, std::ios::binary);
        require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + tmp);
        body(os);
        require(static_cast<bool>(os), ErrorCode::Io, "write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path, ec);
    require(!ec, ErrorCode::Io, "cannot rename " + tmp + ": " + ec.message());
}

/// Reads a WAV and brings it to the analysis rate and a minimum length of
/// one FFT frame.
inline AudioClip load_analysis_clip(const std::string& path, std::size_t n_fft) {
    AudioClip clip = read_wav(path);
    if (clip.sample_rate_hz != kDefaultSampleRate) clip = resample(clip, kDefaultSampleRate);
    pad_to_min_length(clip, n_fft);
    return clip;
}

// ---------------------------------------------------------------------------
// Feature cache

class FeatureCache {
public:
    FeatureCache(std::string dir, const FeatureParams& p)
        : params_(p), hash_(feature_param_hash(p)), root_(std::filesystem::path(dir) / hash_) {}

    const std::string& hash() const noexcept { return hash_; }
    const FeatureParams& params() const noexcept { return params_; }
    std::filesystem::path clip_path(const std::string& clip_id) const {
        return root_ / "clips" / (safe_file_stem(clip_id) + ".tbf");
    }
    std::filesystem::path augmented_path(const std::string& key) const {
        return root_ / "augmented" / (safe_file_stem(key) + ".tbf");
    }

    bool contains(const std::filesystem::path& p) const { return std::filesystem::exists(p); }

    void store(const std::filesystem::path& p, const ClipFeatures& f) const {
        write_file_atomic(p, [&](std::ostream& os) {
            write_feature_matrix(os, f.mel);
            write_feature_matrix(os, f.mfcc);
            write_feature_matrix(os, f.contrast);
        });
    }

    ClipFeatures load(const std::filesystem::path& p) const {
        std::ifstream is(p, std::ios::binary);
        require(static_cast<bool>(is), ErrorCode::MissingFile,
                "feature cache entry missing: " + p.string() + " (run 'extract' first)");
        ClipFeatures f;
        f.mel = read_feature_matrix(is);
        f.mfcc = read_feature_matrix(is);
        f.contrast = read_feature_matrix(is);
        return f;
    }

    void write_params_file() const {
        write_file_atomic(root_ / "params.txt", [&](std::ostream& os) { os << params_.canonical() << '\n'; });
    }

private:
    FeatureParams params_;
    std::string hash_;
    std::filesystem::path root_;
};

struct ExtractStats {
    std::size_t total = 0;
    std::size_t hits = 0;
    std::size_t computed = 0;
    std::size_t failed = 0;
};

// ---------------------------------------------------------------------------
// Dataset assembly

/// Gated, labeled clips with their cached features and encoded clinical rows.
struct Corpus {
    std::string manifest_path;
    std::vector<ClipRecord> records;
    std::vector<ClipFeatures> features;
    std::vector<std::vector<double>> tabular;  // encoded, NaN = missing; empty rows when disabled
    std::vector<EncodedSlot> tabular_slots;
    std::vector<int> labels;
    std::vector<std::string> groups;
};

inline ManifestLoad load_gated_manifest(const Config& c) {
    const auto path = c.str("manifest");
    if (!std::filesystem::exists(path)) fail(ErrorCode::MissingFile, "manifest not found: " + path);
    auto load = load_manifest(path, c.real("gate"));
    if (c.flag("use_tabular") && c.has("tabular")) load.manifest.tabular = load_tabular(c.str("tabular"));
    load.manifest.validate();
    return load;
}

inline Corpus load_corpus(const Config& c, const FeatureCache& cache, bool require_labels = true) {
    auto load = load_gated_manifest(c);
    Corpus corpus;
    corpus.manifest_path = c.str("manifest");
    const bool tab = c.flag("use_tabular") && !load.manifest.tabular.empty();
    const auto schema = default_clinical_schema();
    if (tab) corpus.tabular_slots = schema.slots();
    for (auto& r : load.manifest.records) {
        if (require_labels)
            require(r.label.has_value(), ErrorCode::ParseError, "clip " + r.clip_id + " has no label");
        corpus.features.push_back(cache.load(cache.clip_path(r.clip_id)));
        if (tab)
            corpus.tabular.push_back(encode_record(load.manifest.tabular.at(r.participant_id), schema).values);
        corpus.labels.push_back(r.label.value_or(0));
        corpus.groups.push_back(r.participant_id);
        corpus.records.push_back(std::move(r));
    }
    require(!corpus.records.empty(), ErrorCode::InvalidArgument, "no clips pass the gate");
    if (c.flag("shuffle_labels")) {
        std::mt19937_64 rng(child_seed(c.seed(), 0x5bu));
        std::shuffle(corpus.labels.begin(), corpus.labels.end(), rng);
    }
    return corpus;
}

/// Training rows: indices into the corpus plus augmented copies that share
/// their source clip's label, participant and clinical row.
struct TrainingSet {
    std::vector<const ClipFeatures*> features;
    std::vector<const std::vector<double>*> tabular;
    std::vector<int> labels;
    std::vector<std::vector<double>> base_tabular;  // for fitting the preprocessor
};

class Augmenter {
public:
    Augmenter(const Config& c, const FeatureCache& cache, Log& log)
        : cfg_(c), cache_(cache), log_(log), seed_(c.seed()) {}

    bool enabled() const { return cfg_.flag("augment"); }

    AugmentationPlan plan_for(const std::vector<std::string>& train_ids, std::uint64_t plan_seed) const {
        PlanOptions opt;
        opt.fraction = cfg_.real("augment_fraction");
        opt.method_split = cfg_.real("augment_split");
        opt.ratio_low = cfg_.real("noise_ratio_low");
        opt.ratio_high = cfg_.real("noise_ratio_high");
        return plan_augmentation(train_ids, opt, cfg_.count("ir_pool_size"), plan_seed);
    }

    /// Features for each assignment, computed once and then served from the cache.
    std::vector<ClipFeatures> features_for(const AugmentationPlan& plan, const Corpus& corpus) {
        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < corpus.records.size(); ++i) index[corpus.records[i].clip_id] = i;
        std::vector<ClipFeatures> out(plan.assignments.size());
        std::atomic<std::size_t> computed{0};
        std::mutex err_mu;
        std::optional<Error> first_error;
        detail::parallel_for(plan.assignments.size(), std::max<std::size_t>(1, cfg_.count("jobs")), [&](std::size_t i) {
            try {
                const auto& a = plan.assignments[i];
                const auto path = cache_.augmented_path(cache_key(a));
                if (cache_.contains(path)) {
                    out[i] = cache_.load(path);
                    return;
                }
                const auto& rec = corpus.records.at(index.at(a.clip_id));
                const auto clip = load_analysis_clip(resolve_audio_path(corpus.manifest_path, rec.file_path),
                                                     cache_.params().mel.n_fft);
                out[i] = extract_features(apply_assignment(clip, a, ir_pool()), cache_.params());
                cache_.store(path, out[i]);
                ++computed;
            } catch (const Error& e) {
                std::lock_guard lock(err_mu);
                if (!first_error) first_error = e;
            }
        });
        if (first_error) throw *first_error;
        if (computed > 0) log_.info("augmented ", computed.load(), " clips (", plan.assignments.size(), " planned)");
        return out;
    }

    const std::vector<ImpulseResponse>& ir_pool() {
        std::call_once(pool_once_, [&] {
            pool_ = measured_room_ir_pool(cfg_.count("ir_pool_size"), kDefaultSampleRate, ir_seed(), EssParams{});
        });
        return pool_;
    }

private:
    std::uint64_t ir_seed() const { return child_seed(seed_, 0x1eu); }

    std::string cache_key(const AugmentAssignment& a) const {
        std::ostringstream os;
        os.precision(17);
        os << a.clip_id << '|' << to_string(a.method) << '|' << a.parameter << '|' << a.seed << '|' << ir_seed() << '|'
           << cfg_.count("ir_pool_size");
        return os.str();
    }

    const Config& cfg_;
    const FeatureCache& cache_;
    Log& log_;
    std::uint64_t seed_;
    std::once_flag pool_once_;
    std::vector<ImpulseResponse> pool_;
};

inline std::uint64_t plan_seed_for_fold(std::uint64_t seed, int fold) {
    return child_seed(seed, 100 + static_cast<std::uint64_t>(fold));
}
inline std::uint64_t model_seed_for_fold(std::uint64_t seed, int fold) {
    return child_seed(seed, 200 + static_cast<std::uint64_t>(fold));
}

// ---------------------------------------------------------------------------
// Model inputs

/// Mel image, standardized per image and zero-padded (or cropped) on the
/// time axis to `width`. With `stack_mfcc` a second channel holds the
/// standardized MFCC matrix in its top rows.
inline std::vector<float> prepare_cnn_image(const ClipFeatures& f, std::size_t height, std::size_t width,
                                            bool stack_mfcc) {
    require(f.mel.values.rows() == height, ErrorCode::ShapeMismatch, "mel rows do not match CNN input height");
    const std::size_t channels = stack_mfcc ? 2 : 1;
    std::vector<float> img(channels * height * width, 0.0f);
    auto place = [&](const Matrix<double>& m, std::size_t ch) {
        require(m.rows() <= height, ErrorCode::ShapeMismatch, "feature rows exceed CNN input height");
        double mean = 0.0;
        for (double v : m.data()) mean += v;
        mean /= static_cast<double>(m.data().size());
        double var = 0.0;
        for (double v : m.data()) var += (v - mean) * (v - mean);
        const double sd = std::sqrt(var / static_cast<double>(m.data().size()));
        const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
        const std::size_t cols = std::min(width, m.cols());
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (std::size_t t = 0; t < cols; ++t)
                img[(ch * height + r) * width + t] = static_cast<float>((m(r, t) - mean) * inv);
    };
    place(f.mel.values, 0);
    if (stack_mfcc) place(f.mfcc.values, 1);
    return img;
}

inline std::vector<double> tree_input(const ClipFeatures& f, const std::vector<double>* tabular_raw,
                                      const ModelBundle& b) {
    auto x = pooled_acoustic_vector(f);
    if (b.use_tabular) {
        require(tabular_raw != nullptr, ErrorCode::MissingColumn, "model needs a clinical row for this clip");
        const auto t = b.tabular.apply(*tabular_raw);
        x.insert(x.end(), t.begin(), t.end());
    }
    return x;
}

inline Matrix<double> tree_design(const std::vector<const ClipFeatures*>& feats,
                                  const std::vector<const std::vector<double>*>& tab, const ModelBundle& b) {
    Matrix<double> X;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        const auto x = tree_input(*feats[i], tab.empty() ? nullptr : tab[i], b);
        if (i == 0) X = Matrix<double>(feats.size(), x.size());
        require(x.size() == X.cols(), ErrorCode::ShapeMismatch, "inconsistent feature vector width");
        std::copy(x.begin(), x.end(), X.row(i).begin());
    }
    return X;
}

/// Positive-class probability per clip. For an ensemble, the unweighted
/// mean of extra-trees, boosting and CNN, in that order.
inline std::vector<double> predict_bundle(const ModelBundle& b, const std::vector<const ClipFeatures*>& feats,
                                          const std::vector<const std::vector<double>*>& tab) {
    std::vector<std::vector<double>> members;
    if (b.extratrees || b.hgb) {
        const auto X = tree_design(feats, tab, b);
        if (b.extratrees) members.push_back(extra_trees_predict_proba(*b.extratrees, X));
        if (b.hgb) members.push_back(hgb_predict_proba(*b.hgb, X));
    }
    if (b.cnn) {
        std::vector<std::vector<float>> images;
        images.reserve(feats.size());
        for (const auto* f : feats)
            images.push_back(prepare_cnn_image(*f, b.cnn_config.input_h, b.cnn_config.input_w, b.stack_mfcc));
        members.push_back(cnn_predict_proba(*b.cnn, images, b.cnn_config));
    }
    require(!members.empty(), ErrorCode::InvalidArgument, "model bundle holds no model");
    std::vector<double> out(feats.size());
    std::vector<double> m(members.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        for (std::size_t j = 0; j < members.size(); ++j) m[j] = members[j][i];
        out[i] = ensemble_mean(m);
    }
    return out;
}

struct FitOutput {
    ModelBundle bundle;
    std::vector<EpochCurve> curves;
};

/// Fits the configured model kind on a training set. `validation`, when
/// given, only feeds the CNN's per-epoch curves.
inline FitOutput fit_bundle(const std::string& kind, const Config& c, const FeatureParams& fp, const TrainingSet& train,
                            const std::vector<EncodedSlot>& slots, std::uint64_t seed, Log& log,
                            const ImageSet<float>* validation = nullptr) {
    FitOutput out;
    auto& b = out.bundle;
    b.kind = kind;
    b.feature_params = fp;
    b.seed = seed;
    b.use_tabular = !slots.empty();
    if (b.use_tabular) b.tabular = TabularPreprocessor::fit(train.base_tabular, slots);

    const bool trees = kind == "extratrees" || kind == "hgb" || kind == "ensemble";
    if (trees) {
        const auto X = tree_design(train.features, train.tabular, b);
        if (kind != "hgb") {
            b.extratrees = extra_trees_fit(X, train.labels, extratrees_params_from(c, child_seed(seed, 1)));
            log.info("extra-trees: ", b.extratrees->trees.size(), " trees on ", X.rows(), " x ", X.cols());
        }
        if (kind != "extratrees") {
            b.hgb = hgb_fit(X, train.labels, hgb_params_from(c));
            log.info("hgb: ", b.hgb->stages.size(), " stages on ", X.rows(), " x ", X.cols());
        }
    }
    if (kind == "cnn" || kind == "ensemble") {
        b.cnn_config = cnn_config_from(c, fp);
        b.stack_mfcc = c.flag("cnn_stack_mfcc");
        ImageSet<float> images;
        for (const auto* f : train.features)
            images.images.push_back(prepare_cnn_image(*f, b.cnn_config.input_h, b.cnn_config.input_w, b.stack_mfcc));
        images.labels = train.labels;
        auto res = cnn_train<float>(images, b.cnn_config, child_seed(seed, 2), validation,
                                    [&](const CnnEpochStats& s) {
                                        std::ostringstream os;
                                        os << std::fixed << std::setprecision(4) << "cnn epoch " << s.epoch + 1
                                           << ": loss " << s.train_loss << " acc " << s.train_accuracy;
                                        if (s.val_loss) os << " val_loss " << *s.val_loss << " val_acc " << *s.val_accuracy;
                                        log.info(os.str());
                                    });
        b.cnn = std::move(res.model);
        for (const auto& h : res.history) out.curves.push_back({h.train_loss, h.train_accuracy, h.val_loss, h.val_accuracy});
    }
    return out;
}

/// Training set for one split: the split's clips plus, when enabled, their
/// augmented copies.
inline TrainingSet build_training_set(const Corpus& corpus, std::span<const std::size_t> train_idx,
                                      std::span<const int> train_labels, const std::vector<ClipFeatures>& augmented,
                                      const AugmentationPlan* plan) {
    TrainingSet t;
    const bool tab = !corpus.tabular.empty();
    std::map<std::string, std::size_t> pos;
    for (std::size_t j = 0; j < train_idx.size(); ++j) {
        const std::size_t i = train_idx[j];
        t.features.push_back(&corpus.features[i]);
        if (tab) {
            t.tabular.push_back(&corpus.tabular[i]);
            t.base_tabular.push_back(corpus.tabular[i]);
        }
        t.labels.push_back(train_labels[j]);
        pos[corpus.records[i].clip_id] = j;
    }
    if (plan)
        for (std::size_t a = 0; a < plan->assignments.size(); ++a) {
            const std::size_t j = pos.at(plan->assignments[a].clip_id);
            t.features.push_back(&augmented[a]);
            if (tab) t.tabular.push_back(t.tabular[j]);
            t.labels.push_back(t.labels[j]);
        }
    return t;
}

// ---------------------------------------------------------------------------
// Commands. Each returns a process exit code; errors propagate as
// tbcough::Error (runtime, exit 1) or UsageError (exit 2).

inline int cmd_synth(const Config& c, std::ostream& out, Log& log) {
    SyntheticSpec spec;
    spec.seed = c.seed();
    spec.n_participants = c.count("synth_participants");
    spec.clips_per_participant = c.count("synth_clips");
    spec.positive_fraction = c.real("synth_positive_fraction");
    const std::string dir = c.has("out") ? c.str("out") : c.str("data_dir");
    const auto m = synth_generate(spec, dir);
    const auto pos = std::count_if(m.records.begin(), m.records.end(), [](const ClipRecord& r) { return r.label == 1; });
    log.info("wrote ", m.records.size(), " clips to ", dir);
    out << "clips " << m.records.size() << " positive " << pos << " participants " << spec.n_participants << " dir "
        << dir << '\n';
    return 0;
}

inline ExtractStats run_extract(const Config& c, const FeatureCache& cache, Log& log) {
    const auto load = load_gated_manifest(c);
    const auto& recs = load.manifest.records;
    ExtractStats st;
    st.total = recs.size();
    std::atomic<std::size_t> hits{0}, computed{0}, failed{0};
    cache.write_params_file();
    const auto manifest_path = c.str("manifest");
    detail::parallel_for(recs.size(), std::max<std::size_t>(1, c.count("jobs")), [&](std::size_t i) {
        const auto path = cache.clip_path(recs[i].clip_id);
        if (cache.contains(path)) {
            ++hits;
            return;
        }
        try {
            const auto clip =
                load_analysis_clip(resolve_audio_path(manifest_path, recs[i].file_path), cache.params().mel.n_fft);
            cache.store(path, extract_features(clip, cache.params()));
            ++computed;
        } catch (const Error& e) {
            ++failed;
            log.info("skipping ", recs[i].clip_id, ": ", e.what());
        }
    });
    st.hits = hits;
    st.computed = computed;
    st.failed = failed;
    log.info("extract: ", load.total_rows, " manifest rows, ", load.dropped, " gated out");
    return st;
}

inline int cmd_extract(const Config& c, std::ostream& out, Log& log) {
    const FeatureCache cache(c.str("cache_dir"), feature_params_from(c));
    const auto st = run_extract(c, cache, log);
    out << "clips " << st.total << " cache_hits " << st.hits << " computed " << st.computed << " failed " << st.failed
        << " param_hash " << cache.hash() << '\n';
    return st.failed == st.total && st.total > 0 ? 1 : 0;
}

/// The train/holdout split used by 'train' and 'augment': one fold of a
/// grouped stratified split.
inline FoldAssignment holdout_split(const Corpus& corpus, const Config& c) {
    return stratified_kfold(corpus.labels, corpus.groups, c.count("holdout_folds"), c.seed(), c.flag("grouped"));
}

inline int cmd_augment(const Config& c, std::ostream& out, Log& log) {
    const FeatureCache cache(c.str("cache_dir"), feature_params_from(c));
    const auto corpus = load_corpus(c, cache);
    const auto fa = holdout_split(corpus, c);
    std::vector<std::string> ids;
    for (std::size_t i : fa.train_indices(0)) ids.push_back(corpus.records[i].clip_id);
    Augmenter aug(c, cache, log);
    const auto plan = aug.plan_for(ids, plan_seed_for_fold(c.seed(), 0));
    aug.features_for(plan, corpus);
    const std::string path = c.has("out") ? c.str("out") : (std::filesystem::path(c.str("cache_dir")) / "augment_plan.csv").string();
    write_file_atomic(path, [&](std::ostream& os) { os << plan_to_csv(plan); });
    const auto noise = std::count_if(plan.assignments.begin(), plan.assignments.end(),
                                     [](const AugmentAssignment& a) { return a.method == AugmentMethod::SnrNoise; });
    out << "train_clips " << ids.size() << " augmented " << plan.assignments.size() << " snr_noise " << noise
        << " ir_convolve " << plan.assignments.size() - static_cast<std::size_t>(noise) << " plan " << path << '\n';
    return 0;
}

inline std::string derived_report_path(const Config& c, const std::string& base, const std::string& fallback) {
    if (c.has("report")) return c.str("report");
    if (base.empty()) return fallback;
    auto p = std::filesystem::path(base);
    return (p.parent_path() / (p.stem().string() + ".report.json")).string();
}

inline int cmd_train(const Config& c, std::ostream& out, Log& log) {
    const auto kind = checked_model_kind(c);
    const auto fp = feature_params_from(c);
    const FeatureCache cache(c.str("cache_dir"), fp);
    const auto corpus = load_corpus(c, cache);
    const auto fa = holdout_split(corpus, c);
    const auto train_idx = fa.train_indices(0), test_idx = fa.test_indices(0);
    std::vector<int> train_labels, test_labels;
    std::vector<std::string> train_ids, test_groups;
    for (std::size_t i : train_idx) {
        train_labels.push_back(corpus.labels[i]);
        train_ids.push_back(corpus.records[i].clip_id);
    }
    for (std::size_t i : test_idx) {
        test_labels.push_back(corpus.labels[i]);
        test_groups.push_back(corpus.groups[i]);
    }

    Augmenter aug(c, cache, log);
    std::optional<AugmentationPlan> plan;
    std::vector<ClipFeatures> augmented;
    if (aug.enabled()) {
        plan = aug.plan_for(train_ids, plan_seed_for_fold(c.seed(), 0));
        augmented = aug.features_for(*plan, corpus);
    }
    const auto train = build_training_set(corpus, train_idx, train_labels, augmented, plan ? &*plan : nullptr);

    std::vector<const ClipFeatures*> test_feats;
    std::vector<const std::vector<double>*> test_tab;
    for (std::size_t i : test_idx) {
        test_feats.push_back(&corpus.features[i]);
        if (!corpus.tabular.empty()) test_tab.push_back(&corpus.tabular[i]);
    }
    ImageSet<float> val;
    if (kind == "cnn" || kind == "ensemble") {
        const auto cfg = cnn_config_from(c, fp);
        for (const auto* f : test_feats)
            val.images.push_back(prepare_cnn_image(*f, cfg.input_h, cfg.input_w, c.flag("cnn_stack_mfcc")));
        val.labels = test_labels;
    }

    const std::uint64_t seed = model_seed_for_fold(c.seed(), 0);
    auto fit = fit_bundle(kind, c, fp, train, corpus.tabular_slots, seed, log, val.images.empty() ? nullptr : &val);

    std::vector<EvalReport> reports;
    const auto score = [&](const ModelBundle& b) { return predict_bundle(b, test_feats, test_tab); };
    auto add_report = [&](const std::string& name, const std::vector<double>& p) {
        reports.push_back(make_report(name, -1, train.labels.size(), test_labels, p,
                                      c.flag("grouped") ? std::span<const std::string>(test_groups)
                                                        : std::span<const std::string>{},
                                      c.real("threshold")));
    };
    if (kind == "ensemble") {
        for (const auto* member : {"extratrees", "hgb", "cnn"}) {
            ModelBundle m = fit.bundle;
            m.kind = member;
            if (std::string(member) != "extratrees") m.extratrees.reset();
            if (std::string(member) != "hgb") m.hgb.reset();
            if (std::string(member) != "cnn") m.cnn.reset();
            add_report(member, score(m));
        }
    }
    add_report(kind, score(fit.bundle));
    reports.back().curves = fit.curves;
    if (kind == "ensemble") reports[2].curves = fit.curves;

    const std::string model_path = c.has("out") ? c.str("out") : "model.json";
    save_model(model_path, fit.bundle);
    nlohmann::json rep;
    rep["model_kind"] = kind;
    rep["feature_param_hash"] = cache.hash();
    rep["seed"] = c.seed();
    rep["n_train_clips"] = train_idx.size();
    rep["n_augmented"] = plan ? plan->assignments.size() : 0;
    rep["n_test_clips"] = test_idx.size();
    rep["reports"] = nlohmann::json::array();
    for (const auto& r : reports) rep["reports"].push_back(to_json(r));
    const auto report_path = derived_report_path(c, model_path, "train.report.json");
    save_text(report_path, dump_json(rep));
    out << report_table(reports);
    out << "model " << model_path << " report " << report_path << '\n';
    return 0;
}

inline CvSummary run_cv(const Config& c, const std::string& kind, const Corpus& corpus, const FeatureCache& cache,
                        Log& log) {
    const auto fp = cache.params();
    Augmenter aug(c, cache, log);
    const std::uint64_t seed = c.seed();
    auto fit_score = [&](const FoldTask& task) {
        log.info(kind, " fold ", task.fold, ": ", task.train_indices.size(), " train / ", task.test_indices.size(),
                 " held-out clips");
        std::optional<AugmentationPlan> plan;
        std::vector<ClipFeatures> augmented;
        if (aug.enabled()) {
            std::vector<std::string> ids;
            for (std::size_t i : task.train_indices) ids.push_back(corpus.records[i].clip_id);
            plan = aug.plan_for(ids, plan_seed_for_fold(seed, task.fold));
            augmented = aug.features_for(*plan, corpus);
        }
        const auto train =
            build_training_set(corpus, task.train_indices, task.train_labels, augmented, plan ? &*plan : nullptr);
        auto fit = fit_bundle(kind, c, fp, train, corpus.tabular_slots, model_seed_for_fold(seed, task.fold), log);
        std::vector<const ClipFeatures*> feats;
        std::vector<const std::vector<double>*> tab;
        for (std::size_t i : task.test_indices) {
            feats.push_back(&corpus.features[i]);
            if (!corpus.tabular.empty()) tab.push_back(&corpus.tabular[i]);
        }
        return FoldResult{predict_bundle(fit.bundle, feats, tab), fit.curves};
    };
    return cross_validate(kind, corpus.labels, corpus.groups, c.count("k"), seed, fit_score, c.flag("grouped"));
}

inline int cmd_cv(const Config& c, std::ostream& out, Log& log) {
    const auto kind = checked_model_kind(c);
    const FeatureCache cache(c.str("cache_dir"), feature_params_from(c));
    const auto corpus = load_corpus(c, cache);
    const auto cv = run_cv(c, kind, corpus, cache, log);
    auto j = to_json(cv);
    j["feature_param_hash"] = cache.hash();
    j["seed"] = c.seed();
    j["shuffle_labels"] = c.flag("shuffle_labels");
    const std::string path = c.has("out") ? c.str("out") : "cv_" + kind + ".json";
    save_text(path, dump_json(j));
    out << report_table(cv.folds);
    out << summary_line(cv) << '\n';
    out << "report " << path << '\n';
    return 0;
}

inline int cmd_infer(const Config& c, std::ostream& out, Log& log) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!c.has("wav")) throw UsageError("infer needs --wav");
    const auto bundle = load_model(c.str("model_file"));
    const auto requested = feature_params_from(c);
    require(feature_param_hash(requested) == bundle.feature_hash(), ErrorCode::HashMismatch,
            "feature parameters differ from the model's (requested " + feature_param_hash(requested) + ", model " +
                bundle.feature_hash() + ")");
    const auto clip = load_analysis_clip(c.str("wav"), bundle.feature_params.mel.n_fft);
    const auto feats = extract_features(clip, bundle.feature_params);
    std::vector<double> tab_row;
    std::vector<const std::vector<double>*> tab;
    if (bundle.use_tabular) {
        if (!c.has("participant") || !c.has("tabular"))
            throw UsageError("this model uses clinical data: pass --participant and --tabular");
        const auto table = load_tabular(c.str("tabular"));
        auto it = table.find(c.str("participant"));
        require(it != table.end(), ErrorCode::UnresolvedParticipant,
                "participant " + c.str("participant") + " not in " + c.str("tabular"));
        tab_row = encode_record(it->second, default_clinical_schema()).values;
        tab.push_back(&tab_row);
    }
    const double p = predict_bundle(bundle, {&feats}, tab).at(0);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    out << std::fixed << std::setprecision(4) << "probability " << p << '\n';
    out << std::setprecision(1) << "latency_ms " << ms << '\n';
    log.info("inference with ", bundle.kind, " model");
    return 0;
}

}  // namespace tbcough
