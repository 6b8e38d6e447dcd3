#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbcough/cnn.hpp"
#include "tbcough/error.hpp"
#include "tbcough/features.hpp"
#include "tbcough/tabular.hpp"
#include "tbcough/trees.hpp"

namespace tbcough {

inline constexpr int kModelFormatVersion = 1;

/// Everything needed to score a clip: the trained model(s), the feature
/// parameters they were trained on, and the fitted tabular preprocessing.
struct ModelBundle {
    std::string kind;  // extratrees | hgb | cnn | ensemble
    FeatureParams feature_params;
    std::uint64_t seed = 0;

    bool use_tabular = true;
    TabularPreprocessor tabular;

    std::optional<ExtraTreesModel> extratrees;
    std::optional<HgbModel> hgb;
    std::optional<CnnModel<float>> cnn;
    CnnConfig cnn_config;
    bool stack_mfcc = false;

    std::string feature_hash() const { return feature_param_hash(feature_params); }
};

using nlohmann::json;

// ---------------------------------------------------------------------------
// Hex float payloads

inline std::string floats_to_hex(std::span<const float> v) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(v.size() * 8);
    for (float f : v) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        for (int b = 0; b < 4; ++b) {  // little-endian byte order
            const unsigned byte = (u >> (8 * b)) & 0xff;
            out.push_back(kHex[byte >> 4]);
            out.push_back(kHex[byte & 0xf]);
        }
    }
    return out;
}

inline std::vector<float> hex_to_floats(const std::string& s) {
    require(s.size() % 8 == 0, ErrorCode::ParseError, "hex float payload length is not a multiple of 8");
    auto nib = [](char c) -> unsigned {
        if (c >= '0' && c <= '9') return static_cast<unsigned>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<unsigned>(c - 'a' + 10);
        if (c >= 'A' && c <= 'F') return static_cast<unsigned>(c - 'A' + 10);
        fail(ErrorCode::ParseError, "invalid hex digit in float payload");
    };
    std::vector<float> out(s.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) {
            const unsigned byte = nib(s[i * 8 + 2 * b]) << 4 | nib(s[i * 8 + 2 * b + 1]);
            u |= static_cast<std::uint32_t>(byte) << (8 * b);
        }
        std::memcpy(&out[i], &u, 4);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Component serializers

inline json to_json(const FeatureParams& p) {
    return {{"n_fft", p.mel.n_fft},
            {"hop", p.mel.hop},
            {"n_mels", p.mel.n_mels},
            {"f_min_hz", p.mel.f_min_hz},
            {"f_max_hz", p.mel.f_max_hz},
            {"n_mfcc", p.n_mfcc},
            {"contrast_bands", p.contrast.n_bands},
            {"contrast_quantile", p.contrast.quantile},
            {"contrast_fmin_hz", p.contrast.f_min_hz}};
}

inline FeatureParams feature_params_from_json(const json& j) {
    FeatureParams p;
    p.mel.n_fft = j.at("n_fft").get<std::size_t>();
    p.mel.hop = j.at("hop").get<std::size_t>();
    p.mel.n_mels = j.at("n_mels").get<std::size_t>();
    p.mel.f_min_hz = j.at("f_min_hz").get<double>();
    p.mel.f_max_hz = j.at("f_max_hz").get<double>();
    p.n_mfcc = j.at("n_mfcc").get<std::size_t>();
    p.contrast.n_bands = j.at("contrast_bands").get<std::size_t>();
    p.contrast.quantile = j.at("contrast_quantile").get<double>();
    p.contrast.f_min_hz = j.at("contrast_fmin_hz").get<double>();
    return p;
}

inline json to_json(const DecisionTree& t) {
    json feature = json::array(), threshold = json::array(), left = json::array(), right = json::array(),
         value = json::array();
    for (const auto& n : t.nodes) {
        feature.push_back(n.feature);
        threshold.push_back(n.threshold);
        left.push_back(n.left);
        right.push_back(n.right);
        value.push_back(n.value);
    }
    return {{"feature", feature}, {"threshold", threshold}, {"left", left}, {"right", right}, {"value", value}};
}

inline DecisionTree tree_from_json(const json& j) {
    const auto feature = j.at("feature").get<std::vector<int>>();
    const auto threshold = j.at("threshold").get<std::vector<double>>();
    const auto left = j.at("left").get<std::vector<int>>();
    const auto right = j.at("right").get<std::vector<int>>();
    const auto value = j.at("value").get<std::vector<double>>();
    const std::size_t n = feature.size();
    require(threshold.size() == n && left.size() == n && right.size() == n && value.size() == n && n > 0,
            ErrorCode::ParseError, "inconsistent tree node arrays");
    DecisionTree t;
    t.nodes.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        t.nodes[i] = {feature[i], threshold[i], left[i], right[i], value[i]};
        if (feature[i] >= 0)
            require(left[i] > 0 && right[i] > 0 && static_cast<std::size_t>(left[i]) < n &&
                        static_cast<std::size_t>(right[i]) < n,
                    ErrorCode::ParseError, "tree child index out of range");
    }
    return t;
}

inline json to_json(const ExtraTreesModel& m) {
    json trees = json::array();
    for (const auto& t : m.trees) trees.push_back(to_json(t));
    return {{"params",
             {{"n_trees", m.params.n_trees},
              {"max_depth", m.params.max_depth},
              {"min_samples_leaf", m.params.min_samples_leaf},
              {"k_features", m.params.k_features},
              {"seed", m.params.seed}}},
            {"n_features", m.n_features},
            {"trees", trees}};
}

inline ExtraTreesModel extratrees_from_json(const json& j) {
    ExtraTreesModel m;
    const auto& p = j.at("params");
    m.params.n_trees = p.at("n_trees").get<std::size_t>();
    m.params.max_depth = p.at("max_depth").get<std::size_t>();
    m.params.min_samples_leaf = p.at("min_samples_leaf").get<std::size_t>();
    m.params.k_features = p.at("k_features").get<std::size_t>();
    m.params.seed = p.at("seed").get<std::uint64_t>();
    m.n_features = j.at("n_features").get<std::size_t>();
    for (const auto& t : j.at("trees")) m.trees.push_back(tree_from_json(t));
    return m;
}

inline json to_json(const HgbModel& m) {
    json stages = json::array();
    for (const auto& t : m.stages) stages.push_back(to_json(t));
    return {{"params",
             {{"n_iter", m.params.n_iter},
              {"learning_rate", m.params.learning_rate},
              {"max_depth", m.params.max_depth},
              {"max_leaf", m.params.max_leaf},
              {"n_bins", m.params.n_bins},
              {"l2", m.params.l2},
              {"min_samples_leaf", m.params.min_samples_leaf},
              {"min_hessian", m.params.min_hessian}}},
            {"n_features", m.n_features},
            {"initial_log_odds", m.initial_log_odds},
            {"bin_edges", m.bin_edges},
            {"stages", stages}};
}

inline HgbModel hgb_from_json(const json& j) {
    HgbModel m;
    const auto& p = j.at("params");
    m.params.n_iter = p.at("n_iter").get<std::size_t>();
    m.params.learning_rate = p.at("learning_rate").get<double>();
    m.params.max_depth = p.at("max_depth").get<std::size_t>();
    m.params.max_leaf = p.at("max_leaf").get<std::size_t>();
    m.params.n_bins = p.at("n_bins").get<std::size_t>();
    m.params.l2 = p.at("l2").get<double>();
    m.params.min_samples_leaf = p.at("min_samples_leaf").get<std::size_t>();
    m.params.min_hessian = p.at("min_hessian").get<double>();
    m.n_features = j.at("n_features").get<std::size_t>();
    m.initial_log_odds = j.at("initial_log_odds").get<double>();
    m.bin_edges = j.at("bin_edges").get<std::vector<std::vector<double>>>();
    for (const auto& t : j.at("stages")) m.stages.push_back(tree_from_json(t));
    return m;
}

inline json to_json(const CnnConfig& c) {
    return {{"channels", c.channels},       {"kernel", c.kernel},
            {"in_channels", c.in_channels}, {"input_h", c.input_h},
            {"input_w", c.input_w},         {"dropout", c.dropout},
            {"batch_size", c.batch_size},   {"max_lr", c.max_lr},
            {"epochs", c.epochs},           {"pct_start", c.pct_start},
            {"div_factor", c.div_factor},   {"final_div_factor", c.final_div_factor},
            {"beta1", c.beta1},             {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},       {"weight_decay", c.weight_decay},
            {"bn_eps", c.bn_eps},           {"bn_momentum", c.bn_momentum}};
}

inline CnnConfig cnn_config_from_json(const json& j) {
    CnnConfig c;
    c.channels = j.at("channels").get<std::vector<std::size_t>>();
    c.kernel = j.at("kernel").get<std::size_t>();
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.input_h = j.at("input_h").get<std::size_t>();
    c.input_w = j.at("input_w").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.max_lr = j.at("max_lr").get<double>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.pct_start = j.at("pct_start").get<double>();
    c.div_factor = j.at("div_factor").get<double>();
    c.final_div_factor = j.at("final_div_factor").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.bn_eps = j.at("bn_eps").get<double>();
    c.bn_momentum = j.at("bn_momentum").get<double>();
    return c;
}

inline json to_json(const CnnModel<float>& m) {
    json blocks = json::array();
    for (const auto& b : m.blocks)
        blocks.push_back({{"in_ch", b.in_ch},
                          {"out_ch", b.out_ch},
                          {"k", b.k},
                          {"weight", floats_to_hex(b.weight)},
                          {"bias", floats_to_hex(b.bias)},
                          {"gamma", floats_to_hex(b.gamma)},
                          {"beta", floats_to_hex(b.beta)},
                          {"running_mean", floats_to_hex(b.running_mean)},
                          {"running_var", floats_to_hex(b.running_var)}});
    return {{"in_channels", m.in_channels},
            {"kernel", m.kernel},
            {"blocks", blocks},
            {"head_weight", floats_to_hex(m.head_weight)},
            {"head_bias", floats_to_hex(m.head_bias)}};
}

inline CnnModel<float> cnn_from_json(const json& j) {
    CnnModel<float> m;
    m.in_channels = j.at("in_channels").get<std::size_t>();
    m.kernel = j.at("kernel").get<std::size_t>();
    std::size_t in = m.in_channels;
    for (const auto& jb : j.at("blocks")) {
        ConvBlock<float> b;
        b.in_ch = jb.at("in_ch").get<std::size_t>();
        b.out_ch = jb.at("out_ch").get<std::size_t>();
        b.k = jb.at("k").get<std::size_t>();
        b.weight = hex_to_floats(jb.at("weight").get<std::string>());
        b.bias = hex_to_floats(jb.at("bias").get<std::string>());
        b.gamma = hex_to_floats(jb.at("gamma").get<std::string>());
        b.beta = hex_to_floats(jb.at("beta").get<std::string>());
        b.running_mean = hex_to_floats(jb.at("running_mean").get<std::string>());
        b.running_var = hex_to_floats(jb.at("running_var").get<std::string>());
        require(b.in_ch == in && b.weight.size() == b.out_ch * b.in_ch * b.k * b.k && b.bias.size() == b.out_ch &&
                    b.gamma.size() == b.out_ch && b.beta.size() == b.out_ch && b.running_mean.size() == b.out_ch &&
                    b.running_var.size() == b.out_ch,
                ErrorCode::ShapeMismatch, "inconsistent CNN block shapes");
        for (float v : b.running_var) require(v > 0.0f, ErrorCode::ParseError, "running variance must be > 0");
        in = b.out_ch;
        m.blocks.push_back(std::move(b));
    }
    m.head_weight = hex_to_floats(j.at("head_weight").get<std::string>());
    m.head_bias = hex_to_floats(j.at("head_bias").get<std::string>());
    require(m.head_weight.size() == 2 * in && m.head_bias.size() == 2, ErrorCode::ShapeMismatch,
            "inconsistent CNN head shape");
    return m;
}

inline json to_json(const TabularPreprocessor& p) {
    json scalers = json::array();
    for (const auto& s : p.scalers()) scalers.push_back({s.min(), s.max()});
    std::vector<int> numeric(p.numeric_mask().begin(), p.numeric_mask().end());
    return {{"numeric", numeric}, {"medians", p.medians()}, {"scalers", scalers}};
}

inline TabularPreprocessor tabular_from_json(const json& j) {
    const auto numeric_i = j.at("numeric").get<std::vector<int>>();
    std::vector<bool> numeric(numeric_i.begin(), numeric_i.end());
    auto medians = j.at("medians").get<std::vector<double>>();
    std::vector<MinMaxScaler> scalers;
    for (const auto& s : j.at("scalers")) scalers.emplace_back(s.at(0).get<double>(), s.at(1).get<double>());
    require(medians.size() == numeric.size() && scalers.size() == numeric.size(), ErrorCode::ParseError,
            "inconsistent tabular preprocessor");
    return TabularPreprocessor::from_parts(std::move(numeric), std::move(medians), std::move(scalers));
}

// ---------------------------------------------------------------------------
// Envelope

inline json to_json(const ModelBundle& b) {
    json payload;
    payload["feature_params"] = to_json(b.feature_params);
    payload["use_tabular"] = b.use_tabular;
    if (b.use_tabular) payload["tabular"] = to_json(b.tabular);
    if (b.extratrees) payload["extratrees"] = to_json(*b.extratrees);
    if (b.hgb) payload["hgb"] = to_json(*b.hgb);
    if (b.cnn) {
        payload["cnn"] = to_json(*b.cnn);
        payload["cnn_config"] = to_json(b.cnn_config);
        payload["stack_mfcc"] = b.stack_mfcc;
    }
    return {{"format_version", kModelFormatVersion},
            {"model_kind", b.kind},
            {"feature_param_hash", b.feature_hash()},
            {"created_by_seed", b.seed},
            {"payload", payload}};
}

inline ModelBundle bundle_from_json(const json& j) {
    try {
        require(j.at("format_version").get<int>() == kModelFormatVersion, ErrorCode::ParseError,
                "unsupported model format version");
        ModelBundle b;
        b.kind = j.at("model_kind").get<std::string>();
        b.seed = j.at("created_by_seed").get<std::uint64_t>();
        const auto& p = j.at("payload");
        b.feature_params = feature_params_from_json(p.at("feature_params"));
        require(b.feature_hash() == j.at("feature_param_hash").get<std::string>(), ErrorCode::HashMismatch,
                "stored feature hash does not match stored feature parameters");
        b.use_tabular = p.at("use_tabular").get<bool>();
        if (b.use_tabular) b.tabular = tabular_from_json(p.at("tabular"));
        if (p.contains("extratrees")) b.extratrees = extratrees_from_json(p.at("extratrees"));
        if (p.contains("hgb")) b.hgb = hgb_from_json(p.at("hgb"));
        if (p.contains("cnn")) {
            b.cnn = cnn_from_json(p.at("cnn"));
            b.cnn_config = cnn_config_from_json(p.at("cnn_config"));
            b.stack_mfcc = p.at("stack_mfcc").get<bool>();
        }
        const bool ok = (b.kind == "extratrees" && b.extratrees) || (b.kind == "hgb" && b.hgb) ||
                        (b.kind == "cnn" && b.cnn) || (b.kind == "ensemble" && b.extratrees && b.hgb && b.cnn);
        require(ok, ErrorCode::ParseError, "model payload does not match model_kind '" + b.kind + "'");
        return b;
    } catch (const json::exception& e) {
        fail(ErrorCode::ParseError, std::string("malformed model file: ") + e.what());
    }
}

inline std::string dump_json(const json& j) { return j.dump(1) + "\n"; }

inline void save_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path);
    os << text;
    require(static_cast<bool>(os), ErrorCode::Io, "write failed: " + path);
}

inline void save_model(const std::string& path, const ModelBundle& b) { save_text(path, dump_json(to_json(b))); }

inline ModelBundle load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorCode::MissingFile, "cannot open model file " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        fail(ErrorCode::ParseError, "model file is not valid JSON: " + path + " (" + e.what() + ")");
    }
    return bundle_from_json(j);
}

}  // namespace tbcough
