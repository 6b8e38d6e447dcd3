#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tbcough/error.hpp"

namespace tbcough {

inline constexpr double kProbEps = 1e-12;

namespace detail {
inline void check_lengths(std::size_t a, std::size_t b) {
    require(a == b, ErrorCode::LengthMismatch,
            "length mismatch: " + std::to_string(a) + " labels vs " + std::to_string(b) + " scores");
}
inline void check_labels(std::span<const int> y) {
    for (int v : y) require(v == 0 || v == 1, ErrorCode::InvalidArgument, "labels must be 0 or 1");
}
}  // namespace detail

/// Mean binary cross-entropy (natural log) with probabilities clamped to
/// [eps, 1 - eps]. `positive_term_only` drops the (1 - y) log(1 - p) term.
inline double bce_loss(std::span<const int> y, std::span<const double> p, bool positive_term_only = false) {
    detail::check_lengths(y.size(), p.size());
    detail::check_labels(y);
    require(!y.empty(), ErrorCode::InvalidArgument, "empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        require(!std::isnan(p[i]), ErrorCode::NonFinite, "NaN probability");
        // An exact hit contributes nothing; clamping alone would leave a
        // residue of about eps.
        if (p[i] == static_cast<double>(y[i])) continue;
        const double q = std::clamp(p[i], kProbEps, 1.0 - kProbEps);
        if (y[i] == 1)
            s -= std::log(q);
        else if (!positive_term_only)
            s -= std::log1p(-q);
    }
    return s / static_cast<double>(y.size());
}

struct ConfusionMatrix {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t total() const noexcept { return tp + fp + tn + fn; }
    bool operator==(const ConfusionMatrix&) const = default;
};

struct ClassificationMetrics {
    ConfusionMatrix confusion;
    double accuracy = 0.0;
    std::optional<double> tpr;
    std::optional<double> fpr;
};

inline ClassificationMetrics classification_metrics(std::span<const int> y, std::span<const double> p,
                                                    double threshold = 0.5) {
    detail::check_lengths(y.size(), p.size());
    detail::check_labels(y);
    require(!y.empty(), ErrorCode::InvalidArgument, "empty input");
    ClassificationMetrics m;
    auto& c = m.confusion;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const bool pred = p[i] >= threshold;
        if (y[i] == 1)
            (pred ? c.tp : c.fn)++;
        else
            (pred ? c.fp : c.tn)++;
    }
    m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    if (c.tp + c.fn > 0) m.tpr = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
    if (c.fp + c.tn > 0) m.fpr = static_cast<double>(c.fp) / static_cast<double>(c.fp + c.tn);
    return m;
}

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;  // +inf for the origin
};

struct RocCurve {
    std::vector<RocPoint> points;
    double auroc = 0.0;
};

namespace detail {
inline std::pair<std::size_t, std::size_t> class_counts(std::span<const int> y) {
    const auto pos = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
    return {pos, y.size() - pos};
}
}  // namespace detail

/// Sweeps thresholds over the unique scores in descending order. Tied scores
/// move together, giving a diagonal segment; the trapezoidal area is
/// accumulated in integer units so it matches the pairwise count exactly.
inline RocCurve roc_curve(std::span<const int> y, std::span<const double> scores) {
    detail::check_lengths(y.size(), scores.size());
    detail::check_labels(y);
    const auto [P, N] = detail::class_counts(y);
    require(P > 0 && N > 0, ErrorCode::SingleClass, "ROC needs both classes present");
    for (double s : scores) require(!std::isnan(s), ErrorCode::NonFinite, "NaN score");

    std::vector<std::size_t> order(y.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve roc;
    roc.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    std::uint64_t tp = 0, fp = 0, twice_area = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        std::uint64_t dtp = 0, dfp = 0;
        for (; i < order.size() && scores[order[i]] == s; ++i) (y[order[i]] ? dtp : dfp)++;
        twice_area += dfp * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
        roc.points.push_back({static_cast<double>(fp) / static_cast<double>(N),
                              static_cast<double>(tp) / static_cast<double>(P), s});
    }
    roc.auroc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(P) * static_cast<double>(N));
    return roc;
}

/// All positive/negative pairs: (#[s+ > s-] + 0.5 #[s+ = s-]) / (n+ n-).
inline double auroc_oracle(std::span<const int> y, std::span<const double> scores) {
    detail::check_lengths(y.size(), scores.size());
    detail::check_labels(y);
    const auto [P, N] = detail::class_counts(y);
    require(P > 0 && N > 0, ErrorCode::SingleClass, "AUROC needs both classes present");
    std::uint64_t greater = 0, equal = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] != 1) continue;
        for (std::size_t j = 0; j < y.size(); ++j) {
            if (y[j] != 0) continue;
            if (scores[i] > scores[j])
                ++greater;
            else if (scores[i] == scores[j])
                ++equal;
        }
    }
    return static_cast<double>(2 * greater + equal) / (2.0 * static_cast<double>(P) * static_cast<double>(N));
}

inline double auroc(std::span<const int> y, std::span<const double> scores) { return roc_curve(y, scores).auroc; }

// ---------------------------------------------------------------------------
// Folds

struct FoldAssignment {
    std::size_t k = 5;
    std::vector<int> fold_of;                      // per example
    std::vector<std::string> group_of;             // per example
    std::map<std::string, int> fold_of_group;

    std::vector<std::size_t> test_indices(int fold) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < fold_of.size(); ++i)
            if (fold_of[i] == fold) out.push_back(i);
        return out;
    }
    std::vector<std::size_t> train_indices(int fold) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < fold_of.size(); ++i)
            if (fold_of[i] != fold) out.push_back(i);
        return out;
    }
};

/// Stratified k-fold over groups. Each group's stratum is its majority
/// label (ties count as positive). Groups are shuffled by `seed` within each
/// stratum and dealt round-robin, the negative deal continuing where the
/// positive one stopped so fold sizes stay balanced. With `grouped = false`
/// every example is its own group.
inline FoldAssignment stratified_kfold(std::span<const int> labels, std::span<const std::string> groups,
                                       std::size_t k, std::uint64_t seed, bool grouped = true) {
    detail::check_labels(labels);
    require(k >= 2, ErrorCode::InvalidArgument, "k must be at least 2");
    if (grouped) detail::check_lengths(labels.size(), groups.size());

    FoldAssignment fa;
    fa.k = k;
    fa.group_of.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
        fa.group_of[i] = grouped ? groups[i] : std::to_string(i);

    std::map<std::string, std::pair<std::size_t, std::size_t>> tally;  // positives, total
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto& t = tally[fa.group_of[i]];
        t.first += static_cast<std::size_t>(labels[i]);
        t.second += 1;
    }
    std::vector<std::string> pos, neg;
    for (const auto& [g, t] : tally) (2 * t.first >= t.second ? pos : neg).push_back(g);
    const std::string unit = grouped ? "participants" : "examples";
    require(pos.size() >= k && neg.size() >= k, ErrorCode::TooFewGroups,
            "need at least k=" + std::to_string(k) + " " + unit + " per class; have " +
                std::to_string(pos.size()) + " positive and " + std::to_string(neg.size()) + " negative");

    std::mt19937_64 rng(seed);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    std::size_t next = 0;
    for (const auto* stratum : {&pos, &neg})
        for (const auto& g : *stratum) fa.fold_of_group[g] = static_cast<int>(next++ % k);

    fa.fold_of.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) fa.fold_of[i] = fa.fold_of_group.at(fa.group_of[i]);
    return fa;
}

// ---------------------------------------------------------------------------
// Reports

struct EpochCurve {
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    std::optional<double> val_loss;
    std::optional<double> val_accuracy;
};

struct EvalReport {
    std::string model_kind;
    int fold = -1;  // -1 for a holdout evaluation
    std::size_t n_train = 0;
    std::size_t n_test = 0;
    double auroc = 0.0;
    std::optional<double> patient_auroc;
    double bce = 0.0;
    ClassificationMetrics metrics;
    std::vector<RocPoint> roc;
    std::vector<EpochCurve> curves;
};

/// Mean score and majority label per group, in sorted group order.
struct GroupScores {
    std::vector<std::string> groups;
    std::vector<int> labels;
    std::vector<double> scores;
};

inline GroupScores aggregate_by_group(std::span<const std::string> groups, std::span<const int> y,
                                      std::span<const double> scores) {
    detail::check_lengths(y.size(), scores.size());
    detail::check_lengths(groups.size(), scores.size());
    std::map<std::string, std::tuple<double, std::size_t, std::size_t>> acc;  // sum, pos, n
    for (std::size_t i = 0; i < y.size(); ++i) {
        auto& [s, p, n] = acc[groups[i]];
        s += scores[i];
        p += static_cast<std::size_t>(y[i]);
        ++n;
    }
    GroupScores g;
    for (const auto& [id, t] : acc) {
        const auto& [s, p, n] = t;
        g.groups.push_back(id);
        g.labels.push_back(2 * p >= n ? 1 : 0);
        g.scores.push_back(s / static_cast<double>(n));
    }
    return g;
}

inline EvalReport make_report(std::string model_kind, int fold, std::size_t n_train, std::span<const int> y,
                              std::span<const double> p, std::span<const std::string> groups = {},
                              double threshold = 0.5) {
    EvalReport r;
    r.model_kind = std::move(model_kind);
    r.fold = fold;
    r.n_train = n_train;
    r.n_test = y.size();
    const auto roc = roc_curve(y, p);
    r.auroc = roc.auroc;
    r.roc = roc.points;
    r.bce = bce_loss(y, p);
    r.metrics = classification_metrics(y, p, threshold);
    if (!groups.empty()) {
        const auto g = aggregate_by_group(groups, y, p);
        const auto [P, N] = detail::class_counts(g.labels);
        if (P > 0 && N > 0) r.patient_auroc = auroc(g.labels, g.scores);
    }
    return r;
}

struct CvSummary {
    std::string model_kind;
    std::size_t k = 0;
    std::vector<EvalReport> folds;
    std::vector<int> skipped_folds;
    double mean_auroc = 0.0;
    double std_auroc = 0.0;  // sample standard deviation (0 for a single fold)
};

/// What a fold's fit-and-score callback may see: training rows with their
/// labels, and held-out row indices without labels.
struct FoldTask {
    int fold = 0;
    std::vector<std::size_t> train_indices;
    std::vector<int> train_labels;
    std::vector<std::string> train_groups;
    std::vector<std::size_t> test_indices;
    std::uint64_t seed = 0;
};

struct FoldResult {
    std::vector<double> test_scores;
    std::vector<EpochCurve> curves;
};

using FoldFitScore = std::function<FoldResult(const FoldTask&)>;

/// Runs `fit_score` per fold and scores it against held-out labels the
/// callback never receives. Folds whose held-out set is single-class are
/// recorded in `skipped_folds`.
inline CvSummary cross_validate(const std::string& model_kind, std::span<const int> labels,
                                std::span<const std::string> groups, std::size_t k, std::uint64_t seed,
                                const FoldFitScore& fit_score, bool grouped = true) {
    const auto fa = stratified_kfold(labels, groups, k, seed, grouped);
    CvSummary cv;
    cv.model_kind = model_kind;
    cv.k = k;
    for (int f = 0; f < static_cast<int>(k); ++f) {
        FoldTask task;
        task.fold = f;
        task.seed = seed + static_cast<std::uint64_t>(f) + 1;
        task.train_indices = fa.train_indices(f);
        task.test_indices = fa.test_indices(f);
        std::vector<int> y_test;
        std::vector<std::string> g_test;
        for (std::size_t i : task.train_indices) {
            task.train_labels.push_back(labels[i]);
            task.train_groups.push_back(fa.group_of[i]);
        }
        for (std::size_t i : task.test_indices) {
            y_test.push_back(labels[i]);
            g_test.push_back(fa.group_of[i]);
        }
        const auto [P, N] = detail::class_counts(y_test);
        if (P == 0 || N == 0) {
            cv.skipped_folds.push_back(f);
            continue;
        }
        auto res = fit_score(task);
        detail::check_lengths(y_test.size(), res.test_scores.size());
        auto rep = make_report(model_kind, f, task.train_indices.size(), y_test, res.test_scores,
                               grouped ? std::span<const std::string>(g_test) : std::span<const std::string>{});
        rep.curves = std::move(res.curves);
        cv.folds.push_back(std::move(rep));
    }
    require(!cv.folds.empty(), ErrorCode::SingleClass, "every fold had a single-class held-out set");
    double s = 0.0;
    for (const auto& r : cv.folds) s += r.auroc;
    cv.mean_auroc = s / static_cast<double>(cv.folds.size());
    if (cv.folds.size() > 1) {
        double v = 0.0;
        for (const auto& r : cv.folds) v += (r.auroc - cv.mean_auroc) * (r.auroc - cv.mean_auroc);
        cv.std_auroc = std::sqrt(v / static_cast<double>(cv.folds.size() - 1));
    }
    return cv;
}

/// Unweighted mean of member probabilities.
inline double ensemble_mean(std::span<const double> member_probs) {
    require(!member_probs.empty(), ErrorCode::InvalidArgument, "ensemble needs at least one member");
    double s = 0.0;
    for (double p : member_probs) s += p;
    return s / static_cast<double>(member_probs.size());
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const ClassificationMetrics& m) {
    nlohmann::json j;
    j["tp"] = m.confusion.tp;
    j["fp"] = m.confusion.fp;
    j["tn"] = m.confusion.tn;
    j["fn"] = m.confusion.fn;
    j["accuracy"] = m.accuracy;
    j["tpr"] = m.tpr ? nlohmann::json(*m.tpr) : nlohmann::json(nullptr);
    j["fpr"] = m.fpr ? nlohmann::json(*m.fpr) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["model_kind"] = r.model_kind;
    j["fold"] = r.fold;
    j["n_train"] = r.n_train;
    j["n_test"] = r.n_test;
    j["auroc"] = r.auroc;
    j["patient_auroc"] = r.patient_auroc ? nlohmann::json(*r.patient_auroc) : nlohmann::json(nullptr);
    j["bce"] = r.bce;
    j["metrics"] = to_json(r.metrics);
    auto& roc = j["roc"] = nlohmann::json::array();
    for (const auto& p : r.roc)
        roc.push_back({{"fpr", p.fpr}, {"tpr", p.tpr},
                       {"threshold", std::isinf(p.threshold) ? nlohmann::json("inf") : nlohmann::json(p.threshold)}});
    auto& curves = j["curves"] = nlohmann::json::array();
    for (const auto& c : r.curves) {
        nlohmann::json e{{"train_loss", c.train_loss}, {"train_accuracy", c.train_accuracy}};
        e["val_loss"] = c.val_loss ? nlohmann::json(*c.val_loss) : nlohmann::json(nullptr);
        e["val_accuracy"] = c.val_accuracy ? nlohmann::json(*c.val_accuracy) : nlohmann::json(nullptr);
        curves.push_back(std::move(e));
    }
    return j;
}

inline nlohmann::json to_json(const CvSummary& cv) {
    nlohmann::json j;
    j["model_kind"] = cv.model_kind;
    j["k"] = cv.k;
    j["mean_auroc"] = cv.mean_auroc;
    j["std_auroc"] = cv.std_auroc;
    j["skipped_folds"] = cv.skipped_folds;
    auto& folds = j["folds"] = nlohmann::json::array();
    for (const auto& r : cv.folds) folds.push_back(to_json(r));
    return j;
}

namespace detail {
inline std::string fmt_opt(const std::optional<double>& v) {
    if (!v) return "-";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << *v;
    return os.str();
}
}  // namespace detail

inline std::string report_table(std::span<const EvalReport> reports) {
    std::ostringstream os;
    os << std::left << std::setw(12) << "model" << std::right << std::setw(6) << "fold" << std::setw(8) << "n_test"
       << std::setw(9) << "auroc" << std::setw(10) << "pt_auroc" << std::setw(9) << "bce" << std::setw(8) << "acc"
       << std::setw(8) << "tpr" << std::setw(8) << "fpr" << std::setw(6) << "tp" << std::setw(6) << "fp"
       << std::setw(6) << "tn" << std::setw(6) << "fn" << '\n';
    os << std::fixed << std::setprecision(4);
    for (const auto& r : reports) {
        const auto& c = r.metrics.confusion;
        os << std::left << std::setw(12) << r.model_kind << std::right << std::setw(6)
           << (r.fold < 0 ? std::string("hold") : std::to_string(r.fold)) << std::setw(8) << r.n_test << std::setw(9)
           << r.auroc << std::setw(10) << detail::fmt_opt(r.patient_auroc) << std::setw(9) << r.bce << std::setw(8)
           << r.metrics.accuracy << std::setw(8) << detail::fmt_opt(r.metrics.tpr) << std::setw(8)
           << detail::fmt_opt(r.metrics.fpr) << std::setw(6) << c.tp << std::setw(6) << c.fp << std::setw(6) << c.tn
           << std::setw(6) << c.fn << '\n';
    }
    return os.str();
}

inline std::string summary_line(const CvSummary& cv) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << cv.model_kind << ": mean AUROC " << cv.mean_auroc << " +/- "
       << cv.std_auroc << " over " << cv.folds.size() << " folds";
    if (!cv.skipped_folds.empty()) os << " (" << cv.skipped_folds.size() << " skipped)";
    return os.str();
}

}  // namespace tbcough
