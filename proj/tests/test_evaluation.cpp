#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "tbcough/evaluation.hpp"
#include "test_util.hpp"

using namespace tbcough;

namespace {

struct Labelled {
    std::vector<int> y;
    std::vector<double> s;
};

// Random dyadic scores so ties are frequent and affine maps stay exact; both
// classes present.
Labelled random_instance(std::mt19937_64& rng, std::size_t n, int grid) {
    Labelled d;
    std::uniform_int_distribution<int> cell(0, grid), bit(0, 1);
    for (std::size_t i = 0; i < n; ++i) {
        d.y.push_back(i == 0 ? 1 : i == 1 ? 0 : bit(rng));
        d.s.push_back(static_cast<double>(cell(rng)) / grid + 0.25 * d.y.back());
    }
    return d;
}

struct GroupedData {
    std::vector<int> labels;
    std::vector<std::string> groups;
};

// Participants with a fixed label and 1..5 clips each, a few with mixed labels.
GroupedData random_groups(std::mt19937_64& rng, std::size_t participants) {
    GroupedData d;
    std::uniform_int_distribution<int> clips(1, 5), bit(0, 1);
    std::uniform_real_distribution<double> u;
    for (std::size_t p = 0; p < participants; ++p) {
        const int label = p < 5 ? 1 : p < 10 ? 0 : bit(rng);
        const int n = clips(rng);
        for (int c = 0; c < n; ++c) {
            d.labels.push_back(u(rng) < 0.1 ? 1 - label : label);
            d.groups.push_back("P" + std::to_string(p));
        }
    }
    return d;
}

// Per-participant stratum computed independently of the library: majority
// label, ties positive.
std::map<std::string, int> strata(const GroupedData& d) {
    std::map<std::string, std::pair<int, int>> t;
    for (std::size_t i = 0; i < d.labels.size(); ++i) {
        t[d.groups[i]].first += d.labels[i];
        t[d.groups[i]].second += 1;
    }
    std::map<std::string, int> out;
    for (const auto& [g, c] : t) out[g] = 2 * c.first >= c.second;
    return out;
}

}  // namespace

TEST(Bce, Examples) {
    const std::vector<int> y{1, 0};
    EXPECT_NEAR(bce_loss(y, std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-15);
    EXPECT_NEAR(bce_loss(y, std::vector<double>{0.9, 0.2}), -(std::log(0.9) + std::log(0.8)) / 2, 1e-15);
    EXPECT_EQ(bce_loss(y, std::vector<double>{1.0, 0.0}), 0.0);
    EXPECT_NEAR(bce_loss(y, std::vector<double>{0.9, 0.2}, true), -std::log(0.9) / 2, 1e-15);
    // Fully wrong predictions are clamped rather than infinite.
    EXPECT_NEAR(bce_loss(y, std::vector<double>{0.0, 1.0}), -std::log(1e-12), 1e-4);
}

TEST(Bce, NonNegativeAndZeroOnlyWhenExact) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u;
    std::uniform_int_distribution<int> bit(0, 1);
    for (int t = 0; t < 200; ++t) {
        std::vector<int> y(10);
        std::vector<double> p(10);
        for (std::size_t i = 0; i < 10; ++i) {
            y[i] = bit(rng);
            p[i] = u(rng);
        }
        EXPECT_GT(bce_loss(y, p), 0.0);
        std::vector<double> exact(y.begin(), y.end());
        EXPECT_EQ(bce_loss(y, exact), 0.0);
    }
}

TEST(Bce, Errors) {
    EXPECT_TB_ERROR(bce_loss(std::vector<int>{1}, std::vector<double>{0.5, 0.5}), ErrorCode::LengthMismatch);
    EXPECT_TB_ERROR(bce_loss(std::vector<int>{2}, std::vector<double>{0.5}), ErrorCode::InvalidArgument);
    EXPECT_TB_ERROR(bce_loss(std::vector<int>{1}, std::vector<double>{std::nan("")}), ErrorCode::NonFinite);
}

TEST(Metrics, Examples) {
    const auto m = classification_metrics(std::vector<int>{1, 0}, std::vector<double>{0.9, 0.1});
    EXPECT_EQ(m.confusion.tp, 1u);
    EXPECT_EQ(m.confusion.tn, 1u);
    EXPECT_EQ(m.accuracy, 1.0);
    EXPECT_EQ(m.tpr, 1.0);
    EXPECT_EQ(m.fpr, 0.0);

    const auto all_pos = classification_metrics(std::vector<int>{1, 1, 1}, std::vector<double>{0.7, 0.8, 0.5});
    EXPECT_EQ(all_pos.tpr, 1.0);
    EXPECT_FALSE(all_pos.fpr.has_value());

    // Threshold is inclusive.
    const auto edge = classification_metrics(std::vector<int>{0}, std::vector<double>{0.5});
    EXPECT_EQ(edge.confusion.fp, 1u);
    EXPECT_FALSE(edge.tpr.has_value());
}

TEST(Metrics, MatchesTally) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 100; ++t) {
        const auto d = random_instance(rng, 50, 16);
        const double thr = 0.4 + std::fmod(0.01 * t, 0.3);
        std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
        for (std::size_t i = 0; i < d.y.size(); ++i) {
            const bool pred = d.s[i] >= thr;
            if (pred && d.y[i]) ++tp;
            if (pred && !d.y[i]) ++fp;
            if (!pred && !d.y[i]) ++tn;
            if (!pred && d.y[i]) ++fn;
        }
        const auto m = classification_metrics(d.y, d.s, thr);
        EXPECT_EQ(m.confusion, (ConfusionMatrix{tp, fp, tn, fn}));
        EXPECT_DOUBLE_EQ(m.accuracy, static_cast<double>(tp + tn) / 50.0);
        EXPECT_DOUBLE_EQ(*m.tpr, static_cast<double>(tp) / static_cast<double>(tp + fn));
        EXPECT_DOUBLE_EQ(*m.fpr, static_cast<double>(fp) / static_cast<double>(fp + tn));
    }
}

TEST(Roc, SeparatedScores) {
    const std::vector<int> y{0, 1, 0, 1, 1};
    const std::vector<double> s{0.1, 0.8, 0.2, 0.9, 0.7};
    const auto roc = roc_curve(y, s);
    EXPECT_EQ(roc.auroc, 1.0);
    bool corner = false;
    for (const auto& p : roc.points) corner |= p.fpr == 0.0 && p.tpr == 1.0;
    EXPECT_TRUE(corner);
    EXPECT_EQ(roc.points.front().fpr, 0.0);
    EXPECT_EQ(roc.points.front().tpr, 0.0);
    EXPECT_TRUE(std::isinf(roc.points.front().threshold));
    EXPECT_EQ(roc.points.back().fpr, 1.0);
    EXPECT_EQ(roc.points.back().tpr, 1.0);
}

TEST(Roc, AllEqualScoresIsDiagonal) {
    const std::vector<int> y{0, 1, 1, 0, 1};
    const auto roc = roc_curve(y, std::vector<double>(5, 0.3));
    EXPECT_EQ(roc.auroc, 0.5);
    ASSERT_EQ(roc.points.size(), 2u);
}

TEST(Roc, PointsMonotoneAndAreaMatchesOracle) {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<std::size_t> size(2, 2000);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = t < 5 ? 2000 : size(rng);
        const auto d = random_instance(rng, n, t % 2 ? 8 : 65536);
        const auto roc = roc_curve(d.y, d.s);
        EXPECT_NEAR(roc.auroc, auroc_oracle(d.y, d.s), 1e-12);
        for (std::size_t i = 1; i < roc.points.size(); ++i) {
            EXPECT_GE(roc.points[i].fpr, roc.points[i - 1].fpr);
            EXPECT_GE(roc.points[i].tpr, roc.points[i - 1].tpr);
            EXPECT_LT(roc.points[i].threshold, roc.points[i - 1].threshold);
        }
        EXPECT_EQ(roc.points.back().fpr, 1.0);
        EXPECT_EQ(roc.points.back().tpr, 1.0);
    }
}

TEST(Roc, InvariantUnderIncreasingTransforms) {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 50; ++t) {
        const auto d = random_instance(rng, 300, t % 2 ? 32 : 4096);
        const double base = auroc(d.y, d.s);
        std::vector<double> e, a;
        for (double v : d.s) {
            e.push_back(std::exp(v));
            a.push_back(3.0 * v - 7.0);
        }
        EXPECT_NEAR(auroc(d.y, e), base, 1e-12);
        EXPECT_NEAR(auroc(d.y, a), base, 1e-12);
    }
}

TEST(Roc, OracleExamplesAndErrors) {
    EXPECT_EQ(auroc_oracle(std::vector<int>{1, 0}, std::vector<double>{0.2, 0.9}), 0.0);
    EXPECT_EQ(auroc_oracle(std::vector<int>{1, 0, 1, 0}, std::vector<double>{0.5, 0.5, 0.9, 0.1}), 0.875);
    EXPECT_TB_ERROR(roc_curve(std::vector<int>{1, 1}, std::vector<double>{0.2, 0.3}), ErrorCode::SingleClass);
    EXPECT_TB_ERROR(auroc_oracle(std::vector<int>{0, 0}, std::vector<double>{0.2, 0.3}), ErrorCode::SingleClass);
    EXPECT_TB_ERROR(roc_curve(std::vector<int>{1, 0}, std::vector<double>{0.2}), ErrorCode::LengthMismatch);
    EXPECT_TB_ERROR(roc_curve(std::vector<int>{1, 0}, std::vector<double>{0.2, std::nan("")}), ErrorCode::NonFinite);
}

TEST(Folds, TenParticipantsExactDeal) {
    std::vector<int> y;
    std::vector<std::string> g;
    for (int p = 0; p < 10; ++p)
        for (int c = 0; c < 3; ++c) {
            y.push_back(p < 5);
            g.push_back("id" + std::to_string(p));
        }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto fa = stratified_kfold(y, g, 5, seed);
        std::vector<int> pos(5, 0), neg(5, 0);
        for (const auto& [id, f] : fa.fold_of_group) (id < "id5" ? pos : neg)[static_cast<std::size_t>(f)]++;
        for (int f = 0; f < 5; ++f) {
            EXPECT_EQ(pos[static_cast<std::size_t>(f)], 1);
            EXPECT_EQ(neg[static_cast<std::size_t>(f)], 1);
            EXPECT_EQ(fa.test_indices(f).size(), 6u);
        }
    }
}

TEST(Folds, BalancedPartitionWithoutLeakage) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> count(10, 120);
    for (int t = 0; t < 50; ++t) {
        const auto d = random_groups(rng, count(rng));
        const auto fa = stratified_kfold(d.labels, d.groups, 5, static_cast<std::uint64_t>(t));
        // Leakage scan: one fold per participant across all clips.
        std::map<std::string, std::set<int>> seen;
        for (std::size_t i = 0; i < d.labels.size(); ++i) seen[d.groups[i]].insert(fa.fold_of[i]);
        for (const auto& [g, folds] : seen) EXPECT_EQ(folds.size(), 1u) << g;
        // Partition: every example in exactly one test fold.
        std::vector<int> hits(d.labels.size(), 0);
        for (int f = 0; f < 5; ++f) {
            for (std::size_t i : fa.test_indices(f)) hits[i]++;
            EXPECT_EQ(fa.test_indices(f).size() + fa.train_indices(f).size(), d.labels.size());
        }
        for (int h : hits) EXPECT_EQ(h, 1);
        // Participant-level positive counts differ by at most one.
        std::vector<int> pos(5, 0);
        for (const auto& [g, s] : strata(d))
            if (s) pos[static_cast<std::size_t>(fa.fold_of_group.at(g))]++;
        EXPECT_LE(*std::max_element(pos.begin(), pos.end()) - *std::min_element(pos.begin(), pos.end()), 1);
    }
}

TEST(Folds, DeterministicAndSeedSensitive) {
    std::mt19937_64 rng(6);
    const auto d = random_groups(rng, 60);
    const auto a = stratified_kfold(d.labels, d.groups, 5, 11);
    EXPECT_EQ(a.fold_of, stratified_kfold(d.labels, d.groups, 5, 11).fold_of);
    EXPECT_NE(a.fold_of, stratified_kfold(d.labels, d.groups, 5, 12).fold_of);
}

TEST(Folds, ClipLevelAndErrors) {
    std::vector<int> y{1, 1, 0, 0, 1, 0};
    const auto fa = stratified_kfold(y, {}, 3, 0, false);
    for (int f = 0; f < 3; ++f) {
        const auto idx = fa.test_indices(f);
        ASSERT_EQ(idx.size(), 2u);
        EXPECT_NE(y[idx[0]], y[idx[1]]);
    }
    std::vector<std::string> g{"a", "a", "b", "b", "a", "c"};
    EXPECT_TB_ERROR(stratified_kfold(y, g, 2, 0), ErrorCode::TooFewGroups);
    EXPECT_TB_ERROR(stratified_kfold(y, g, 1, 0), ErrorCode::InvalidArgument);
    EXPECT_TB_ERROR(stratified_kfold(y, std::vector<std::string>{"a"}, 2, 0), ErrorCode::LengthMismatch);
}

TEST(CrossValidate, SeparableShuffledAndDeterministic) {
    std::mt19937_64 rng(7);
    std::vector<int> y;
    std::vector<std::string> g;
    std::vector<double> x;
    std::normal_distribution<double> noise;
    for (int p = 0; p < 100; ++p)
        for (int c = 0; c < 4; ++c) {
            y.push_back(p % 5 < 2);
            g.push_back("p" + std::to_string(p));
            x.push_back(noise(rng) * 0.2 + y.back());
        }
    std::set<std::size_t> touched;
    // Nearest class mean fitted on the training rows only.
    auto fit = [&](const FoldTask& task) {
        double m1 = 0, m0 = 0, n1 = 0, n0 = 0;
        for (std::size_t j = 0; j < task.train_indices.size(); ++j) {
            const double v = x[task.train_indices[j]];
            (task.train_labels[j] ? m1 : m0) += v;
            (task.train_labels[j] ? n1 : n0) += 1;
        }
        m1 /= n1;
        m0 /= n0;
        FoldResult r;
        for (std::size_t i : task.test_indices) {
            touched.insert(i);
            r.test_scores.push_back(1.0 / (1.0 + std::exp(-(x[i] - 0.5 * (m0 + m1)) * (m1 - m0) * 4)));
        }
        return r;
    };
    const auto cv = cross_validate("centroid", y, g, 5, 3, fit);
    ASSERT_EQ(cv.folds.size(), 5u);
    EXPECT_GE(cv.mean_auroc, 0.95);
    EXPECT_EQ(touched.size(), y.size());
    double m = 0;
    for (const auto& f : cv.folds) {
        m += f.auroc;
        EXPECT_TRUE(f.patient_auroc.has_value());
        EXPECT_EQ(f.n_train + f.n_test, y.size());
    }
    EXPECT_NEAR(cv.mean_auroc, m / 5, 1e-15);
    double v = 0;
    for (const auto& f : cv.folds) v += std::pow(f.auroc - cv.mean_auroc, 2);
    EXPECT_NEAR(cv.std_auroc, std::sqrt(v / 4), 1e-15);

    const auto again = cross_validate("centroid", y, g, 5, 3, fit);
    ASSERT_EQ(again.folds.size(), 5u);
    for (std::size_t f = 0; f < 5; ++f) {
        EXPECT_EQ(to_json(again.folds[f]).dump(), to_json(cv.folds[f]).dump());
    }

    // Label permutation at the participant level destroys the signal.
    std::vector<int> perm;
    for (int p = 0; p < 100; ++p) perm.push_back(p % 5 < 2);
    double null_mean = 0;
    for (int rep = 0; rep < 20; ++rep) {
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<int> ys;
        for (int p = 0; p < 100; ++p)
            for (int c = 0; c < 4; ++c) ys.push_back(perm[static_cast<std::size_t>(p)]);
        null_mean += cross_validate("centroid", ys, g, 5, 3, fit).mean_auroc / 20;
    }
    EXPECT_GE(null_mean, 0.4);
    EXPECT_LE(null_mean, 0.6);
}

TEST(CrossValidate, ConstantScorerGivesHalf) {
    std::vector<int> y{1, 0, 1, 0, 1, 0};
    // Every fold receives a group from each stratum, so none is skipped.
    const auto cv = cross_validate("const", y, {}, 3, 0, [](const FoldTask& t) {
        for (int l : t.train_labels) EXPECT_TRUE(l == 0 || l == 1);
        return FoldResult{std::vector<double>(t.test_indices.size(), 0.5), {}};
    }, false);
    EXPECT_EQ(cv.folds.size(), 3u);
    EXPECT_TRUE(cv.skipped_folds.empty());
    for (const auto& f : cv.folds) EXPECT_EQ(f.auroc, 0.5);
    EXPECT_EQ(cv.std_auroc, 0.0);
}

TEST(Reports, JsonAndTable) {
    const std::vector<int> y{1, 0, 1, 0};
    const std::vector<double> p{0.8, 0.3, 0.6, 0.7};
    const std::vector<std::string> g{"a", "b", "a", "c"};
    const auto r = make_report("extratrees", 2, 10, y, p, g);
    EXPECT_EQ(r.auroc, 0.75);
    ASSERT_TRUE(r.patient_auroc.has_value());
    EXPECT_EQ(*r.patient_auroc, 0.75);
    const auto j = to_json(r);
    EXPECT_EQ(j.at("auroc").get<double>(), 0.75);
    EXPECT_EQ(j.at("fold").get<int>(), 2);
    EXPECT_TRUE(j.contains("roc"));
    const std::vector<EvalReport> rs{r};
    EXPECT_NE(report_table(rs).find("extratrees"), std::string::npos);
}

TEST(Ensemble, Mean) {
    EXPECT_EQ(ensemble_mean(std::vector<double>{0.2, 0.4, 0.9}), 0.5);
    EXPECT_TB_ERROR(ensemble_mean(std::vector<double>{}), ErrorCode::InvalidArgument);
}
