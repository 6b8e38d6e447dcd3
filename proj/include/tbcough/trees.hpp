#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <thread>
#include <vector>

#include "tbcough/augmentation.hpp"  // child_seed
#include "tbcough/error.hpp"
#include "tbcough/matrix.hpp"

namespace tbcough {

/// Flattened binary tree node. Internal nodes route x[feature] <= threshold
/// to `left`. Leaves have feature == -1 and carry `value`: the positive-class
/// frequency for Extra-Trees, the additive raw score for boosting stages.
struct TreeNode {
    int feature = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;

    bool is_leaf() const noexcept { return feature < 0; }
    bool operator==(const TreeNode&) const = default;
};

struct DecisionTree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root

    double predict(std::span<const double> x) const {
        std::size_t i = 0;
        while (!nodes[i].is_leaf()) {
            const auto& n = nodes[i];
            i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
        }
        return nodes[i].value;
    }

    std::size_t leaf_count() const {
        return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
    }

    bool operator==(const DecisionTree&) const = default;
};

namespace detail {
inline void check_binary_targets(const Matrix<double>& X, std::span<const int> y) {
    require(X.cols() > 0, ErrorCode::InvalidArgument, "design matrix has zero features");
    require(X.rows() == y.size(), ErrorCode::LengthMismatch, "X rows and y length differ");
    require(X.rows() >= 2, ErrorCode::InvalidArgument, "need at least 2 training rows");
    std::size_t pos = 0;
    for (int v : y) {
        require(v == 0 || v == 1, ErrorCode::InvalidArgument, "labels must be 0 or 1");
        pos += static_cast<std::size_t>(v);
    }
    require(pos > 0 && pos < y.size(), ErrorCode::SingleClass, "training labels contain a single class");
    for (double v : X.data()) require(std::isfinite(v), ErrorCode::NonFinite, "design matrix is not finite");
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += jobs) fn(i);
        });
    for (auto& t : pool) t.join();
}

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Extremely randomized trees

struct ExtraTreesParams {
    std::size_t n_trees = 300;
    std::size_t max_depth = 0;  // 0 = unlimited
    std::size_t min_samples_leaf = 2;
    std::size_t k_features = 0;  // 0 = ceil(sqrt(d))
    std::uint64_t seed = 0;
    std::size_t n_jobs = 1;
};

struct ExtraTreesModel {
    ExtraTreesParams params;
    std::size_t n_features = 0;
    std::vector<DecisionTree> trees;
};

namespace detail {

class ExtraTreeBuilder {
public:
    ExtraTreeBuilder(const Matrix<double>& X, std::span<const int> y, const ExtraTreesParams& p, std::size_t k,
                     std::uint64_t seed)
        : X_(X), y_(y), p_(p), k_(k), rng_(seed), rows_(X.rows()), features_(X.cols()) {
        std::iota(rows_.begin(), rows_.end(), 0);
        std::iota(features_.begin(), features_.end(), 0);
    }

    DecisionTree build() {
        tree_.nodes.clear();
        grow(0, rows_.size(), 0);
        return std::move(tree_);
    }

private:
    struct Split {
        int feature = -1;
        double threshold = 0.0;
        double gain = -1.0;
    };

    static double gini(double pos, double n) {
        const double p = pos / n;
        return 1.0 - p * p - (1.0 - p) * (1.0 - p);
    }

    int grow(std::size_t begin, std::size_t end, std::size_t depth) {
        const std::size_t n = end - begin;
        std::size_t pos = 0;
        for (std::size_t i = begin; i < end; ++i) pos += static_cast<std::size_t>(y_[rows_[i]]);
        const int id = static_cast<int>(tree_.nodes.size());
        tree_.nodes.push_back({-1, 0.0, -1, -1, static_cast<double>(pos) / static_cast<double>(n)});

        const bool pure = pos == 0 || pos == n;
        const bool too_small = n < 2 * p_.min_samples_leaf;
        const bool too_deep = p_.max_depth != 0 && depth >= p_.max_depth;
        if (pure || too_small || too_deep) return id;

        const Split best = choose_split(begin, end, pos);
        if (best.feature < 0) return id;

        const auto f = static_cast<std::size_t>(best.feature);
        const auto mid = std::partition(rows_.begin() + static_cast<std::ptrdiff_t>(begin),
                                        rows_.begin() + static_cast<std::ptrdiff_t>(end),
                                        [&](std::size_t r) { return X_(r, f) <= best.threshold; });
        const auto split_at = static_cast<std::size_t>(mid - rows_.begin());
        // Left then right, depth-first; children sort deterministically
        // because std::partition is applied to the same index order.
        const int left = grow(begin, split_at, depth + 1);
        const int right = grow(split_at, end, depth + 1);
        auto& node = tree_.nodes[static_cast<std::size_t>(id)];
        node.feature = best.feature;
        node.threshold = best.threshold;
        node.left = left;
        node.right = right;
        return id;
    }

    Split choose_split(std::size_t begin, std::size_t end, std::size_t pos) {
        const double n = static_cast<double>(end - begin);
        const double parent = gini(static_cast<double>(pos), n);
        std::shuffle(features_.begin(), features_.end(), rng_);
        std::uniform_real_distribution<double> unit(0.0, 1.0);

        Split best;
        std::size_t visited = 0;
        for (std::size_t fi = 0; fi < features_.size() && visited < k_; ++fi) {
            const std::size_t f = features_[fi];
            double lo = X_(rows_[begin], f), hi = lo;
            for (std::size_t i = begin + 1; i < end; ++i) {
                const double v = X_(rows_[i], f);
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            if (!(hi > lo)) continue;  // constant at this node
            ++visited;
            const double thr = lo + unit(rng_) * (hi - lo);
            double nl = 0, pl = 0;
            for (std::size_t i = begin; i < end; ++i) {
                if (X_(rows_[i], f) <= thr) {
                    nl += 1;
                    pl += y_[rows_[i]];
                }
            }
            const double nr = n - nl;
            const double pr = static_cast<double>(pos) - pl;
            const auto min_leaf = static_cast<double>(p_.min_samples_leaf);
            if (nl < min_leaf || nr < min_leaf || nl == 0 || nr == 0) continue;
            const double gain = parent - (nl / n) * gini(pl, nl) - (nr / n) * gini(pr, nr);
            const int fi_int = static_cast<int>(f);
            const bool better = gain > best.gain ||
                                (gain == best.gain && (fi_int < best.feature ||
                                                       (fi_int == best.feature && thr < best.threshold)));
            if (better) best = {fi_int, thr, gain};
        }
        return best;
    }

    const Matrix<double>& X_;
    std::span<const int> y_;
    const ExtraTreesParams& p_;
    std::size_t k_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> rows_;
    std::vector<std::size_t> features_;
    DecisionTree tree_;
};

}  // namespace detail

/// Each tree sees the full training set (no bootstrap). At every node, k
/// random non-constant features each get one uniform threshold between the
/// node-local min and max; the best Gini reduction wins.
inline ExtraTreesModel extra_trees_fit(const Matrix<double>& X, std::span<const int> y,
                                       const ExtraTreesParams& params = {}) {
    detail::check_binary_targets(X, y);
    require(params.n_trees >= 1, ErrorCode::InvalidArgument, "n_trees must be >= 1");
    require(params.min_samples_leaf >= 1, ErrorCode::InvalidArgument, "min_samples_leaf must be >= 1");
    ExtraTreesModel m;
    m.params = params;
    m.n_features = X.cols();
    const std::size_t k =
        params.k_features ? std::min(params.k_features, X.cols())
                          : static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(X.cols()))));
    m.trees.resize(params.n_trees);
    detail::parallel_for(params.n_trees, params.n_jobs, [&](std::size_t t) {
        detail::ExtraTreeBuilder builder(X, y, params, k, child_seed(params.seed, t));
        m.trees[t] = builder.build();
    });
    return m;
}

/// Mean of the per-tree positive-class leaf frequencies.
inline double extra_trees_predict_proba(const ExtraTreesModel& m, std::span<const double> x) {
    require(x.size() == m.n_features, ErrorCode::ShapeMismatch, "feature vector dimension mismatch");
    require(!m.trees.empty(), ErrorCode::InvalidArgument, "forest has no trees");
    double acc = 0.0;
    for (const auto& t : m.trees) acc += t.predict(x);
    return acc / static_cast<double>(m.trees.size());
}

inline std::vector<double> extra_trees_predict_proba(const ExtraTreesModel& m, const Matrix<double>& X) {
    std::vector<double> out(X.rows());
    for (std::size_t i = 0; i < X.rows(); ++i) out[i] = extra_trees_predict_proba(m, X.row(i));
    return out;
}

// ---------------------------------------------------------------------------
// Histogram gradient boosting (logistic loss)

struct HgbParams {
    std::size_t n_iter = 200;
    double learning_rate = 0.1;
    std::size_t max_depth = 6;
    std::size_t max_leaf = 31;
    std::size_t n_bins = 256;
    double l2 = 1.0;
    std::size_t min_samples_leaf = 20;
    double min_hessian = 1e-3;
};

struct HgbModel {
    HgbParams params;
    std::size_t n_features = 0;
    double initial_log_odds = 0.0;
    std::vector<DecisionTree> stages;
    std::vector<std::vector<double>> bin_edges;  // per feature, strictly increasing
};

/// Quantile bin edges for one feature: midpoints between distinct values when
/// there are few of them, otherwise interpolated percentiles. At most
/// n_bins - 1 edges; a constant feature gets none (a single bin).
inline std::vector<double> quantile_bin_edges(std::vector<double> values, std::size_t n_bins) {
    require(n_bins >= 2 && n_bins <= 256, ErrorCode::InvalidArgument, "n_bins must be in [2, 256]");
    std::sort(values.begin(), values.end());
    std::vector<double> distinct;
    for (double v : values)
        if (distinct.empty() || v != distinct.back()) distinct.push_back(v);
    std::vector<double> edges;
    if (distinct.size() <= n_bins) {
        for (std::size_t i = 0; i + 1 < distinct.size(); ++i) edges.push_back(0.5 * (distinct[i] + distinct[i + 1]));
    } else {
        const auto n = static_cast<double>(values.size());
        for (std::size_t q = 1; q < n_bins; ++q) {
            const double pos = (n - 1.0) * static_cast<double>(q) / static_cast<double>(n_bins);
            const auto lo = static_cast<std::size_t>(pos);
            const std::size_t hi = std::min(lo + 1, values.size() - 1);
            const double e = values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
            if (edges.empty() || e > edges.back()) edges.push_back(e);
        }
        // An edge equal to the maximum would leave an empty top bin.
        while (!edges.empty() && edges.back() >= distinct.back()) edges.pop_back();
    }
    return edges;
}

/// Bin index = number of edges strictly below x, so x <= edges[b] iff bin <= b.
inline std::uint8_t bin_of(std::span<const double> edges, double x) {
    return static_cast<std::uint8_t>(std::lower_bound(edges.begin(), edges.end(), x) - edges.begin());
}

namespace detail {

struct HistBin {
    double g = 0.0;
    double h = 0.0;
    std::uint32_t n = 0;
};

class HgbTreeGrower {
public:
    HgbTreeGrower(const std::vector<std::uint8_t>& bins, std::size_t n_rows, std::size_t n_features,
                  const std::vector<std::vector<double>>& edges, const std::vector<double>& g,
                  const std::vector<double>& h, const HgbParams& p)
        : bins_(bins), n_rows_(n_rows), d_(n_features), edges_(edges), g_(g), h_(h), p_(p) {}

    DecisionTree grow() {
        DecisionTree tree;
        std::vector<Leaf> open;
        Leaf root;
        root.rows.resize(n_rows_);
        std::iota(root.rows.begin(), root.rows.end(), 0);
        root.node = 0;
        root.depth = 0;
        tree.nodes.push_back({});
        build_hist(root);
        finish_leaf(root);
        open.push_back(std::move(root));
        std::size_t leaves = 1;

        while (leaves < p_.max_leaf) {
            // Best-first: expand the open leaf with the largest gain.
            std::size_t pick = open.size();
            for (std::size_t i = 0; i < open.size(); ++i) {
                if (open[i].split.feature < 0) continue;
                if (pick == open.size() || open[i].split.gain > open[pick].split.gain) pick = i;
            }
            if (pick == open.size()) break;
            Leaf parent = std::move(open[pick]);
            open.erase(open.begin() + static_cast<std::ptrdiff_t>(pick));

            const auto f = static_cast<std::size_t>(parent.split.feature);
            const auto b = parent.split.bin;
            Leaf left, right;
            for (std::size_t r : parent.rows) (bins_[r * d_ + f] <= b ? left.rows : right.rows).push_back(r);
            left.depth = right.depth = parent.depth + 1;
            left.node = static_cast<int>(tree.nodes.size());
            right.node = left.node + 1;
            tree.nodes.push_back({});
            tree.nodes.push_back({});
            auto& pn = tree.nodes[static_cast<std::size_t>(parent.node)];
            pn.feature = static_cast<int>(f);
            pn.threshold = edges_[f][b];
            pn.left = left.node;
            pn.right = right.node;

            // Histogram subtraction: build the smaller child, derive the other.
            Leaf& small = left.rows.size() <= right.rows.size() ? left : right;
            Leaf& large = &small == &left ? right : left;
            build_hist(small);
            large.hist = std::move(parent.hist);
            for (std::size_t i = 0; i < large.hist.size(); ++i) {
                large.hist[i].g -= small.hist[i].g;
                large.hist[i].h -= small.hist[i].h;
                large.hist[i].n -= small.hist[i].n;
            }
            finish_leaf(left);
            finish_leaf(right);
            open.push_back(std::move(left));
            open.push_back(std::move(right));
            ++leaves;
        }
        for (const auto& leaf : open) {
            auto& node = tree.nodes[static_cast<std::size_t>(leaf.node)];
            node.feature = -1;
            node.value = -leaf.g_sum / (leaf.h_sum + p_.l2);
        }
        return tree;
    }

private:
    struct SplitChoice {
        int feature = -1;
        std::uint8_t bin = 0;
        double gain = 0.0;
    };
    struct Leaf {
        std::vector<std::size_t> rows;
        std::vector<HistBin> hist;  // d x 256
        int node = 0;
        std::size_t depth = 0;
        double g_sum = 0.0, h_sum = 0.0;
        SplitChoice split;
    };

    void build_hist(Leaf& leaf) const {
        leaf.hist.assign(d_ * 256, HistBin{});
        for (std::size_t r : leaf.rows) {
            const std::uint8_t* row = &bins_[r * d_];
            const double g = g_[r], h = h_[r];
            for (std::size_t f = 0; f < d_; ++f) {
                auto& hb = leaf.hist[f * 256 + row[f]];
                hb.g += g;
                hb.h += h;
                hb.n += 1;
            }
        }
    }

    void finish_leaf(Leaf& leaf) const {
        leaf.g_sum = 0.0;
        leaf.h_sum = 0.0;
        for (std::size_t r : leaf.rows) {
            leaf.g_sum += g_[r];
            leaf.h_sum += h_[r];
        }
        leaf.split = {};
        if (p_.max_depth != 0 && leaf.depth >= p_.max_depth) return;
        if (leaf.rows.size() < 2 * p_.min_samples_leaf) return;
        const double G = leaf.g_sum, H = leaf.h_sum;
        const double parent_score = G * G / (H + p_.l2);
        const auto n_total = static_cast<std::uint32_t>(leaf.rows.size());
        for (std::size_t f = 0; f < d_; ++f) {
            const std::size_t n_bins = edges_[f].size() + 1;
            if (n_bins < 2) continue;  // constant feature
            double gl = 0, hl = 0;
            std::uint32_t nl = 0;
            for (std::size_t b = 0; b + 1 < n_bins; ++b) {
                const auto& hb = leaf.hist[f * 256 + b];
                gl += hb.g;
                hl += hb.h;
                nl += hb.n;
                const std::uint32_t nr = n_total - nl;
                if (nl < p_.min_samples_leaf) continue;
                if (nr < p_.min_samples_leaf) break;
                const double gr = G - gl, hr = H - hl;
                if (hl < p_.min_hessian || hr < p_.min_hessian) continue;
                const double gain = 0.5 * (gl * gl / (hl + p_.l2) + gr * gr / (hr + p_.l2) - parent_score);
                if (gain > leaf.split.gain + 1e-12)
                    leaf.split = {static_cast<int>(f), static_cast<std::uint8_t>(b), gain};
            }
        }
    }

    const std::vector<std::uint8_t>& bins_;
    std::size_t n_rows_, d_;
    const std::vector<std::vector<double>>& edges_;
    const std::vector<double>& g_;
    const std::vector<double>& h_;
    const HgbParams& p_;
};

inline double log_loss_from_raw(std::span<const int> y, std::span<const double> raw) {
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        // log(1 + e^-z) for y=1, log(1 + e^z) for y=0, computed stably.
        const double z = y[i] ? raw[i] : -raw[i];
        acc += z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
    }
    return acc / static_cast<double>(y.size());
}

}  // namespace detail

/// Raw score of the boosted ensemble; predict_proba is its sigmoid.
inline double hgb_raw_score(const HgbModel& m, std::span<const double> x) {
    require(x.size() == m.n_features, ErrorCode::ShapeMismatch, "feature vector dimension mismatch");
    double raw = m.initial_log_odds;
    for (const auto& s : m.stages) raw += m.params.learning_rate * s.predict(x);
    return raw;
}

inline double hgb_predict_proba(const HgbModel& m, std::span<const double> x) {
    return detail::sigmoid(hgb_raw_score(m, x));
}

inline std::vector<double> hgb_predict_proba(const HgbModel& m, const Matrix<double>& X) {
    std::vector<double> out(X.rows());
    for (std::size_t i = 0; i < X.rows(); ++i) out[i] = hgb_predict_proba(m, X.row(i));
    return out;
}

/// Gradient boosting on quantile-binned features. Each stage fits a
/// best-first histogram tree to g = p - y, h = p (1 - p); leaf value is
/// -G / (H + l2). `loss_trace`, when given, receives the training log-loss
/// after initialization and after every stage.
inline HgbModel hgb_fit(const Matrix<double>& X, std::span<const int> y, const HgbParams& params = {},
                        std::vector<double>* loss_trace = nullptr) {
    detail::check_binary_targets(X, y);
    require(params.n_bins >= 2 && params.n_bins <= 256, ErrorCode::InvalidArgument, "n_bins must be in [2, 256]");
    require(params.max_leaf >= 2, ErrorCode::InvalidArgument, "max_leaf must be >= 2");
    require(params.learning_rate >= 0.0, ErrorCode::InvalidArgument, "learning rate must be >= 0");
    require(params.min_samples_leaf >= 1, ErrorCode::InvalidArgument, "min_samples_leaf must be >= 1");

    const std::size_t n = X.rows(), d = X.cols();
    HgbModel m;
    m.params = params;
    m.n_features = d;
    m.bin_edges.resize(d);
    std::vector<double> col(n);
    for (std::size_t f = 0; f < d; ++f) {
        for (std::size_t i = 0; i < n; ++i) col[i] = X(i, f);
        m.bin_edges[f] = quantile_bin_edges(col, params.n_bins);
    }
    std::vector<std::uint8_t> bins(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t f = 0; f < d; ++f) bins[i * d + f] = bin_of(m.bin_edges[f], X(i, f));

    double pos = 0;
    for (int v : y) pos += v;
    const double prior = pos / static_cast<double>(n);
    m.initial_log_odds = std::log(prior / (1.0 - prior));

    std::vector<double> raw(n, m.initial_log_odds), g(n), h(n);
    if (loss_trace) loss_trace->assign(1, detail::log_loss_from_raw(y, raw));
    for (std::size_t it = 0; it < params.n_iter; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            const double p = detail::sigmoid(raw[i]);
            g[i] = p - y[i];
            h[i] = p * (1.0 - p);
        }
        detail::HgbTreeGrower grower(bins, n, d, m.bin_edges, g, h, params);
        DecisionTree stage = grower.grow();
        for (std::size_t i = 0; i < n; ++i) raw[i] += params.learning_rate * stage.predict(X.row(i));
        m.stages.push_back(std::move(stage));
        if (loss_trace) loss_trace->push_back(detail::log_loss_from_raw(y, raw));
    }
    return m;
}

}  // namespace tbcough
