#include "ttf/tree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>

#include "ttf/rng.hpp"

namespace ttf {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kHessEps = 1e-12;
constexpr double kMinGain = 1e-12;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Column-major feature matrix. Categorical cells carry their code as a
// double; unseen categories and missing cells carry NaN.
struct FeatureMatrix {
    size_t n = 0;
    std::vector<std::vector<double>> cols;  // per feature slot
    std::vector<bool> is_cat;
    std::vector<int> n_codes;
};

FeatureMatrix build_features(const Ensemble& e, const Table& t) {
    FeatureMatrix fm;
    fm.n = t.n_rows();
    fm.cols.resize(e.feature_cols.size());
    fm.is_cat.resize(e.feature_cols.size());
    fm.n_codes.resize(e.feature_cols.size());
    for (size_t f = 0; f < e.feature_cols.size(); ++f) {
        const size_t c = static_cast<size_t>(e.feature_cols[f]);
        const bool cat = e.schema[c].kind == ColumnKind::categorical;
        fm.is_cat[f] = cat;
        fm.n_codes[f] = cat ? static_cast<int>(e.cat_codes[c].size()) : 0;
        auto& col = fm.cols[f];
        col.resize(fm.n);
        for (size_t r = 0; r < fm.n; ++r) {
            const Cell& cell = t.cell(r, c);
            if (cell.missing) {
                col[r] = std::numeric_limits<double>::quiet_NaN();
            } else if (cat) {
                const auto& codes = e.cat_codes[c];
                const std::string& value = t.cat_value(r, c);
                const auto it = std::find(codes.begin(), codes.end(), value);
                col[r] = it == codes.end() ? std::numeric_limits<double>::quiet_NaN()
                                           : static_cast<double>(it - codes.begin());
            } else {
                col[r] = cell.num;
            }
        }
    }
    return fm;
}

struct SplitInfo {
    double gain = -kInf;
    int feature = -1;
    double threshold = 0.0;
    std::vector<int32_t> left_codes;
    bool valid() const { return feature >= 0; }
};

struct NodeTask {
    int node = 0;
    int depth = 0;
    std::vector<int> rows;
    double g_sum = 0.0, h_sum = 0.0;
    SplitInfo split;
};

struct TaskOrder {
    bool operator()(const NodeTask& a, const NodeTask& b) const { return a.split.gain < b.split.gain; }
};

double leaf_value(double g, double h) { return -g / (h + kHessEps); }

double split_score(double g, double h) { return g * g / (h + kHessEps); }

SplitInfo best_split(const FeatureMatrix& fm, const std::vector<int>& rows,
                     const std::vector<int>& features, const std::vector<double>& grad,
                     const std::vector<double>& hess, double g_sum, double h_sum,
                     int min_samples_leaf) {
    SplitInfo best;
    const double parent = split_score(g_sum, h_sum);
    const int n = static_cast<int>(rows.size());

    for (int f : features) {
        const auto& col = fm.cols[static_cast<size_t>(f)];
        if (!fm.is_cat[static_cast<size_t>(f)]) {
            std::vector<int> order = rows;
            std::sort(order.begin(), order.end(),
                      [&](int a, int b) { return col[static_cast<size_t>(a)] < col[static_cast<size_t>(b)]; });
            double gl = 0.0, hl = 0.0;
            for (int i = 0; i + 1 < n; ++i) {
                const int r = order[static_cast<size_t>(i)];
                gl += grad[static_cast<size_t>(r)];
                hl += hess[static_cast<size_t>(r)];
                const double v = col[static_cast<size_t>(r)];
                const double next = col[static_cast<size_t>(order[static_cast<size_t>(i + 1)])];
                if (v == next) continue;
                if (i + 1 < min_samples_leaf || n - i - 1 < min_samples_leaf) continue;
                const double gain = split_score(gl, hl) + split_score(g_sum - gl, h_sum - hl) - parent;
                if (gain > best.gain) {
                    best.gain = gain;
                    best.feature = f;
                    best.threshold = 0.5 * (v + next);
                    best.left_codes.clear();
                }
            }
        } else {
            const int codes = fm.n_codes[static_cast<size_t>(f)];
            std::vector<double> gc(static_cast<size_t>(codes), 0.0), hc(static_cast<size_t>(codes), 0.0);
            std::vector<int> count(static_cast<size_t>(codes), 0);
            for (int r : rows) {
                const int code = static_cast<int>(col[static_cast<size_t>(r)]);
                gc[static_cast<size_t>(code)] += grad[static_cast<size_t>(r)];
                hc[static_cast<size_t>(code)] += hess[static_cast<size_t>(r)];
                ++count[static_cast<size_t>(code)];
            }
            // Fisher ordering: sort present categories by g/h, then scan prefixes.
            std::vector<int> present;
            for (int c = 0; c < codes; ++c)
                if (count[static_cast<size_t>(c)] > 0) present.push_back(c);
            if (present.size() < 2) continue;
            std::sort(present.begin(), present.end(), [&](int a, int b) {
                const double ra = gc[static_cast<size_t>(a)] / (hc[static_cast<size_t>(a)] + kHessEps);
                const double rb = gc[static_cast<size_t>(b)] / (hc[static_cast<size_t>(b)] + kHessEps);
                return ra < rb;
            });
            double gl = 0.0, hl = 0.0;
            int nl = 0;
            for (size_t j = 0; j + 1 < present.size(); ++j) {
                const int c = present[j];
                gl += gc[static_cast<size_t>(c)];
                hl += hc[static_cast<size_t>(c)];
                nl += count[static_cast<size_t>(c)];
                if (nl < min_samples_leaf || n - nl < min_samples_leaf) continue;
                const double gain = split_score(gl, hl) + split_score(g_sum - gl, h_sum - hl) - parent;
                if (gain > best.gain) {
                    best.gain = gain;
                    best.feature = f;
                    best.threshold = 0.0;
                    best.left_codes.assign(present.begin(), present.begin() + static_cast<long>(j + 1));
                    std::sort(best.left_codes.begin(), best.left_codes.end());
                }
            }
        }
    }
    return best;
}

Tree grow_tree(const FeatureMatrix& fm, const std::vector<int>& bag_rows,
               const std::vector<int>& features, const std::vector<double>& grad,
               const std::vector<double>& hess, const TreeHyperparams& h) {
    Tree tree;
    tree.nodes.emplace_back();

    auto make_task = [&](int node, int depth, std::vector<int> rows) {
        NodeTask task;
        task.node = node;
        task.depth = depth;
        for (int r : rows) {
            task.g_sum += grad[static_cast<size_t>(r)];
            task.h_sum += hess[static_cast<size_t>(r)];
        }
        task.rows = std::move(rows);
        const bool expandable = depth < h.max_depth &&
                                static_cast<int>(task.rows.size()) >= 2 * h.min_samples_leaf;
        if (expandable) {
            task.split = best_split(fm, task.rows, features, grad, hess, task.g_sum, task.h_sum,
                                    h.min_samples_leaf);
            if (task.split.gain <= std::max(h.min_split_gain, kMinGain)) task.split = SplitInfo{};
        }
        return task;
    };

    std::priority_queue<NodeTask, std::vector<NodeTask>, TaskOrder> open;
    open.push(make_task(0, 0, bag_rows));
    int leaves = 1;  // open + closed

    auto close = [&](const NodeTask& task) {
        TreeNode& node = tree.nodes[static_cast<size_t>(task.node)];
        node.feature = -1;
        node.value = leaf_value(task.g_sum, task.h_sum);
        node.leaf_id = ++tree.n_leaves;
    };

    while (!open.empty()) {
        NodeTask task = open.top();
        open.pop();
        if (!task.split.valid() || leaves >= h.max_leaves) {
            close(task);
            continue;
        }

        std::vector<int> left_rows, right_rows;
        const auto& col = fm.cols[static_cast<size_t>(task.split.feature)];
        for (int r : task.rows) {
            const double v = col[static_cast<size_t>(r)];
            bool go_left;
            if (task.split.left_codes.empty()) {
                go_left = v <= task.split.threshold;
            } else {
                go_left = std::binary_search(task.split.left_codes.begin(), task.split.left_codes.end(),
                                             static_cast<int32_t>(v));
            }
            (go_left ? left_rows : right_rows).push_back(r);
        }

        TreeNode& node = tree.nodes[static_cast<size_t>(task.node)];
        node.feature = task.split.feature;
        node.threshold = task.split.threshold;
        node.left_codes = task.split.left_codes;
        node.default_left = left_rows.size() >= right_rows.size();
        node.left = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        node.right = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        ++leaves;

        const int left_idx = tree.nodes[static_cast<size_t>(task.node)].left;
        const int right_idx = tree.nodes[static_cast<size_t>(task.node)].right;
        open.push(make_task(left_idx, task.depth + 1, std::move(left_rows)));
        open.push(make_task(right_idx, task.depth + 1, std::move(right_rows)));
    }
    return tree;
}

}  // namespace

std::pair<int, double> Tree::route(const std::vector<double>& features) const {
    int idx = 0;
    for (;;) {
        const TreeNode& node = nodes[static_cast<size_t>(idx)];
        if (node.feature < 0) return {node.leaf_id, node.value};
        const double v = features[static_cast<size_t>(node.feature)];
        bool go_left;
        if (std::isnan(v)) {
            go_left = node.default_left;
        } else if (node.left_codes.empty()) {
            go_left = v <= node.threshold;
        } else {
            go_left = std::binary_search(node.left_codes.begin(), node.left_codes.end(),
                                         static_cast<int32_t>(v));
        }
        idx = go_left ? node.left : node.right;
    }
}

std::vector<int> Ensemble::leaf_counts() const {
    std::vector<int> counts;
    counts.reserve(trees.size());
    for (const auto& tree : trees) counts.push_back(tree.n_leaves);
    return counts;
}

std::vector<double> gbm_targets(const Ensemble& e, const Table& t) {
    std::vector<double> y(t.n_rows());
    const size_t c = static_cast<size_t>(e.target_col);
    for (size_t r = 0; r < t.n_rows(); ++r) {
        const Cell& cell = t.cell(r, c);
        if (cell.missing) throw DataError("missing target value at row " + std::to_string(r + 1));
        if (e.objective == Objective::squared_error) {
            y[r] = cell.num;
        } else {
            y[r] = t.cat_value(r, c) == e.positive_category ? 1.0 : 0.0;
        }
    }
    return y;
}

Ensemble fit_gbm(const Table& t, const std::string& target, const TreeHyperparams& h, uint64_t seed) {
    const int target_col = t.col_index(target);
    if (target_col < 0) throw DataError("target column '" + target + "' not found");
    if (t.n_rows() < 20) throw DataError("fit_gbm needs at least 20 rows");
    TTF_CHECK(h.n_trees >= 1 && h.max_leaves >= 2 && h.min_samples_leaf >= 1, "bad tree hyperparams");

    Ensemble e;
    e.schema = t.schema();
    e.target = target;
    e.target_col = target_col;
    e.shrinkage = h.learning_rate;
    e.hyperparams = h;
    for (size_t c = 0; c < t.n_cols(); ++c) {
        if (static_cast<int>(c) != target_col) e.feature_cols.push_back(static_cast<int>(c));
    }
    if (e.feature_cols.empty()) throw DataError("fit_gbm needs at least one feature column");
    e.cat_codes.resize(t.n_cols());
    for (size_t c = 0; c < t.n_cols(); ++c) {
        if (t.schema()[c].kind == ColumnKind::categorical) e.cat_codes[c] = t.pool(c);
    }

    const auto& target_spec = t.schema()[static_cast<size_t>(target_col)];
    if (target_spec.kind == ColumnKind::categorical) {
        e.objective = Objective::logistic;
        // Class frequencies over the target pool.
        std::vector<size_t> freq(t.pool(static_cast<size_t>(target_col)).size(), 0);
        for (size_t r = 0; r < t.n_rows(); ++r) {
            const Cell& cell = t.cell(r, static_cast<size_t>(target_col));
            if (cell.missing) throw DataError("missing target value at row " + std::to_string(r + 1));
            ++freq[static_cast<size_t>(cell.cat)];
        }
        size_t n_classes = 0, majority = 0;
        for (size_t i = 0; i < freq.size(); ++i) {
            if (freq[i] > 0) ++n_classes;
            if (freq[i] > freq[majority]) majority = i;
        }
        if (n_classes < 2) throw DataError("classification target '" + target + "' has fewer than 2 classes");
        // Binary: the second observed class is positive. Multiclass reduces
        // to majority-vs-rest.
        if (n_classes == 2) {
            size_t second = 0, seen = 0;
            for (size_t i = 0; i < freq.size(); ++i) {
                if (freq[i] > 0 && ++seen == 2) second = i;
            }
            e.positive_category = t.pool(static_cast<size_t>(target_col))[second];
        } else {
            e.positive_category = t.pool(static_cast<size_t>(target_col))[majority];
        }
    } else {
        e.objective = Objective::squared_error;
    }

    const std::vector<double> y = gbm_targets(e, t);
    const double mean_y = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    if (e.objective == Objective::squared_error) {
        const bool constant = std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
        if (constant) throw DataError("target '" + target + "' is constant");
        e.base_score = mean_y;
    } else {
        const double p = std::clamp(mean_y, 1e-6, 1.0 - 1e-6);
        e.base_score = std::log(p / (1.0 - p));
    }

    const FeatureMatrix fm = build_features(e, t);
    const size_t n = t.n_rows();
    std::vector<double> raw(n, e.base_score);
    std::vector<double> grad(n), hess(n);
    Rng rng(seed);

    for (int k = 0; k < h.n_trees; ++k) {
        for (size_t r = 0; r < n; ++r) {
            if (e.objective == Objective::logistic) {
                const double p = sigmoid(raw[r]);
                grad[r] = p - y[r];
                hess[r] = std::max(p * (1.0 - p), 1e-6);
            } else {
                grad[r] = raw[r] - y[r];
                hess[r] = 1.0;
            }
        }

        // Seeded per-tree row bagging and feature subsampling.
        std::vector<int> bag(n);
        std::iota(bag.begin(), bag.end(), 0);
        if (h.bagging_fraction < 1.0) {
            rng.shuffle(bag);
            const size_t keep = std::max<size_t>(
                2, static_cast<size_t>(std::llround(h.bagging_fraction * static_cast<double>(n))));
            bag.resize(std::min(keep, n));
            std::sort(bag.begin(), bag.end());
        }
        std::vector<int> features(e.feature_cols.size());
        std::iota(features.begin(), features.end(), 0);
        if (h.feature_fraction < 1.0) {
            rng.shuffle(features);
            const size_t keep = std::max<size_t>(
                1, static_cast<size_t>(std::llround(h.feature_fraction *
                                                    static_cast<double>(features.size()))));
            features.resize(std::min(keep, features.size()));
            std::sort(features.begin(), features.end());
        }

        Tree tree = grow_tree(fm, bag, features, grad, hess, h);
        for (size_t r = 0; r < n; ++r) {
            std::vector<double> row(fm.cols.size());
            for (size_t f = 0; f < fm.cols.size(); ++f) row[f] = fm.cols[f][r];
            raw[r] += e.shrinkage * tree.route(row).second;
        }
        e.trees.push_back(std::move(tree));
    }

    // Every leaf must be reachable from the full training set.
    const LeafIndexMatrix j = apply_leaves(e, t);
    for (int k = 0; k < e.n_trees(); ++k) {
        std::vector<bool> hit(static_cast<size_t>(e.trees[static_cast<size_t>(k)].n_leaves), false);
        for (size_t r = 0; r < n; ++r) hit[static_cast<size_t>(j.at(r, k) - 1)] = true;
        TTF_CHECK(std::all_of(hit.begin(), hit.end(), [](bool b) { return b; }),
                  "unreachable leaf after fit");
    }
    return e;
}

namespace {

void check_apply_schema(const Ensemble& e, const Table& t) {
    if (t.schema().size() != e.schema.size()) throw DataError("apply: schema width mismatch");
    for (size_t c = 0; c < e.schema.size(); ++c) {
        if (t.schema()[c].name != e.schema[c].name || t.schema()[c].kind != e.schema[c].kind)
            throw DataError("apply: schema mismatch at column '" + e.schema[c].name + "'");
    }
}

std::vector<double> feature_row(const Ensemble& e, const Table& t, size_t r) {
    std::vector<double> row(e.feature_cols.size());
    for (size_t f = 0; f < e.feature_cols.size(); ++f) {
        const size_t c = static_cast<size_t>(e.feature_cols[f]);
        const Cell& cell = t.cell(r, c);
        if (cell.missing) {
            row[f] = std::numeric_limits<double>::quiet_NaN();
        } else if (e.schema[c].kind == ColumnKind::categorical) {
            const auto& codes = e.cat_codes[c];
            const std::string& value = t.cat_value(r, c);
            const auto it = std::find(codes.begin(), codes.end(), value);
            row[f] = it == codes.end() ? std::numeric_limits<double>::quiet_NaN()
                                       : static_cast<double>(it - codes.begin());
        } else {
            row[f] = cell.num;
        }
    }
    return row;
}

}  // namespace

LeafIndexMatrix apply_leaves(const Ensemble& e, const Table& t) {
    check_apply_schema(e, t);
    LeafIndexMatrix j;
    j.rows = t.n_rows();
    j.n_trees = e.n_trees();
    j.data.resize(j.rows * static_cast<size_t>(j.n_trees));
    for (size_t r = 0; r < t.n_rows(); ++r) {
        const std::vector<double> row = feature_row(e, t, r);
        for (int k = 0; k < e.n_trees(); ++k) {
            j.data[r * static_cast<size_t>(j.n_trees) + static_cast<size_t>(k)] =
                e.trees[static_cast<size_t>(k)].route(row).first;
        }
    }
    return j;
}

std::vector<double> predict(const Ensemble& e, const Table& t) {
    check_apply_schema(e, t);
    std::vector<double> out(t.n_rows());
    for (size_t r = 0; r < t.n_rows(); ++r) {
        const std::vector<double> row = feature_row(e, t, r);
        double raw = e.base_score;
        for (const auto& tree : e.trees) raw += e.shrinkage * tree.route(row).second;
        out[r] = e.objective == Objective::logistic ? sigmoid(raw) : raw;
    }
    return out;
}

namespace {

TreeHyperparams sample_hyperparams(Rng& rng) {
    TreeHyperparams h;
    h.learning_rate = std::exp(rng.uniform(std::log(0.01), std::log(0.3)));
    h.n_trees = 50 * (1 + static_cast<int>(rng.uniform_int(5)));
    h.max_depth = 3 + static_cast<int>(rng.uniform_int(8));
    h.max_leaves = 20 + 5 * static_cast<int>(rng.uniform_int(17));
    h.min_samples_leaf = 10 + 5 * static_cast<int>(rng.uniform_int(9));
    h.feature_fraction = rng.uniform(0.6, 1.0);
    h.bagging_fraction = rng.uniform(0.6, 1.0);
    h.min_split_gain = rng.uniform(0.0, 10.0);
    return h;
}

double weighted_f1(const std::vector<double>& y, const std::vector<double>& prob) {
    // Binary weighted F1 at the 0.5 threshold, classes {0, 1}.
    double score = 0.0;
    for (int cls = 0; cls <= 1; ++cls) {
        double tp = 0, fp = 0, fn = 0, support = 0;
        for (size_t i = 0; i < y.size(); ++i) {
            const bool truth = y[i] > 0.5;
            const bool pred = prob[i] >= 0.5;
            const bool is_cls = (cls == 1) ? truth : !truth;
            const bool pred_cls = (cls == 1) ? pred : !pred;
            if (is_cls) ++support;
            if (pred_cls && is_cls) ++tp;
            if (pred_cls && !is_cls) ++fp;
            if (!pred_cls && is_cls) ++fn;
        }
        const double denom = 2 * tp + fp + fn;
        const double f1 = denom > 0 ? 2 * tp / denom : 0.0;
        score += f1 * support / static_cast<double>(y.size());
    }
    return score;
}

}  // namespace

TuneResult tune_hyperparams(const Table& t, const std::string& target, int trials, uint64_t seed) {
    TTF_CHECK(trials >= 1, "tune needs at least one trial");
    const int target_col = t.col_index(target);
    if (target_col < 0) throw DataError("target column '" + target + "' not found");
    const bool classification = t.schema()[static_cast<size_t>(target_col)].kind == ColumnKind::categorical;

    // 3-fold assignment; classification folds are stratified by class so no
    // fold loses a class.
    Rng rng(seed);
    const size_t n = t.n_rows();
    std::vector<int> fold(n, 0);
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    if (classification) {
        std::vector<int> counter_per_class(t.pool(static_cast<size_t>(target_col)).size() + 1, 0);
        for (size_t i : order) {
            const Cell& cell = t.cell(i, static_cast<size_t>(target_col));
            const size_t cls = cell.missing ? counter_per_class.size() - 1 : static_cast<size_t>(cell.cat);
            fold[i] = counter_per_class[cls]++ % 3;
        }
    } else {
        for (size_t k = 0; k < order.size(); ++k) fold[order[k]] = static_cast<int>(k % 3);
    }

    TuneResult result;
    result.best_score = -kInf;
    for (int trial = 0; trial < trials; ++trial) {
        Rng trial_rng = rng.derive(static_cast<uint64_t>(trial) + 1);
        const TreeHyperparams h = sample_hyperparams(trial_rng);
        double score_sum = 0.0;
        for (int f = 0; f < 3; ++f) {
            std::vector<size_t> train_rows, eval_rows;
            for (size_t r = 0; r < n; ++r) (fold[r] == f ? eval_rows : train_rows).push_back(r);
            const Table train = t.select_rows(train_rows);
            const Table eval = t.select_rows(eval_rows);
            const Ensemble e = fit_gbm(train, target, h, trial_rng.next_u64());
            const std::vector<double> pred = predict(e, eval);
            const std::vector<double> y = gbm_targets(e, eval);
            if (classification) {
                score_sum += weighted_f1(y, pred);
            } else {
                double mse = 0.0;
                for (size_t i = 0; i < y.size(); ++i) mse += (y[i] - pred[i]) * (y[i] - pred[i]);
                score_sum -= mse / static_cast<double>(y.size());
            }
        }
        const double score = score_sum / 3.0;
        result.trial_scores.push_back(score);
        if (score > result.best_score) {
            result.best_score = score;
            result.best = h;
        }
    }
    return result;
}

}  // namespace ttf
