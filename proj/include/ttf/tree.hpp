#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ttf/table.hpp"

namespace ttf {

struct TreeHyperparams {
    int n_trees = 50;
    double learning_rate = 0.1;
    int max_depth = 6;
    int max_leaves = 31;
    int min_samples_leaf = 10;
    double feature_fraction = 1.0;
    double bagging_fraction = 1.0;
    double min_split_gain = 0.0;
};

enum class Objective { logistic, squared_error };

// Split node or leaf. Numeric splits send x <= threshold left (ties left);
// categorical splits send codes in left_codes left. Unseen categories and
// missing values follow default_left, the branch with more training rows.
struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    std::vector<int32_t> left_codes;
    bool default_left = true;
    int left = -1;
    int right = -1;
    double value = 0.0;
    int leaf_id = 0;  // 1-based within the tree, leaves only
};

struct Tree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root
    int n_leaves = 0;

    // Returns (leaf_id, leaf value) for a feature row.
    std::pair<int, double> route(const std::vector<double>& features) const;
};

// Gradient-boosted ensemble over the non-target columns; leaf indices per
// tree double as conditioning prompts downstream.
struct Ensemble {
    Schema schema;  // fit-time schema, target included
    std::string target;
    int target_col = -1;
    Objective objective = Objective::squared_error;
    double base_score = 0.0;
    double shrinkage = 0.1;
    TreeHyperparams hyperparams;
    std::vector<int> feature_cols;                   // table column indices used as features
    std::vector<std::vector<std::string>> cat_codes;  // per table column; empty for numeric
    std::string positive_category;                    // classification only
    std::vector<Tree> trees;

    std::vector<int> leaf_counts() const;
    int n_trees() const { return static_cast<int>(trees.size()); }
};

struct LeafIndexMatrix {
    size_t rows = 0;
    int n_trees = 0;
    std::vector<int> data;  // row-major rows x n_trees; entries 1-based

    int at(size_t r, int k) const { return data[r * static_cast<size_t>(n_trees) + static_cast<size_t>(k)]; }
    std::vector<int> row(size_t r) const {
        return {data.begin() + static_cast<long>(r * static_cast<size_t>(n_trees)),
                data.begin() + static_cast<long>((r + 1) * static_cast<size_t>(n_trees))};
    }
};

// Standard gradient boosting with greedy variance-reduction splits (Newton
// form; exact variance reduction under squared error). Classification uses
// logistic on binary targets and majority-vs-rest on multiclass ones.
Ensemble fit_gbm(const Table& t, const std::string& target, const TreeHyperparams& h, uint64_t seed);

struct TuneResult {
    TreeHyperparams best;
    double best_score = 0.0;
    std::vector<double> trial_scores;
};

// Seeded random search with 3-fold cross-validation; weighted F1 for
// classification, negative MSE for regression.
TuneResult tune_hyperparams(const Table& t, const std::string& target, int trials, uint64_t seed);

LeafIndexMatrix apply_leaves(const Ensemble& e, const Table& t);

// base_score + shrinkage * sum of leaf values; probabilities for logistic.
std::vector<double> predict(const Ensemble& e, const Table& t);

// Regression/classification targets as used by fit_gbm: numeric values, or
// 1.0 for the positive category and 0.0 otherwise.
std::vector<double> gbm_targets(const Ensemble& e, const Table& t);

}  // namespace ttf
