#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ttf/table.hpp"

namespace ttf {

// Two-sample Kolmogorov-Smirnov statistic: sup |ECDF_a - ECDF_b|.
double ks_statistic(std::vector<double> a, std::vector<double> b);

// Pearson correlation; 0 by convention when either side is constant.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

// Marginal fidelity: numeric columns score 1 - KS, categorical columns
// 1 - total variation of category frequencies; aggregate is the column mean.
double shape_score(const Table& real, const Table& synth,
                   std::vector<std::pair<std::string, double>>* breakdown = nullptr);

// Pairwise fidelity: numeric-numeric pairs score 1 - |rho_r - rho_s| / 2;
// pairs with a categorical side use contingency similarity, numeric sides
// discretized into deciles of the real column; aggregate is the pair mean.
double trend_score(const Table& real, const Table& synth,
                   std::vector<std::pair<std::string, double>>* breakdown = nullptr);

enum class Alternative { less, greater };

// One-sided Mann-Whitney U p-value for H1: a stochastically less (or
// greater) than b. Exact permutation enumeration for small samples, normal
// approximation with tie and continuity correction otherwise.
double mwu_p(const std::vector<double>& a, const std::vector<double>& b, Alternative alt);
double mwu_p_exact(const std::vector<double>& a, const std::vector<double>& b, Alternative alt);
double mwu_p_approx(const std::vector<double>& a, const std::vector<double>& b, Alternative alt);

// Distance-to-closest-record privacy test. All three tables are quantile
// transformed (1000 quantiles fitted on train) / one-hot encoded; per-row
// minimum cosine distances to train are compared with a one-sided MWU
// (H1: synthetic distances smaller than held-out ones). p < 0.05 flags
// memorization risk.
double dcr_test(const Table& train, const Table& test, const Table& synth, uint64_t seed);

// Rank-based AUC with midrank tie handling; labels are 0/1.
double auc_roc(const std::vector<int>& labels, const std::vector<double>& scores);

double r2(const std::vector<double>& y, const std::vector<double>& yhat);

enum class TaskKind { classification, regression };

struct MleResult {
    std::map<std::string, double> tstr;  // model name -> score on real_test
    std::map<std::string, double> trtr;  // real-train baseline
    bool degenerate_synth_target = false;
};

// Train-on-synthetic, test-on-real with a gradient-descent linear model and
// the in-repo GBM; weighted one-vs-rest AUC for classification, R^2 for
// regression. The real-train baseline is fitted alongside.
MleResult mle_tstr(const Table& real_train, const Table& synth, const Table& real_test,
                   const std::string& target, TaskKind task, uint64_t seed);

struct EvalReport {
    double shape = 0.0;
    double trend = 0.0;
    double dcr_p = 1.0;
    std::optional<MleResult> mle;
    std::vector<std::pair<std::string, double>> shape_columns;
    std::vector<std::pair<std::string, double>> trend_pairs;
    uint64_t seed = 0;
    size_t n_real = 0, n_synth = 0;

    std::string to_json() const;
};

// Full harness: shape/trend of synth against train, DCR against train/test,
// and optionally TSTR MLE on the target column.
EvalReport evaluate_tables(const Table& train, const Table& test, const Table& synth,
                           const std::optional<std::string>& target, uint64_t seed);

}  // namespace ttf
