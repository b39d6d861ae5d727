#include "ttf/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace ttf {

double ordinal_weight(int t, int i, const OrdinalWeightConfig& cfg) {
    TTF_CHECK(cfg.sigma > 0.0 && cfg.min_weight > 0.0 && cfg.min_weight <= 1.0 && cfg.v_group >= 1,
              "bad ordinal weight config");
    const double scale = static_cast<double>(cfg.v_group) * cfg.sigma;
    const double delta = static_cast<double>(t - i);
    return 1.0 + cfg.min_weight - std::exp(-(delta * delta) / (scale * scale));
}

namespace {

double log_sum_exp(std::span<const double> z) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : z) m = std::max(m, v);
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
}

}  // namespace

double cel(std::span<const double> z, int t) {
    TTF_CHECK(t >= 0 && static_cast<size_t>(t) < z.size(), "target out of range");
    return log_sum_exp(z) - z[static_cast<size_t>(t)];
}

double ocel(std::span<const double> z, int t, const OrdinalWeightConfig& cfg) {
    TTF_CHECK(t >= 0 && static_cast<size_t>(t) < z.size(), "target out of range");
    TTF_CHECK(z.size() >= 2, "ordinal group needs >= 2 classes");
    std::vector<double> a(z.size());
    for (size_t i = 0; i < z.size(); ++i) {
        a[i] = z[i] + std::log(ordinal_weight(t, static_cast<int>(i), cfg));
    }
    return log_sum_exp(a) - a[static_cast<size_t>(t)];
}

double valid_group_loss(std::span<const double> z, int q_s, int q_e) {
    TTF_CHECK(q_s >= 0 && q_s < q_e && static_cast<size_t>(q_e) <= z.size(), "bad group bounds");
    return log_sum_exp(z) - log_sum_exp(z.subspan(static_cast<size_t>(q_s), static_cast<size_t>(q_e - q_s)));
}

double token_loss(std::span<const double> z, int target, const TokenLossSpec& spec,
                  const OrdinalWeightConfig& cfg) {
    if (!spec.quantile) return cel(z, target);
    TTF_CHECK(target >= spec.group_lo && target < spec.group_hi,
              "quantile target outside its valid group");
    const auto group = z.subspan(static_cast<size_t>(spec.group_lo),
                                 static_cast<size_t>(spec.group_hi - spec.group_lo));
    return ocel(group, target - spec.group_lo, cfg) + valid_group_loss(z, spec.group_lo, spec.group_hi);
}

namespace {

// softmax into out; shift-stable.
void softmax(std::span<const double> z, std::span<double> out) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : z) m = std::max(m, v);
    double s = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - m);
        s += out[i];
    }
    for (size_t i = 0; i < z.size(); ++i) out[i] /= s;
}

}  // namespace

void token_loss_grad(std::span<const double> z, int target, const TokenLossSpec& spec,
                     const OrdinalWeightConfig& cfg, std::span<double> grad) {
    TTF_CHECK(grad.size() == z.size(), "gradient size mismatch");
    if (!spec.quantile) {
        softmax(z, grad);
        grad[static_cast<size_t>(target)] -= 1.0;
        return;
    }
    TTF_CHECK(target >= spec.group_lo && target < spec.group_hi,
              "quantile target outside its valid group");
    const size_t lo = static_cast<size_t>(spec.group_lo);
    const size_t len = static_cast<size_t>(spec.group_hi - spec.group_lo);
    const auto group = z.subspan(lo, len);

    // Valid-group term: softmax over all minus renormalized softmax over the group.
    softmax(z, grad);
    std::vector<double> pg(len);
    softmax(group, pg);
    for (size_t i = 0; i < len; ++i) grad[lo + i] -= pg[i];

    // OCEL term on the group slice: weighted softmax minus one-hot.
    std::vector<double> a(len);
    const int tg = target - spec.group_lo;
    for (size_t i = 0; i < len; ++i) {
        a[i] = group[i] + std::log(ordinal_weight(tg, static_cast<int>(i), cfg));
    }
    std::vector<double> pw(len);
    softmax(a, pw);
    for (size_t i = 0; i < len; ++i) grad[lo + i] += pw[i];
    grad[lo + static_cast<size_t>(tg)] -= 1.0;
}

}  // namespace ttf
