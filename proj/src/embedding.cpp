#include "ttf/embedding.hpp"

#include <cmath>

#include "ttf/common.hpp"

namespace ttf {

int scale_factor(int d) {
    TTF_CHECK(d >= 0, "dimension must be nonnegative");
    return static_cast<int>(std::floor((1.0 + std::sqrt(1.0 + 4.0 * static_cast<double>(d))) / 2.0));
}

double offset(int d) {
    const double s = static_cast<double>(scale_factor(d));
    return (-4.0 * s * s * s + (4.0 * static_cast<double>(d) + 2.0) * s) / (2.0 * s - 1.0);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double quantile_embedding_value(int i, int d, int q) {
    TTF_CHECK(i >= 0 && i < q, "quantile id out of range");
    const double s = static_cast<double>(scale_factor(d));
    const double x = static_cast<double>(i) / static_cast<double>(q) - 0.5;
    return sigmoid(4.0 * s * x + offset(d));
}

QuantileEmbeddingInit init_quantile_embedding(int q, int d) {
    TTF_CHECK(q >= 1 && d >= 1, "init_quantile_embedding needs q >= 1, d >= 1");
    QuantileEmbeddingInit out;
    out.q = q;
    out.d = d;
    out.matrix.resize(static_cast<size_t>(q) * static_cast<size_t>(d));
    for (int i = 0; i < q; ++i) {
        for (int dim = 0; dim < d; ++dim) {
            out.matrix[static_cast<size_t>(i) * d + dim] = quantile_embedding_value(i, dim, q);
        }
    }
    return out;
}

std::pair<std::vector<int>, std::vector<double>> construction_oracles(int d) {
    TTF_CHECK(d >= 1, "construction_oracles needs d >= 1");
    std::vector<int> scales;
    std::vector<double> offsets;
    scales.reserve(static_cast<size_t>(d));
    offsets.reserve(static_cast<size_t>(d));
    for (int s = 1; static_cast<int>(scales.size()) < d; ++s) {
        for (int i = 0; i < 2 * s && static_cast<int>(scales.size()) < d; ++i) {
            scales.push_back(s);
            // linspace(-2s, 2s, 2s): i-th of 2s evenly spaced points.
            const double lo = -2.0 * s, hi = 2.0 * s;
            const double step = (hi - lo) / static_cast<double>(2 * s - 1);
            offsets.push_back(lo + step * static_cast<double>(i));
        }
    }
    return {std::move(scales), std::move(offsets)};
}

}  // namespace ttf
