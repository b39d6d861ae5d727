#pragma once

#include <utility>
#include <vector>

namespace ttf {

// Per-dimension slope of the sigmoid input: floor((1 + sqrt(1 + 4d)) / 2).
// Value s repeats for 2s consecutive dimensions.
int scale_factor(int d);

// Per-dimension intercept: (-4*S^3 + (4d + 2)*S) / (2S - 1), evenly spaced
// in [-2S, 2S] among the dimensions sharing a scale factor.
double offset(int d);

double sigmoid(double x);

// Embedding value for quantile id i in [0, Q): sigmoid(4S(i/Q - 1/2) + O).
// Strictly increasing in i for every dimension.
double quantile_embedding_value(int i, int d, int q);

// Q x D init matrix for quantile-token embedding rows; entries in (0, 1),
// trainable downstream.
struct QuantileEmbeddingInit {
    int q = 0;
    int d = 0;
    std::vector<double> matrix;  // row-major Q x D

    double at(int i, int dim) const { return matrix[static_cast<size_t>(i) * d + dim]; }
};

QuantileEmbeddingInit init_quantile_embedding(int q, int d);

// The literal sequence constructions behind the closed forms:
// scales  = repeat(arange(n)+1, 2*(arange(n)+1))[:D]
// offsets = concat(linspace(-2x, 2x, 2x) for x in arange(n)+1)[:D]
std::pair<std::vector<int>, std::vector<double>> construction_oracles(int d);

}  // namespace ttf
