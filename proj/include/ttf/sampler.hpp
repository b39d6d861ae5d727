#pragma once

#include <cstdint>
#include <span>

#include "ttf/transformer.hpp"

namespace ttf {

struct GenerationConfig {
    double temperature_categorical = 2.0;  // NM: 0.2
    double temperature_numeric = 1.0;      // NM: 0.1, covers bin and quant tokens
    double tree_mask_lo = 0.5;             // prompt masking reuses the training tree range
    double tree_mask_hi = 0.75;
    uint64_t seed = 0;

    static GenerationConfig from_generator(const TrainedGenerator& g) {
        GenerationConfig gc;
        gc.temperature_categorical = g.default_temp_categorical;
        gc.temperature_numeric = g.default_temp_numeric;
        gc.tree_mask_lo = g.default_gen_mask.tree_lo;
        gc.tree_mask_hi = g.default_gen_mask.tree_hi;
        return gc;
    }
};

// Invalid logits to -inf, temperature scale, softmax, one categorical draw.
// The returned id is always inside `valid`.
int constrained_sample_token(std::span<const float> logits, const TokenRange& valid,
                             double temperature, Rng& rng);

// Constrained autoregressive generation: floor(n/2) rows from G1 and the rest
// from G2, leaf prompts resampled uniformly from each model's own split and
// masked per the config, every emitted token restricted to its position's
// valid vocabulary, rows decoded through the tokenizer.
Table sample_rows(const TrainedGenerator& g, size_t n_rows, const GenerationConfig& gc);

// Theorem support: total variation between the weighted mixture of the
// parts' empirical row distributions and the pooled table's distribution.
// Weights must sum to 1.
double mixture_total_variation(std::span<const Table> parts, std::span<const double> weights,
                               const Table& full);

}  // namespace ttf
