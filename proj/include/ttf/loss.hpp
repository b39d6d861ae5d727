#pragma once

#include <span>

#include "ttf/quantizer.hpp"

namespace ttf {

// Distance weights for the ordinal loss: w(t,i) = 1 + m - exp(-(t-i)^2 / (V*sigma)^2).
// v_group is the ordinal class-group size entering the scale; it defaults to
// the shared quantile family size n_q when built from a layout.
struct OrdinalWeightConfig {
    double sigma = 0.005;
    double min_weight = 0.5;
    int v_group = 1;
};

double ordinal_weight(int t, int i, const OrdinalWeightConfig& cfg);

// Plain cross entropy, -log softmax(z)[t], log-sum-exp stable.
double cel(std::span<const double> z, int t);

// Ordinal cross entropy over one class group:
// -log(w_tt e^{z_t} / sum_i w_ti e^{z_i}); weights fold into the logits.
double ocel(std::span<const double> z, int t, const OrdinalWeightConfig& cfg);

// -log(sum_{i in [q_s, q_e)} e^{z_i} / sum_i e^{z_i}).
double valid_group_loss(std::span<const double> z, int q_s, int q_e);

// How to score one target token: plain CEL, or OCEL restricted to the
// position's quantile group plus the valid-group term.
struct TokenLossSpec {
    bool quantile = false;
    int group_lo = 0;  // [group_lo, group_hi) within the full vocabulary
    int group_hi = 0;
};

double token_loss(std::span<const double> z, int target, const TokenLossSpec& spec,
                  const OrdinalWeightConfig& cfg);

// Analytic gradient of token_loss w.r.t. z; grad must have z.size() entries
// and is overwritten.
void token_loss_grad(std::span<const double> z, int target, const TokenLossSpec& spec,
                     const OrdinalWeightConfig& cfg, std::span<double> grad);

// Binds a vocabulary layout to per-position loss dispatch. K-Means bin and
// all other non-quantile targets use plain CEL; quantile targets use
// OCEL + valid-group.
struct LossContext {
    const VocabLayout* layout = nullptr;
    OrdinalWeightConfig weights;

    explicit LossContext(const VocabLayout& l) : layout(&l) {
        weights.v_group = std::max(1, l.n_q);
    }

    // Spec for the target at 1-based sequence position (2..L).
    TokenLossSpec spec_at(int position) const {
        TokenLossSpec spec;
        if (layout->kind_at(position) == TokenKind::quant) {
            const TokenRange range = layout->valid_vocab_at(position);
            spec.quantile = true;
            spec.group_lo = range.lo;
            spec.group_hi = range.hi;
        }
        return spec;
    }
};

}  // namespace ttf
