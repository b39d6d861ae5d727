#include "ttf/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

#include "ttf/common.hpp"

namespace ttf {

int constrained_sample_token(std::span<const float> logits, const TokenRange& valid,
                             double temperature, Rng& rng) {
    TTF_CHECK(valid.size() >= 1 && valid.lo >= 0 && static_cast<size_t>(valid.hi) <= logits.size(),
              "bad valid-token range");
    TTF_CHECK(temperature > 0.0, "temperature must be positive");

    double max_logit = -std::numeric_limits<double>::infinity();
    for (int i = valid.lo; i < valid.hi; ++i) {
        const double z = static_cast<double>(logits[static_cast<size_t>(i)]);
        TTF_CHECK(std::isfinite(z), "non-finite logit inside the valid set");
        max_logit = std::max(max_logit, z);
    }
    double total = 0.0;
    std::vector<double> probs(static_cast<size_t>(valid.size()));
    for (int i = valid.lo; i < valid.hi; ++i) {
        const double z = static_cast<double>(logits[static_cast<size_t>(i)]);
        const double e = std::exp((z - max_logit) / temperature);
        probs[static_cast<size_t>(i - valid.lo)] = e;
        total += e;
    }
    double r = rng.uniform() * total;
    for (int i = 0; i < valid.size(); ++i) {
        r -= probs[static_cast<size_t>(i)];
        if (r <= 0.0) return valid.lo + i;
    }
    return valid.hi - 1;
}

namespace {

// One generated row: resample a leaf prompt, mask it, decode value tokens
// under the position grammar.
std::vector<int> generate_sequence(const TrainedGenerator& g, const LeafIndexMatrix& leaves,
                                   IncrementalDecoder<float>& dec, const GenerationConfig& gc,
                                   Rng& rng, std::vector<float>& logits) {
    const VocabLayout& layout = g.layout;
    std::vector<int> seq;
    seq.reserve(static_cast<size_t>(layout.seq_len));
    seq.push_back(layout.bos_id);

    TTF_CHECK(leaves.rows > 0, "empty leaf split");
    const size_t pick = rng.uniform_int(leaves.rows);
    for (int k = 0; k < layout.n_trees; ++k) seq.push_back(layout.leaf_token(k, leaves.at(pick, k)));

    const double ratio = rng.uniform(gc.tree_mask_lo, gc.tree_mask_hi);
    const int k_mask = static_cast<int>(std::llround(ratio * layout.n_trees));
    std::vector<int> idx(static_cast<size_t>(layout.n_trees));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k_mask; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(layout.n_trees - i)));
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    for (int i = 0; i < k_mask; ++i) seq[static_cast<size_t>(1 + idx[static_cast<size_t>(i)])] = layout.mask_id;

    // Prompt stays in context verbatim; masked leaf tokens are never redrawn.
    dec.reset();
    for (int i = 0; i <= layout.n_trees; ++i) dec.step(seq[static_cast<size_t>(i)], logits);

    for (int pos = layout.n_trees + 2; pos <= layout.seq_len - 1; ++pos) {
        const TokenRange valid = layout.valid_vocab_at(pos);
        const double temperature = layout.kind_at(pos) == TokenKind::cat
                                       ? gc.temperature_categorical
                                       : gc.temperature_numeric;
        const int token = constrained_sample_token(logits, valid, temperature, rng);
        seq.push_back(token);
        if (pos < layout.seq_len - 1) dec.step(token, logits);
    }
    seq.push_back(layout.eos_id);
    return seq;
}

}  // namespace

Table sample_rows(const TrainedGenerator& g, size_t n_rows, const GenerationConfig& gc) {
    TTF_CHECK(n_rows >= 1, "n_rows must be >= 1");
    const size_t n1 = n_rows / 2;  // G1 gets floor(n/2), G2 the rest

    const Rng master(gc.seed);
    std::vector<std::vector<int>> value_ids(n_rows);

    constexpr int kChunks = 8;
    parallel_chunks(kChunks, [&](int c) {
        IncrementalDecoder<float> dec1(g.g1), dec2(g.g2);
        std::vector<float> logits;
        const size_t lo = n_rows * static_cast<size_t>(c) / kChunks;
        const size_t hi = n_rows * static_cast<size_t>(c + 1) / kChunks;
        for (size_t r = lo; r < hi; ++r) {
            Rng row_rng = master.derive(r + 1);
            const bool first = r < n1;
            const std::vector<int> seq =
                generate_sequence(g, first ? g.leaves1 : g.leaves2, first ? dec1 : dec2, gc,
                                  row_rng, logits);
            value_ids[r] = value_ids_from_sequence(g.layout, seq);
        }
    });

    Table out(g.tokenizer.schema);
    for (size_t r = 0; r < n_rows; ++r) decode_row(g.tokenizer, value_ids[r], out);
    return out;
}

namespace {

std::string row_key(const Table& t, size_t r) {
    std::string key;
    for (size_t c = 0; c < t.n_cols(); ++c) {
        const Cell& cell = t.cell(r, c);
        if (cell.missing) {
            key += "\x01";
        } else if (t.schema()[c].kind == ColumnKind::numeric) {
            char buf[32];
            snprintf(buf, sizeof(buf), "%.17g", cell.num);
            key += buf;
        } else {
            key += t.cat_value(r, c);
        }
        key += '\x1f';
    }
    return key;
}

}  // namespace

double mixture_total_variation(std::span<const Table> parts, std::span<const double> weights,
                               const Table& full) {
    TTF_CHECK(parts.size() == weights.size() && !parts.empty(), "parts/weights mismatch");
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    if (std::abs(wsum - 1.0) > 1e-9) throw DataError("mixture weights must sum to 1");

    std::map<std::string, double> mixture, empirical;
    for (size_t p = 0; p < parts.size(); ++p) {
        TTF_CHECK(parts[p].n_rows() > 0, "empty mixture part");
        const double w = weights[p] / static_cast<double>(parts[p].n_rows());
        for (size_t r = 0; r < parts[p].n_rows(); ++r) mixture[row_key(parts[p], r)] += w;
    }
    TTF_CHECK(full.n_rows() > 0, "empty full table");
    const double w_full = 1.0 / static_cast<double>(full.n_rows());
    for (size_t r = 0; r < full.n_rows(); ++r) empirical[row_key(full, r)] += w_full;

    double tv = 0.0;
    for (const auto& [key, p] : mixture) {
        const auto it = empirical.find(key);
        tv += std::abs(p - (it == empirical.end() ? 0.0 : it->second));
    }
    for (const auto& [key, q] : empirical) {
        if (mixture.find(key) == mixture.end()) tv += q;
    }
    return 0.5 * tv;
}

}  // namespace ttf
