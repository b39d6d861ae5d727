#include "ttf/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ttf/common.hpp"

namespace ttf {

ModelConfig preset_model_config(const std::string& preset) {
    ModelConfig cfg;
    cfg.preset = preset;
    if (preset == "tiny") {
        cfg.hidden = 64;
        cfg.ff = 256;
        cfg.heads = 4;
        cfg.layers = 2;
    } else if (preset == "s") {
        cfg.hidden = 256;
        cfg.ff = 1024;
        cfg.heads = 8;
        cfg.layers = 6;
    } else if (preset == "l" || preset == "nm") {
        cfg.hidden = 768;
        cfg.ff = 3072;
        cfg.heads = 12;
        cfg.layers = 6;
    } else {
        throw DataError("unknown preset '" + preset + "' (expected tiny, s, l, nm)");
    }
    return cfg;
}

std::vector<int> apply_mask_sequence(const VocabLayout& layout, std::span<const int> seq,
                                     const MaskRanges& ranges, Rng& rng) {
    TTF_CHECK(static_cast<int>(seq.size()) == layout.seq_len, "sequence length mismatch");
    std::vector<int> out(seq.begin(), seq.end());
    const int n_tree = layout.n_trees;
    const int n_value = static_cast<int>(layout.value_slots.size());

    const double tree_ratio = rng.uniform(ranges.tree_lo, ranges.tree_hi);
    const double value_ratio = rng.uniform(ranges.value_lo, ranges.value_hi);
    const int k_tree = static_cast<int>(std::llround(tree_ratio * n_tree));
    const int k_value = static_cast<int>(std::llround(value_ratio * n_value));

    auto choose = [&rng](int n, int k) {
        std::vector<int> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        for (int i = 0; i < k; ++i) {
            const int j = i + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n - i)));
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        idx.resize(static_cast<size_t>(k));
        return idx;
    };

    // Tree tokens sit at 0-based offsets 1..n_tree.
    for (int i : choose(n_tree, k_tree)) out[static_cast<size_t>(1 + i)] = layout.mask_id;

    // Value tokens at 0-based offsets n_tree+1 .. n_tree+n_value.
    std::vector<bool> masked(static_cast<size_t>(n_value), false);
    for (int i : choose(n_value, k_value)) masked[static_cast<size_t>(i)] = true;

    // A quant token masked while its bin token is visible leaks nothing to
    // hide; swap the pair's masks.
    for (int s = 0; s + 1 < n_value; ++s) {
        if (layout.value_slots[static_cast<size_t>(s)].kind == TokenKind::bin &&
            layout.value_slots[static_cast<size_t>(s + 1)].kind == TokenKind::quant &&
            !masked[static_cast<size_t>(s)] && masked[static_cast<size_t>(s + 1)]) {
            masked[static_cast<size_t>(s)] = true;
            masked[static_cast<size_t>(s + 1)] = false;
        }
    }
    for (int s = 0; s < n_value; ++s) {
        if (masked[static_cast<size_t>(s)]) out[static_cast<size_t>(n_tree + 1 + s)] = layout.mask_id;
    }
    return out;
}

namespace {

constexpr int kGradChunks = 8;

constexpr uint64_t kTagInit = 1;
constexpr uint64_t kTagSplit = 2;
constexpr uint64_t kTagValMask = 3;
constexpr uint64_t kTagData = 10;     // + model tag
constexpr uint64_t kTagMask = 20;     // + model tag
constexpr uint64_t kTagDropout = 30;  // + model tag

constexpr uint64_t kMaxBatchTag = 1 << 20;

struct AdamState {
    std::vector<double> m, v;
    int64_t t = 0;

    explicit AdamState(size_t n) : m(n, 0.0), v(n, 0.0) {}
};

void adam_step(ModelParams<float>& params, const ModelParams<float>& grads, AdamState& st,
               double lr) {
    double norm2 = 0.0;
    grads.visit([&](const char*, const Mat<float>& g) {
        for (float x : g.data) norm2 += static_cast<double>(x) * static_cast<double>(x);
    });
    const double norm = std::sqrt(norm2);
    const double clip = norm > 1.0 ? 1.0 / norm : 1.0;

    st.t += 1;
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.t));

    std::vector<Mat<float>*> ps;
    std::vector<const Mat<float>*> gs;
    params.visit([&](const char*, Mat<float>& m) { ps.push_back(&m); });
    grads.visit([&](const char*, const Mat<float>& m) { gs.push_back(&m); });
    size_t off = 0;
    for (size_t i = 0; i < ps.size(); ++i) {
        auto& pd = ps[i]->data;
        const auto& gd = gs[i]->data;
        for (size_t j = 0; j < pd.size(); ++j, ++off) {
            const double g = static_cast<double>(gd[j]) * clip;
            double& m = st.m[off];
            double& v = st.v[off];
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            pd[j] -= static_cast<float>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
        }
    }
}

// Shuffled-epoch batch iterator; partial final batches are kept so epoch
// counting stays exact.
struct EpochSampler {
    std::vector<size_t> rows;
    Rng rng;
    size_t pos = 0;

    EpochSampler(std::span<const size_t> r, Rng stream) : rows(r.begin(), r.end()), rng(stream) {
        rng.shuffle(rows);
    }

    std::vector<size_t> next(size_t batch) {
        if (pos >= rows.size()) {
            rng.shuffle(rows);
            pos = 0;
        }
        const size_t take = std::min(batch, rows.size() - pos);
        std::vector<size_t> out(rows.begin() + static_cast<long>(pos),
                                rows.begin() + static_cast<long>(pos + take));
        pos += take;
        return out;
    }
};

struct StepContext {
    const TrainData* data;
    const TrainConfig* tc;
    const LossContext* ctx;
    std::vector<ModelParams<float>>* chunk_grads;
    std::vector<SeqWorkspace<float>>* workspaces;
};

// One optimizer step over a batch; returns the mean batch loss. Gradients
// are accumulated per fixed chunk and reduced in chunk order, so the result
// does not depend on the worker count.
double train_step(ModelParams<float>& model, ModelParams<float>& grads, AdamState& adam,
                  const StepContext& sc, const std::vector<size_t>& batch, int step, Rng& mask_stream,
                  const Rng& dropout_stream) {
    const size_t b = batch.size();
    std::vector<std::vector<int>> inputs(b);
    for (size_t i = 0; i < b; ++i) {
        Rng mask_rng = mask_stream.derive(static_cast<uint64_t>(step) * kMaxBatchTag + i);
        inputs[i] = apply_mask_sequence(sc.data->layout, sc.data->sequences[batch[i]],
                                        sc.tc->mask, mask_rng);
    }

    std::vector<double> chunk_loss(kGradChunks, 0.0);
    auto& chunk_grads = *sc.chunk_grads;
    auto& workspaces = *sc.workspaces;
    parallel_chunks(kGradChunks, [&](int c) {
        chunk_grads[static_cast<size_t>(c)].zero();
        const size_t lo = b * static_cast<size_t>(c) / kGradChunks;
        const size_t hi = b * static_cast<size_t>(c + 1) / kGradChunks;
        for (size_t i = lo; i < hi; ++i) {
            Rng drop_rng = dropout_stream.derive(static_cast<uint64_t>(step) * kMaxBatchTag + i);
            chunk_loss[static_cast<size_t>(c)] += sequence_loss_and_grad(
                model, inputs[i], std::span<const int>(sc.data->sequences[batch[i]]), *sc.ctx,
                &chunk_grads[static_cast<size_t>(c)], 1.0 / static_cast<double>(b), &drop_rng,
                workspaces[static_cast<size_t>(c)]);
        }
    });

    grads.zero();
    double loss = 0.0;
    for (int c = 0; c < kGradChunks; ++c) {
        grads.add(chunk_grads[static_cast<size_t>(c)]);
        loss += chunk_loss[static_cast<size_t>(c)];
    }
    loss /= static_cast<double>(b);
    if (!std::isfinite(loss))
        throw InternalError("non-finite training loss at step " + std::to_string(step));
    adam_step(model, grads, adam, sc.tc->learning_rate);
    return loss;
}

double heldout_loss(const ModelParams<float>& p, const TrainData& data,
                    std::span<const size_t> rows, const TrainConfig& tc, const LossContext& ctx) {
    const Rng valmask = Rng(tc.seed).derive(kTagValMask);
    std::vector<double> chunk_loss(kGradChunks, 0.0);
    parallel_chunks(kGradChunks, [&](int c) {
        SeqWorkspace<float> ws;
        const size_t lo = rows.size() * static_cast<size_t>(c) / kGradChunks;
        const size_t hi = rows.size() * static_cast<size_t>(c + 1) / kGradChunks;
        for (size_t i = lo; i < hi; ++i) {
            Rng row_rng = valmask.derive(static_cast<uint64_t>(rows[i]));
            const std::vector<int> input =
                apply_mask_sequence(data.layout, data.sequences[rows[i]], tc.mask, row_rng);
            chunk_loss[static_cast<size_t>(c)] += sequence_loss_and_grad<float>(
                p, input, std::span<const int>(data.sequences[rows[i]]), ctx, nullptr, 0.0, nullptr,
                ws);
        }
    });
    double total = 0.0;
    for (double l : chunk_loss) total += l;
    return total / static_cast<double>(rows.size());
}

}  // namespace

double validation_loss(const ModelParams<float>& p, const TrainData& data,
                       std::span<const size_t> rows, const TrainConfig& tc) {
    TTF_CHECK(!rows.empty(), "validation needs held-out rows");
    const LossContext ctx(data.layout);
    return heldout_loss(p, data, rows, tc, ctx);
}

TrainOutput train_two_phase(const TrainData& data, const ModelConfig& mc, const TrainConfig& tc) {
    const size_t n = data.sequences.size();
    TTF_CHECK(n >= 4, "training needs at least 4 rows");
    TTF_CHECK(data.leaves.rows == n, "leaf matrix row count mismatch");
    TTF_CHECK(mc.vocab == data.layout.vocab_size && mc.max_seq == data.layout.seq_len,
              "model config does not match layout");
    TTF_CHECK(tc.batch_size >= 1 && tc.max_steps >= 1, "bad train config");

    const Rng master(tc.seed);
    const LossContext ctx(data.layout);

    const int steps_per_epoch =
        static_cast<int>((n + static_cast<size_t>(tc.batch_size) - 1) / static_cast<size_t>(tc.batch_size));
    int s0 = tc.shared_steps > 0 ? tc.shared_steps : std::min(20 * steps_per_epoch, tc.max_steps / 10);
    s0 = std::min(s0, tc.max_steps);

    ModelParams<float> model;
    model.init(mc, data.layout, master.derive(kTagInit).next_u64());

    ModelParams<float> grads;
    grads.init_shapes(mc);
    std::vector<ModelParams<float>> chunk_grads(kGradChunks);
    for (auto& g : chunk_grads) g.init_shapes(mc);
    std::vector<SeqWorkspace<float>> workspaces(kGradChunks);
    AdamState adam(model.n_params());

    StepContext sc{&data, &tc, &ctx, &chunk_grads, &workspaces};

    std::vector<size_t> all_rows(n);
    std::iota(all_rows.begin(), all_rows.end(), 0);

    // Phase 1: shared warm start, fixed step count, no validation.
    {
        EpochSampler sampler(all_rows, master.derive(kTagData + 0));
        Rng mask_stream = master.derive(kTagMask + 0);
        const Rng dropout_stream = master.derive(kTagDropout + 0);
        for (int step = 1; step <= s0; ++step) {
            const std::vector<size_t> batch = sampler.next(static_cast<size_t>(tc.batch_size));
            const double loss = train_step(model, grads, adam, sc, batch, step, mask_stream,
                                           dropout_stream);
            if (tc.log) tc.log(step, 0, loss, std::numeric_limits<double>::quiet_NaN());
        }
    }

    // Even split of the training rows.
    std::vector<size_t> shuffled = all_rows;
    {
        Rng split_rng = master.derive(kTagSplit);
        split_rng.shuffle(shuffled);
    }
    TrainOutput out;
    out.shared_steps = s0;
    out.split1.assign(shuffled.begin(), shuffled.begin() + static_cast<long>(n / 2));
    out.split2.assign(shuffled.begin() + static_cast<long>(n / 2), shuffled.end());

    out.g1 = model;
    out.g2 = model;
    out.steps1 = out.steps2 = s0;
    out.best_val1 = out.best_val2 = std::numeric_limits<double>::quiet_NaN();
    if (s0 >= tc.max_steps) return out;

    // Phase 2: each copy continues on its split, validated on the other.
    const AdamState adam_shared = adam;
    for (int which = 1; which <= 2; ++which) {
        ModelParams<float>& g = which == 1 ? out.g1 : out.g2;
        const std::vector<size_t>& train_rows = which == 1 ? out.split1 : out.split2;
        const std::vector<size_t>& heldout = which == 1 ? out.split2 : out.split1;

        AdamState adam_j = adam_shared;
        EpochSampler sampler(train_rows, master.derive(kTagData + static_cast<uint64_t>(which)));
        Rng mask_stream = master.derive(kTagMask + static_cast<uint64_t>(which));
        const Rng dropout_stream = master.derive(kTagDropout + static_cast<uint64_t>(which));

        double best_val = std::numeric_limits<double>::infinity();
        ModelParams<float> best_params = g;
        bool any_check = false;
        int bad_checks = 0;
        int last_step = s0;

        for (int step = s0 + 1; step <= tc.max_steps; ++step) {
            const std::vector<size_t> batch = sampler.next(static_cast<size_t>(tc.batch_size));
            const double loss = train_step(g, grads, adam_j, sc, batch, step, mask_stream,
                                           dropout_stream);
            last_step = step;
            const bool check = step % tc.validate_every == 0 || step == tc.max_steps;
            double val = std::numeric_limits<double>::quiet_NaN();
            if (check) {
                val = heldout_loss(g, data, heldout, tc, ctx);
                if (!std::isfinite(val))
                    throw InternalError("non-finite validation loss at step " + std::to_string(step));
                any_check = true;
                if (val < best_val) {
                    best_val = val;
                    best_params = g;
                    bad_checks = 0;
                } else {
                    ++bad_checks;
                }
            }
            if (tc.log) tc.log(step, which, loss, val);
            if (check && bad_checks >= tc.patience) break;
        }
        if (any_check) {
            g = std::move(best_params);
        }
        (which == 1 ? out.best_val1 : out.best_val2) = best_val;
        (which == 1 ? out.steps1 : out.steps2) = last_step;
    }
    return out;
}

}  // namespace ttf
