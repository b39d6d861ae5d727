#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ttf/embedding.hpp"
#include "ttf/loss.hpp"
#include "ttf/quantizer.hpp"
#include "ttf/rng.hpp"
#include "ttf/tree.hpp"

namespace ttf {

// Row-major matrix of a compile-time scalar. float in production; tests
// instantiate double for finite-difference checks.
template <typename F>
struct Mat {
    int rows = 0, cols = 0;
    std::vector<F> data;

    void resize(int r, int c) {
        rows = r;
        cols = c;
        data.assign(static_cast<size_t>(r) * static_cast<size_t>(c), F(0));
    }
    F* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const F* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
    F& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    F at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    void zero() { std::fill(data.begin(), data.end(), F(0)); }
    size_t size() const { return data.size(); }
};

namespace mm {

// C[m x n] = A[m x k] @ B[k x n] (row-major B; accumulate optional).
template <typename F>
void nn(const F* a, const F* b, F* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        F* ci = c + static_cast<size_t>(i) * n;
        if (!accumulate) std::fill(ci, ci + n, F(0));
        const F* ai = a + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const F av = ai[kk];
            const F* bk = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

// C[m x n] = A[m x k] @ B[n x k]^T.
template <typename F>
void nt(const F* a, const F* b, F* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const F* ai = a + static_cast<size_t>(i) * k;
        F* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const F* bj = b + static_cast<size_t>(j) * k;
            F sum = F(0);
            for (int kk = 0; kk < k; ++kk) sum += ai[kk] * bj[kk];
            ci[j] = accumulate ? ci[j] + sum : sum;
        }
    }
}

// C[k x n] += A[m x k]^T @ B[m x n].
template <typename F>
void tn(const F* a, const F* b, F* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const F* ai = a + static_cast<size_t>(i) * k;
        const F* bi = b + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const F av = ai[kk];
            if (av == F(0)) continue;
            F* ck = c + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ck[j] += av * bi[j];
        }
    }
}

}  // namespace mm

struct ModelConfig {
    int hidden = 64;
    int ff = 256;
    int heads = 4;
    int layers = 2;
    int max_seq = 0;  // L, from the fitted layout
    int vocab = 0;    // V, from the fitted layout
    double dropout = 0.1;
    std::string preset = "tiny";
};

// Preset widths: S 256/1024/8 heads, L and NM 768/3072/12 (6 layers each),
// TINY 64/256/4 heads with 2 layers.
ModelConfig preset_model_config(const std::string& preset);

template <typename F>
struct LayerParams {
    Mat<F> ln1_g, ln1_b;
    Mat<F> w_qkv, b_qkv;  // D x 3D, 1 x 3D
    Mat<F> w_att, b_att;  // D x D, 1 x D
    Mat<F> ln2_g, ln2_b;
    Mat<F> w_fc, b_fc;      // D x FF, 1 x FF
    Mat<F> w_proj, b_proj;  // FF x D, 1 x D
};

// Decoder weights. The token embedding doubles as the output projection.
template <typename F>
struct ModelParams {
    ModelConfig config;
    Mat<F> tok_emb;  // V x D
    Mat<F> pos_emb;  // L x D
    std::vector<LayerParams<F>> layers;
    Mat<F> lnf_g, lnf_b;

    void init_shapes(const ModelConfig& cfg) {
        TTF_CHECK(cfg.hidden % cfg.heads == 0, "hidden width must divide into heads");
        TTF_CHECK(cfg.vocab > 0 && cfg.max_seq > 0, "config needs vocab and max_seq");
        config = cfg;
        tok_emb.resize(cfg.vocab, cfg.hidden);
        pos_emb.resize(cfg.max_seq, cfg.hidden);
        layers.resize(static_cast<size_t>(cfg.layers));
        for (auto& l : layers) {
            l.ln1_g.resize(1, cfg.hidden);
            l.ln1_b.resize(1, cfg.hidden);
            l.w_qkv.resize(cfg.hidden, 3 * cfg.hidden);
            l.b_qkv.resize(1, 3 * cfg.hidden);
            l.w_att.resize(cfg.hidden, cfg.hidden);
            l.b_att.resize(1, cfg.hidden);
            l.ln2_g.resize(1, cfg.hidden);
            l.ln2_b.resize(1, cfg.hidden);
            l.w_fc.resize(cfg.hidden, cfg.ff);
            l.b_fc.resize(1, cfg.ff);
            l.w_proj.resize(cfg.ff, cfg.hidden);
            l.b_proj.resize(1, cfg.hidden);
        }
        lnf_g.resize(1, cfg.hidden);
        lnf_b.resize(1, cfg.hidden);
    }

    // Gaussian(0, 0.02) weights, zero biases, unit norm gains; quantile-token
    // embedding rows are overwritten with the sigmoid ordinal initialization.
    void init(const ModelConfig& cfg, const VocabLayout& layout, uint64_t seed) {
        TTF_CHECK(cfg.vocab == layout.vocab_size && cfg.max_seq == layout.seq_len,
                  "model config does not match layout");
        init_shapes(cfg);
        Rng rng(seed);
        auto gauss = [&](Mat<F>& m) {
            for (auto& v : m.data) v = static_cast<F>(rng.normal(0.0, 0.02));
        };
        auto ones = [](Mat<F>& m) { std::fill(m.data.begin(), m.data.end(), F(1)); };
        gauss(tok_emb);
        gauss(pos_emb);
        for (auto& l : layers) {
            ones(l.ln1_g);
            gauss(l.w_qkv);
            gauss(l.w_att);
            ones(l.ln2_g);
            gauss(l.w_fc);
            gauss(l.w_proj);
        }
        ones(lnf_g);
        if (layout.n_q > 0) {
            const QuantileEmbeddingInit qe = init_quantile_embedding(layout.n_q, cfg.hidden);
            for (int i = 0; i < layout.n_q; ++i) {
                F* row = tok_emb.row(layout.quant_offset + i);
                for (int d = 0; d < cfg.hidden; ++d) row[d] = static_cast<F>(qe.at(i, d));
            }
        }
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        visit_impl(*this, fn);
    }
    template <typename Fn>
    void visit(Fn&& fn) const {
        visit_impl(*this, fn);
    }

    size_t n_params() const {
        size_t total = 0;
        visit([&](const char*, const Mat<F>& m) { total += m.size(); });
        return total;
    }

    void zero() {
        visit([](const char*, Mat<F>& m) { m.zero(); });
    }

    // Elementwise addition of another parameter set (gradient reduction).
    void add(const ModelParams<F>& other) {
        size_t idx = 0;
        std::vector<const Mat<F>*> theirs;
        other.visit([&](const char*, const Mat<F>& m) { theirs.push_back(&m); });
        visit([&](const char*, Mat<F>& m) {
            const Mat<F>& o = *theirs[idx++];
            for (size_t i = 0; i < m.data.size(); ++i) m.data[i] += o.data[i];
        });
    }

private:
    template <typename Self, typename Fn>
    static void visit_impl(Self& self, Fn& fn) {
        fn("tok_emb", self.tok_emb);
        fn("pos_emb", self.pos_emb);
        for (size_t i = 0; i < self.layers.size(); ++i) {
            auto& l = self.layers[i];
            fn("ln1_g", l.ln1_g);
            fn("ln1_b", l.ln1_b);
            fn("w_qkv", l.w_qkv);
            fn("b_qkv", l.b_qkv);
            fn("w_att", l.w_att);
            fn("b_att", l.b_att);
            fn("ln2_g", l.ln2_g);
            fn("ln2_b", l.ln2_b);
            fn("w_fc", l.w_fc);
            fn("b_fc", l.b_fc);
            fn("w_proj", l.w_proj);
            fn("b_proj", l.b_proj);
        }
        fn("lnf_g", self.lnf_g);
        fn("lnf_b", self.lnf_b);
    }
};

namespace detail {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename F>
void layernorm_forward(const F* x, const F* g, const F* b, F* y, F& mean_out, F& rstd_out, int d) {
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += static_cast<double>(x[i]);
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) {
        const double c = static_cast<double>(x[i]) - mean;
        var += c * c;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < d; ++i) {
        const double xhat = (static_cast<double>(x[i]) - mean) * rstd;
        y[i] = static_cast<F>(xhat * static_cast<double>(g[i]) + static_cast<double>(b[i]));
    }
    mean_out = static_cast<F>(mean);
    rstd_out = static_cast<F>(rstd);
}

template <typename F>
void layernorm_backward(const F* x, const F* g, F mean, F rstd, const F* dy, F* dx_accum, F* dg,
                        F* db, int d) {
    const double m = static_cast<double>(mean);
    const double r = static_cast<double>(rstd);
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int i = 0; i < d; ++i) {
        const double xhat = (static_cast<double>(x[i]) - m) * r;
        const double dxhat = static_cast<double>(dy[i]) * static_cast<double>(g[i]);
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        dg[i] += static_cast<F>(static_cast<double>(dy[i]) * xhat);
        db[i] += dy[i];
    }
    const double inv_d = 1.0 / d;
    for (int i = 0; i < d; ++i) {
        const double xhat = (static_cast<double>(x[i]) - m) * r;
        const double dxhat = static_cast<double>(dy[i]) * static_cast<double>(g[i]);
        dx_accum[i] += static_cast<F>(r * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat));
    }
}

template <typename F>
F gelu(F x) {
    const double xd = static_cast<double>(x);
    const double u = kGeluC * (xd + kGeluA * xd * xd * xd);
    return static_cast<F>(0.5 * xd * (1.0 + std::tanh(u)));
}

template <typename F>
F gelu_grad(F x) {
    const double xd = static_cast<double>(x);
    const double u = kGeluC * (xd + kGeluA * xd * xd * xd);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * xd * xd);
    return static_cast<F>(0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du);
}

}  // namespace detail

// Per-sequence activation caches kept for backward.
template <typename F>
struct LayerCache {
    Mat<F> x_in, ln1_out, qkv, att_probs, att_mix, att_proj, drop1;
    Mat<F> x_mid, ln2_out, fc, act, proj, drop2;
    std::vector<F> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
};

template <typename F>
struct ForwardCache {
    int len = 0;
    std::vector<int> tokens;
    Mat<F> emb;
    std::vector<LayerCache<F>> layers;
    Mat<F> lnf_out;
    std::vector<F> lnf_mean, lnf_rstd;
    Mat<F> logits;  // len x V
};

// Causal forward over one sequence; dropout_rng == nullptr means eval mode.
template <typename F>
void forward_sequence(const ModelParams<F>& p, std::span<const int> tokens, ForwardCache<F>& cache,
                      Rng* dropout_rng) {
    const ModelConfig& cfg = p.config;
    const int len = static_cast<int>(tokens.size());
    TTF_CHECK(len >= 1 && len <= cfg.max_seq, "sequence length out of range");
    const int d = cfg.hidden;
    const int heads = cfg.heads;
    const int dh = d / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const double rate = dropout_rng ? cfg.dropout : 0.0;

    cache.len = len;
    cache.tokens.assign(tokens.begin(), tokens.end());
    cache.emb.resize(len, d);
    for (int i = 0; i < len; ++i) {
        const int tok = tokens[static_cast<size_t>(i)];
        TTF_CHECK(tok >= 0 && tok < cfg.vocab, "token id out of range");
        const F* te = p.tok_emb.row(tok);
        const F* pe = p.pos_emb.row(i);
        F* out = cache.emb.row(i);
        for (int j = 0; j < d; ++j) out[j] = te[j] + pe[j];
    }

    cache.layers.resize(static_cast<size_t>(cfg.layers));
    const Mat<F>* x = &cache.emb;
    for (int li = 0; li < cfg.layers; ++li) {
        LayerCache<F>& lc = cache.layers[static_cast<size_t>(li)];
        const LayerParams<F>& lp = p.layers[static_cast<size_t>(li)];
        lc.x_in = *x;

        lc.ln1_out.resize(len, d);
        lc.ln1_mean.resize(static_cast<size_t>(len));
        lc.ln1_rstd.resize(static_cast<size_t>(len));
        for (int i = 0; i < len; ++i) {
            detail::layernorm_forward(lc.x_in.row(i), lp.ln1_g.row(0), lp.ln1_b.row(0),
                                      lc.ln1_out.row(i), lc.ln1_mean[static_cast<size_t>(i)],
                                      lc.ln1_rstd[static_cast<size_t>(i)], d);
        }

        lc.qkv.resize(len, 3 * d);
        mm::nn(lc.ln1_out.data.data(), lp.w_qkv.data.data(), lc.qkv.data.data(), len, d, 3 * d, false);
        for (int i = 0; i < len; ++i) {
            F* qi = lc.qkv.row(i);
            const F* b = lp.b_qkv.row(0);
            for (int j = 0; j < 3 * d; ++j) qi[j] += b[j];
        }

        lc.att_probs.resize(heads * len, len);
        lc.att_mix.resize(len, d);
        for (int h = 0; h < heads; ++h) {
            const int qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
            for (int i = 0; i < len; ++i) {
                F* probs = lc.att_probs.row(h * len + i);
                const F* qi = lc.qkv.row(i) + qo;
                double maxs = -1e30;
                for (int j = 0; j <= i; ++j) {
                    const F* kj = lc.qkv.row(j) + ko;
                    double s = 0.0;
                    for (int k = 0; k < dh; ++k)
                        s += static_cast<double>(qi[k]) * static_cast<double>(kj[k]);
                    s *= att_scale;
                    probs[j] = static_cast<F>(s);
                    maxs = std::max(maxs, s);
                }
                double denom = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double e = std::exp(static_cast<double>(probs[j]) - maxs);
                    probs[j] = static_cast<F>(e);
                    denom += e;
                }
                F* mix = lc.att_mix.row(i) + qo;
                std::fill(mix, mix + dh, F(0));
                for (int j = 0; j <= i; ++j) {
                    const F pj = static_cast<F>(static_cast<double>(probs[j]) / denom);
                    probs[j] = pj;
                    const F* vj = lc.qkv.row(j) + vo;
                    for (int k = 0; k < dh; ++k) mix[k] += pj * vj[k];
                }
            }
        }

        lc.att_proj.resize(len, d);
        mm::nn(lc.att_mix.data.data(), lp.w_att.data.data(), lc.att_proj.data.data(), len, d, d, false);
        lc.x_mid.resize(len, d);
        if (rate > 0.0) {
            lc.drop1.resize(len, d);
            const F keep = static_cast<F>(1.0 / (1.0 - rate));
            for (size_t i = 0; i < lc.drop1.data.size(); ++i)
                lc.drop1.data[i] = dropout_rng->uniform() < rate ? F(0) : keep;
        }
        for (int i = 0; i < len; ++i) {
            const F* xin = lc.x_in.row(i);
            F* proj = lc.att_proj.row(i);
            const F* b = lp.b_att.row(0);
            F* mid = lc.x_mid.row(i);
            const F* mask = rate > 0.0 ? lc.drop1.row(i) : nullptr;
            for (int j = 0; j < d; ++j) {
                const F a = proj[j] + b[j];
                mid[j] = xin[j] + (mask ? a * mask[j] : a);
            }
        }

        lc.ln2_out.resize(len, d);
        lc.ln2_mean.resize(static_cast<size_t>(len));
        lc.ln2_rstd.resize(static_cast<size_t>(len));
        for (int i = 0; i < len; ++i) {
            detail::layernorm_forward(lc.x_mid.row(i), lp.ln2_g.row(0), lp.ln2_b.row(0),
                                      lc.ln2_out.row(i), lc.ln2_mean[static_cast<size_t>(i)],
                                      lc.ln2_rstd[static_cast<size_t>(i)], d);
        }

        lc.fc.resize(len, cfg.ff);
        mm::nn(lc.ln2_out.data.data(), lp.w_fc.data.data(), lc.fc.data.data(), len, d, cfg.ff, false);
        lc.act.resize(len, cfg.ff);
        for (int i = 0; i < len; ++i) {
            F* fc = lc.fc.row(i);
            const F* b = lp.b_fc.row(0);
            F* act = lc.act.row(i);
            for (int j = 0; j < cfg.ff; ++j) {
                fc[j] += b[j];
                act[j] = detail::gelu(fc[j]);
            }
        }

        lc.proj.resize(len, d);
        mm::nn(lc.act.data.data(), lp.w_proj.data.data(), lc.proj.data.data(), len, cfg.ff, d, false);
        if (rate > 0.0) {
            lc.drop2.resize(len, d);
            const F keep = static_cast<F>(1.0 / (1.0 - rate));
            for (size_t i = 0; i < lc.drop2.data.size(); ++i)
                lc.drop2.data[i] = dropout_rng->uniform() < rate ? F(0) : keep;
        }
        // Second residual is written in place over proj: x_out = x_mid + mlp.
        for (int i = 0; i < len; ++i) {
            F* out = lc.proj.row(i);
            const F* b = lp.b_proj.row(0);
            const F* mid = lc.x_mid.row(i);
            const F* mask = rate > 0.0 ? lc.drop2.row(i) : nullptr;
            for (int j = 0; j < d; ++j) {
                const F a = out[j] + b[j];
                out[j] = mid[j] + (mask ? a * mask[j] : a);
            }
        }
        x = &lc.proj;
    }

    cache.lnf_out.resize(len, d);
    cache.lnf_mean.resize(static_cast<size_t>(len));
    cache.lnf_rstd.resize(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) {
        detail::layernorm_forward(x->row(i), p.lnf_g.row(0), p.lnf_b.row(0), cache.lnf_out.row(i),
                                  cache.lnf_mean[static_cast<size_t>(i)],
                                  cache.lnf_rstd[static_cast<size_t>(i)], d);
    }
    cache.logits.resize(len, cfg.vocab);
    mm::nt(cache.lnf_out.data.data(), p.tok_emb.data.data(), cache.logits.data.data(), len, d,
           cfg.vocab, false);
}

// Accumulates parameter gradients for dlogits (len x V) into grads.
template <typename F>
void backward_sequence(const ModelParams<F>& p, const ForwardCache<F>& cache, const Mat<F>& dlogits,
                       ModelParams<F>& grads) {
    const ModelConfig& cfg = p.config;
    const int len = cache.len;
    const int d = cfg.hidden;
    const int heads = cfg.heads;
    const int dh = d / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // logits = lnf_out @ tok_emb^T
    Mat<F> dlnf_out;
    dlnf_out.resize(len, d);
    mm::nn(dlogits.data.data(), p.tok_emb.data.data(), dlnf_out.data.data(), len, cfg.vocab, d, false);
    mm::tn(dlogits.data.data(), cache.lnf_out.data.data(), grads.tok_emb.data.data(), len, cfg.vocab, d);

    // Final layernorm; dx goes to the last layer's output.
    const Mat<F>& last_x = cfg.layers > 0 ? cache.layers.back().proj : cache.emb;
    Mat<F> dx;
    dx.resize(len, d);
    for (int i = 0; i < len; ++i) {
        detail::layernorm_backward(last_x.row(i), p.lnf_g.row(0), cache.lnf_mean[static_cast<size_t>(i)],
                                   cache.lnf_rstd[static_cast<size_t>(i)], dlnf_out.row(i), dx.row(i),
                                   grads.lnf_g.row(0), grads.lnf_b.row(0), d);
    }

    Mat<F> d_mid, d_ln2, d_act, d_fc, d_mix, d_ln1, d_qkv;
    for (int li = cfg.layers - 1; li >= 0; --li) {
        const LayerCache<F>& lc = cache.layers[static_cast<size_t>(li)];
        const LayerParams<F>& lp = p.layers[static_cast<size_t>(li)];
        LayerParams<F>& lg = grads.layers[static_cast<size_t>(li)];
        const bool dropped = lc.drop1.rows > 0;

        // x_out = x_mid + drop2 * (act @ w_proj + b_proj)
        d_mid = dx;  // residual path
        Mat<F>& d_proj = dx;  // reuse: gradient into the mlp branch (after dropout mask)
        if (dropped) {
            for (int i = 0; i < len; ++i) {
                F* dp = d_proj.row(i);
                const F* mask = lc.drop2.row(i);
                for (int j = 0; j < d; ++j) dp[j] *= mask[j];
            }
        }
        for (int i = 0; i < len; ++i) {
            const F* dp = d_proj.row(i);
            F* bg = lg.b_proj.row(0);
            for (int j = 0; j < d; ++j) bg[j] += dp[j];
        }
        d_act.resize(len, cfg.ff);
        mm::nt(d_proj.data.data(), lp.w_proj.data.data(), d_act.data.data(), len, d, cfg.ff, false);
        mm::tn(lc.act.data.data(), d_proj.data.data(), lg.w_proj.data.data(), len, cfg.ff, d);

        d_fc.resize(len, cfg.ff);
        for (int i = 0; i < len; ++i) {
            const F* da = d_act.row(i);
            const F* fc = lc.fc.row(i);
            F* dfc = d_fc.row(i);
            F* bg = lg.b_fc.row(0);
            for (int j = 0; j < cfg.ff; ++j) {
                dfc[j] = da[j] * detail::gelu_grad(fc[j]);
                bg[j] += dfc[j];
            }
        }
        d_ln2.resize(len, d);
        mm::nt(d_fc.data.data(), lp.w_fc.data.data(), d_ln2.data.data(), len, cfg.ff, d, false);
        mm::tn(lc.ln2_out.data.data(), d_fc.data.data(), lg.w_fc.data.data(), len, d, cfg.ff);

        for (int i = 0; i < len; ++i) {
            detail::layernorm_backward(lc.x_mid.row(i), lp.ln2_g.row(0),
                                       lc.ln2_mean[static_cast<size_t>(i)],
                                       lc.ln2_rstd[static_cast<size_t>(i)], d_ln2.row(i), d_mid.row(i),
                                       lg.ln2_g.row(0), lg.ln2_b.row(0), d);
        }

        // x_mid = x_in + drop1 * (att_mix @ w_att + b_att)
        Mat<F>& d_attproj = d_mid;  // after this block d_mid carries d(x_in) residual part
        Mat<F> d_branch;
        d_branch.resize(len, d);
        for (int i = 0; i < len; ++i) {
            const F* dm = d_attproj.row(i);
            F* db = d_branch.row(i);
            const F* mask = dropped ? lc.drop1.row(i) : nullptr;
            F* bg = lg.b_att.row(0);
            for (int j = 0; j < d; ++j) {
                db[j] = mask ? dm[j] * mask[j] : dm[j];
                bg[j] += db[j];
            }
        }
        d_mix.resize(len, d);
        mm::nt(d_branch.data.data(), lp.w_att.data.data(), d_mix.data.data(), len, d, d, false);
        mm::tn(lc.att_mix.data.data(), d_branch.data.data(), lg.w_att.data.data(), len, d, d);

        d_qkv.resize(len, 3 * d);
        d_qkv.zero();
        std::vector<double> dprobs(static_cast<size_t>(len));
        for (int h = 0; h < heads; ++h) {
            const int qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
            for (int i = 0; i < len; ++i) {
                const F* probs = lc.att_probs.row(h * len + i);
                const F* dmix = d_mix.row(i) + qo;
                double dot = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const F* vj = lc.qkv.row(j) + vo;
                    double dp = 0.0;
                    for (int k = 0; k < dh; ++k)
                        dp += static_cast<double>(dmix[k]) * static_cast<double>(vj[k]);
                    dprobs[static_cast<size_t>(j)] = dp;
                    dot += dp * static_cast<double>(probs[j]);
                    // dV
                    F* dvj = d_qkv.row(j) + vo;
                    for (int k = 0; k < dh; ++k) dvj[k] += probs[j] * dmix[k];
                }
                const F* qi = lc.qkv.row(i) + qo;
                F* dqi = d_qkv.row(i) + qo;
                for (int j = 0; j <= i; ++j) {
                    const double ds =
                        static_cast<double>(probs[j]) * (dprobs[static_cast<size_t>(j)] - dot) * att_scale;
                    const F dsf = static_cast<F>(ds);
                    const F* kj = lc.qkv.row(j) + ko;
                    F* dkj = d_qkv.row(j) + ko;
                    for (int k = 0; k < dh; ++k) {
                        dqi[k] += dsf * kj[k];
                        dkj[k] += dsf * qi[k];
                    }
                }
            }
        }
        for (int i = 0; i < len; ++i) {
            const F* dq = d_qkv.row(i);
            F* bg = lg.b_qkv.row(0);
            for (int j = 0; j < 3 * d; ++j) bg[j] += dq[j];
        }
        d_ln1.resize(len, d);
        mm::nt(d_qkv.data.data(), lp.w_qkv.data.data(), d_ln1.data.data(), len, 3 * d, d, false);
        mm::tn(lc.ln1_out.data.data(), d_qkv.data.data(), lg.w_qkv.data.data(), len, d, 3 * d);

        for (int i = 0; i < len; ++i) {
            detail::layernorm_backward(lc.x_in.row(i), lp.ln1_g.row(0),
                                       lc.ln1_mean[static_cast<size_t>(i)],
                                       lc.ln1_rstd[static_cast<size_t>(i)], d_ln1.row(i), d_mid.row(i),
                                       lg.ln1_g.row(0), lg.ln1_b.row(0), d);
        }
        dx = std::move(d_mid);
    }

    for (int i = 0; i < len; ++i) {
        const F* de = dx.row(i);
        F* dt = grads.tok_emb.row(cache.tokens[static_cast<size_t>(i)]);
        F* dp = grads.pos_emb.row(i);
        for (int j = 0; j < d; ++j) {
            dt[j] += de[j];
            dp[j] += de[j];
        }
    }
}

// Scratch reused across sequences to avoid churn in the training loop.
template <typename F>
struct SeqWorkspace {
    ForwardCache<F> cache;
    Mat<F> dlogits;
    std::vector<double> zrow, grow;
};

// Mean token loss of one (masked input, original target) pair; optionally
// accumulates parameter gradients scaled by `scale`. Loss positions are the
// len-1 next-token targets.
template <typename F>
double sequence_loss_and_grad(const ModelParams<F>& p, std::span<const int> input,
                              std::span<const int> target, const LossContext& ctx,
                              ModelParams<F>* grads, double scale, Rng* dropout_rng,
                              SeqWorkspace<F>& ws) {
    TTF_CHECK(input.size() == target.size() && input.size() >= 2, "bad sequence pair");
    forward_sequence(p, input, ws.cache, dropout_rng);
    const int len = ws.cache.len;
    const int v = p.config.vocab;
    ws.zrow.resize(static_cast<size_t>(v));
    ws.grow.resize(static_cast<size_t>(v));
    if (grads) ws.dlogits.resize(len, v);

    double loss_sum = 0.0;
    const double token_scale = scale / static_cast<double>(len - 1);
    for (int i = 0; i + 1 < len; ++i) {
        const int pos = i + 2;  // 1-based position of the predicted token
        const TokenLossSpec spec = ctx.spec_at(pos);
        const int tgt = target[static_cast<size_t>(i + 1)];
        const F* zr = ws.cache.logits.row(i);
        for (int j = 0; j < v; ++j) ws.zrow[static_cast<size_t>(j)] = static_cast<double>(zr[j]);
        loss_sum += token_loss(ws.zrow, tgt, spec, ctx.weights);
        if (grads) {
            token_loss_grad(ws.zrow, tgt, spec, ctx.weights, ws.grow);
            F* dl = ws.dlogits.row(i);
            for (int j = 0; j < v; ++j)
                dl[j] = static_cast<F>(ws.grow[static_cast<size_t>(j)] * token_scale);
        }
    }
    if (grads) {
        std::fill(ws.dlogits.row(len - 1), ws.dlogits.row(len - 1) + v, F(0));
        backward_sequence(p, ws.cache, ws.dlogits, *grads);
    }
    return loss_sum / static_cast<double>(len - 1);
}

template <typename F>
double sequence_loss_and_grad(const ModelParams<F>& p, std::span<const int> input,
                              std::span<const int> target, const LossContext& ctx,
                              ModelParams<F>* grads, double scale, Rng* dropout_rng) {
    SeqWorkspace<F> ws;
    return sequence_loss_and_grad(p, input, target, ctx, grads, scale, dropout_rng, ws);
}

// Autoregressive forward with per-layer K/V caches; used by the sampler.
template <typename F>
class IncrementalDecoder {
public:
    explicit IncrementalDecoder(const ModelParams<F>& p) : p_(&p) {
        const ModelConfig& cfg = p.config;
        k_cache_.resize(static_cast<size_t>(cfg.layers));
        v_cache_.resize(static_cast<size_t>(cfg.layers));
        for (int li = 0; li < cfg.layers; ++li) {
            k_cache_[static_cast<size_t>(li)].resize(cfg.max_seq, cfg.hidden);
            v_cache_[static_cast<size_t>(li)].resize(cfg.max_seq, cfg.hidden);
        }
    }

    void reset() { pos_ = 0; }
    int position() const { return pos_; }

    // Consumes one token; fills logits for the next position.
    void step(int token, std::vector<F>& logits) {
        const ModelConfig& cfg = p_->config;
        TTF_CHECK(pos_ < cfg.max_seq, "decoder ran past max sequence length");
        TTF_CHECK(token >= 0 && token < cfg.vocab, "token id out of range");
        const int d = cfg.hidden;
        const int heads = cfg.heads;
        const int dh = d / heads;
        const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

        x_.assign(static_cast<size_t>(d), F(0));
        {
            const F* te = p_->tok_emb.row(token);
            const F* pe = p_->pos_emb.row(pos_);
            for (int j = 0; j < d; ++j) x_[static_cast<size_t>(j)] = te[j] + pe[j];
        }

        std::vector<F> h(static_cast<size_t>(d)), qkv(static_cast<size_t>(3 * d));
        std::vector<F> mix(static_cast<size_t>(d)), branch(static_cast<size_t>(d));
        std::vector<F> ff(static_cast<size_t>(cfg.ff));
        F mean, rstd;
        for (int li = 0; li < cfg.layers; ++li) {
            const LayerParams<F>& lp = p_->layers[static_cast<size_t>(li)];
            detail::layernorm_forward(x_.data(), lp.ln1_g.row(0), lp.ln1_b.row(0), h.data(), mean,
                                      rstd, d);
            mm::nn(h.data(), lp.w_qkv.data.data(), qkv.data(), 1, d, 3 * d, false);
            for (int j = 0; j < 3 * d; ++j) qkv[static_cast<size_t>(j)] += lp.b_qkv.row(0)[j];

            Mat<F>& kc = k_cache_[static_cast<size_t>(li)];
            Mat<F>& vc = v_cache_[static_cast<size_t>(li)];
            std::copy(qkv.begin() + d, qkv.begin() + 2 * d, kc.row(pos_));
            std::copy(qkv.begin() + 2 * d, qkv.end(), vc.row(pos_));

            probs_.resize(static_cast<size_t>(pos_ + 1));
            for (int hd = 0; hd < heads; ++hd) {
                const int qo = hd * dh;
                const F* q = qkv.data() + qo;
                double maxs = -1e30;
                for (int j = 0; j <= pos_; ++j) {
                    const F* kj = kc.row(j) + qo;
                    double s = 0.0;
                    for (int k = 0; k < dh; ++k)
                        s += static_cast<double>(q[k]) * static_cast<double>(kj[k]);
                    s *= att_scale;
                    probs_[static_cast<size_t>(j)] = static_cast<F>(s);
                    maxs = std::max(maxs, s);
                }
                double denom = 0.0;
                for (int j = 0; j <= pos_; ++j) {
                    const double e = std::exp(static_cast<double>(probs_[static_cast<size_t>(j)]) - maxs);
                    probs_[static_cast<size_t>(j)] = static_cast<F>(e);
                    denom += e;
                }
                F* m = mix.data() + qo;
                std::fill(m, m + dh, F(0));
                for (int j = 0; j <= pos_; ++j) {
                    const F pj = static_cast<F>(static_cast<double>(probs_[static_cast<size_t>(j)]) / denom);
                    const F* vj = vc.row(j) + qo;
                    for (int k = 0; k < dh; ++k) m[k] += pj * vj[k];
                }
            }
            mm::nn(mix.data(), lp.w_att.data.data(), branch.data(), 1, d, d, false);
            for (int j = 0; j < d; ++j) x_[static_cast<size_t>(j)] += branch[static_cast<size_t>(j)] + lp.b_att.row(0)[j];

            detail::layernorm_forward(x_.data(), lp.ln2_g.row(0), lp.ln2_b.row(0), h.data(), mean,
                                      rstd, d);
            mm::nn(h.data(), lp.w_fc.data.data(), ff.data(), 1, d, cfg.ff, false);
            for (int j = 0; j < cfg.ff; ++j)
                ff[static_cast<size_t>(j)] = detail::gelu(static_cast<F>(ff[static_cast<size_t>(j)] + lp.b_fc.row(0)[j]));
            mm::nn(ff.data(), lp.w_proj.data.data(), branch.data(), 1, cfg.ff, d, false);
            for (int j = 0; j < d; ++j) x_[static_cast<size_t>(j)] += branch[static_cast<size_t>(j)] + lp.b_proj.row(0)[j];
        }

        detail::layernorm_forward(x_.data(), p_->lnf_g.row(0), p_->lnf_b.row(0), h.data(), mean,
                                  rstd, d);
        logits.resize(static_cast<size_t>(cfg.vocab));
        mm::nt(h.data(), p_->tok_emb.data.data(), logits.data(), 1, d, cfg.vocab, false);
        ++pos_;
    }

private:
    const ModelParams<F>* p_;
    int pos_ = 0;
    std::vector<Mat<F>> k_cache_, v_cache_;
    std::vector<F> x_, probs_;
};

// Mask sampling ranges; the NM preset uses all zeros.
struct MaskRanges {
    double tree_lo = 0.5, tree_hi = 0.75;
    double value_lo = 0.25, value_hi = 0.5;
};

// Masks one sequence: per-sequence ratios drawn uniformly from the ranges,
// exact-count position choice, BOS/EOS untouched. A (bin unmasked, quant
// masked) pair within a numeric column is fixed by swapping the two masks.
std::vector<int> apply_mask_sequence(const VocabLayout& layout, std::span<const int> seq,
                                     const MaskRanges& ranges, Rng& rng);

struct TrainConfig {
    int batch_size = 128;
    double learning_rate = 5e-4;
    int max_steps = 5000;
    int shared_steps = 0;  // s0; 0 = min(steps for 20 epochs, max_steps / 10)
    int validate_every = 100;
    int patience = 3;
    MaskRanges mask;
    uint64_t seed = 0;
    // step, model tag (0 shared, 1, 2), train loss, validation loss (NaN when absent)
    std::function<void(int, int, double, double)> log;
};

struct TrainData {
    VocabLayout layout;
    std::vector<std::vector<int>> sequences;
    LeafIndexMatrix leaves;  // aligned with sequences
};

struct TrainOutput {
    ModelParams<float> g1, g2;
    std::vector<size_t> split1, split2;  // row indices of the two training splits
    int steps1 = 0, steps2 = 0;
    double best_val1 = 0.0, best_val2 = 0.0;
    int shared_steps = 0;
};

// Shared warm start for s0 steps on all rows, then two copies continue on an
// even split each, validated on the other split with patience-based early
// stopping; best-validation weights are returned.
TrainOutput train_two_phase(const TrainData& data, const ModelConfig& mc, const TrainConfig& tc);

// Everything needed to generate and decode rows: the two trained models,
// their leaf-matrix splits, the fitted tokenizer/layout, and the ensemble.
struct TrainedGenerator {
    std::string preset = "tiny";
    ModelConfig model_config;
    TrainConfig train_config;
    DataTokenizer tokenizer;
    VocabLayout layout;
    Ensemble ensemble;
    ModelParams<float> g1, g2;
    LeafIndexMatrix leaves1, leaves2;  // per-model leaf rows (own split only)
    double default_temp_categorical = 2.0;
    double default_temp_numeric = 1.0;
    MaskRanges default_gen_mask;  // tree part doubles as the prompt mask range
};

// Mean masked-input token loss over held-out sequences under a fixed seeded
// mask (fixed mask keeps comparisons between checks stable).
double validation_loss(const ModelParams<float>& p, const TrainData& data,
                       std::span<const size_t> rows, const TrainConfig& tc);

}  // namespace ttf
