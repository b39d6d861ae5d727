#include "ttf/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ttf/rng.hpp"

namespace ttf {

int KMeans1D::bin_of(double v) const {
    const auto it = std::lower_bound(boundaries.begin(), boundaries.end(), v);
    return static_cast<int>(it - boundaries.begin()) + 1;
}

int QuantileBins::bin_of(double v) const {
    if (edges.size() < 2) return 1;
    const auto first = edges.begin() + 1;
    const auto last = edges.end() - 1;  // interior edges only; ends clamp
    const auto it = std::upper_bound(first, last, v);
    return static_cast<int>(it - first) + 1;
}

int CategoryMap::id_of(const std::string& value) const {
    for (size_t i = 0; i < categories.size(); ++i) {
        if (categories[i] == value) return static_cast<int>(i + 1);
    }
    return 0;
}

namespace {

void check_values(const std::vector<double>& values, const char* op) {
    if (values.empty()) throw DataError(std::string(op) + ": empty input");
    for (double v : values) {
        if (!std::isfinite(v)) throw DataError(std::string(op) + ": non-finite value");
    }
}

}  // namespace

KMeans1D fit_kmeans_1d(const std::vector<double>& values, int k, uint64_t seed) {
    check_values(values, "fit_kmeans_1d");
    TTF_CHECK(k >= 1, "k must be >= 1");

    std::vector<double> v = values;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    size_t distinct = 1;
    for (size_t i = 1; i < n; ++i) {
        if (v[i] != v[i - 1]) ++distinct;
    }
    const size_t kk = std::min<size_t>(static_cast<size_t>(k), distinct);

    // k-means++ seeding. Duplicates of chosen points carry zero weight, so
    // the kk <= distinct initial centers are distinct.
    Rng rng(seed);
    std::vector<double> centers;
    centers.reserve(kk);
    centers.push_back(v[rng.uniform_int(n)]);
    std::vector<double> d2(n);
    while (centers.size() < kk) {
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (double c : centers) best = std::min(best, (v[i] - c) * (v[i] - c));
            d2[i] = best;
            total += best;
        }
        if (total <= 0.0) break;  // cannot happen while centers < distinct
        double r = rng.uniform() * total;
        size_t pick = n - 1;
        for (size_t i = 0; i < n; ++i) {
            r -= d2[i];
            if (r <= 0.0) {
                pick = i;
                break;
            }
        }
        centers.push_back(v[pick]);
    }
    std::sort(centers.begin(), centers.end());

    // Lloyd's on sorted data: cells are contiguous segments; iterate until
    // the segmentation stops moving or 300 rounds.
    std::vector<size_t> seg_start(centers.size() + 1), prev_start;
    for (int iter = 0; iter < 300; ++iter) {
        seg_start[0] = 0;
        for (size_t j = 0; j + 1 < centers.size(); ++j) {
            const double boundary = 0.5 * (centers[j] + centers[j + 1]);
            // v == boundary belongs to the lower center.
            seg_start[j + 1] =
                static_cast<size_t>(std::upper_bound(v.begin(), v.end(), boundary) - v.begin());
        }
        seg_start[centers.size()] = n;
        if (seg_start == prev_start) break;
        prev_start = seg_start;
        for (size_t j = 0; j < centers.size(); ++j) {
            const size_t lo = seg_start[j], hi = seg_start[j + 1];
            if (lo >= hi) continue;  // empty cell keeps its center
            double sum = 0.0;
            for (size_t i = lo; i < hi; ++i) sum += v[i];
            centers[j] = sum / static_cast<double>(hi - lo);
        }
    }

    KMeans1D out;
    out.centers = std::move(centers);
    out.boundaries.reserve(out.centers.size() - 1);
    for (size_t j = 0; j + 1 < out.centers.size(); ++j) {
        out.boundaries.push_back(0.5 * (out.centers[j] + out.centers[j + 1]));
    }
    return out;
}

double quantile_interp(std::span<const double> sorted, double level) {
    TTF_CHECK(!sorted.empty(), "quantile of empty data");
    const double pos = level * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

QuantileBins fit_quantile_bins(const std::vector<double>& values, int q) {
    check_values(values, "fit_quantile_bins");
    TTF_CHECK(q >= 1, "q must be >= 1");

    std::vector<double> v = values;
    std::sort(v.begin(), v.end());

    std::vector<double> raw;
    raw.reserve(static_cast<size_t>(q) + 1);
    for (int j = 0; j <= q; ++j) {
        const double e = quantile_interp(v, static_cast<double>(j) / static_cast<double>(q));
        if (raw.empty() || e > raw.back()) raw.push_back(e);
    }

    // Keep an edge only when it closes a nonempty bin; edges of empty bins
    // merge them into the following bin. Every kept bin then has a median.
    std::vector<double> edges{raw[0]};
    if (raw.size() >= 2) {
        for (size_t i = 1; i < raw.size(); ++i) {
            const auto lo = std::lower_bound(v.begin(), v.end(), edges.back());
            const bool last = (i + 1 == raw.size());
            const auto hi = last ? std::upper_bound(v.begin(), v.end(), raw[i])
                                 : std::lower_bound(v.begin(), v.end(), raw[i]);
            if (hi > lo) edges.push_back(raw[i]);
        }
    }

    QuantileBins out;
    out.edges = edges;
    const int bins = std::max<int>(1, static_cast<int>(edges.size()) - 1);
    out.representatives.reserve(static_cast<size_t>(bins));
    for (int b = 1; b <= bins; ++b) {
        size_t lo, hi;
        if (edges.size() < 2) {
            lo = 0;
            hi = v.size();
        } else {
            lo = static_cast<size_t>(std::lower_bound(v.begin(), v.end(), edges[static_cast<size_t>(b - 1)]) -
                                     v.begin());
            hi = (b == bins)
                     ? v.size()
                     : static_cast<size_t>(std::lower_bound(v.begin(), v.end(), edges[static_cast<size_t>(b)]) -
                                           v.begin());
        }
        TTF_CHECK(hi > lo, "empty quantile bin survived merging");
        const size_t m = hi - lo;
        const double median = (m % 2 == 1) ? v[lo + m / 2] : 0.5 * (v[lo + m / 2 - 1] + v[lo + m / 2]);
        out.representatives.push_back(median);
    }
    return out;
}

DataTokenizer fit_tokenizer(const Table& t, int k, int q, uint64_t seed) {
    if (drop_missing(t).n_rows() == 0) throw DataError("fit_tokenizer: no complete rows");

    DataTokenizer d;
    d.schema = t.schema();
    d.k_config = k;
    d.q_config = q;
    d.codecs.resize(t.n_cols());
    Rng rng(seed);

    for (size_t c = 0; c < t.n_cols(); ++c) {
        ColumnCodec& codec = d.codecs[c];
        codec.kind = t.schema()[c].kind;
        if (codec.kind == ColumnKind::categorical) {
            // Declared categories first, then observed ones in pool order.
            CategoryMap& cm = codec.cats;
            for (const auto& cat : t.schema()[c].declared_categories) {
                if (cm.id_of(cat) == 0) cm.categories.push_back(cat);
            }
            for (const auto& cat : t.pool(c)) {
                if (cm.id_of(cat) == 0) cm.categories.push_back(cat);
            }
            if (cm.categories.empty())
                throw DataError("column '" + t.schema()[c].name + "' has no categories to fit");
            d.n_c = std::max(d.n_c, cm.size());
        } else {
            std::vector<double> values;
            values.reserve(t.n_rows());
            for (size_t r = 0; r < t.n_rows(); ++r) {
                const Cell& cell = t.cell(r, c);
                if (!cell.missing) values.push_back(cell.num);
            }
            if (values.empty())
                throw DataError("column '" + t.schema()[c].name + "' has no numeric values to fit");
            codec.kmeans = fit_kmeans_1d(values, k, rng.next_u64());
            codec.quant = fit_quantile_bins(values, q);
            d.n_b = std::max(d.n_b, codec.kmeans.n_bins());
            d.n_q = std::max(d.n_q, codec.quant.n_bins());
        }
    }
    return d;
}

std::vector<int> encode_row(const DataTokenizer& d, const Table& t, size_t r) {
    TTF_CHECK(t.n_cols() == d.schema.size(), "encode_row: schema width mismatch");
    std::vector<int> ids;
    for (size_t c = 0; c < d.schema.size(); ++c) {
        const Cell& cell = t.cell(r, c);
        if (cell.missing)
            throw DataError("encode_row: missing value in column '" + d.schema[c].name + "'");
        const ColumnCodec& codec = d.codecs[c];
        if (codec.kind == ColumnKind::categorical) {
            const std::string& value = t.cat_value(r, c);
            const int id = codec.cats.id_of(value);
            if (id == 0)
                throw DataError("encode_row: unseen category '" + value + "' in column '" +
                                d.schema[c].name + "'");
            ids.push_back(id);
        } else {
            if (!std::isfinite(cell.num))
                throw DataError("encode_row: non-finite value in column '" + d.schema[c].name + "'");
            ids.push_back(codec.kmeans.bin_of(cell.num));
            ids.push_back(codec.quant.bin_of(cell.num));
        }
    }
    return ids;
}

void decode_row(const DataTokenizer& d, std::span<const int> ids, Table& out) {
    TTF_CHECK(out.schema().size() == d.schema.size(), "decode_row: schema width mismatch");
    std::vector<Cell> row(d.schema.size());
    size_t pos = 0;
    for (size_t c = 0; c < d.schema.size(); ++c) {
        const ColumnCodec& codec = d.codecs[c];
        Cell& cell = row[c];
        if (codec.kind == ColumnKind::categorical) {
            TTF_CHECK(pos < ids.size(), "decode_row: id underflow");
            const int id = ids[pos++];
            if (id < 1 || id > codec.cats.size())
                throw DataError("decode_row: category id out of range in column '" + d.schema[c].name + "'");
            cell.cat = out.intern(c, codec.cats.category(id));
            cell.missing = false;
        } else {
            TTF_CHECK(pos + 2 <= ids.size(), "decode_row: id underflow");
            const int bin = ids[pos++];
            const int quant = ids[pos++];
            if (bin < 1 || bin > codec.kmeans.n_bins())
                throw DataError("decode_row: bin id out of range in column '" + d.schema[c].name + "'");
            if (quant < 1 || quant > codec.quant.n_bins())
                throw DataError("decode_row: quantile id out of range in column '" + d.schema[c].name + "'");
            // The quantile id alone determines the decoded value.
            cell.num = codec.quant.decode(quant);
            cell.missing = false;
        }
    }
    TTF_CHECK(pos == ids.size(), "decode_row: trailing ids");
    out.push_row(std::move(row));
}

VocabLayout VocabLayout::make(const DataTokenizer& d, const std::vector<int>& leaf_counts) {
    TTF_CHECK(!leaf_counts.empty(), "layout needs at least one tree");
    VocabLayout v;
    v.n_trees = static_cast<int>(leaf_counts.size());
    v.leaf_counts = leaf_counts;
    v.n_l = *std::max_element(leaf_counts.begin(), leaf_counts.end());
    v.n_c = d.n_c;
    v.n_b = d.n_b;
    v.n_q = d.n_q;

    for (size_t c = 0; c < d.schema.size(); ++c) {
        const ColumnCodec& codec = d.codecs[c];
        if (codec.kind == ColumnKind::categorical) {
            v.value_slots.push_back({static_cast<int>(c), TokenKind::cat, codec.cats.size()});
        } else {
            v.value_slots.push_back({static_cast<int>(c), TokenKind::bin, codec.kmeans.n_bins()});
            v.value_slots.push_back({static_cast<int>(c), TokenKind::quant, codec.quant.n_bins()});
        }
    }

    v.leaf_offset = 3;
    v.cat_offset = v.leaf_offset + v.n_l;
    v.bin_offset = v.cat_offset + v.n_c;
    v.quant_offset = v.bin_offset + v.n_b;
    v.vocab_size = v.quant_offset + v.n_q;
    v.seq_len = 2 + v.n_trees + static_cast<int>(v.value_slots.size());
    return v;
}

TokenRange VocabLayout::valid_vocab_at(int position) const {
    TTF_CHECK(position >= 1 && position <= seq_len, "position out of range");
    if (position == 1) return {bos_id, bos_id + 1};
    if (position == seq_len) return {eos_id, eos_id + 1};
    if (is_tree_position(position)) {
        const int l = leaf_counts[static_cast<size_t>(position - 2)];
        return {leaf_offset, leaf_offset + l};
    }
    const ValueSlot& slot = slot_at(position);
    switch (slot.kind) {
        case TokenKind::cat:
            return {cat_offset, cat_offset + slot.size};
        case TokenKind::bin:
            return {bin_offset, bin_offset + slot.size};
        case TokenKind::quant:
            return {quant_offset, quant_offset + slot.size};
        default:
            throw InternalError("bad slot kind");
    }
}

TokenKind VocabLayout::kind_at(int position) const {
    TTF_CHECK(position >= 1 && position <= seq_len, "position out of range");
    if (position == 1 || position == seq_len) return TokenKind::special;
    if (is_tree_position(position)) return TokenKind::leaf;
    return slot_at(position).kind;
}

int VocabLayout::leaf_token(int tree, int leaf_id) const {
    const int l = leaf_counts[static_cast<size_t>(tree)];
    TTF_CHECK(leaf_id >= 1 && leaf_id <= l, "leaf id out of range for tree");
    return leaf_offset + leaf_id - 1;
}

int VocabLayout::value_token(int slot_index, int value_id) const {
    const ValueSlot& slot = value_slots[static_cast<size_t>(slot_index)];
    TTF_CHECK(value_id >= 1 && value_id <= slot.size, "value id out of range for slot");
    switch (slot.kind) {
        case TokenKind::cat:
            return cat_offset + value_id - 1;
        case TokenKind::bin:
            return bin_offset + value_id - 1;
        case TokenKind::quant:
            return quant_offset + value_id - 1;
        default:
            throw InternalError("bad slot kind");
    }
}

std::vector<int> build_sequence(const VocabLayout& layout, std::span<const int> leaf_row,
                                std::span<const int> value_ids) {
    TTF_CHECK(static_cast<int>(leaf_row.size()) == layout.n_trees, "leaf row width mismatch");
    TTF_CHECK(value_ids.size() == layout.value_slots.size(), "value id width mismatch");
    std::vector<int> seq;
    seq.reserve(static_cast<size_t>(layout.seq_len));
    seq.push_back(layout.bos_id);
    for (int k = 0; k < layout.n_trees; ++k) seq.push_back(layout.leaf_token(k, leaf_row[static_cast<size_t>(k)]));
    for (size_t s = 0; s < value_ids.size(); ++s)
        seq.push_back(layout.value_token(static_cast<int>(s), value_ids[s]));
    seq.push_back(layout.eos_id);
    TTF_CHECK(static_cast<int>(seq.size()) == layout.seq_len, "sequence length mismatch");
    return seq;
}

std::vector<int> value_ids_from_sequence(const VocabLayout& layout, std::span<const int> seq) {
    TTF_CHECK(static_cast<int>(seq.size()) == layout.seq_len, "sequence length mismatch");
    std::vector<int> ids;
    ids.reserve(layout.value_slots.size());
    for (size_t s = 0; s < layout.value_slots.size(); ++s) {
        const int position = layout.n_trees + 2 + static_cast<int>(s);
        const int token = seq[static_cast<size_t>(position - 1)];
        const TokenRange range = layout.valid_vocab_at(position);
        TTF_CHECK(range.contains(token), "token outside valid range at its position");
        ids.push_back(token - range.lo + 1);
    }
    return ids;
}

}  // namespace ttf
