#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ttf/table.hpp"

namespace ttf {

// 1-D K-Means codec. Bin of a value = nearest center, midpoint ties toward
// the lower center.
struct KMeans1D {
    std::vector<double> centers;     // sorted, strictly increasing
    std::vector<double> boundaries;  // midpoints between adjacent centers

    int n_bins() const { return static_cast<int>(centers.size()); }
    int bin_of(double v) const;  // 1-based
};

// Empirical quantile codec. Bin of a value = rightmost bin whose left edge
// is <= v; out-of-range values clamp to the first/last bin.
struct QuantileBins {
    std::vector<double> edges;            // strictly increasing; size n_bins()+1
                                          // (single element when the column is constant)
    std::vector<double> representatives;  // per-bin decode value (training median)

    int n_bins() const { return static_cast<int>(representatives.size()); }
    int bin_of(double v) const;  // 1-based
    double decode(int bin) const { return representatives[static_cast<size_t>(bin - 1)]; }
};

// Label codec for categorical columns; ids are 1-based.
struct CategoryMap {
    std::vector<std::string> categories;

    int size() const { return static_cast<int>(categories.size()); }
    int id_of(const std::string& value) const;  // 0 when unseen
    const std::string& category(int id) const { return categories[static_cast<size_t>(id - 1)]; }
};

struct ColumnCodec {
    ColumnKind kind = ColumnKind::categorical;
    CategoryMap cats;    // categorical columns
    KMeans1D kmeans;     // numeric columns
    QuantileBins quant;  // numeric columns
};

// Fitted reversible tokenizer: per-column codecs plus the family maxima
// (n_c, n_b, n_q) that shape the vocabulary.
struct DataTokenizer {
    Schema schema;
    std::vector<ColumnCodec> codecs;
    int k_config = 0;
    int q_config = 0;
    int n_c = 0;  // max categories over categorical columns
    int n_b = 0;  // max K-Means bins over numeric columns
    int n_q = 0;  // max quantile bins over numeric columns
};

KMeans1D fit_kmeans_1d(const std::vector<double>& values, int k, uint64_t seed);
QuantileBins fit_quantile_bins(const std::vector<double>& values, int q);

// Empirical quantile with linear interpolation at `level` in [0,1];
// `sorted` must be ascending and nonempty.
double quantile_interp(std::span<const double> sorted, double level);

DataTokenizer fit_tokenizer(const Table& t, int k, int q, uint64_t seed);

// Per-column discrete ids, 1-based, in column order; numeric columns emit
// (bin, quant) pairs. Output length = m_d + 2*m_c.
std::vector<int> encode_row(const DataTokenizer& d, const Table& t, size_t r);

// Appends the decoded row to `out` (same schema as the tokenizer's).
void decode_row(const DataTokenizer& d, std::span<const int> ids, Table& out);

enum class TokenKind { special, leaf, cat, bin, quant };

// Contiguous token-id range [lo, hi).
struct TokenRange {
    int lo = 0;
    int hi = 0;
    int size() const { return hi - lo; }
    bool contains(int id) const { return id >= lo && id < hi; }
};

// The token-id address space and per-position grammar of row sequences:
// [BOS, T leaf tokens, m_d + 2*m_c value tokens, EOS].
struct VocabLayout {
    int n_trees = 0;
    std::vector<int> leaf_counts;  // l_k per tree
    int n_l = 0, n_c = 0, n_b = 0, n_q = 0;

    struct ValueSlot {
        int column = 0;  // feature index in schema order
        TokenKind kind = TokenKind::cat;
        int size = 0;  // c_i, b_i or q_i of that column
    };
    std::vector<ValueSlot> value_slots;

    int bos_id = 0, eos_id = 1, mask_id = 2;
    int leaf_offset = 0, cat_offset = 0, bin_offset = 0, quant_offset = 0;
    int vocab_size = 0;  // V = n_l + n_c + n_b + n_q + 3
    int seq_len = 0;     // L = 2 + T + m_d + 2*m_c

    static VocabLayout make(const DataTokenizer& d, const std::vector<int>& leaf_counts);

    // Position is 1-based in [1, seq_len].
    TokenRange valid_vocab_at(int position) const;
    TokenKind kind_at(int position) const;
    bool is_tree_position(int position) const { return position >= 2 && position <= 1 + n_trees; }
    bool is_value_position(int position) const {
        return position >= n_trees + 2 && position <= seq_len - 1;
    }
    const ValueSlot& slot_at(int position) const {
        return value_slots[static_cast<size_t>(position - n_trees - 2)];
    }

    int leaf_token(int tree, int leaf_id) const;        // leaf_id 1-based within tree
    int value_token(int slot_index, int value_id) const;  // value_id 1-based
};

// [BOS, leaf tokens, value tokens, EOS]; ids are validated against the layout.
std::vector<int> build_sequence(const VocabLayout& layout, std::span<const int> leaf_row,
                                std::span<const int> value_ids);

// Recovers the per-column 1-based value ids from a full sequence.
std::vector<int> value_ids_from_sequence(const VocabLayout& layout, std::span<const int> seq);

}  // namespace ttf
