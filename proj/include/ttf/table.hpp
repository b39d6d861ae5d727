#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ttf/common.hpp"

namespace ttf {

enum class ColumnKind { categorical, numeric };

struct ColumnSpec {
    std::string name;
    ColumnKind kind = ColumnKind::categorical;
    // Categorical only. Categories known ahead of the data; may be empty.
    std::vector<std::string> declared_categories;
};

using Schema = std::vector<ColumnSpec>;

// One value. Categorical cells index into the owning table's per-column pool.
struct Cell {
    double num = 0.0;
    int32_t cat = -1;
    bool missing = true;
};

// Immutable-after-construction tabular dataset. Numeric cells are finite
// doubles, categoricals are pool-interned strings.
class Table {
public:
    Table() = default;
    explicit Table(Schema schema);

    const Schema& schema() const { return schema_; }
    size_t n_rows() const { return rows_.size(); }
    size_t n_cols() const { return schema_.size(); }

    int col_index(const std::string& name) const;  // -1 when absent

    const std::vector<Cell>& row(size_t r) const { return rows_[r]; }
    const Cell& cell(size_t r, size_t c) const { return rows_[r][c]; }
    const std::string& cat_value(size_t r, size_t c) const;
    const std::vector<std::string>& pool(size_t c) const { return pools_[c]; }

    // Appends a string to column c's pool if new; returns its pool index.
    int32_t intern(size_t c, const std::string& value);
    void push_row(std::vector<Cell> cells);

    bool row_has_missing(size_t r) const;

    // Copies selected rows; pools and schema are shared values.
    Table select_rows(const std::vector<size_t>& indices) const;

private:
    Schema schema_;
    std::vector<std::vector<std::string>> pools_;
    std::vector<std::vector<Cell>> rows_;
};

// Untyped CSV contents: a header plus string cells.
struct RawGrid {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> cells;
};

// Missing-value sentinel: empty text or "nan" in any letter case.
bool is_missing_text(const std::string& s);

// RFC-4180 reader: quoted fields, embedded separators/newlines, "" escapes.
RawGrid read_csv_grid(const std::string& path);
RawGrid parse_csv(const std::string& text);

// A column is numeric iff every non-missing cell parses as a finite real.
// All-missing columns infer as categorical.
Schema infer_schema(const RawGrid& grid);

Table table_from_grid(const RawGrid& grid, const Schema& schema);
Table load_csv(const std::string& path, const std::optional<Schema>& schema = std::nullopt);
void write_csv(const Table& t, const std::string& path);
std::string to_csv(const Table& t);

Schema schema_from_json_text(const std::string& text);
std::string schema_to_json_text(const Schema& schema);

Table drop_missing(const Table& t);

// Seeded shuffle, then split; first part gets round(fraction * n) rows.
std::pair<Table, Table> split(const Table& t, double fraction, uint64_t seed);

}  // namespace ttf
