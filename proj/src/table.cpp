#include "ttf/table.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "ttf/rng.hpp"

namespace ttf {

Table::Table(Schema schema) : schema_(std::move(schema)), pools_(schema_.size()) {
    for (size_t c = 0; c < schema_.size(); ++c) {
        if (schema_[c].name.empty()) throw DataError("column " + std::to_string(c) + " has an empty name");
        for (size_t d = 0; d < c; ++d) {
            if (schema_[d].name == schema_[c].name)
                throw DataError("duplicate column name '" + schema_[c].name + "'");
        }
    }
}

int Table::col_index(const std::string& name) const {
    for (size_t c = 0; c < schema_.size(); ++c) {
        if (schema_[c].name == name) return static_cast<int>(c);
    }
    return -1;
}

const std::string& Table::cat_value(size_t r, size_t c) const {
    const Cell& cell = rows_[r][c];
    TTF_CHECK(!cell.missing && cell.cat >= 0, "cat_value on missing or numeric cell");
    return pools_[c][static_cast<size_t>(cell.cat)];
}

int32_t Table::intern(size_t c, const std::string& value) {
    auto& pool = pools_[c];
    for (size_t i = 0; i < pool.size(); ++i) {
        if (pool[i] == value) return static_cast<int32_t>(i);
    }
    pool.push_back(value);
    return static_cast<int32_t>(pool.size() - 1);
}

void Table::push_row(std::vector<Cell> cells) {
    TTF_CHECK(cells.size() == schema_.size(), "row width does not match schema");
    rows_.push_back(std::move(cells));
}

bool Table::row_has_missing(size_t r) const {
    const auto& row = rows_[r];
    return std::any_of(row.begin(), row.end(), [](const Cell& c) { return c.missing; });
}

Table Table::select_rows(const std::vector<size_t>& indices) const {
    Table out(schema_);
    out.pools_ = pools_;
    out.rows_.reserve(indices.size());
    for (size_t i : indices) out.rows_.push_back(rows_[i]);
    return out;
}

bool is_missing_text(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    if (b == e) return true;
    if (e - b != 3) return false;
    auto lower = [](char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); };
    return lower(s[b]) == 'n' && lower(s[b + 1]) == 'a' && lower(s[b + 2]) == 'n';
}

namespace {

bool parse_finite_real(const std::string& s, double& out) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    if (b == e) return false;
    const char* first = s.data() + b;
    const char* last = s.data() + e;
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last) return false;
    if (!std::isfinite(value)) return false;
    out = value;
    return true;
}

}  // namespace

RawGrid parse_csv(const std::string& text) {
    RawGrid grid;
    std::vector<std::string> record;
    std::string field;
    bool in_quotes = false;
    bool field_was_quoted = false;
    bool any_char = false;

    auto end_field = [&] {
        record.push_back(field);
        field.clear();
        field_was_quoted = false;
    };
    auto end_record = [&] {
        end_field();
        if (grid.header.empty() && grid.cells.empty()) {
            grid.header = record;
        } else {
            if (record.size() != grid.header.size())
                throw DataError("CSV row " + std::to_string(grid.cells.size() + 1) + " has " +
                                std::to_string(record.size()) + " fields, expected " +
                                std::to_string(grid.header.size()));
            grid.cells.push_back(record);
        }
        record.clear();
    };

    for (size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        any_char = true;
        if (in_quotes) {
            if (ch == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(ch);
            }
            continue;
        }
        switch (ch) {
            case '"':
                if (!field.empty() || field_was_quoted)
                    throw DataError("stray quote inside unquoted CSV field");
                in_quotes = true;
                field_was_quoted = true;
                break;
            case ',':
                end_field();
                break;
            case '\r':
                if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
                end_record();
                break;
            case '\n':
                end_record();
                break;
            default:
                field.push_back(ch);
        }
    }
    if (in_quotes) throw DataError("unterminated quoted CSV field");
    if (!field.empty() || field_was_quoted || !record.empty()) end_record();
    if (!any_char || grid.header.empty()) throw DataError("CSV is empty (header row required)");
    return grid;
}

RawGrid read_csv_grid(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_csv(buf.str());
}

Schema infer_schema(const RawGrid& grid) {
    if (grid.header.empty()) throw DataError("empty grid");
    Schema schema(grid.header.size());
    for (size_t c = 0; c < grid.header.size(); ++c) {
        schema[c].name = grid.header[c];
        bool numeric = true;
        bool any_value = false;
        for (const auto& row : grid.cells) {
            const std::string& s = row[c];
            if (is_missing_text(s)) continue;
            any_value = true;
            double v;
            if (!parse_finite_real(s, v)) {
                numeric = false;
                break;
            }
        }
        schema[c].kind = (numeric && any_value) ? ColumnKind::numeric : ColumnKind::categorical;
    }
    return schema;
}

Table table_from_grid(const RawGrid& grid, const Schema& schema) {
    // Map schema order onto header order; names must match as a set.
    std::vector<size_t> source(schema.size());
    for (size_t c = 0; c < schema.size(); ++c) {
        auto it = std::find(grid.header.begin(), grid.header.end(), schema[c].name);
        if (it == grid.header.end())
            throw DataError("schema column '" + schema[c].name + "' not found in CSV header");
        source[c] = static_cast<size_t>(it - grid.header.begin());
    }
    if (grid.header.size() != schema.size())
        throw DataError("CSV has " + std::to_string(grid.header.size()) + " columns, schema has " +
                        std::to_string(schema.size()));

    Table t(schema);
    for (size_t c = 0; c < schema.size(); ++c) {
        for (const auto& cat : schema[c].declared_categories) t.intern(c, cat);
    }
    for (size_t r = 0; r < grid.cells.size(); ++r) {
        std::vector<Cell> row(schema.size());
        for (size_t c = 0; c < schema.size(); ++c) {
            const std::string& s = grid.cells[r][source[c]];
            Cell& cell = row[c];
            if (is_missing_text(s)) continue;
            if (schema[c].kind == ColumnKind::numeric) {
                double v;
                if (!parse_finite_real(s, v))
                    throw DataError("row " + std::to_string(r + 1) + ", column '" + schema[c].name +
                                    "': cannot parse '" + s + "' as a finite number");
                cell.num = v;
                cell.missing = false;
            } else {
                cell.cat = t.intern(c, s);
                cell.missing = false;
            }
        }
        t.push_row(std::move(row));
    }
    return t;
}

Table load_csv(const std::string& path, const std::optional<Schema>& schema) {
    const RawGrid grid = read_csv_grid(path);
    return table_from_grid(grid, schema ? *schema : infer_schema(grid));
}

namespace {

std::string csv_escape(const std::string& s) {
    const bool needs_quotes = s.find_first_of(",\"\r\n") != std::string::npos;
    if (!needs_quotes) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out.push_back('"');
    return out;
}

std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    TTF_CHECK(ec == std::errc(), "to_chars failed");
    return std::string(buf, ptr);
}

}  // namespace

std::string to_csv(const Table& t) {
    std::string out;
    for (size_t c = 0; c < t.n_cols(); ++c) {
        if (c) out.push_back(',');
        out += csv_escape(t.schema()[c].name);
    }
    out.push_back('\n');
    for (size_t r = 0; r < t.n_rows(); ++r) {
        for (size_t c = 0; c < t.n_cols(); ++c) {
            if (c) out.push_back(',');
            const Cell& cell = t.cell(r, c);
            if (cell.missing) continue;
            if (t.schema()[c].kind == ColumnKind::numeric) out += format_double(cell.num);
            else out += csv_escape(t.cat_value(r, c));
        }
        out.push_back('\n');
    }
    return out;
}

void write_csv(const Table& t, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << to_csv(t);
    if (!out) throw DataError("write failed for '" + path + "'");
}

Schema schema_from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("schema JSON parse error: ") + e.what());
    }
    if (!j.contains("columns") || !j["columns"].is_array())
        throw DataError("schema JSON must contain a 'columns' array");
    Schema schema;
    for (const auto& col : j["columns"]) {
        ColumnSpec spec;
        spec.name = col.at("name").get<std::string>();
        const std::string kind = col.at("kind").get<std::string>();
        if (kind == "numeric") spec.kind = ColumnKind::numeric;
        else if (kind == "categorical") spec.kind = ColumnKind::categorical;
        else throw DataError("unknown column kind '" + kind + "'");
        if (col.contains("categories")) {
            spec.declared_categories = col["categories"].get<std::vector<std::string>>();
            if (spec.declared_categories.empty())
                throw DataError("declared categories for '" + spec.name + "' must be nonempty");
            for (size_t i = 0; i < spec.declared_categories.size(); ++i)
                for (size_t k = 0; k < i; ++k)
                    if (spec.declared_categories[i] == spec.declared_categories[k])
                        throw DataError("duplicate declared category for '" + spec.name + "'");
        }
        schema.push_back(std::move(spec));
    }
    return schema;
}

std::string schema_to_json_text(const Schema& schema) {
    nlohmann::json cols = nlohmann::json::array();
    for (const auto& spec : schema) {
        nlohmann::json col;
        col["name"] = spec.name;
        col["kind"] = spec.kind == ColumnKind::numeric ? "numeric" : "categorical";
        if (!spec.declared_categories.empty()) col["categories"] = spec.declared_categories;
        cols.push_back(col);
    }
    return nlohmann::json{{"columns", cols}}.dump();
}

Table drop_missing(const Table& t) {
    std::vector<size_t> keep;
    for (size_t r = 0; r < t.n_rows(); ++r) {
        if (!t.row_has_missing(r)) keep.push_back(r);
    }
    return t.select_rows(keep);
}

std::pair<Table, Table> split(const Table& t, double fraction, uint64_t seed) {
    if (t.n_rows() < 2) throw DataError("split needs at least 2 rows");
    TTF_CHECK(fraction > 0.0 && fraction < 1.0, "split fraction must be in (0,1)");
    std::vector<size_t> order(t.n_rows());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    const size_t first = static_cast<size_t>(std::llround(fraction * static_cast<double>(t.n_rows())));
    const std::vector<size_t> a(order.begin(), order.begin() + static_cast<long>(first));
    const std::vector<size_t> b(order.begin() + static_cast<long>(first), order.end());
    return {t.select_rows(a), t.select_rows(b)};
}

}  // namespace ttf
