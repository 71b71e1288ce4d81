#include "flowcast/csv.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "flowcast/errors.hpp"

namespace flowcast {

int CsvTable::find(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
    return -1;
}

int CsvTable::require(const std::string& name) const {
    int idx = find(name);
    if (idx < 0) throw MissingColumn("missing column '" + name + "'");
    return idx;
}

namespace {

// One record, honoring quotes; returns false at end of stream.
bool read_record(std::istream& in, std::vector<std::string>& fields) {
    fields.clear();
    std::string field;
    bool quoted = false;
    bool any = false;
    int c;
    while ((c = in.get()) != EOF) {
        any = true;
        if (quoted) {
            if (c == '"') {
                if (in.peek() == '"') {
                    field.push_back('"');
                    in.get();
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(static_cast<char>(c));
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else if (c == '\n') {
            fields.push_back(std::move(field));
            return true;
        } else if (c == '\r') {
            if (in.peek() == '\n') in.get();
            fields.push_back(std::move(field));
            return true;
        } else {
            field.push_back(static_cast<char>(c));
        }
    }
    if (!any) return false;
    fields.push_back(std::move(field));
    return true;
}

} // namespace

CsvTable read_csv(std::istream& in) {
    CsvTable t;
    if (!read_record(in, t.header)) return t;
    std::vector<std::string> row;
    while (read_record(in, row)) {
        if (row.size() == 1 && row[0].empty()) continue; // blank line
        t.rows.push_back(row);
    }
    return t;
}

CsvTable read_csv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    return read_csv(in);
}

std::string csv_escape(const std::string& field) {
    bool needs = field.find_first_of(",\"\n\r") != std::string::npos;
    if (!needs) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

void write_csv(std::ostream& out, const CsvTable& table) {
    auto write_row = [&out](const std::vector<std::string>& row) {
        for (size_t i = 0; i < row.size(); ++i) {
            if (i) out << ',';
            out << csv_escape(row[i]);
        }
        out << '\n';
    };
    write_row(table.header);
    for (const auto& row : table.rows) write_row(row);
}

void write_csv_file(const std::string& path, const CsvTable& table) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    write_csv(out, table);
}

double parse_double(const std::string& s, const std::string& context) {
    if (s.empty()) throw InvalidCount(context + ": empty numeric field");
    errno = 0;
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (errno == ERANGE || end != s.c_str() + s.size())
        throw InvalidCount(context + ": not a number: '" + s + "'");
    return v;
}

long long parse_count(const std::string& s, const std::string& context) {
    if (s.empty()) throw InvalidCount(context + ": empty count field");
    errno = 0;
    char* end = nullptr;
    long long v = std::strtoll(s.c_str(), &end, 10);
    if (errno == ERANGE || end != s.c_str() + s.size())
        throw InvalidCount(context + ": not an integer count: '" + s + "'");
    if (v < 0) throw NegativeCount(context + ": negative count " + s);
    return v;
}

std::string format_double(double value, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, value);
    return buf;
}

} // namespace flowcast
