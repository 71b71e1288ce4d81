#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace flowcast {

// Minimal RFC-4180-ish CSV table.  Quoted fields with embedded commas,
// quotes and newlines are handled; every other corner stays simple.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    // Index of a header column, -1 when absent.
    int find(const std::string& name) const;
    // Same but throws MissingColumn.
    int require(const std::string& name) const;
};

CsvTable read_csv(std::istream& in);
CsvTable read_csv_file(const std::string& path);

std::string csv_escape(const std::string& field);
void write_csv(std::ostream& out, const CsvTable& table);
void write_csv_file(const std::string& path, const CsvTable& table);

// Strict numeric parsers: whole-field matches only.
double parse_double(const std::string& s, const std::string& context);
long long parse_count(const std::string& s, const std::string& context);

// printf-style helpers (no std::format on this toolchain).
std::string format_double(double value, int digits);

} // namespace flowcast
