#pragma once

#include <istream>
#include <string>
#include <vector>

namespace cxr {

/// Splits one CSV line; handles double-quoted fields with embedded commas and
/// doubled quotes. No multi-line fields (the formats here never need them).
inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else if (c != '\r') {
            field.push_back(c);
        }
    }
    out.push_back(std::move(field));
    return out;
}

inline bool read_csv_line(std::istream& in, std::vector<std::string>& fields) {
    std::string line;
    if (!std::getline(in, line)) return false;
    fields = split_csv_line(line);
    return true;
}

} // namespace cxr
