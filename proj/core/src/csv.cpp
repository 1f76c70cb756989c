#include "wsc/csv.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "wsc/errors.hpp"

namespace wsc::csv {

namespace {

bool needs_quoting(const std::string& field) {
  return field.find_first_of(",\"\n") != std::string::npos;
}

std::string quote(const std::string& field) {
  std::string out = "\"";
  for (const char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

void write_row(std::ostream& os, const std::vector<std::string>& row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i > 0) os << ',';
    os << (needs_quoting(row[i]) ? quote(row[i]) : row[i]);
  }
  os << '\n';
}

// Char-level parse of the whole document so quoted fields may contain
// commas, doubled quotes, and newlines.
std::vector<std::vector<std::string>> parse_document(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool row_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    switch (c) {
      case '"':
        in_quotes = true;
        row_started = true;
        break;
      case ',':
        row.push_back(std::move(field));
        field.clear();
        row_started = true;
        break;
      case '\n':
        if (row_started || !field.empty()) {
          row.push_back(std::move(field));
          field.clear();
          rows.push_back(std::move(row));
          row.clear();
          row_started = false;
        }
        break;
      case '\r':
        break;
      default:
        field += c;
        row_started = true;
        break;
    }
  }
  if (row_started || !field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

std::string format_double(double value) {
  if (std::isnan(value)) return "";
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.17g", value);
  return buffer;
}

std::string format_int(long long value) {
  return std::to_string(value);
}

std::size_t Table::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw wsc::IoError("missing CSV column: " + name);
}

void write_file(const std::string& path, const Table& table) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw wsc::IoError("cannot open for writing: " + path);
  write_row(os, table.header);
  for (const auto& row : table.rows) write_row(os, row);
  os.flush();
  if (!os) throw wsc::IoError("write failed: " + path);
}

Table read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw wsc::IoError("cannot open for reading: " + path);
  std::ostringstream buffer;
  buffer << is.rdbuf();
  auto rows = parse_document(buffer.str());
  if (rows.empty()) throw wsc::IoError("empty CSV file: " + path);
  Table table;
  table.header = std::move(rows.front());
  table.rows.assign(std::make_move_iterator(rows.begin() + 1),
                    std::make_move_iterator(rows.end()));
  return table;
}

double parse_double(const std::string& field) {
  try {
    std::size_t consumed = 0;
    const double value = std::stod(field, &consumed);
    if (consumed != field.size()) throw wsc::IoError("trailing characters in number: " + field);
    return value;
  } catch (const std::invalid_argument&) {
    throw wsc::IoError("not a number: '" + field + "'");
  } catch (const std::out_of_range&) {
    throw wsc::IoError("number out of range: '" + field + "'");
  }
}

long long parse_int(const std::string& field) {
  try {
    std::size_t consumed = 0;
    const long long value = std::stoll(field, &consumed);
    if (consumed != field.size()) throw wsc::IoError("trailing characters in integer: " + field);
    return value;
  } catch (const std::invalid_argument&) {
    throw wsc::IoError("not an integer: '" + field + "'");
  } catch (const std::out_of_range&) {
    throw wsc::IoError("integer out of range: '" + field + "'");
  }
}

double parse_double_or_nan(const std::string& field) {
  if (field.empty()) return std::numeric_limits<double>::quiet_NaN();
  return parse_double(field);
}

}  // namespace wsc::csv
