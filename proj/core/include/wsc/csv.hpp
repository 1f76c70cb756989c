// Minimal CSV reading and writing. All numeric output goes through
// format_double, which prints 17 significant digits so that a write/read
// round trip reproduces every double bit for bit.
#pragma once

#include <optional>
#include <string>
#include <vector>

namespace wsc::csv {

std::string format_double(double value);
std::string format_int(long long value);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Index of a header column; throws IoError when absent.
  std::size_t column(const std::string& name) const;
};

// Fields containing commas, quotes or newlines are quoted on write.
void write_file(const std::string& path, const Table& table);
Table read_file(const std::string& path);

double parse_double(const std::string& field);
long long parse_int(const std::string& field);

// Empty fields represent missing values and parse to NaN.
double parse_double_or_nan(const std::string& field);

}  // namespace wsc::csv
