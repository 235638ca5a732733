#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

// Minimal RFC-4180-style CSV used by every exported table.
namespace mexp::csv {

void write_row(std::ostream& out, const std::vector<std::string>& cells);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of a header column; throws DataError when missing.
  std::size_t column(const std::string& name) const;
};

/// Reads a whole file with a header row. Throws DataError on I/O failure or
/// ragged rows.
Table read(const std::filesystem::path& path);

}  // namespace mexp::csv
