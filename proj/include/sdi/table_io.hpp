#pragma once

#include "sdi/field.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace sdi {

/// Fixed-format decimal for CSV output ('.' separator, locale independent).
std::string format_number(double v, int digits = 6);

/// "frame,y_px,x_px" rows.
void write_shift_csv(const std::filesystem::path& path, const std::vector<Shift>& shifts);
std::vector<Shift> read_shift_csv(const std::filesystem::path& path);

/// Minimal CSV reader: header row plus numeric rows.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
  int column(const std::string& name) const;
};
CsvTable read_csv(const std::filesystem::path& path);

/// Write text atomically enough for our purposes; always '\n' line endings.
void write_text(const std::filesystem::path& path, const std::string& text);

} // namespace sdi
