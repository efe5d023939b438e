#include "sdi/table_io.hpp"

#include "sdi/errors.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace sdi {

std::string format_number(double v, int digits) {
  if (!std::isfinite(v))
    return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s(buf);
  if (s == "-0." + std::string(digits, '0'))
    s.erase(0, 1);
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw Error("cannot open " + path.string() + " for writing");
  out << text;
}

void write_shift_csv(const std::filesystem::path& path, const std::vector<Shift>& shifts) {
  std::string text = "frame,y_px,x_px\n";
  for (std::size_t n = 0; n < shifts.size(); ++n)
    text += std::to_string(n) + "," + format_number(shifts[n].dy) + "," + format_number(shifts[n].dx) + "\n";
  write_text(path, text);
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name)
      return static_cast<int>(i);
  throw ConfigError("CSV column '" + name + "' not found");
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open " + path.string());
  CsvTable table;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ','))
      cells.push_back(cell);
    return cells;
  };
  if (!std::getline(in, line))
    throw ConfigError(path.string() + ": empty CSV");
  table.header = split(line);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty())
      continue;
    std::vector<double> row;
    for (const auto& cell : split(line)) {
      std::istringstream cs(cell);
      cs.imbue(std::locale::classic());
      double v;
      if (!(cs >> v))
        throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": non-numeric cell '" + cell + "'");
      row.push_back(v);
    }
    if (row.size() != table.header.size())
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": wrong column count");
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::vector<Shift> read_shift_csv(const std::filesystem::path& path) {
  const CsvTable t = read_csv(path);
  const int cf = t.column("frame"), cy = t.column("y_px"), cx = t.column("x_px");
  std::vector<Shift> out(t.rows.size());
  for (const auto& row : t.rows) {
    const auto n = static_cast<std::size_t>(row[cf]);
    if (n >= out.size())
      throw ConfigError(path.string() + ": frame index out of range");
    out[n] = {row[cy], row[cx]};
  }
  return out;
}

} // namespace sdi
