#pragma once

// Reading covariate/response tables and exporting datasets as CSV.

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "csl/dataset.hpp"
#include "csl/error.hpp"

namespace csl {

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  cells.push_back(std::move(cur));
  for (auto& s : cells) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }
  return cells;
}

inline std::optional<double> parse_double(const std::string& s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

// Response plus covariates read from a table; categorical columns are
// expanded into indicator columns, dropping the first (sorted) level.
struct LoadedTable {
  Dataset data;
  std::vector<std::string> covariates;
};

inline LoadedTable read_table(std::istream& in, const std::string& response, const std::string& origin = "<stream>") {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), Errc::schema, origin + ": empty file, expected a header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = detail::split_csv_line(line);
  const auto resp_it = std::find(header.begin(), header.end(), response);
  require(resp_it != header.end(), Errc::schema, origin + ": response column '" + response + "' not found");
  const auto resp_col = static_cast<std::size_t>(resp_it - header.begin());

  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = detail::split_csv_line(line);
    require(cells.size() == header.size(), Errc::schema,
            origin + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) + " cells, found " +
                std::to_string(cells.size()));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      require(!cells[c].empty(), Errc::schema,
              origin + ":" + std::to_string(line_no) + ": missing value in column '" + header[c] + "'");
    }
    rows.push_back(std::move(cells));
  }
  require(!rows.empty(), Errc::schema, origin + ": no data rows");
  const auto n = static_cast<Index>(rows.size());

  LoadedTable out;
  out.data.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    const auto v = detail::parse_double(rows[static_cast<std::size_t>(i)][resp_col]);
    require(v.has_value(), Errc::schema,
            origin + ":" + std::to_string(i + 2) + ": non-numeric response '" + rows[static_cast<std::size_t>(i)][resp_col] + "'");
    out.data.y(i) = *v;
  }

  std::vector<std::vector<double>> cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == resp_col) continue;
    std::vector<double> numeric(rows.size());
    bool is_numeric = true;
    for (std::size_t i = 0; i < rows.size() && is_numeric; ++i) {
      const auto v = detail::parse_double(rows[i][c]);
      is_numeric = v.has_value();
      if (is_numeric) numeric[i] = *v;
    }
    if (is_numeric) {
      cols.push_back(std::move(numeric));
      out.covariates.push_back(header[c]);
      continue;
    }
    std::map<std::string, int> levels;
    for (const auto& r : rows) levels.emplace(r[c], 0);
    int next = 0;
    for (auto& [name, id] : levels) id = next++;
    for (auto it = std::next(levels.begin()); it != levels.end(); ++it) {
      std::vector<double> ind(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) ind[i] = rows[i][c] == it->first ? 1.0 : 0.0;
      cols.push_back(std::move(ind));
      out.covariates.push_back(header[c] + "=" + it->first);
    }
  }
  require(!cols.empty(), Errc::schema, origin + ": no usable covariate columns");
  out.data.x.resize(n, static_cast<Index>(cols.size()));
  for (std::size_t c = 0; c < cols.size(); ++c) {
    for (Index i = 0; i < n; ++i) out.data.x(i, static_cast<Index>(c)) = cols[c][static_cast<std::size_t>(i)];
  }
  return out;
}

inline LoadedTable read_table(const std::string& path, const std::string& response) {
  std::ifstream f(path);
  require(static_cast<bool>(f), Errc::io, "cannot open CSV file '" + path + "'");
  return read_table(f, response, path);
}

// Writes columns x1..xp followed by `response`, at full precision.
inline void write_dataset_csv(const Dataset& data, std::ostream& os, const std::string& response = "response") {
  for (Index j = 0; j < data.cols(); ++j) os << 'x' << (j + 1) << ',';
  os << response << '\n';
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (Index i = 0; i < data.rows(); ++i) {
    for (Index j = 0; j < data.cols(); ++j) os << data.x(i, j) << ',';
    os << data.y(i) << '\n';
  }
}

inline void write_dataset_csv(const Dataset& data, const std::string& path, const std::string& response = "response") {
  std::ofstream f(path);
  require(static_cast<bool>(f), Errc::io, "cannot open '" + path + "' for writing");
  write_dataset_csv(data, f, response);
  f.flush();
  require(static_cast<bool>(f), Errc::io, "failed writing '" + path + "'");
}

}  // namespace csl
