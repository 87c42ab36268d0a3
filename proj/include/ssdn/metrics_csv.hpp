#pragma once

#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "ssdn/error.hpp"

namespace ssdn {

struct MetricsRow {
  std::string regime;
  std::string shift;
  int severity = 0;
  uint64_t seed = 0;
  double main_error_pct = 0.0;
  double ss_error_pct = 0.0;
  int64_t wall_ms = 0;
};

inline constexpr const char* kMetricsHeader =
    "regime,shift,severity,seed,main_error_pct,ss_error_pct,wall_ms";

inline std::string metrics_csv_line(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%s,%d,%llu,%.4f,%.4f,%lld", r.regime.c_str(),
                r.shift.c_str(), r.severity, static_cast<unsigned long long>(r.seed),
                r.main_error_pct, r.ss_error_pct, static_cast<long long>(r.wall_ms));
  return buf;
}

inline std::string metrics_to_csv(const std::vector<MetricsRow>& rows) {
  std::string out = kMetricsHeader;
  out += '\n';
  for (const auto& r : rows) {
    out += metrics_csv_line(r);
    out += '\n';
  }
  return out;
}

inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw FormatError("metrics csv: bad header");
  }
  std::vector<MetricsRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) {
      throw FormatError("metrics csv: line " + std::to_string(lineno) + " has " +
                        std::to_string(cells.size()) + " cells");
    }
    try {
      MetricsRow r;
      r.regime = cells[0];
      r.shift = cells[1];
      r.severity = std::stoi(cells[2]);
      r.seed = std::stoull(cells[3]);
      r.main_error_pct = std::stod(cells[4]);
      r.ss_error_pct = std::stod(cells[5]);
      r.wall_ms = std::stoll(cells[6]);
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw FormatError("metrics csv: unparsable line " + std::to_string(lineno));
    }
  }
  return rows;
}

}  // namespace ssdn
