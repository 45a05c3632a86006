#include <boost/algorithm/string/trim.hpp>
#include <boost/date_time/gregorian/gregorian.hpp>
#include <boost/date_time/posix_time/posix_time.hpp>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>

#include "stlab/data.hpp"
#include "stlab/error.hpp"

namespace stlab::data {

namespace {

namespace pt = boost::posix_time;

const pt::ptime kEpoch(boost::gregorian::date(1970, 1, 1));

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(boost::algorithm::trim_copy(cell));
      cell.clear();
    } else {
      cell += c;
    }
  }
  out.push_back(boost::algorithm::trim_copy(cell));
  return out;
}

std::vector<std::vector<std::string>> read_rows(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    first = false;
    if (boost::algorithm::trim_copy(line).empty()) continue;
    rows.push_back(split_row(line));
  }
  return rows;
}

std::optional<double> parse_number(const std::string& cell) {
  if (cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan" || cell == "null") {
    return std::nullopt;
  }
  double v = 0;
  const char* end = cell.data() + cell.size();
  const char* begin = cell.data() + (cell.front() == '+' ? 1 : 0);
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end) throw InputError("cannot parse number '" + cell + "'");
  if (!std::isfinite(v)) return std::nullopt;
  return v;
}

double parse_coordinate(const std::string& cell, const std::string& name) {
  auto v = parse_number(cell);
  if (!v) throw InputError("location " + name + " has a missing or non-finite coordinate");
  return *v;
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::int64_t parse_timestamp(const std::string& text) {
  std::string s = boost::algorithm::trim_copy(text);
  if (!s.empty() && (s.back() == 'Z' || s.back() == 'z')) s.pop_back();
  if (s.size() > 10 && (s[10] == 'T' || s[10] == 't')) s[10] = ' ';
  try {
    pt::ptime t;
    if (s.size() == 10) {
      t = pt::ptime(boost::gregorian::from_simple_string(s));
    } else {
      if (s.size() == 16) s += ":00";
      t = pt::time_from_string(s);
    }
    if (t.is_special()) throw std::out_of_range("special");
    return (t - kEpoch).total_seconds();
  } catch (const std::exception&) {
    throw InputError("cannot parse timestamp '" + text + "'");
  }
}

std::string format_timestamp(std::int64_t seconds) {
  auto t = kEpoch + pt::seconds(static_cast<long>(seconds));
  auto s = pt::to_iso_extended_string(t);
  return s;
}

StSeries load_csv(const std::filesystem::path& values_path,
                  const std::filesystem::path& coords_path, LoadReport* report) {
  auto rows = read_rows(values_path);
  if (rows.size() < 2) throw InputError(values_path.string() + " has no data rows");
  const auto& header = rows.front();
  if (header.size() < 2) throw InputError(values_path.string() + " has no location columns");
  std::size_t S = header.size() - 1;
  std::size_t N = rows.size() - 1;

  auto coord_rows = read_rows(coords_path);
  if (coord_rows.empty()) throw InputError(coords_path.string() + " is empty");
  std::map<std::string, Coord> coord_of;
  for (std::size_t r = 1; r < coord_rows.size(); ++r) {
    const auto& row = coord_rows[r];
    if (row.size() < 3) {
      throw InputError(coords_path.string() + " row " + std::to_string(r + 1) +
                       " needs name,x,y");
    }
    Coord c{parse_coordinate(row[1], row[0]), parse_coordinate(row[2], row[0])};
    if (!coord_of.emplace(row[0], c).second) {
      throw InputError("location " + row[0] + " appears twice in " + coords_path.string());
    }
  }

  StSeries out;
  out.values.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(S));
  std::map<std::string, int> seen;
  for (std::size_t s = 0; s < S; ++s) {
    const auto& name = header[s + 1];
    if (name.empty()) throw InputError("empty location name in column " + std::to_string(s + 2));
    if (seen[name]++) throw InputError("location " + name + " appears twice in the header");
    auto it = coord_of.find(name);
    if (it == coord_of.end()) {
      throw InputError("unknown location " + name + ": no coordinates in " + coords_path.string());
    }
    out.names.push_back(name);
    out.coords.push_back(it->second);
  }

  std::vector<std::vector<bool>> missing(S, std::vector<bool>(N, false));
  for (std::size_t t = 0; t < N; ++t) {
    const auto& row = rows[t + 1];
    if (row.size() != S + 1) {
      throw InputError(values_path.string() + " row " + std::to_string(t + 2) + " has " +
                       std::to_string(row.size()) + " cells, expected " + std::to_string(S + 1));
    }
    out.timestamps.push_back(parse_timestamp(row[0]));
    if (t > 0 && out.timestamps[t] <= out.timestamps[t - 1]) {
      throw InputError("timestamps are not strictly increasing at row " + std::to_string(t + 2));
    }
    for (std::size_t s = 0; s < S; ++s) {
      auto v = parse_number(row[s + 1]);
      missing[s][t] = !v;
      out.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s)) = v.value_or(0.0);
    }
  }
  out.timestep = N > 1 ? out.timestamps[1] - out.timestamps[0] : 0;

  std::size_t filled = 0;
  for (std::size_t s = 0; s < S; ++s) {
    auto col = out.values.col(static_cast<Eigen::Index>(s));
    std::size_t count = 0;
    for (bool m : missing[s]) count += m;
    if (count * 5 > N) {
      throw InputError("location " + out.names[s] + " has " + std::to_string(count) + " of " +
                       std::to_string(N) + " cells missing (limit 20%)");
    }
    filled += count;
    std::optional<double> last;
    for (std::size_t t = 0; t < N; ++t) {
      if (!missing[s][t]) {
        last = col(static_cast<Eigen::Index>(t));
      } else if (last) {
        col(static_cast<Eigen::Index>(t)) = *last;
        missing[s][t] = false;
      }
    }
    last.reset();
    for (std::size_t t = N; t-- > 0;) {
      if (!missing[s][t]) {
        last = col(static_cast<Eigen::Index>(t));
      } else if (last) {
        col(static_cast<Eigen::Index>(t)) = *last;
      }
    }
  }
  if (report) report->missing_filled = filled;
  out.validate();
  return out;
}

void write_csv(const StSeries& series, const std::filesystem::path& values_path,
               const std::filesystem::path& coords_path) {
  std::ofstream out(values_path);
  if (!out) throw IoError("cannot write " + values_path.string());
  out << "timestamp";
  for (const auto& n : series.names) out << ',' << quote(n);
  out << '\n';
  for (std::size_t t = 0; t < series.steps(); ++t) {
    out << format_timestamp(series.timestamps[t]);
    for (std::size_t s = 0; s < series.locations(); ++s) {
      out << ','
          << format_number(series.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s)));
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + values_path.string());

  std::ofstream c(coords_path);
  if (!c) throw IoError("cannot write " + coords_path.string());
  c << "name,x,y\n";
  for (std::size_t s = 0; s < series.locations(); ++s) {
    c << quote(series.names[s]) << ',' << format_number(series.coords[s].x) << ','
      << format_number(series.coords[s].y) << '\n';
  }
  if (!c) throw IoError("failed writing " + coords_path.string());
}

}  // namespace stlab::data
