#pragma once
//
// Minimal RFC-4180 CSV reading/writing plus deterministic number formatting.
//

#include "emospace/core.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace emospace::csv {

/// Shortest-roundtrip-ish fixed format: 10 significant digits is enough for
/// every reported statistic and keeps reruns byte-identical.
inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (v == 0.0) return "0";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string num(long long v) { return std::to_string(v); }
inline std::string num(int v) { return std::to_string(v); }
inline std::string num(std::size_t v) { return std::to_string(v); }
inline std::string num(long v) { return std::to_string(v); }

inline std::string quote(std::string_view field) {
  const bool needs = field.find_first_of(",\"\n\r") != std::string_view::npos;
  if (!needs) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw Error("cannot open for writing: " + path.string());
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << quote(fields[i]);
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

/// Parses a whole CSV document.  Quoted fields may contain commas, quotes and newlines.
inline std::vector<std::vector<std::string>> parse(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
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
        field_started = true;
        break;
      case ',':
        row.push_back(std::move(field));
        field.clear();
        field_started = true;
        break;
      case '\r':
        break;
      case '\n':
        if (field_started || !field.empty() || !row.empty()) {
          row.push_back(std::move(field));
          rows.push_back(std::move(row));
        }
        row.clear();
        field.clear();
        field_started = false;
        break;
      default:
        field += c;
        field_started = true;
    }
  }
  if (in_quotes) throw FormatError("unterminated quoted CSV field");
  if (field_started || !field.empty() || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// A parsed CSV with a header row; columns are looked up by name.
class Table {
 public:
  static Table load(const std::filesystem::path& path) { return Table(parse(read_file(path)), path.string()); }

  Table(std::vector<std::vector<std::string>> rows, std::string origin = "<memory>") : origin_(std::move(origin)) {
    if (rows.empty()) throw FormatError(origin_ + ": missing header row");
    header_ = std::move(rows.front());
    for (std::size_t i = 0; i < header_.size(); ++i) columns_[header_[i]] = i;
    rows_.assign(std::make_move_iterator(rows.begin() + 1), std::make_move_iterator(rows.end()));
    for (std::size_t r = 0; r < rows_.size(); ++r)
      if (rows_[r].size() != header_.size())
        throw FormatError(origin_ + ": row " + std::to_string(r + 1) + " has " + std::to_string(rows_[r].size()) +
                          " fields, header has " + std::to_string(header_.size()));
  }

  const std::vector<std::string>& header() const { return header_; }
  std::size_t size() const { return rows_.size(); }
  bool has(const std::string& name) const { return columns_.count(name) != 0; }

  std::size_t column(const std::string& name) const {
    auto it = columns_.find(name);
    if (it == columns_.end()) throw FormatError(origin_ + ": missing column '" + name + "'");
    return it->second;
  }

  const std::string& at(std::size_t row, const std::string& name) const { return rows_.at(row)[column(name)]; }

  long long integer(std::size_t row, const std::string& name) const {
    const auto& s = at(row, name);
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size())
      throw FormatError(origin_ + ": row " + std::to_string(row + 1) + " column '" + name + "' is not an integer: '" +
                        s + "'");
    return v;
  }

 private:
  std::string origin_;
  std::vector<std::string> header_;
  std::unordered_map<std::string, std::size_t> columns_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace emospace::csv
