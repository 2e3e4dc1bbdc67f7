#pragma once

#include <boost/tokenizer.hpp>

#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "bikedepth/core.hpp"

namespace bikedepth::csv {

/// Splits one comma-separated line, honouring double-quoted fields.
inline std::vector<std::string> split_line(const std::string& line) {
  std::string trimmed = line;
  if (!trimmed.empty() && trimmed.back() == '\r') trimmed.pop_back();
  boost::escaped_list_separator<char> sep('\\', ',', '"');
  boost::tokenizer<boost::escaped_list_separator<char>> tok(trimmed, sep);
  return {tok.begin(), tok.end()};
}

/// Header-indexed reader over a delimited text stream. Lines starting with '#' are skipped.
class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (line.empty() || line[0] == '#') continue;
      header_ = split_line(line);
      for (std::size_t i = 0; i < header_.size(); ++i) index_[header_[i]] = i;
      return;
    }
    throw DataError("delimited input has no header row");
  }

  const std::vector<std::string>& header() const { return header_; }

  std::optional<std::size_t> column(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t require(const std::string& name) const {
    auto c = column(name);
    if (!c) throw ConfigError("missing required column '" + name + "'");
    return *c;
  }

  /// Reads the next non-empty row; false at end of stream.
  bool next(std::vector<std::string>& row) {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (line.empty() || line == "\r" || line[0] == '#') continue;
      try {
        row = split_line(line);
      } catch (const boost::escaped_list_error&) {
        row.clear();
      }
      return true;
    }
    return false;
  }

  std::size_t line_number() const { return line_no_; }

 private:
  std::istream& in_;
  std::vector<std::string> header_;
  std::map<std::string, std::size_t> index_;
  std::size_t line_no_ = 0;
};

inline std::string quote(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline void write_row(std::ostream& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out << ',';
    out << quote(fields[i]);
  }
  out << '\n';
}

}  // namespace bikedepth::csv
