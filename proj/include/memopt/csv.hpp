#pragma once

// Minimal RFC-4180 style CSV reader/writer: quoted fields may contain the
// delimiter, doubled quotes and line breaks. The trace exports carry the
// comma-separated target list inside a quoted cell, so full quoting matters.

#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "memopt/common.hpp"

namespace memopt::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

// Reads one record (handles quoted newlines). Returns false on clean EOF.
inline bool read_record(std::istream& in, std::vector<std::string>& fields, char delim) {
  fields.clear();
  std::string cell;
  bool in_quotes = false;
  bool saw_any = false;
  int ch;
  while ((ch = in.get()) != EOF) {
    saw_any = true;
    const char c = static_cast<char>(ch);
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          cell.push_back('"');
          in.get();
        } else {
          in_quotes = false;
        }
      } else {
        cell.push_back(c);
      }
    } else if (c == '"' && cell.empty()) {
      in_quotes = true;
    } else if (c == delim) {
      fields.push_back(std::move(cell));
      cell.clear();
    } else if (c == '\n') {
      if (!cell.empty() && cell.back() == '\r') cell.pop_back();
      fields.push_back(std::move(cell));
      return true;
    } else {
      cell.push_back(c);
    }
  }
  if (!saw_any) return false;
  if (!cell.empty() && cell.back() == '\r') cell.pop_back();
  fields.push_back(std::move(cell));
  return true;
}

inline Table read(std::istream& in, char delim = ',') {
  Table t;
  std::vector<std::string> fields;
  if (!read_record(in, fields, delim)) {
    throw Error(Error::Kind::EmptyDataset, "csv: input has no header row");
  }
  t.header = fields;
  while (read_record(in, fields, delim)) {
    // Skip blank trailing lines.
    if (fields.size() == 1 && fields[0].empty()) continue;
    t.rows.push_back(fields);
  }
  return t;
}

inline void write_field(std::ostream& out, const std::string& field, char delim) {
  const bool needs_quotes = field.find_first_of(std::string{delim, '"', '\n', '\r'}) != std::string::npos;
  if (!needs_quotes) {
    out << field;
    return;
  }
  out << '"';
  for (char c : field) {
    if (c == '"') out << "\"\"";
    else out << c;
  }
  out << '"';
}

inline void write_record(std::ostream& out, const std::vector<std::string>& fields, char delim = ',') {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out << delim;
    write_field(out, fields[i], delim);
  }
  out << '\n';
}

}  // namespace memopt::csv
