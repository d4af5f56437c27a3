#pragma once

// Minimal CSV helpers shared by the dataset, logits and checkpoint formats.
// Floats are written with 17 significant digits, which round-trips doubles exactly.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "rankcal/error.hpp"
#include "rankcal/tensor.hpp"

namespace rankcal::csv {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  if (ec != std::errc{}) throw Error("cannot format value");
  return std::string(buf, end);
}

/// Shortest text that parses back to the same double.
inline std::string format_shortest(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw Error("cannot format value");
  return std::string(buf, end);
}

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::optional<long long> parse_int(std::string_view s) {
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

/// Writes `contents` to a temporary sibling and renames it over `path`.
inline void write_atomic(const std::filesystem::path& path, const std::string& contents) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << contents;
    if (!out.flush()) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

/// A matrix of floats with one integer label per row, as stored in
/// `<p>0,...,<p>{D-1},label` files.
struct LabeledTable {
  Tensor values;
  std::vector<int> labels;
};

inline std::string header(char prefix, std::size_t columns) {
  std::string h;
  for (std::size_t j = 0; j < columns; ++j) {
    h += prefix;
    h += std::to_string(j);
    h += ',';
  }
  h += "label";
  return h;
}

inline std::string write_labeled_table(char prefix, const Tensor& values, const std::vector<int>& labels) {
  const std::size_t n = values.rows();
  const std::size_t d = values.cols();
  std::string out = header(prefix, d);
  out += '\n';
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      out += format_double(values(i, j));
      out += ',';
    }
    out += std::to_string(labels[i]);
    out += '\n';
  }
  return out;
}

/// Parses a labeled table. Labels must be integers in [0, max_label] when
/// `max_label` is given, and non-negative otherwise.
inline LabeledTable read_labeled_table(const std::filesystem::path& path, char prefix,
                                       std::optional<int> max_label = std::nullopt) {
  const std::string src = path.string();
  const auto lines = read_lines(path);
  if (lines.empty()) throw ParseError(src, 1, "empty file, expected header");
  const auto head = split(lines[0]);
  if (head.size() < 2 || lines[0] != header(prefix, head.size() - 1)) {
    throw ParseError(src, 1, "expected header " + header(prefix, head.size() < 2 ? 1 : head.size() - 1));
  }
  const std::size_t d = head.size() - 1;
  const std::size_t n = lines.size() - 1;
  if (n == 0) throw ParseError(src, 2, "no data rows");
  std::vector<double> data;
  data.reserve(n * d);
  std::vector<int> labels;
  labels.reserve(n);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto fields = split(lines[i]);
    if (fields.size() != d + 1) {
      throw ParseError(src, i + 1, "expected " + std::to_string(d + 1) + " fields, got " +
                                       std::to_string(fields.size()));
    }
    for (std::size_t j = 0; j < d; ++j) {
      auto v = parse_double(fields[j]);
      if (!v) throw ParseError(src, i + 1, "not a number: '" + std::string(fields[j]) + "'");
      data.push_back(*v);
    }
    auto label = parse_int(fields[d]);
    if (!label) throw ParseError(src, i + 1, "label is not an integer: '" + std::string(fields[d]) + "'");
    if (*label < 0) throw ParseError(src, i + 1, "negative label " + std::to_string(*label));
    if (max_label && *label > *max_label) {
      throw ParseError(src, i + 1, "label " + std::to_string(*label) + " exceeds class count " +
                                       std::to_string(*max_label + 1));
    }
    labels.push_back(static_cast<int>(*label));
  }
  return {Tensor({n, d}, std::move(data)), std::move(labels)};
}

}  // namespace rankcal::csv
