#include "lrbf/io.hpp"

#include "lrbf/error.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace lrbf::io {

namespace {

std::vector<std::string> split_fields(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::string row_context(std::size_t line) { return "line " + std::to_string(line); }

void emit(const nlohmann::ordered_json& v, int indent, int depth, std::string& out) {
  const auto newline = [&](int d) {
    if (indent < 0) return;
    out += '\n';
    out.append(static_cast<std::size_t>(indent * d), ' ');
  };
  switch (v.type()) {
    case nlohmann::ordered_json::value_t::object: {
      if (v.empty()) {
        out += "{}";
        return;
      }
      out += '{';
      bool first = true;
      for (const auto& [key, item] : v.items()) {
        if (!first) out += ',';
        first = false;
        newline(depth + 1);
        out += nlohmann::ordered_json(key).dump();
        out += indent < 0 ? ":" : ": ";
        emit(item, indent, depth + 1, out);
      }
      newline(depth);
      out += '}';
      return;
    }
    case nlohmann::ordered_json::value_t::array: {
      if (v.empty()) {
        out += "[]";
        return;
      }
      out += '[';
      bool first = true;
      for (const auto& item : v) {
        if (!first) out += ',';
        first = false;
        newline(depth + 1);
        emit(item, indent, depth + 1, out);
      }
      newline(depth);
      out += ']';
      return;
    }
    case nlohmann::ordered_json::value_t::number_float:
      out += format_double(v.get<double>());
      return;
    default:
      out += v.dump();
  }
}

}  // namespace

CsvTable parse_csv(std::string_view text) {
  std::vector<std::string_view> lines;
  for (std::size_t pos = 0; pos <= text.size();) {
    const std::size_t nl = text.find('\n', pos);
    lines.push_back(text.substr(pos, nl == std::string_view::npos ? nl : nl - pos));
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (!lines.empty() && lines.front().starts_with("\xEF\xBB\xBF")) {
    lines.front().remove_prefix(3);
  }
  if (lines.empty()) throw Error(ErrorCode::empty_file, "CSV input is empty");

  const std::vector<std::string> header = split_fields(trim(lines.front()));
  if (header.size() < 3 || trim(header[0]) != "source_id" || trim(header[1]) != "item_id") {
    throw Error(ErrorCode::bad_header,
                "CSV header must be source_id,item_id,f1,...,fp");
  }
  const Index p = static_cast<Index>(header.size()) - 2;
  for (Index k = 0; k < p; ++k) {
    if (trim(header[static_cast<std::size_t>(k + 2)]) != "f" + std::to_string(k + 1)) {
      throw Error(ErrorCode::bad_header, "CSV header column " + std::to_string(k + 3) +
                                             " must be f" + std::to_string(k + 1));
    }
  }
  if (lines.size() == 1) throw Error(ErrorCode::empty_file, "CSV input has no data rows");

  CsvTable table;
  table.features.resize(static_cast<Index>(lines.size()) - 1, p);
  std::set<std::pair<std::string, std::string>> seen;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t line_no = i + 1;
    const std::vector<std::string> fields = split_fields(trim(lines[i]));
    if (static_cast<Index>(fields.size()) != p + 2) {
      throw Error(ErrorCode::ragged_row, row_context(line_no) + ": expected " +
                                             std::to_string(p + 2) + " fields, found " +
                                             std::to_string(fields.size()));
    }
    CsvRow row{std::string(trim(fields[0])), std::string(trim(fields[1]))};
    if (!seen.insert({row.source_id, row.item_id}).second) {
      throw Error(ErrorCode::duplicate_item, row_context(line_no) + ": duplicate item (" +
                                                 row.source_id + ", " + row.item_id + ")");
    }
    for (Index k = 0; k < p; ++k) {
      const std::string_view field = trim(fields[static_cast<std::size_t>(k + 2)]);
      double value = 0.0;
      const auto [end, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
      if (field.empty() || ec != std::errc() || end != field.data() + field.size() ||
          !std::isfinite(value)) {
        throw Error(ErrorCode::non_numeric, row_context(line_no) + ", column f" +
                                                std::to_string(k + 1) + ": '" +
                                                std::string(field) +
                                                "' is not a finite number");
      }
      table.features(static_cast<Index>(i) - 1, k) = value;
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io_failure, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io_failure, "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error(ErrorCode::io_failure, "write failed for " + path.string());
}

CsvTable read_csv(const std::filesystem::path& path) {
  try {
    return parse_csv(read_text(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

BackgroundDatabase to_database(const CsvTable& table) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<Index>> rows;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    auto [it, fresh] = rows.try_emplace(table.rows[i].source_id);
    if (fresh) order.push_back(table.rows[i].source_id);
    it->second.push_back(static_cast<Index>(i));
  }
  std::vector<ObservationSet> sources;
  for (const auto& id : order) {
    const auto& idx = rows.at(id);
    Matrix items(static_cast<Index>(idx.size()), table.features.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      items.row(static_cast<Index>(r)) = table.features.row(idx[r]);
    }
    sources.emplace_back(id, std::move(items));
  }
  return BackgroundDatabase(std::move(sources));
}

ObservationSet to_observation_set(const CsvTable& table) {
  const std::string& id = table.rows.front().source_id;
  for (const auto& row : table.rows) {
    if (row.source_id != id) {
      throw Error(ErrorCode::invalid_argument,
                  "unknown-source file must use one source_id, found '" + id + "' and '" +
                      row.source_id + "'");
    }
  }
  return ObservationSet(id, table.features);
}

BackgroundDatabase read_database(const std::filesystem::path& path) {
  return to_database(read_csv(path));
}

ObservationSet read_observation_set(const std::filesystem::path& path) {
  return to_observation_set(read_csv(path));
}

std::string format_double(double value) {
  if (!std::isfinite(value)) return "null";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  std::string s(buf);
  // Keep integral values recognisable as floating point.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

namespace {

void append_rows(std::string& out, const ObservationSet& set) {
  for (Index i = 0; i < set.size(); ++i) {
    out += set.label();
    out += ',';
    out += std::to_string(i + 1);
    for (Index k = 0; k < set.dim(); ++k) {
      out += ',';
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", set.items()(i, k));
      out += buf;
    }
    out += '\n';
  }
}

std::string csv_header(Index p) {
  std::string h = "source_id,item_id";
  for (Index k = 1; k <= p; ++k) h += ",f" + std::to_string(k);
  return h + "\n";
}

}  // namespace

std::string to_csv(const BackgroundDatabase& db) {
  std::string out = csv_header(db.dim());
  for (const auto& s : db.sources()) append_rows(out, s);
  return out;
}

std::string to_csv(const ObservationSet& set) {
  std::string out = csv_header(set.dim());
  append_rows(out, set);
  return out;
}

std::string dump_json(const nlohmann::ordered_json& value, int indent) {
  std::string out;
  emit(value, indent, 0, out);
  out += '\n';
  return out;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::io_failure, "SHA-256 computation failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xF];
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) {
  return sha256_hex(read_text(path));
}

}  // namespace lrbf::io
