#pragma once

// CSV ingestion and export, JSON emission with fixed 17-digit numbers, and
// content hashes for provenance.
//
// CSV layout: a header `source_id,item_id,f1,...,fp` followed by one row per
// item. Rows are grouped into sources by source_id in order of first
// appearance; row order within a source is preserved.

#include "lrbf/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <string_view>

namespace lrbf::io {

struct CsvRow {
  std::string source_id;
  std::string item_id;
};

struct CsvTable {
  std::vector<CsvRow> rows;
  Matrix features;  // one row per CSV row
};

CsvTable parse_csv(std::string_view text);
CsvTable read_csv(const std::filesystem::path& path);

BackgroundDatabase to_database(const CsvTable& table);
// Requires a single constant source_id.
ObservationSet to_observation_set(const CsvTable& table);

BackgroundDatabase read_database(const std::filesystem::path& path);
ObservationSet read_observation_set(const std::filesystem::path& path);

// Item ids are written as 1..n within each source.
std::string to_csv(const BackgroundDatabase& db);
std::string to_csv(const ObservationSet& set);
void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

// Every floating-point number is printed with %.17g; non-finite numbers
// become null.
std::string dump_json(const nlohmann::ordered_json& value, int indent = 2);

std::string format_double(double value);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace lrbf::io
