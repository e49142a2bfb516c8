#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace forge {

using json = nlohmann::json;

// hashing / encoding
std::string sha256_hex(std::string_view data);
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);
std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

// text
std::string trim(std::string_view s);
std::string to_lower(std::string_view s);
/// Lower-cases and collapses internal whitespace runs; used for equality of answer options.
std::string normalize_text(std::string_view s);
std::vector<std::string> split_lines(std::string_view s);
std::vector<std::string> split_whitespace(std::string_view s);

/// Half-away-from-zero rounding to one decimal, the way accuracy tables are printed.
double round1(double x);
std::string format1(double x);

std::string now_iso8601();

// files
std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temp file then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
void append_line(const std::filesystem::path& path, std::string_view line);

/// One JSON object per line. Blank lines are skipped; a malformed line throws StorageError.
std::vector<json> read_jsonl(const std::filesystem::path& path);
std::string to_jsonl(const std::vector<json>& rows);

/// Parses each non-blank line; lines that fail go to `on_error(line_no, message)`.
std::vector<json> read_jsonl_lenient(const std::filesystem::path& path,
                                     const std::function<void(std::size_t, const std::string&)>& on_error);

}  // namespace forge
