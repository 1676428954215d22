#pragma once

#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace dida::io {

using Json = nlohmann::json;

/// Writes to `<path>.tmp` then renames over `path`, so readers only ever see
/// the previous or the complete new content.
void atomic_write(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

Json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& value);

/// One JSON object per line; blank lines ignored.
std::vector<Json> read_jsonl(const std::filesystem::path& path);
std::string to_jsonl(const std::vector<Json>& records);

/// Throws a configuration error naming the first key of `doc` outside `known`.
void reject_unknown_keys(const Json& doc, std::initializer_list<std::string_view> known, std::string_view what);

}  // namespace dida::io
