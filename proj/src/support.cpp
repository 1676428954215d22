#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>

#include "dida/error.hpp"
#include "dida/io.hpp"
#include "dida/log.hpp"

namespace dida {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::contract: return "contract";
    case ErrorKind::configuration: return "configuration";
    case ErrorKind::domain: return "domain";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::capacity: return "capacity";
    case ErrorKind::ingestion: return "ingestion";
    case ErrorKind::io: return "I/O";
    case ErrorKind::compatibility: return "compatibility";
    case ErrorKind::format: return "format";
  }
  return "unknown";
}

namespace log {
namespace {

Level level_from_env() {
  const char* env = std::getenv("DIDA_LOG");
  if (env == nullptr) return Level::info;
  const std::string value(env);
  if (value == "error") return Level::error;
  if (value == "debug") return Level::debug;
  return Level::info;
}

std::atomic<Level>& current() {
  static std::atomic<Level> value{level_from_env()};
  return value;
}

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

Level level() { return current().load(std::memory_order_relaxed); }
void set_level(Level level) { current().store(level, std::memory_order_relaxed); }

void write(Level level, const std::string& message) {
  static constexpr const char* names[] = {"error", "warn", "info", "debug"};
  std::lock_guard lock(sink_mutex());
  std::cerr << "[dida " << names[static_cast<int>(level)] << "] " << message << '\n';
}

}  // namespace log

namespace io {

void atomic_write(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) fail(ErrorKind::io, "cannot create directory " + path.parent_path().string());
  }
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) fail(ErrorKind::io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::io, "cannot rename " + tmp.string() + " to " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

Json read_json(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const Json& value) {
  atomic_write(path, value.dump(2) + "\n");
}

std::vector<Json> read_jsonl(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<Json> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      records.push_back(Json::parse(line));
    } catch (const Json::parse_error& e) {
      fail(ErrorKind::format, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

std::string to_jsonl(const std::vector<Json>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

void reject_unknown_keys(const Json& doc, std::initializer_list<std::string_view> known, std::string_view what) {
  if (!doc.is_object()) fail(ErrorKind::configuration, std::string(what) + " must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      fail(ErrorKind::configuration, "unknown " + std::string(what) + " key '" + key + "'");
    }
  }
}

}  // namespace io
}  // namespace dida
