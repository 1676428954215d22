#pragma once

#include <sstream>
#include <string>

namespace dida::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

/// Current threshold; initialised from DIDA_LOG={error|info|debug}, default info.
Level level();
void set_level(Level level);

void write(Level level, const std::string& message);

template <typename... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

template <typename... Args>
void error(const Args&... args) {
  if (level() >= Level::error) write(Level::error, concat(args...));
}
template <typename... Args>
void warn(const Args&... args) {
  if (level() >= Level::warn) write(Level::warn, concat(args...));
}
template <typename... Args>
void info(const Args&... args) {
  if (level() >= Level::info) write(Level::info, concat(args...));
}
template <typename... Args>
void debug(const Args&... args) {
  if (level() >= Level::debug) write(Level::debug, concat(args...));
}

}  // namespace dida::log
