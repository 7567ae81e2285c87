#pragma once

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <string_view>

namespace cgcd::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

// Verbosity comes from CGCD_LOG (error|warn|info|debug); default warn.
inline Level threshold() {
  static const Level level = [] {
    const char* env = std::getenv("CGCD_LOG");
    if (env == nullptr) return Level::warn;
    const std::string_view v(env);
    if (v == "error") return Level::error;
    if (v == "info") return Level::info;
    if (v == "debug") return Level::debug;
    return Level::warn;
  }();
  return level;
}

template <class... Args>
void write(Level level, std::string_view tag, const Args&... args) {
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  std::ostringstream os;
  os << "[cgcd " << tag << "] ";
  (os << ... << args);
  os << '\n';
  std::cerr << os.str();
}

template <class... Args>
void error(const Args&... args) { write(Level::error, "error", args...); }
template <class... Args>
void warn(const Args&... args) { write(Level::warn, "warn", args...); }
template <class... Args>
void info(const Args&... args) { write(Level::info, "info", args...); }
template <class... Args>
void debug(const Args&... args) { write(Level::debug, "debug", args...); }

}  // namespace cgcd::log
