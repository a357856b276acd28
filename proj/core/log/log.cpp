#include "mtmed3d/log.hpp"

#include <stdexcept>

#include <spdlog/spdlog.h>

namespace mtmed3d::log {

void debug(const std::string& msg) { spdlog::debug(msg); }
void info(const std::string& msg) { spdlog::info(msg); }
void warn(const std::string& msg) { spdlog::warn(msg); }
void error(const std::string& msg) { spdlog::error(msg); }

void set_level(Level level) {
  switch (level) {
    case Level::Debug: spdlog::set_level(spdlog::level::debug); break;
    case Level::Info: spdlog::set_level(spdlog::level::info); break;
    case Level::Warn: spdlog::set_level(spdlog::level::warn); break;
    case Level::Error: spdlog::set_level(spdlog::level::err); break;
    case Level::Off: spdlog::set_level(spdlog::level::off); break;
  }
}

Level level_from_string(const std::string& s) {
  if (s == "debug") return Level::Debug;
  if (s == "info") return Level::Info;
  if (s == "warn" || s == "warning") return Level::Warn;
  if (s == "error") return Level::Error;
  if (s == "off") return Level::Off;
  throw std::invalid_argument("unknown log level '" + s + "'");
}

}  // namespace mtmed3d::log
