#pragma once

#include <string>

// Thin logging facade; the backend is compiled apart from libtorch's bundled fmt.
namespace mtmed3d::log {

enum class Level { Debug, Info, Warn, Error, Off };

void debug(const std::string& msg);
void info(const std::string& msg);
void warn(const std::string& msg);
void error(const std::string& msg);
void set_level(Level level);
Level level_from_string(const std::string& s);

}  // namespace mtmed3d::log
