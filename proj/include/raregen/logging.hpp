#pragma once

#include <iostream>
#include <sstream>

namespace raregen {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3, kOff = 4 };

// Level comes from the RAREGEN_LOG environment variable
// (debug|info|warn|error|off); default warn. Messages go to stderr.
LogLevel log_level();
void log_line(LogLevel level, const std::string& message);

}  // namespace raregen

#define RAREGEN_LOG_AT(level, expr)                      \
  do {                                                   \
    if (::raregen::log_level() <= (level)) {             \
      std::ostringstream oss__;                          \
      oss__ << expr;                                     \
      ::raregen::log_line((level), oss__.str());         \
    }                                                    \
  } while (0)

#define RAREGEN_LOG_DEBUG(expr) RAREGEN_LOG_AT(::raregen::LogLevel::kDebug, expr)
#define RAREGEN_LOG_INFO(expr) RAREGEN_LOG_AT(::raregen::LogLevel::kInfo, expr)
#define RAREGEN_LOG_WARN(expr) RAREGEN_LOG_AT(::raregen::LogLevel::kWarn, expr)
#define RAREGEN_LOG_ERROR(expr) RAREGEN_LOG_AT(::raregen::LogLevel::kError, expr)
