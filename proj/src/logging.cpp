#include "raregen/logging.hpp"

#include <cstdlib>
#include <mutex>
#include <string>

namespace raregen {

namespace {
LogLevel parse_level() {
  const char* env = std::getenv("RAREGEN_LOG");
  if (env == nullptr) return LogLevel::kWarn;
  const std::string v(env);
  if (v == "debug") return LogLevel::kDebug;
  if (v == "info") return LogLevel::kInfo;
  if (v == "warn") return LogLevel::kWarn;
  if (v == "error") return LogLevel::kError;
  if (v == "off") return LogLevel::kOff;
  return LogLevel::kWarn;
}

const char* level_name(LogLevel level) {
  switch (level) {
    case LogLevel::kDebug: return "debug";
    case LogLevel::kInfo: return "info";
    case LogLevel::kWarn: return "warn";
    case LogLevel::kError: return "error";
    case LogLevel::kOff: return "off";
  }
  return "?";
}

std::mutex log_mutex;
}  // namespace

LogLevel log_level() {
  static const LogLevel level = parse_level();
  return level;
}

void log_line(LogLevel level, const std::string& message) {
  std::lock_guard<std::mutex> lock(log_mutex);
  std::cerr << "[raregen " << level_name(level) << "] " << message << "\n";
}

}  // namespace raregen
