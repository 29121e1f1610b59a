#pragma once

#include <string>

namespace mutualctr {

enum class LogLevel { debug = 0, info = 1, warn = 2 };

/// Level comes from MUTUALCTR_LOG (debug|info|warn), default info.
/// Messages go to stderr; reports and tables stay deterministic.
LogLevel log_level();

void log_debug(const std::string& msg);
void log_info(const std::string& msg);
void log_warn(const std::string& msg);

} // namespace mutualctr
