#include "mutualctr/log.hpp"

#include <cstdlib>
#include <iostream>
#include <mutex>

namespace mutualctr {

LogLevel log_level() {
    static LogLevel level = [] {
        const char* env = std::getenv("MUTUALCTR_LOG");
        if (!env) return LogLevel::info;
        std::string v(env);
        if (v == "debug") return LogLevel::debug;
        if (v == "warn") return LogLevel::warn;
        return LogLevel::info;
    }();
    return level;
}

namespace {

std::mutex& log_mutex() {
    static std::mutex m;
    return m;
}

void emit(LogLevel lvl, const char* tag, const std::string& msg) {
    if (static_cast<int>(lvl) < static_cast<int>(log_level())) return;
    std::lock_guard<std::mutex> lock(log_mutex());
    std::cerr << tag << msg << '\n';
}

} // namespace

void log_debug(const std::string& msg) { emit(LogLevel::debug, "[debug] ", msg); }
void log_info(const std::string& msg) { emit(LogLevel::info, "[info] ", msg); }
void log_warn(const std::string& msg) { emit(LogLevel::warn, "[warn] ", msg); }

} // namespace mutualctr
