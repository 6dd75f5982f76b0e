#pragma once

#include <cstdarg>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace dger {

// Library-wide error type. Thrown for contract violations (bad shapes,
// out-of-range arguments, malformed files). Messages name the failing
// operation and the offending values.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string strfmt(const char* fmt, ...) {
    va_list ap;
    va_start(ap, fmt);
    char buf[1024];
    std::vsnprintf(buf, sizeof(buf), fmt, ap);
    va_end(ap);
    return std::string(buf);
}

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

// ---------------------------------------------------------------------------
// Logging: warnings go to stderr unless silenced. Used for recoverable
// conditions the caller should know about (length truncation, zero-norm
// rows, gradient clipping).
// ---------------------------------------------------------------------------

inline bool& log_enabled() {
    static bool enabled = true;
    return enabled;
}

inline void log_warn(const std::string& msg) {
    if (log_enabled()) std::fprintf(stderr, "[dger] warning: %s\n", msg.c_str());
}

inline void log_info(const std::string& msg) {
    if (log_enabled()) std::fprintf(stderr, "[dger] %s\n", msg.c_str());
}

struct LogSilencer {
    bool prev;
    LogSilencer() : prev(log_enabled()) { log_enabled() = false; }
    ~LogSilencer() { log_enabled() = prev; }
};

}  // namespace dger
