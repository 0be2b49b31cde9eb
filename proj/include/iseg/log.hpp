#pragma once

#include <cstdlib>
#include <string>

#include <spdlog/spdlog.h>

namespace iseg::log {

/// Applies the ISEG_LOG environment variable (trace, debug, info, warn, error,
/// critical, off) to the default logger. Unset leaves spdlog's default.
inline void init_from_env() {
  if (const char* v = std::getenv("ISEG_LOG"); v != nullptr && *v != '\0') {
    spdlog::set_level(spdlog::level::from_str(v));
  }
}

}  // namespace iseg::log
