#pragma once

namespace iseg {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace iseg
