#pragma once

namespace rmscan {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace rmscan
