#pragma once

namespace kdrift {

inline constexpr const char* kVersion = "1.0.0";

inline const char* version_string() { return "kalman-drift 1.0.0"; }

}  // namespace kdrift
