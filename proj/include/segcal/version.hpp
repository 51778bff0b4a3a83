#pragma once

namespace segcal {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace segcal
