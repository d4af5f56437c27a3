#pragma once

namespace rankcal {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace rankcal
