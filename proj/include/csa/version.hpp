#pragma once

namespace csa {

// Library version, embedded in every CLI artifact so runs are attributable.
inline constexpr const char* kVersion = "0.1.0";

}  // namespace csa
