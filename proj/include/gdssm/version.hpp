#pragma once

namespace gdssm {
inline constexpr const char* kVersion = "gdssm-0.1.0";
}
