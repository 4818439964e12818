#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace sae::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kNumerical = 4 };

// Entry point shared by the executable and the tests.
int run(int argc, char** argv);

// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace sae::cli
