#pragma once

// Command-line entry point. Exit codes: 0 success, 1 validation failure,
// 2 runtime failure.

namespace gcb {

inline constexpr const char* kVersion = "gcb-artifacts/1";

int run_cli(int argc, char** argv);

}  // namespace gcb
