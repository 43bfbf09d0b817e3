// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace sardiff::cli {

/// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Root for default artifact locations: $SDF_HOME, else ./sdf_home.
std::filesystem::path artifact_root();

int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);

}  // namespace sardiff::cli
