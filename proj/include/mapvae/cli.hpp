// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace mapvae::cli {

// Run one command line (without the program name). Exit codes: 0 success,
// 1 usage error, 2 data error, 3 numeric failure.
int run(std::vector<std::string> args);

// Full help text including every subcommand's flags.
std::string help_text();

}  // namespace mapvae::cli
