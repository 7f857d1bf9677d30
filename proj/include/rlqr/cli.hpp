#pragma once

#include <string>
#include <vector>

namespace rlqr::cli {

// Exit codes.
constexpr int kOk = 0;
constexpr int kAcceptanceFailure = 1;
constexpr int kInputError = 2;
constexpr int kSolverError = 3;

// Runs `rlqr <command> [flags]`; args excludes the program name.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

// Default configuration of a command as JSON text (throws InputError for an
// unknown command).
std::string default_config(const std::string& command);

}  // namespace rlqr::cli
