#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace sentinet::cli {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

int cmd_train(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_finetune(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_predict(const RunConfig& config, const std::vector<std::string>& images, std::ostream& out,
                std::ostream& err);
int cmd_evaluate(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_validate_manifest(const RunConfig& config, std::ostream& out, std::ostream& err);

/// Parses argv and dispatches to a subcommand.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sentinet::cli
