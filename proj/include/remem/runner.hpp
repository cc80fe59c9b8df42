#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "remem/config.hpp"

namespace remem {

struct CliArgs {
  std::string subcommand;
  std::string config_path;  // empty runs on pure defaults
  std::vector<std::string> overrides;
  int threads = 1;
  std::optional<std::uint64_t> seed;
};

extern const std::vector<std::string> kSubcommands;

// dispatches one subcommand and maps errors to the exit-code contract:
// 0 ok, 2 config error, 3 numeric failure, 4 IO error
int run_cli(const CliArgs& args);

}  // namespace remem
