#include <cstdint>

#include "CLI11.hpp"
#include "remem/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"desk-scale distillation laboratory"};
  remem::CliArgs args;
  app.add_option("subcommand", args.subcommand,
                 "finetune | distill | sweep | prune-sweep | expertness | mi | criticality | "
                 "ablate")
      ->required();
  app.add_option("--config", args.config_path, "JSON config file; defaults apply when omitted");
  app.add_option("--set", args.overrides, "dot.path=value override, repeatable");
  app.add_option("--threads", args.threads, "kernel thread cap; 1 is bit-reproducible");
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "root seed override");
  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) args.seed = seed;
  return remem::run_cli(args);
}
