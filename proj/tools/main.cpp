#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

int main(int argc, char** argv) {
  using advdet::cli::Invocation;
  CLI::App app{"Adversarial detection from raw outputs: train, attack, calibrate, evaluate"};
  app.require_subcommand(1);

  std::vector<Invocation> invocations(advdet::cli::command_names().size());
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < invocations.size(); ++i) {
    Invocation& inv = invocations[i];
    inv.command = advdet::cli::command_names()[i];
    CLI::App* sub = app.add_subcommand(inv.command);
    sub->add_option("--config", inv.config, "key=value config file")->required();
    sub->add_option("--seed", inv.seed, "Overrides the config seed");
    sub->add_option("--out", inv.out, "Output directory (overrides the config)");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : advdet::cli::kExitUsage;
  }
  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (subs[i]->parsed()) return advdet::cli::run(invocations[i], std::cout, std::cerr);
  }
  return advdet::cli::kExitUsage;
}
