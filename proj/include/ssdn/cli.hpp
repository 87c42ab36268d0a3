#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "ssdn/config.hpp"
#include "ssdn/runner.hpp"

namespace ssdn {

inline int cli_main(int argc, const char* const* argv) {
  CLI::App app{"ssdn: bridged self-supervised networks under covariate shift"};
  app.require_subcommand(1);

  struct Args {
    std::string config;
    std::string out;
    int64_t seed = -1;
    bool quiet = false;
  };
  Args args;
  std::string kind;
  for (const char* name : {"train", "eval", "sensitivity", "ablation", "alphas"}) {
    CLI::App* sub = app.add_subcommand(name, std::string("run a ") + name + " experiment");
    sub->add_option("--config", args.config, "experiment config (json)")->required();
    sub->add_option("--out", args.out, "output directory (must not exist)");
    sub->add_option("--seed", args.seed, "replace the config's seed list with this one seed");
    sub->add_flag("--quiet", args.quiet, "suppress progress output");
    sub->callback([&kind, name]() { kind = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    std::ifstream f(args.config);
    if (!f) throw FormatError("cannot open config '" + args.config + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    ExperimentConfig cfg = parse_config(ss.str());
    if (!cfg.kind.empty() && cfg.kind != kind) {
      throw FormatError("config kind '" + cfg.kind + "' does not match subcommand '" + kind +
                        "'");
    }
    cfg.kind = kind;
    if (!args.out.empty()) cfg.output_dir = args.out;
    if (args.seed >= 0) cfg.seeds = {static_cast<uint64_t>(args.seed)};
    run_experiment(cfg, args.quiet);
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace ssdn
