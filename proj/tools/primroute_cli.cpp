#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "primroute/config.hpp"
#include "primroute/errors.hpp"
#include "primroute/pipeline.hpp"

using namespace primroute;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::string> output_dir;
  std::optional<std::size_t> threads;
  std::optional<std::size_t> group_size;
  std::optional<double> kl_coef;
  std::optional<double> rollout_temp;
  bool quiet = false;
};

RunConfig resolve(const Options& o) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : RunConfig::load(o.config_path);
  // Environment first, so explicit flags win.
  if (const char* env = std::getenv("PRIMROUTE_OUTPUT_DIR"); env && *env) c.output_dir = env;
  if (const char* env = std::getenv("PRIMROUTE_THREADS"); env && *env) {
    try {
      c.threads = std::stoul(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("PRIMROUTE_THREADS is not a count: ") + env);
    }
  }
  for (const auto& a : o.overrides) c.apply_override(a);
  if (o.output_dir) c.output_dir = *o.output_dir;
  if (o.threads) c.threads = *o.threads;
  if (o.group_size) c.grpo.group_size = *o.group_size;
  if (o.kl_coef) c.grpo.kl_coef = *o.kl_coef;
  if (o.rollout_temp) c.grpo.temperature = *o.rollout_temp;
  c.validate();
  return c;
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("-c,--config", o.config_path, "JSON config file (missing keys keep defaults)");
  cmd->add_option("--set", o.overrides, "Override one key, e.g. --set grpo.lr=0.001");
  cmd->add_option("-o,--output-dir", o.output_dir, "Run directory (env PRIMROUTE_OUTPUT_DIR)");
  cmd->add_option("-j,--threads", o.threads, "Worker count (env PRIMROUTE_THREADS)");
  cmd->add_flag("-q,--quiet", o.quiet, "Suppress progress lines");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Router-based activation steering on a small transformer"};
  app.require_subcommand(1);
  Options o;

  struct Command {
    const char* name;
    const char* help;
  };
  const std::vector<Command> commands = {
      {"pretrain", "Train the base model and check headroom"},
      {"elicit", "Extract the primitive library from contrast pairs"},
      {"train-sft", "Oracle labels and supervised router warm-up"},
      {"train-rl", "GRPO refinement of the warm-started routers"},
      {"evaluate", "Evaluate all conditions on the held-out sets"},
      {"sweep", "Static strength sweep of every primitive"},
      {"ablate", "Layer and K sensitivity ablations"},
      {"report", "Aggregate existing artifacts into tables and plots"},
      {"run", "pretrain through report in one process"},
      {"print-config", "Print the effective config as JSON"},
  };
  for (const auto& c : commands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    add_common(sub, o);
    if (std::string(c.name) == "train-rl" || std::string(c.name) == "run") {
      sub->add_option("--group-size", o.group_size, "Rollouts per prompt");
      sub->add_option("--kl-coef", o.kl_coef, "KL coefficient");
      sub->add_option("--rollout-temp", o.rollout_temp, "Sampling temperature for rollouts");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    const RunConfig config = resolve(o);
    if (cmd == "print-config") {
      std::cout << config.to_json();
      return kExitOk;
    }
    Logger log;
    if (!o.quiet) log = [](const std::string& m) { std::cerr << m << "\n"; };
    Pipeline p(config, log);
    if (cmd == "pretrain") p.pretrain();
    else if (cmd == "elicit") p.elicit();
    else if (cmd == "train-sft") p.train_sft();
    else if (cmd == "train-rl") p.train_rl();
    else if (cmd == "evaluate") p.evaluate();
    else if (cmd == "sweep") p.sweep();
    else if (cmd == "ablate") p.ablate();
    else if (cmd == "report") p.report();
    else if (cmd == "run") p.run_all();
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DependencyError& e) {
    std::cerr << cmd << ": " << e.what() << "\n";
    return kExitData;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const FormatError& e) {
    std::cerr << "bad file: " << e.what() << "\n";
    return kExitData;
  } catch (const ProvenanceError& e) {
    std::cerr << "provenance mismatch: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}
