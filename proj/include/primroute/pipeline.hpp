#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "primroute/config.hpp"
#include "primroute/errors.hpp"
#include "primroute/evaluation.hpp"

namespace primroute {

/// An upstream artifact is missing; the message names the command to run.
class DependencyError : public DataError {
 public:
  using DataError::DataError;
};

using Logger = std::function<void(const std::string&)>;

/// The phases of a run over one output directory. Every phase reads its inputs
/// from disk, so phases can run in separate processes; given the same config
/// each phase rewrites byte-identical outputs.
class Pipeline {
 public:
  explicit Pipeline(RunConfig config, Logger log = {});

  const RunConfig& config() const { return config_; }
  std::filesystem::path dir() const { return config_.output_dir; }

  /// Trains and saves the base model, then checks headroom (DataError if it fails).
  void pretrain();
  /// Contrast pairs, quality filter, PCA, K-Means and the primitive library.
  void elicit();
  /// Oracle labels and supervised warm-up, one router per evaluation seed.
  void train_sft();
  /// GRPO refinement of each warm-started router.
  void train_rl();
  /// Base, prompted, static, SFT-only, routed and top1-only conditions.
  void evaluate();
  /// Static strength sweep of every primitive.
  void sweep();
  /// Layer and K sensitivity rows, plus the main routed row for reference.
  void ablate();
  /// Aggregates existing artifacts into reports/ without recomputation.
  std::vector<std::string> report();
  /// pretrain, elicit, train-sft, train-rl, evaluate, sweep, report.
  void run_all();

  /// Fixed instance sets derived from the master seed.
  EvalSets eval_sets() const;
  std::vector<TaskInstance> router_train_prompts() const;

 private:
  void say(const std::string& msg) const;
  /// Rewrites manifest.json with the effective config and the phase that ran.
  void record(const std::string& phase) const;
  std::filesystem::path need(const std::string& name, const std::string& command) const;

  RunConfig config_;
  Logger log_;
};

}  // namespace primroute
