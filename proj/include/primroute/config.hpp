#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "primroute/model.hpp"
#include "primroute/pretrain.hpp"
#include "primroute/router.hpp"
#include "primroute/tasks.hpp"
#include "primroute/training.hpp"

namespace primroute {

/// Malformed config text, an unknown key, or a value of the wrong type.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TaskSuiteConfig {
  /// Contrast pairs generated per family for elicitation.
  std::size_t pairs_per_family = 150;
  /// Router-training prompts per family (oracle pool and RL prompts).
  std::size_t train_per_family = 200;
  std::size_t eval_per_family = 200;
};

struct ElicitationConfig {
  std::size_t num_primitives = 6;
  std::size_t kmeans_restarts = 5;
  FilterBand filter_band{};
  /// Strengths probed by the static sweep.
  std::vector<double> sweep_alphas = {0.0, 0.5, 1.0, 1.5, 2.0, 4.0};
  std::size_t sweep_per_family = 100;
  /// Minimum share of contrast pairs that must survive the quality filter.
  double min_acceptance = 0.6;
};

struct RouterSection {
  std::size_t bottleneck = 32;
  double tau = 0.7;
  double alpha_max = 2.0;
  StrengthHead strength_head = StrengthHead::kClip;
  bool straight_through = false;
};

struct SftSection {
  /// Oracle-labelled samples drawn from the training prompts.
  std::size_t samples = 200;
  OracleConfig oracle{};
  SftConfig train{};
};

struct EvalSection {
  /// Router-training seeds; every routed metric is averaged over them.
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  /// Alternate intervention layer for the layer-sensitivity ablation.
  std::size_t ablation_layer = 2;
  std::vector<std::size_t> k_variants = {4, 6, 8, 12};
  /// Strength for the static-alpha condition (best primitive per the sweep).
  double static_alpha = 1.0;
  double headroom_margin = 0.10;
  double headroom_ceiling = 0.95;
  /// When false, pretrain records a failed headroom check instead of stopping.
  bool require_headroom = true;
};

struct RunConfig {
  std::uint64_t seed = 7;
  std::string output_dir = "runs/default";
  std::size_t threads = 1;
  ModelConfig model{};
  PretrainConfig pretrain{};
  TaskSuiteConfig tasks{};
  ElicitationConfig elicitation{};
  RouterSection router{};
  SftSection sft{};
  GrpoConfig grpo{};
  EvalSection eval{};

  /// Throws ConfigError on inconsistent values.
  void validate() const;
  /// Canonical JSON text (sorted keys, two-space indent, trailing newline).
  std::string to_json() const;
  /// Canonical JSON without output_dir and threads, which never change results.
  std::string result_json() const;
  /// Hash of result_json(), so a run hashes the same wherever it is written.
  std::uint64_t hash() const;
  RouterConfig router_config(std::size_t num_primitives) const;

  /// Strict parse: unknown keys and wrong types throw ConfigError. Missing keys
  /// keep their defaults.
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  /// Applies "section.key=value" (value parsed as JSON, bare words as strings).
  void apply_override(const std::string& assignment);
};

}  // namespace primroute
