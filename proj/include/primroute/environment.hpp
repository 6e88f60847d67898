#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "primroute/elicitation.hpp"
#include "primroute/inference.hpp"
#include "primroute/tasks.hpp"
#include "primroute/tensor.hpp"

namespace primroute {

/// One sampled continuation for a prompt.
struct Rollout {
  Tokens tokens;
  /// Log-probability of each token under the sampling policy.
  std::vector<double> log_probs;
  /// Environment-private per-step inputs (for the transformer: split-layer
  /// hiddens of the rows that predicted each token), [steps x d].
  std::vector<double> step_inputs;
};

/// Outcome of scoring one candidate injection on one prompt.
struct CandidateScore {
  /// Greedy decoding under the injection is verified correct.
  bool correct = false;
  /// Sum of gold-token log-probabilities under the injection.
  double confidence = 0.0;
};

/// Scores candidate injections for one prompt, reusing per-prompt work.
class CandidateScorer {
 public:
  virtual ~CandidateScorer() = default;
  virtual CandidateScore score(std::span<const double> injection) = 0;
};

/// The routed policy as seen by the trainer: a set of prompts, a router input
/// per prompt, and a token policy parameterized by an additive injection.
class PolicyEnvironment {
 public:
  virtual ~PolicyEnvironment() = default;

  virtual std::size_t num_prompts() const = 0;
  virtual std::size_t hidden_dim() const = 0;
  /// Hidden the router reads for a prompt.
  virtual std::vector<double> router_input(std::size_t prompt) const = 0;
  /// Samples a continuation at `temperature` with `injection` added at every step.
  virtual Rollout sample(std::size_t prompt, std::span<const double> injection, double temperature,
                         std::uint64_t seed) const = 0;
  /// 1 when the continuation is correct, else 0.
  virtual double reward(std::size_t prompt, const Rollout& rollout) const = 0;
  /// Per-token log-probabilities (at `temperature`) of each rollout's tokens on
  /// the tape, with rollout i steered by injections[i] ([1 x d]). Returns one
  /// [steps_i] tensor per rollout.
  virtual std::vector<Tensor> token_log_probs(std::size_t prompt, std::span<const Rollout> rollouts,
                                              std::span<const Tensor> injections, double temperature) const = 0;
  virtual std::unique_ptr<CandidateScorer> scorer(std::size_t prompt) const = 0;
  /// Greedy continuation and whether it is correct.
  virtual std::pair<Tokens, bool> greedy(std::size_t prompt, std::span<const double> injection) const = 0;
};

/// Frozen transformer over a fixed list of task instances, steered at the
/// library's layer.
class TransformerEnvironment final : public PolicyEnvironment {
 public:
  /// Throws DimensionError when the library layer or width does not fit the model.
  TransformerEnvironment(const Model& model, std::size_t layer, std::vector<TaskInstance> instances);

  const std::vector<TaskInstance>& instances() const { return instances_; }
  std::size_t layer() const { return layer_; }
  std::size_t max_steps(std::size_t prompt) const;

  std::size_t num_prompts() const override { return instances_.size(); }
  std::size_t hidden_dim() const override;
  std::vector<double> router_input(std::size_t prompt) const override;
  Rollout sample(std::size_t prompt, std::span<const double> injection, double temperature,
                 std::uint64_t seed) const override;
  double reward(std::size_t prompt, const Rollout& rollout) const override;
  std::vector<Tensor> token_log_probs(std::size_t prompt, std::span<const Rollout> rollouts,
                                      std::span<const Tensor> injections, double temperature) const override;
  std::unique_ptr<CandidateScorer> scorer(std::size_t prompt) const override;
  std::pair<Tokens, bool> greedy(std::size_t prompt, std::span<const double> injection) const override;

 private:
  const Model* model_;
  std::size_t layer_;
  std::vector<TaskInstance> instances_;
  std::vector<std::vector<double>> inputs_;
};

/// Planted environments over an orthonormal library in a small space. Each
/// step emits token 1 ("right") or 0 with logit margin
///   gain * (<v, u_need> - penalty * sum_{j not needed} <v, u_j>) + offset
/// and the reward is 1 when every step emits token 1.
struct PlantedConfig {
  std::size_t dim = 16;
  std::size_t num_primitives = 6;
  std::size_t num_prompts = 64;
  double gain = 4.0;
  double offset = -2.0;
  double penalty = 1.0;
  /// Spread of the per-prompt router inputs around their group center.
  double input_noise = 0.3;
};

class PlantedEnvironment final : public PolicyEnvironment {
 public:
  /// `needs[g]` lists, per step, the primitive that step requires for prompt
  /// group g. Prompts are split evenly over groups; each group has its own
  /// random input center.
  PlantedEnvironment(const PlantedConfig& config, std::vector<std::vector<std::size_t>> needs, std::uint64_t seed);

  /// One step, one needed primitive: reward flips to 1 only with that primitive.
  static PlantedEnvironment bandit(const PlantedConfig& config, std::size_t target, std::uint64_t seed);
  /// Two steps needing primitives a then b (two groups with different pairs).
  static PlantedEnvironment composition(const PlantedConfig& config, std::uint64_t seed);

  const PrimitiveLibrary& library() const { return library_; }
  std::size_t group(std::size_t prompt) const { return prompt % needs_.size(); }
  const std::vector<std::size_t>& needs(std::size_t prompt) const { return needs_[group(prompt)]; }

  std::size_t num_prompts() const override { return config_.num_prompts; }
  std::size_t hidden_dim() const override { return config_.dim; }
  std::vector<double> router_input(std::size_t prompt) const override { return inputs_.at(prompt); }
  Rollout sample(std::size_t prompt, std::span<const double> injection, double temperature,
                 std::uint64_t seed) const override;
  double reward(std::size_t prompt, const Rollout& rollout) const override;
  std::vector<Tensor> token_log_probs(std::size_t prompt, std::span<const Rollout> rollouts,
                                      std::span<const Tensor> injections, double temperature) const override;
  std::unique_ptr<CandidateScorer> scorer(std::size_t prompt) const override;
  std::pair<Tokens, bool> greedy(std::size_t prompt, std::span<const double> injection) const override;

  /// Margin of each step for an injection.
  std::vector<double> margins(std::size_t prompt, std::span<const double> injection) const;

 private:
  PlantedConfig config_;
  std::vector<std::vector<std::size_t>> needs_;
  PrimitiveLibrary library_;
  std::vector<std::vector<double>> inputs_;
};

}  // namespace primroute
