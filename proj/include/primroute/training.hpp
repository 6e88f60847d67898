#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "primroute/environment.hpp"
#include "primroute/optim.hpp"
#include "primroute/router.hpp"

namespace primroute {

// ---------------------------------------------------------------------------
// Oracle labels and supervised warm-up.
// ---------------------------------------------------------------------------

struct OracleConfig {
  double alpha_step = 0.1;
  /// Primitives kept after single-vector ranking for the joint grid.
  std::size_t subset_size = 2;
  /// Return the zero configuration whenever the unsteered model is already correct.
  bool prefer_null = true;
};

struct OracleLabel {
  std::size_t prompt = 0;
  std::vector<double> w_star;
  std::vector<double> alpha_star;
  /// Gold-sequence log-probability under (w*, alpha*).
  double confidence = 0.0;
  /// Candidate injections scored while searching.
  std::size_t evaluations = 0;
};

/// Grid search for an injection that makes greedy decoding correct.
///
/// With prefer_null, a prompt the unsteered model already solves gets the zero
/// label.
/// Primitives are ranked by their best single-vector result (correct first,
/// then confidence, then index); the top `subset_size` are searched jointly
/// over {0, step, ..., alpha_max}. Among correct configurations the most
/// confident wins, ties going to the smallest L1 strength. Returns nullopt
/// when nothing succeeds. Throws std::invalid_argument when the step does not
/// divide alpha_max, and std::logic_error if a label fails greedy replay.
std::optional<OracleLabel> synthesize_oracle(const PolicyEnvironment& env, std::size_t prompt,
                                             const PrimitiveLibrary& library, double alpha_max,
                                             const OracleConfig& config = {});

struct SftSample {
  std::vector<double> hidden;
  std::vector<double> w_star;
  std::vector<double> alpha_star;
};

struct SftConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

struct SftResult {
  /// Mean training loss per epoch.
  std::vector<double> loss_curve;
};

/// Per-sample loss: mean over primitives of BCE(p, w*) plus mean over
/// primitives of w*_i (alpha_i - alpha*_i)^2.
Tensor sft_loss(const Router& router, std::span<const SftSample> batch);

/// Adam on sft_loss with a seeded shuffle per epoch. On a non-finite loss or
/// gradient the router is restored to the last good parameters and
/// NumericError is thrown.
SftResult sft_train(Router& router, const std::vector<SftSample>& dataset, const SftConfig& config);

// ---------------------------------------------------------------------------
// GRPO.
// ---------------------------------------------------------------------------

/// (r_i - mean) / (population std + eps). Throws std::invalid_argument for fewer
/// than two rewards.
std::vector<double> compute_advantages(std::span<const double> rewards, double eps);

/// Floor applied to routed token probabilities inside the KL estimator.
inline constexpr double kKlProbabilityFloor = 1e-12;

/// Mean over steps of r - log r - 1 with r = pi_base / pi_routed at the sampled
/// tokens, from per-token log-probabilities. `floored`, when given, reports
/// whether any routed probability hit the floor.
double kl_regularizer(std::span<const double> routed_log_probs, std::span<const double> base_log_probs,
                      bool* floored = nullptr);
/// Tape version; gradients flow into routed_log_probs.
Tensor kl_regularizer(const Tensor& routed_log_probs, std::span<const double> base_log_probs,
                      bool* floored = nullptr);
/// KL(p || q) by full summation over a shared support.
double exact_kl(std::span<const double> p, std::span<const double> q);
/// Estimator mean over `samples` tokens drawn from p, with base q.
double monte_carlo_kl(std::span<const double> p, std::span<const double> q, std::size_t samples, std::uint64_t seed);

struct GrpoConfig {
  std::size_t group_size = 8;
  double temperature = 1.5;
  double kl_coef = 0.001;
  double clip_range = 0.2;
  double lr = 3e-3;
  std::size_t epochs = 2;
  std::size_t batch_size = 32;
  double adv_eps = 1e-8;
  /// Gumbel-Sigmoid temperature, annealed linearly over training.
  double gumbel_start = 1.0;
  double gumbel_end = 0.5;
  /// Optional penalty on mean gate probability (0 disables).
  double sparsity_coef = 0.0;
  /// Optimizer steps; 0 means `epochs` passes over the prompt set.
  std::size_t max_steps = 0;

  void validate() const;
};

struct GrpoStepMetrics {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double kl = 0.0;
  /// Fraction of gates at or below tau.
  double gate_sparsity = 0.0;
  double mean_alpha = 0.0;
  double mean_injection_norm = 0.0;
  double loss = 0.0;
  bool skipped = false;
};

/// Rollouts of one prompt with everything needed to rebuild their loss.
struct GroupSample {
  std::size_t prompt = 0;
  /// Logistic noise per rollout, one entry per primitive.
  std::vector<std::vector<double>> noise;
  std::vector<Rollout> rollouts;
  std::vector<double> advantages;
};

/// Negated clipped-surrogate objective minus the KL penalty for one group,
/// recomputed from the router's current parameters. `kl_out` receives the
/// mean KL over rollouts.
Tensor grpo_group_loss(const Router& router, const PolicyEnvironment& env, const PrimitiveLibrary& library,
                       const GroupSample& group, double gumbel_temperature, const GrpoConfig& config,
                       double* kl_out = nullptr);

/// Owns the router's optimizer state across GRPO steps.
class GrpoTrainer {
 public:
  GrpoTrainer(Router& router, const PolicyEnvironment& env, const PrimitiveLibrary& library, GrpoConfig config,
              std::uint64_t seed);

  /// One update on a batch of prompt indices. Batches whose rewards are all
  /// zero are skipped without an update.
  GrpoStepMetrics step(std::span<const std::size_t> prompts, double gumbel_temperature);

  /// Full schedule: `epochs` passes over the prompts in seeded order, batch by
  /// batch, with the Gumbel temperature annealed. Calls on_step after each step.
  std::vector<GrpoStepMetrics> train(const std::function<void(const GrpoStepMetrics&)>& on_step = {});

  /// Steps attempted, skipped ones included.
  std::size_t steps_taken() const { return steps_; }
  std::size_t skipped_steps() const { return skipped_; }

 private:
  Router* router_;
  const PolicyEnvironment* env_;
  const PrimitiveLibrary* library_;
  GrpoConfig config_;
  std::uint64_t seed_;
  Optimizer optimizer_;
  std::size_t steps_ = 0;
  std::size_t skipped_ = 0;
};

}  // namespace primroute
